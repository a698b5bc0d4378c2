"""Smoke test for the `povid` extension module.

Builds the extension with cargo when it is not importable, loads it from a
temporary directory and exercises every binding once:

    python3 python/smoke_test.py
"""

import importlib
import math
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("povid")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "povid-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / ("povid.dll" if sys.platform == "win32" else
                                         "libpovid.dylib" if sys.platform == "darwin" else "libpovid.so")
    dest = Path(tempfile.mkdtemp()) / ("povid" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copy(lib, dest)
    sys.path.insert(0, str(dest.parent))
    return importlib.import_module("povid")


def main():
    povid = load_module()

    corpus = povid.generate_corpus(40, seed=3)
    assert len(corpus) == 40
    assert corpus == povid.generate_corpus(40, seed=3)
    assert corpus != povid.generate_corpus(40, seed=4)
    assert {"id", "prompt", "answer"} <= set(corpus[0])

    pairs = povid.forge_pairs(corpus, seed=3)
    assert [p["id"] for p in pairs] == [r["id"] for r in corpus]
    assert all(p["preferred"] != p["dispreferred_text"] for p in pairs)
    assert {p["rule"] for p in pairs} <= {"cooccurrence", "relation", "attribute", "reasoning"}

    sched = povid.noise_schedule(500)
    ret = sched["retention"]
    assert len(ret) == 500 and all(b < a for a, b in zip(ret, ret[1:]))
    assert all(1e-5 < r < 5.01e-3 for r in sched["rate"])
    assert sched["T"] == 500

    assert abs(povid.dpo_loss(0.1, 0.0, 0.0) - math.log(2)) < 1e-12
    assert abs(povid.dpo_loss(0.1, 1.0, -0.5) - math.log1p(math.exp(-0.15))) < 1e-12

    policy = povid.Policy.init(seed=1, d_model=16, layers=1)
    assert policy.num_parameters > 0
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "p.povd"
        policy.save(str(path))
        again = povid.Policy.load(str(path))
        assert again.num_parameters == policy.num_parameters
        assert again.describe(corpus[0]) == policy.describe(corpus[0])
        try:
            povid.Policy.load(str(Path(tmp) / "missing.povd"))
        except OSError:
            pass
        else:
            raise AssertionError("loading a missing checkpoint succeeded")

    assert povid.reference_caption(corpus[0])
    report = policy.evaluate(scenes=20)
    for key in ("chair_s", "chair_i", "pope_accuracy", "attention_image_mass"):
        assert 0.0 <= report[key] <= 1.0, (key, report[key])

    try:
        povid.generate_corpus(1, prior_name="nonesuch")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown prior accepted")

    print(f"smoke test passed: {len(corpus)} records, {len(pairs)} pairs, "
          f"untrained CHAIR_s {report['chair_s']:.3f}")


if __name__ == "__main__":
    main()
