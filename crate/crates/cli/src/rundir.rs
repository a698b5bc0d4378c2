//! Run directory layout and overwrite rules.
//!
//! ```text
//! <run>/config.json
//! <run>/metrics.jsonl            one line per update, all stages
//! <run>/trigger_probe.json       noise-triggered stage only
//! <run>/checkpoints/{sft,stage1,stage2}-final.povd
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use povid_core::lexicon::{TokenId, Vocabulary};
use povid_core::pipeline::{write_metrics, RunConfig};
use povid_core::trainer::{Stage, StepMetrics, TriggerProbe};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PROBE_FILE: &str = "trigger_probe.json";

/// Usage problems exit with 2, everything else with 1.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Refuses to clobber an existing output unless forced; creates parents.
pub fn prepare_output(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn config_text(cfg: &RunConfig) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    Ok(text)
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config_text(cfg)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn checkpoint_name(stage: Stage) -> &'static str {
        match stage {
            Stage::Sft => "sft-final.povd",
            Stage::Dpo => "stage1-final.povd",
            Stage::Povid => "stage2-final.povd",
        }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(Self::checkpoint_name(stage))
    }

    /// The run directory owning a checkpoint: the parent of `checkpoints/`
    /// when the file sits in one, otherwise the file's own directory.
    pub fn root_of_checkpoint(ckpt: &Path) -> PathBuf {
        let dir = ckpt.parent().unwrap_or(Path::new(""));
        match dir.file_name() {
            Some(n) if n == "checkpoints" => dir.parent().unwrap_or(Path::new("")).to_path_buf(),
            _ => dir.to_path_buf(),
        }
    }

    /// Checks that `stage` may run here and records the configuration.
    ///
    /// Stages share one directory as long as they share a configuration; a
    /// finished stage or a different configuration needs `force`.
    pub fn begin(&self, cfg: &RunConfig, stage: Stage, force: bool) -> Result<(), Failure> {
        fs::create_dir_all(self.root.join("checkpoints"))
            .with_context(|| format!("creating {}", self.root.display()))?;
        let cfg_path = self.root.join(CONFIG_FILE);
        if cfg_path.is_file() && !force {
            let text = fs::read_to_string(&cfg_path)?;
            let same = serde_json::from_str::<RunConfig>(&text).is_ok_and(|old| &old == cfg);
            if !same {
                return Err(Failure::Usage(format!(
                    "{} holds a different configuration; pass --force to overwrite",
                    cfg_path.display()
                )));
            }
        }
        let ckpt = self.checkpoint(stage);
        if ckpt.exists() && !force {
            return Err(Failure::Usage(format!(
                "{} is already complete ({}); pass --force to retrain",
                stage.name(),
                ckpt.display()
            )));
        }
        write_config(&self.root, cfg)
    }

    /// Replaces any earlier lines of `stage` and appends the new ones.
    pub fn append_metrics(&self, stage: Stage, metrics: &[StepMetrics]) -> Result<(), Failure> {
        let path = self.root.join(METRICS_FILE);
        if path.is_file() {
            let kept: Vec<String> = fs::read_to_string(&path)?
                .lines()
                .filter(|l| {
                    serde_json::from_str::<StepMetrics>(l).map_or(true, |m| m.stage != stage)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&path, kept.concat())?;
        }
        write_metrics(&path, metrics, true)?;
        Ok(())
    }

    pub fn write_probe(&self, probe: &TriggerProbe) -> Result<(), Failure> {
        write_probe(&self.root, probe)
    }
}

/// Writes `trigger_probe.json` with the probe continuations as text.
pub fn write_probe(dir: &Path, probe: &TriggerProbe) -> Result<(), Failure> {
    let vocab = Vocabulary::standard();
    let text = |seqs: &[Vec<TokenId>]| -> Vec<String> {
        seqs.iter()
            .map(|s| vocab.detokenize(s).unwrap_or_else(|_| format!("{s:?}")))
            .collect()
    };
    let value = serde_json::json!({
        "indices": probe.indices,
        "changed": probe.changed(),
        "initial": text(&probe.initial),
        "last": text(&probe.last),
    });
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(PROBE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
