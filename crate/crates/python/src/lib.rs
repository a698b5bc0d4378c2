//! Python bindings: corpus generation, pair forging, the noise schedule and
//! checkpoint evaluation. Seeds are root seeds, derived the same way the
//! `povid` binary derives them, so results match its files.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

use povid_core::checkpoint::{load_checkpoint, save_checkpoint};
use povid_core::dispref::{forge_pairs as forge, write_pairs, AnnotatorConfig};
use povid_core::evalsuite::{evaluate, ALL_SUITES};
use povid_core::lexicon::Vocabulary;
use povid_core::noiser::NoiseSchedule;
use povid_core::objective::dpo_loss_from_ratios;
use povid_core::pipeline::RunConfig;
use povid_core::policy::{PolicyConfig, PolicyParams};
use povid_core::scenegen::{caption_text, generate_corpus as corpus, render_features, write_corpus, CorpusRecord, CooccurrencePrior, CAPTION_PROMPT};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn json_lines<'py>(py: Python<'py>, buf: &[u8]) -> PyResult<Bound<'py, PyList>> {
    let text = std::str::from_utf8(buf).map_err(value_err)?;
    let out = PyList::empty(py);
    for line in text.lines() {
        out.append(loads(py, line)?)?;
    }
    Ok(out)
}

fn prior(name: &str) -> PyResult<CooccurrencePrior> {
    CooccurrencePrior::preset(name).ok_or_else(|| PyValueError::new_err(format!("unknown prior preset {name:?}")))
}

/// Corpus records as dicts (the lines `povid gen-corpus` writes).
#[pyfunction]
#[pyo3(signature = (scenes, seed = 0, prior_name = "standard"))]
fn generate_corpus<'py>(py: Python<'py>, scenes: usize, seed: u64, prior_name: &str) -> PyResult<Bound<'py, PyList>> {
    let records = corpus(&prior(prior_name)?, scenes, RunConfig::with_seed(seed).corpus_seed());
    let mut buf = Vec::new();
    write_corpus(&mut buf, &records).map_err(value_err)?;
    json_lines(py, &buf)
}

/// One oracle preference pair per corpus record.
#[pyfunction]
#[pyo3(signature = (records, seed = 0, prior_name = "standard"))]
fn forge_pairs<'py>(py: Python<'py>, records: &Bound<'py, PyList>, seed: u64, prior_name: &str) -> PyResult<Bound<'py, PyList>> {
    let dumps = py.import("json")?.getattr("dumps")?;
    let parsed = records
        .iter()
        .map(|r| {
            let text: String = dumps.call1((r,))?.extract()?;
            serde_json::from_str::<CorpusRecord>(&text).map_err(value_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let vocab = Vocabulary::standard();
    let outcome = forge(vocab, &parsed, &prior(prior_name)?, &AnnotatorConfig::default(), RunConfig::with_seed(seed).forge_seed())
        .map_err(value_err)?;
    let mut buf = Vec::new();
    write_pairs(vocab, &mut buf, &outcome.pairs).map_err(value_err)?;
    json_lines(py, &buf)
}

/// Per-step noise rates and cumulative retention.
#[pyfunction]
#[pyo3(signature = (steps = 500))]
fn noise_schedule(py: Python<'_>, steps: usize) -> PyResult<Bound<'_, PyAny>> {
    let s = NoiseSchedule::new(steps).map_err(value_err)?;
    loads(py, &s.to_json())
}

/// Pairwise preference loss from policy/reference log-ratios.
#[pyfunction]
fn dpo_loss(alpha: f64, delta_w: f64, delta_l: f64) -> f64 {
    dpo_loss_from_ratios(alpha, delta_w, delta_l)
}

/// A policy checkpoint held in memory.
#[pyclass(name = "Policy")]
struct PyPolicy {
    params: PolicyParams<f32>,
}

#[pymethods]
impl PyPolicy {
    /// Fresh initialization; `d_model`/`layers` other than the defaults use
    /// the reduced head and feed-forward sizes.
    #[staticmethod]
    #[pyo3(signature = (seed, d_model = None, layers = None))]
    fn init(seed: u64, d_model: Option<usize>, layers: Option<usize>) -> PyResult<Self> {
        let config = match (d_model, layers) {
            (None, None) => PolicyConfig::default(),
            (d, l) => {
                let def = PolicyConfig::default();
                PolicyConfig::tiny(d.unwrap_or(def.d_model), l.unwrap_or(def.layers))
            }
        };
        Ok(Self {
            params: PolicyParams::init(config, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Greedy caption of a corpus record's scene.
    fn describe(&self, py: Python<'_>, record: &Bound<'_, PyAny>) -> PyResult<String> {
        let text: String = py.import("json")?.call_method1("dumps", (record,))?.extract()?;
        let rec: CorpusRecord = serde_json::from_str(&text).map_err(value_err)?;
        let vocab = Vocabulary::standard();
        let prompt = vocab.tokenize(CAPTION_PROMPT).map_err(value_err)?;
        let tokens = self
            .params
            .generate(&render_features(&rec.scene()), &prompt, self.params.config.max_len)
            .map_err(value_err)?;
        vocab.detokenize(&tokens).map_err(value_err)
    }

    /// CHAIR, adversarial POPE and image attention mass on fresh scenes;
    /// the report dict `povid eval` writes.
    #[pyo3(signature = (scenes = 1000, seed = 0, seeds = 1, prior_name = "standard"))]
    fn evaluate<'py>(&self, py: Python<'py>, scenes: usize, seed: u64, seeds: usize, prior_name: &str) -> PyResult<Bound<'py, PyAny>> {
        let eval_seed = RunConfig::with_seed(seed).eval_seed();
        let report = evaluate(&self.params, "<python>", &prior(prior_name)?, scenes, eval_seed, seeds, &ALL_SUITES).map_err(value_err)?;
        loads(py, &serde_json::to_string(&report).map_err(value_err)?)
    }
}

/// Reference caption of a corpus record, as the supervised data spells it.
#[pyfunction]
fn reference_caption(py: Python<'_>, record: &Bound<'_, PyAny>) -> PyResult<String> {
    let text: String = py.import("json")?.call_method1("dumps", (record,))?.extract()?;
    let rec: CorpusRecord = serde_json::from_str(&text).map_err(value_err)?;
    Ok(caption_text(&rec.scene()))
}

#[pymodule]
fn povid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(forge_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(noise_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reference_caption, m)?)?;
    m.add_class::<PyPolicy>()?;
    Ok(())
}
