//! End-to-end runs: corpus → preference pairs → supervised base → preference
//! stages → evaluation, plus the 2×2 dispreference ablation.
//!
//! Every seed in a run is derived from one root seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dispref::{forge_pairs, AnnotatorConfig, ForgeOutcome};
use crate::error::TrainError;
use crate::evalsuite::{evaluate, CompareReport, EvalReport, SeedRun, Suite, VariantRow, ALL_SUITES};
use crate::lexicon::Vocabulary;
use crate::noiser::NoiseSchedule;
use crate::objective::PreferenceExample;
use crate::policy::{PolicyConfig, PolicyParams};
use crate::rng::mix;
use crate::scenegen::{generate_corpus, CooccurrencePrior, CorpusRecord};
use crate::trainer::{
    preference_examples, sft_examples, sft_train, stage1_dpo, stage2_povid, SftExample, Stage, StepMetrics,
    TrainOutcome, TrainingConfig, TriggerProbe,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scenes: usize,
    /// Named prior preset (`standard` or `independent`).
    pub prior: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            prior: "standard".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seeds: usize,
    pub suites: Vec<Suite>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 1000,
            seeds: 1,
            suites: ALL_SUITES.to_vec(),
        }
    }
}

/// Everything a run depends on. Serialized verbatim into each run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub annotator: AnnotatorConfig,
    pub policy: PolicyConfig,
    pub sft: TrainingConfig,
    pub dpo: TrainingConfig,
    pub povid: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

/// Offsets mixed into the root seed for each consumer.
mod seed_slot {
    pub const CORPUS: u64 = 1;
    pub const FORGE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SFT: u64 = 4;
    pub const DPO: u64 = 5;
    pub const POVID: u64 = 6;
    pub const EVAL: u64 = 7;
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            corpus: CorpusConfig::default(),
            annotator: AnnotatorConfig::default(),
            policy: PolicyConfig::default(),
            sft: TrainingConfig::for_stage(Stage::Sft),
            dpo: TrainingConfig::for_stage(Stage::Dpo),
            povid: TrainingConfig::for_stage(Stage::Povid),
            eval: EvalConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }

    /// Sets every stage seed from the root seed.
    pub fn derive_seeds(&mut self) {
        self.sft.seed = mix(self.seed, seed_slot::SFT);
        self.dpo.seed = mix(self.seed, seed_slot::DPO);
        self.povid.seed = mix(self.seed, seed_slot::POVID);
    }

    pub fn corpus_seed(&self) -> u64 {
        mix(self.seed, seed_slot::CORPUS)
    }

    pub fn forge_seed(&self) -> u64 {
        mix(self.seed, seed_slot::FORGE)
    }

    pub fn init_seed(&self) -> u64 {
        mix(self.seed, seed_slot::INIT)
    }

    pub fn eval_seed(&self) -> u64 {
        mix(self.seed, seed_slot::EVAL)
    }

    pub fn prior(&self) -> Result<CooccurrencePrior, TrainError> {
        CooccurrencePrior::preset(&self.corpus.prior)
            .ok_or_else(|| TrainError::Config(format!("unknown prior preset `{}`", self.corpus.prior)))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.policy.validate()?;
        self.prior()?;
        for (stage, cfg) in [(Stage::Sft, &self.sft), (Stage::Dpo, &self.dpo), (Stage::Povid, &self.povid)] {
            if cfg.stage != stage {
                return Err(TrainError::Config(format!("`{}` section has stage `{}`", stage.name(), cfg.stage.name())));
            }
            cfg.validate()?;
        }
        self.annotator.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Corpus, forged pairs and their training views.
pub struct Prepared {
    pub corpus: Vec<CorpusRecord>,
    pub forge: ForgeOutcome,
    pub sft: Vec<SftExample>,
    pub pairs: Vec<PreferenceExample>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, TrainError> {
    let vocab = Vocabulary::standard();
    let prior = cfg.prior()?;
    let corpus = generate_corpus(&prior, cfg.corpus.scenes, cfg.corpus_seed());
    let forge = forge_pairs(vocab, &corpus, &prior, &cfg.annotator, cfg.forge_seed())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let sft = sft_examples(vocab, &corpus).map_err(|e| TrainError::Config(e.to_string()))?;
    let pairs = preference_examples(&forge.pairs);
    Ok(Prepared {
        corpus,
        forge,
        sft,
        pairs,
    })
}

fn narrow(o: TrainOutcome<f64>) -> TrainOutcome<f32> {
    TrainOutcome {
        params: o.params.cast(),
        metrics: o.metrics,
        probe: o.probe,
    }
}

// Gradient-check mode trains in 64-bit and narrows the result.

pub fn run_sft(cfg: &RunConfig, data: &[SftExample]) -> Result<TrainOutcome<f32>, TrainError> {
    let init = PolicyParams::<f32>::init(cfg.policy, cfg.init_seed())?;
    if cfg.sft.grad_check {
        Ok(narrow(sft_train(init.cast::<f64>(), data, &cfg.sft)?))
    } else {
        sft_train(init, data, &cfg.sft)
    }
}

pub fn run_dpo(
    cfg: &TrainingConfig,
    params: PolicyParams<f32>,
    reference: &PolicyParams<f32>,
    pairs: &[PreferenceExample],
) -> Result<TrainOutcome<f32>, TrainError> {
    if cfg.grad_check {
        Ok(narrow(stage1_dpo(params.cast(), &reference.cast(), pairs, cfg)?))
    } else {
        stage1_dpo(params, reference, pairs, cfg)
    }
}

pub fn run_povid(
    cfg: &TrainingConfig,
    params: PolicyParams<f32>,
    reference: &PolicyParams<f32>,
    pairs: &[PreferenceExample],
) -> Result<TrainOutcome<f32>, TrainError> {
    let schedule = NoiseSchedule::new(cfg.noise_steps)?;
    if cfg.grad_check {
        Ok(narrow(stage2_povid(params.cast(), &reference.cast(), pairs, &schedule, cfg)?))
    } else {
        stage2_povid(params, reference, pairs, &schedule, cfg)
    }
}

pub fn eval_checkpoint(cfg: &RunConfig, params: &PolicyParams<f32>, name: &str) -> Result<EvalReport, TrainError> {
    let prior = cfg.prior()?;
    Ok(evaluate(
        params,
        name,
        &prior,
        cfg.eval.scenes,
        cfg.eval_seed(),
        cfg.eval.seeds,
        &cfg.eval.suites,
    )?)
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics], append: bool) -> Result<(), TrainError> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    let mut out = BufWriter::new(file);
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// One-line summary of a stage's loss and margin over its first and last
/// tenth of updates.
pub fn summarize(metrics: &[StepMetrics]) -> String {
    let Some(first) = metrics.first() else {
        return "no updates".into();
    };
    let w = (metrics.len() / 10).max(1);
    let mean = |s: &[StepMetrics], f: fn(&StepMetrics) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
    let (head, tail) = (&metrics[..w], &metrics[metrics.len() - w..]);
    format!(
        "{} steps {}: loss {:.4} -> {:.4}, margin {:.4} -> {:.4}",
        first.stage.name(),
        metrics.len(),
        mean(head, |m| m.loss),
        mean(tail, |m| m.loss),
        mean(head, |m| m.margin),
        mean(tail, |m| m.margin)
    )
}

/// Ablation variants: which dispreference sources are used.
pub const VARIANTS: [&str; 4] = ["none", "text", "image", "both"];

/// The four variants trained from one root seed.
pub struct AblationRun {
    pub seed: u64,
    pub reports: Vec<(String, EvalReport)>,
    /// Trigger probe of the full noise-triggered stage (`both`).
    pub probe: Option<TriggerProbe>,
}

/// Trains and evaluates the requested variants for one root seed:
/// `none` is the supervised base, `text` adds textual-dispreference DPO,
/// `image` runs only the noise-triggered stage (textual weight zero) from
/// the base, and `both` runs DPO followed by the full stage.
pub fn ablate_seed(cfg: &RunConfig, variants: &[&str], log: &mut dyn FnMut(&str)) -> Result<AblationRun, TrainError> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    log(&format!("seed {}: corpus {} records, {} pairs", cfg.seed, prep.corpus.len(), prep.pairs.len()));
    let sft = run_sft(cfg, &prep.sft)?;
    log(&summarize(&sft.metrics));
    let base = sft.params;
    let mut reports = Vec::new();
    let mut probe = None;
    let mut eval = |name: &str, p: &PolicyParams<f32>, log: &mut dyn FnMut(&str)| -> Result<(), TrainError> {
        let r = eval_checkpoint(cfg, p, name)?;
        log(&format!(
            "seed {} {name}: chair_s {:.3} chair_i {:.3} pope {:.3} attention {:.4}",
            cfg.seed, r.chair_s, r.chair_i, r.pope_accuracy, r.attention_image_mass
        ));
        reports.push((name.to_string(), r));
        Ok(())
    };
    if variants.contains(&"none") {
        eval("none", &base, log)?;
    }
    if variants.contains(&"image") {
        let mut c = cfg.povid.clone();
        c.coefficients.beta_text = 0.0;
        let out = run_povid(&c, base.clone(), &base, &prep.pairs)?;
        log(&summarize(&out.metrics));
        eval("image", &out.params, log)?;
    }
    if variants.contains(&"text") || variants.contains(&"both") {
        let stage1 = run_dpo(&cfg.dpo, base.clone(), &base, &prep.pairs)?;
        log(&summarize(&stage1.metrics));
        let stage1 = stage1.params;
        if variants.contains(&"text") {
            eval("text", &stage1, log)?;
        }
        if variants.contains(&"both") {
            let out = run_povid(&cfg.povid, stage1, &base, &prep.pairs)?;
            log(&summarize(&out.metrics));
            if let Some(p) = &out.probe {
                log(&format!("triggered dispreferences changed for {}/{} probe pairs", p.changed(), p.indices.len()));
            }
            probe = out.probe;
            eval("both", &out.params, log)?;
        }
    }
    // report rows in canonical order regardless of training order
    reports.sort_by_key(|(name, _)| VARIANTS.iter().position(|v| v == name));
    Ok(AblationRun {
        seed: cfg.seed,
        reports,
        probe,
    })
}

pub fn compare(runs: &[AblationRun]) -> CompareReport {
    let mut names: Vec<&str> = Vec::new();
    for run in runs {
        for (name, _) in &run.reports {
            if !names.contains(&name.as_str()) {
                names.push(name);
            }
        }
    }
    let variants = names
        .into_iter()
        .map(|name| {
            let seeds = runs
                .iter()
                .filter_map(|run| {
                    run.reports.iter().find(|(n, _)| n == name).map(|(_, r)| SeedRun {
                        seed: run.seed,
                        report: r.clone(),
                    })
                })
                .collect();
            VariantRow::from_runs(name, seeds)
        })
        .collect();
    CompareReport {
        schema_version: crate::evalsuite::SCHEMA_VERSION,
        variants,
    }
}
