//! Hallucination metrics on held-out synthetic scenes: caption object
//! hallucination rates, adversarial yes/no existence probing and the
//! image attention mass.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, PolicyError};
use crate::lexicon::{extract_objects, ObjectKind, TokenId, Vocabulary, EOS};
use crate::policy::PolicyParams;
use crate::rng::mix;
use crate::scenegen::{caption, existence_question, render_features, sample_scene, CooccurrencePrior, Scene, CAPTION_PROMPT};
use crate::tensor::Scalar;

pub const SCHEMA_VERSION: u32 = 1;
/// Longest caption a policy may produce during evaluation.
pub const MAX_CAPTION_TOKENS: usize = 48;

/// Anything that can answer a prompt about a scene.
pub trait Responder: Sync {
    fn respond(&self, scene: &Scene, prompt: &[TokenId], max_tokens: usize) -> Result<Vec<TokenId>, PolicyError>;
}

impl<T: Scalar> Responder for PolicyParams<T> {
    fn respond(&self, scene: &Scene, prompt: &[TokenId], max_tokens: usize) -> Result<Vec<TokenId>, PolicyError> {
        self.generate(&render_features(scene), prompt, max_tokens)
    }
}

/// Ground-truth answers for captions and existence probes.
pub struct OracleResponder;

impl Responder for OracleResponder {
    fn respond(&self, scene: &Scene, prompt: &[TokenId], _max: usize) -> Result<Vec<TokenId>, PolicyError> {
        let v = Vocabulary::standard();
        let kind = prompt.iter().find_map(|&t| v.object_kind(t));
        Ok(match kind {
            Some(k) => vec![v.expect_id(if scene.contains(k) { "yes" } else { "no" })],
            None => caption(scene, v),
        })
    }
}

/// Held-out scenes for one evaluation seed. Seeds are mixed so they never
/// coincide with corpus seeds.
pub fn eval_scenes(prior: &CooccurrencePrior, n: usize, eval_seed: u64) -> Vec<Scene> {
    (0..n as u64)
        .map(|i| sample_scene(prior, mix(eval_seed ^ 0xE7A1_5EED, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChairResult {
    pub chair_s: f64,
    pub chair_i: f64,
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
}

/// Hallucination rates of captions against their scenes.
pub fn chair_from_captions(scenes: &[Scene], captions: &[Vec<TokenId>]) -> ChairResult {
    let v = Vocabulary::standard();
    let mut r = ChairResult {
        captions: captions.len(),
        ..Default::default()
    };
    for (scene, cap) in scenes.iter().zip(captions) {
        let mentioned = extract_objects(v, cap);
        let bad = mentioned.iter().filter(|&&k| !scene.contains(k)).count();
        r.mentions += mentioned.len();
        r.hallucinated_mentions += bad;
        r.hallucinated_captions += usize::from(bad > 0);
    }
    r.chair_s = ratio(r.hallucinated_captions, r.captions);
    r.chair_i = ratio(r.hallucinated_mentions, r.mentions);
    r
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn generate_captions(model: &dyn Responder, scenes: &[Scene]) -> Result<Vec<Vec<TokenId>>, PolicyError> {
    let prompt = Vocabulary::standard().tokenize(CAPTION_PROMPT).expect("caption prompt");
    scenes
        .par_iter()
        .map(|s| model.respond(s, &prompt, MAX_CAPTION_TOKENS))
        .collect()
}

/// Greedy captions scored for object hallucination.
pub fn chair(model: &dyn Responder, scenes: &[Scene]) -> Result<ChairResult, PolicyError> {
    Ok(chair_from_captions(scenes, &generate_captions(model, scenes)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub kind: ObjectKind,
    pub present: bool,
}

/// One present probe (first kind in raster order) and one adversarial
/// absent probe: the absent kind most boosted by the present ones, falling
/// back to the highest base rate. Ties go to the lowest kind id. Empty
/// scenes get no probes.
pub fn pope_probes(scene: &Scene, prior: &CooccurrencePrior) -> Vec<Probe> {
    let Some(first) = scene.instances.first() else {
        return Vec::new();
    };
    let present = scene.kinds();
    let absent: Vec<ObjectKind> = ObjectKind::all().filter(|k| !scene.contains(*k)).collect();
    let pick = |score: &dyn Fn(ObjectKind) -> f64| {
        absent
            .iter()
            .copied()
            .fold(None::<(ObjectKind, f64)>, |best, k| match best {
                Some((_, s)) if s >= score(k) => best,
                _ => Some((k, score(k))),
            })
    };
    let boosted = pick(&|k| prior.max_boost_from(&present, k)).filter(|&(_, s)| s > 0.0);
    let adversarial = boosted.or_else(|| pick(&|k| prior.base[k.index()]));
    let mut probes = vec![Probe {
        kind: first.kind,
        present: true,
    }];
    if let Some((kind, _)) = adversarial {
        probes.push(Probe { kind, present: false });
    }
    probes
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PopeResult {
    pub accuracy: f64,
    pub probes: usize,
    pub correct: usize,
    pub present_correct: usize,
    pub absent_correct: usize,
}

/// Yes/no existence probing; only the first generated token counts.
pub fn pope(model: &dyn Responder, scenes: &[Scene], prior: &CooccurrencePrior) -> Result<PopeResult, PolicyError> {
    let v = Vocabulary::standard();
    let (yes, no) = (v.expect_id("yes"), v.expect_id("no"));
    let outcomes: Vec<Vec<(bool, bool)>> = scenes
        .par_iter()
        .map(|s| {
            pope_probes(s, prior)
                .into_iter()
                .map(|p| {
                    let q = v.tokenize(&existence_question(p.kind)).expect("probe template");
                    let first = model.respond(s, &q, 1)?.first().copied();
                    let want = if p.present { yes } else { no };
                    Ok((p.present, first == Some(want)))
                })
                .collect()
        })
        .collect::<Result<_, PolicyError>>()?;
    let mut r = PopeResult::default();
    for (present, ok) in outcomes.into_iter().flatten() {
        r.probes += 1;
        if ok {
            r.correct += 1;
            if present {
                r.present_correct += 1;
            } else {
                r.absent_correct += 1;
            }
        }
    }
    r.accuracy = ratio(r.correct, r.probes);
    Ok(r)
}

/// Mean image attention mass while reading the ground-truth caption of
/// each scene.
pub fn attention_report<T: Scalar>(policy: &PolicyParams<T>, scenes: &[Scene]) -> Result<f64, PolicyError> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let v = Vocabulary::standard();
    let prompt = v.tokenize(CAPTION_PROMPT).expect("caption prompt");
    let masses: Vec<f64> = scenes
        .par_iter()
        .map(|s| {
            let mut resp = caption(s, v);
            resp.push(EOS);
            policy.attention_image_mass(&render_features(s), &prompt, &resp)
        })
        .collect::<Result<_, _>>()?;
    Ok(masses.iter().sum::<f64>() / masses.len() as f64)
}

/// Metrics for one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub eval_seed: u64,
    pub scenes: usize,
    pub chair: ChairResult,
    pub pope: PopeResult,
    pub attention_image_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint: String,
    pub chair_s: f64,
    pub chair_i: f64,
    pub pope_accuracy: f64,
    pub attention_image_mass: f64,
    pub per_seed: Vec<SeedReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Chair,
    Pope,
    Attention,
}

pub const ALL_SUITES: [Suite; 3] = [Suite::Chair, Suite::Pope, Suite::Attention];

pub fn evaluate_seed<T: Scalar>(
    policy: &PolicyParams<T>,
    prior: &CooccurrencePrior,
    scenes: usize,
    eval_seed: u64,
    suites: &[Suite],
) -> Result<SeedReport, PolicyError> {
    let set = eval_scenes(prior, scenes, eval_seed);
    Ok(SeedReport {
        eval_seed,
        scenes,
        chair: if suites.contains(&Suite::Chair) { chair(policy, &set)? } else { ChairResult::default() },
        pope: if suites.contains(&Suite::Pope) { pope(policy, &set, prior)? } else { PopeResult::default() },
        attention_image_mass: if suites.contains(&Suite::Attention) { attention_report(policy, &set)? } else { 0.0 },
    })
}

/// Evaluates over `seeds` consecutive evaluation seeds starting at
/// `eval_seed`; headline numbers are means over seeds.
pub fn evaluate<T: Scalar>(
    policy: &PolicyParams<T>,
    checkpoint: &str,
    prior: &CooccurrencePrior,
    scenes: usize,
    eval_seed: u64,
    seeds: usize,
    suites: &[Suite],
) -> Result<EvalReport, PolicyError> {
    let per_seed = (0..seeds as u64)
        .map(|i| evaluate_seed(policy, prior, scenes, eval_seed.wrapping_add(i), suites))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = |f: &dyn Fn(&SeedReport) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len().max(1) as f64;
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        checkpoint: checkpoint.to_string(),
        chair_s: mean(&|r| r.chair.chair_s),
        chair_i: mean(&|r| r.chair.chair_i),
        pope_accuracy: mean(&|r| r.pope.accuracy),
        attention_image_mass: mean(&|r| r.attention_image_mass),
        per_seed,
    })
}

fn check_rate(name: &str, value: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(EvalError::RateOutOfRange {
            name: name.to_string(),
            value,
        })
    }
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        check_rate("chair_s", self.chair_s)?;
        check_rate("chair_i", self.chair_i)?;
        check_rate("pope_accuracy", self.pope_accuracy)?;
        check_rate("attention_image_mass", self.attention_image_mass)?;
        for s in &self.per_seed {
            check_rate("chair_s", s.chair.chair_s)?;
            check_rate("chair_i", s.chair.chair_i)?;
            check_rate("pope_accuracy", s.pope.accuracy)?;
            check_rate("attention_image_mass", s.attention_image_mass)?;
        }
        Ok(())
    }
}

/// One row of the ablation table: a variant trained under several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub chair_s: f64,
    pub chair_i: f64,
    pub pope_accuracy: f64,
    pub attention_image_mass: f64,
    /// `(training seed, report)` per run.
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub variants: Vec<VariantRow>,
}

impl VariantRow {
    pub fn from_runs(variant: &str, runs: Vec<SeedRun>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        Self {
            variant: variant.to_string(),
            chair_s: mean(&|r| r.chair_s),
            chair_i: mean(&|r| r.chair_i),
            pope_accuracy: mean(&|r| r.pope_accuracy),
            attention_image_mass: mean(&|r| r.attention_image_mass),
            runs,
        }
    }
}

impl CompareReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        for row in &self.variants {
            check_rate("chair_s", row.chair_s)?;
            check_rate("chair_i", row.chair_i)?;
            check_rate("pope_accuracy", row.pope_accuracy)?;
            check_rate("attention_image_mass", row.attention_image_mass)?;
            for run in &row.runs {
                run.report.validate()?;
            }
        }
        Ok(())
    }

    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.variants.iter().find(|r| r.variant == variant)
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `report.json`; rates are validated first.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    report.validate()?;
    write_json(report, path)
}

pub fn emit_compare(report: &CompareReport, path: &Path) -> Result<(), EvalError> {
    report.validate()?;
    write_json(report, path)
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
