//! Staged training: supervised fine-tuning to obtain the reference policy,
//! then preference stages on textual and noise-triggered dispreferences.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispref::PreferencePair;
use crate::error::{ObjectiveError, TrainError};
use crate::lexicon::{TokenId, Vocabulary, EOS};
use crate::noiser::{NoiseSchedule, DEFAULT_STEPS};
use crate::objective::{preference_loss, reference_logps, Coefficients, PreferenceExample};
use crate::policy::PolicyParams;
use crate::rng::{mix, purpose, stream};
use crate::scenegen::{render_features, CorpusRecord, ImageFeatures};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Dpo,
    Povid,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Povid => "povid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub coefficients: Coefficients,
    /// Length of the noise schedule.
    pub noise_steps: usize,
    /// Step at which images are noised for triggering.
    pub noise_step: usize,
    pub seed: u64,
    /// Verify a sample of gradient coordinates against central differences
    /// (64-bit) before every update.
    #[serde(default)]
    pub grad_check: bool,
    /// Recompute every triggered dispreference token by token under the
    /// current weights and fail on any mismatch.
    #[serde(default)]
    pub shadow_check: bool,
    /// Stop after this many updates (debugging aid).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainingConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, lr, optimizer) = match stage {
            Stage::Sft => (6, 1e-3, Optimizer::Adam),
            Stage::Dpo => (3, 1e-3, Optimizer::Sgd),
            Stage::Povid => (1, 1e-3, Optimizer::Sgd),
        };
        Self {
            stage,
            epochs,
            batch_size: 8,
            learning_rate: lr,
            optimizer,
            coefficients: Coefficients::default(),
            noise_steps: DEFAULT_STEPS,
            noise_step: DEFAULT_STEPS - 1,
            seed: 0,
            grad_check: false,
            shadow_check: false,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.noise_step >= self.noise_steps {
            return bad("noise_step must be below noise_steps");
        }
        self.coefficients.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub margin: f64,
    pub attention_mass: f64,
}

/// Triggered dispreferences for a fixed probe set, before the first and
/// after the last update of a noise-triggered stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerProbe {
    pub indices: Vec<usize>,
    pub initial: Vec<Vec<TokenId>>,
    pub last: Vec<Vec<TokenId>>,
}

impl TriggerProbe {
    pub fn changed(&self) -> usize {
        self.initial.iter().zip(&self.last).filter(|(a, b)| a != b).count()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: PolicyParams<T>,
    pub metrics: Vec<StepMetrics>,
    pub probe: Option<TriggerProbe>,
}

/// One supervised example; `response` ends with EOS.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub image: ImageFeatures,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

pub fn sft_examples(vocab: &Vocabulary, records: &[CorpusRecord]) -> Result<Vec<SftExample>, crate::error::LexiconError> {
    records
        .iter()
        .map(|r| {
            let mut response = vocab.tokenize(&r.answer)?;
            response.push(EOS);
            Ok(SftExample {
                image: render_features(&r.scene()),
                prompt: vocab.tokenize(&r.prompt)?,
                response,
            })
        })
        .collect()
}

pub fn preference_examples(pairs: &[PreferencePair]) -> Vec<PreferenceExample> {
    pairs
        .iter()
        .map(|p| PreferenceExample::new(p.image.clone(), p.prompt.clone(), p.preferred_response(), p.dispreferred_response()))
        .collect()
}

enum OptState<T> {
    Sgd,
    Adam { m: Vec<T>, v: Vec<T>, t: i32 },
}

impl<T: Scalar> OptState<T> {
    fn new(kind: Optimizer, n: usize) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        match self {
            OptState::Sgd => {
                let lr = T::of(lr);
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                *t += 1;
                let step = T::of(lr * (1.0 - f64::powi(b2, *t)).sqrt() / (1.0 - f64::powi(b1, *t)));
                let (b1t, b2t) = (T::of(b1), T::of(b2));
                let (c1, c2) = (T::one() - b1t, T::one() - b2t);
                let eps = T::of(eps);
                for (((p, &g), mi), vi) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1t * *mi + c1 * g;
                    *vi = b2t * *vi + c2 * g * g;
                    *p -= step * *mi / (vi.sqrt() + eps);
                }
            }
        }
    }
}

/// Shuffled visiting order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(mix(seed, epoch as u64), purpose::SHUFFLE));
    order
}

fn total_steps(n: usize, cfg: &TrainingConfig) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

const GRAD_CHECK_COORDS: usize = 8;
const GRAD_CHECK_H: f64 = 1e-5;
const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compares `grad` with central differences of `loss` at a few seeded
/// coordinates, all in 64-bit.
fn check_gradient<T: Scalar>(
    params: &PolicyParams<T>,
    grad: &[T],
    step: usize,
    seed: u64,
    loss: impl Fn(&PolicyParams<f64>) -> Result<f64, TrainError>,
) -> Result<(), TrainError> {
    let base = params.cast::<f64>();
    let mut rng = stream(mix(seed, step as u64), purpose::INIT);
    for _ in 0..GRAD_CHECK_COORDS {
        let i = rng.random_range(0..base.len());
        let mut plus = base.clone();
        plus.data[i] += GRAD_CHECK_H;
        let mut minus = base.clone();
        minus.data[i] -= GRAD_CHECK_H;
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * GRAD_CHECK_H);
        let analytic = grad[i].as_f64();
        let scale = numeric.abs().max(analytic.abs()).max(1e-8);
        if (numeric - analytic).abs() / scale > GRAD_CHECK_TOL {
            return Err(TrainError::GradientCheck {
                step,
                index: i,
                analytic,
                numeric,
            });
        }
    }
    Ok(())
}

struct SftBatch<T> {
    loss: f64,
    attention: f64,
    grad: Vec<T>,
}

fn sft_batch<T: Scalar>(params: &PolicyParams<T>, batch: &[&SftExample], with_grad: bool) -> Result<SftBatch<T>, TrainError> {
    let tokens: usize = batch.iter().map(|e| e.response.len()).sum();
    let w = -1.0 / tokens as f64;
    let parts: Vec<(f64, f64, Vec<T>)> = batch
        .par_iter()
        .map(|e| {
            if with_grad {
                let mut g = params.zeros_like();
                let (lp, attn) = params.logprob_backward(&e.image, &e.prompt, &e.response, T::of(w), &mut g)?;
                Ok((w * lp.as_f64(), attn, g))
            } else {
                let lp = params.sequence_logprob(&e.image, &e.prompt, &e.response)?;
                Ok((w * lp.as_f64(), 0.0, Vec::new()))
            }
        })
        .collect::<Result<_, crate::error::PolicyError>>()?;
    let mut grad = if with_grad { params.zeros_like() } else { Vec::new() };
    let (mut loss, mut attention) = (0.0, 0.0);
    for (l, attn, g) in parts {
        loss += l;
        attention += attn;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(SftBatch {
        loss,
        attention: attention / batch.len() as f64,
        grad,
    })
}

/// Mean next-token cross-entropy per response token.
pub fn cross_entropy<T: Scalar>(params: &PolicyParams<T>, data: &[SftExample]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&SftExample> = data.iter().collect();
    Ok(sft_batch(params, &refs, false)?.loss)
}

/// Supervised fine-tuning on next-token cross-entropy.
pub fn sft_train<T: Scalar>(params: PolicyParams<T>, data: &[SftExample], cfg: &TrainingConfig) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let mut params = params;
    let mut opt = OptState::new(cfg.optimizer, params.len());
    let mut metrics = Vec::new();
    let total = total_steps(data.len(), cfg);
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &data[i]).collect();
            let out = sft_batch(&params, &batch, true)?;
            if !out.loss.is_finite() {
                return Err(TrainError::Divergence { step, loss: out.loss });
            }
            if cfg.grad_check {
                check_gradient(&params, &out.grad, step, cfg.seed, |p| {
                    let owned: Vec<SftExample> = batch.iter().map(|e| (*e).clone()).collect();
                    cross_entropy(p, &owned)
                })?;
            }
            metrics.push(StepMetrics {
                step,
                stage: Stage::Sft,
                loss: out.loss,
                margin: 0.0,
                attention_mass: out.attention,
            });
            opt.step(&mut params.data, &out.grad, cfg.learning_rate);
            if !params.is_finite() {
                return Err(TrainError::Divergence { step, loss: f64::NAN });
            }
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        probe: None,
    })
}

/// Seed of the noise added to pair `index` in `epoch`.
fn noise_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(mix(seed, epoch as u64), index as u64)
}

const PROBE_SIZE: usize = 16;
const PROBE_EPOCH: usize = usize::MAX;

fn trigger_probe<T: Scalar>(
    params: &PolicyParams<T>,
    pairs: &[PreferenceExample],
    schedule: &NoiseSchedule,
    cfg: &TrainingConfig,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    (0..pairs.len().min(PROBE_SIZE))
        .map(|i| {
            let ex = &pairs[i];
            let noisy = schedule.add_noise(&ex.image, cfg.noise_step, noise_seed(cfg.seed, PROBE_EPOCH, i))?;
            Ok(params.triggered_dispref(&noisy, &ex.prompt, &ex.preferred)?)
        })
        .collect()
}

fn map_objective(step: usize, e: ObjectiveError) -> TrainError {
    match e {
        ObjectiveError::NonFiniteLoss(loss) => TrainError::Divergence { step, loss },
        other => TrainError::Objective(other),
    }
}

fn preference_stage<T: Scalar>(
    params: PolicyParams<T>,
    reference: &PolicyParams<T>,
    pairs: &[PreferenceExample],
    schedule: Option<&NoiseSchedule>,
    coefficients: Coefficients,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    coefficients.validate()?;
    let stage = if schedule.is_some() { Stage::Povid } else { Stage::Dpo };
    let triggering = schedule.filter(|_| coefficients.beta_noisy != 0.0);

    // the reference is frozen, so its scores for the fixed responses are too
    let cached: Vec<PreferenceExample> = pairs
        .par_iter()
        .map(|ex| {
            let mut ex = ex.clone();
            ex.reference = Some(reference_logps(reference, &ex)?);
            Ok(ex)
        })
        .collect::<Result<_, ObjectiveError>>()?;

    let mut params = params;
    let initial_probe = match triggering {
        Some(s) => Some(trigger_probe(&params, &cached, s, cfg)?),
        None => None,
    };
    let mut opt = OptState::new(cfg.optimizer, params.len());
    let mut metrics = Vec::new();
    let total = total_steps(cached.len(), cfg);
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = epoch_order(cached.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let mut batch: Vec<PreferenceExample> = chunk.iter().map(|&i| cached[i].clone()).collect();
            if let Some(s) = triggering {
                let current = &params;
                let triggered: Vec<(ImageFeatures, Vec<TokenId>)> = chunk
                    .par_iter()
                    .zip(batch.par_iter())
                    .map(|(&i, ex)| {
                        let noisy = s.add_noise(&ex.image, cfg.noise_step, noise_seed(cfg.seed, epoch, i))?;
                        let y = current.triggered_dispref(&noisy, &ex.prompt, &ex.preferred)?;
                        if cfg.shadow_check && current.triggered_dispref_incremental(&noisy, &ex.prompt, &ex.preferred)? != y {
                            return Err(TrainError::StaleTrigger { step });
                        }
                        Ok((noisy, y))
                    })
                    .collect::<Result<_, TrainError>>()?;
                for (ex, (noisy, y)) in batch.iter_mut().zip(triggered) {
                    ex.noisy_image = Some(noisy);
                    ex.dispreferred_noisy = Some(y);
                }
            }
            let out = preference_loss(&params, reference, &batch, coefficients, stage == Stage::Povid, true)
                .map_err(|e| map_objective(step, e))?;
            if cfg.grad_check {
                let reference64 = reference.cast::<f64>();
                check_gradient(&params, &out.grad, step, cfg.seed, |p| {
                    preference_loss(p, &reference64, &batch, coefficients, stage == Stage::Povid, false)
                        .map(|o| o.loss)
                        .map_err(|e| map_objective(step, e))
                })?;
            }
            metrics.push(StepMetrics {
                step,
                stage,
                loss: out.loss,
                margin: out.mean_margin(),
                attention_mass: out.attention_mass,
            });
            opt.step(&mut params.data, &out.grad, cfg.learning_rate);
            if !params.is_finite() {
                return Err(TrainError::Divergence { step, loss: f64::NAN });
            }
            step += 1;
        }
    }
    let probe = match (triggering, initial_probe) {
        (Some(s), Some(initial)) => Some(TriggerProbe {
            indices: (0..initial.len()).collect(),
            last: trigger_probe(&params, &cached, s, cfg)?,
            initial,
        }),
        _ => None,
    };
    Ok(TrainOutcome { params, metrics, probe })
}

/// DPO on textual dispreferences. `cfg.coefficients.alpha` is the
/// temperature.
pub fn stage1_dpo<T: Scalar>(
    params: PolicyParams<T>,
    reference: &PolicyParams<T>,
    pairs: &[PreferenceExample],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    preference_stage(params, reference, pairs, None, Coefficients::dpo(cfg.coefficients.alpha), cfg)
}

/// Preference training with both textual and noise-triggered
/// dispreferences; the latter are regenerated from the current weights at
/// every step.
pub fn stage2_povid<T: Scalar>(
    params: PolicyParams<T>,
    reference: &PolicyParams<T>,
    pairs: &[PreferenceExample],
    schedule: &NoiseSchedule,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    if schedule.steps != cfg.noise_steps {
        return Err(TrainError::Config(format!(
            "schedule has {} steps, config expects {}",
            schedule.steps, cfg.noise_steps
        )));
    }
    preference_stage(params, reference, pairs, Some(schedule), cfg.coefficients, cfg)
}
