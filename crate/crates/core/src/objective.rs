//! Preference losses over a frozen reference policy.
//!
//! Every loss here has the form `softplus(-z)` with an inner margin
//! `z = sum_j c_j * (log pi_theta(y_j | x_j) - log pi_ref(y_j | x_j))`:
//! a positive coefficient on the preferred response, negative ones on the
//! dispreferred responses. Gradients follow from
//! `dL/dz = -sigmoid(-z)` and the per-sequence log-probability gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ObjectiveError;
use crate::lexicon::TokenId;
use crate::policy::PolicyParams;
use crate::scenegen::ImageFeatures;
use crate::tensor::{neg_log_sigmoid, sigmoid, Scalar};

/// Weights of the preferred term (`alpha`), the textual dispreference
/// (`beta_text`) and the noise-triggered dispreference (`beta_noisy`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta_text: f64,
    pub beta_noisy: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_text: 0.1,
            beta_noisy: 0.1,
        }
    }
}

impl Coefficients {
    /// Coefficients under which the full loss reduces to plain DPO.
    pub fn dpo(alpha: f64) -> Self {
        Self {
            alpha,
            beta_text: alpha,
            beta_noisy: 0.0,
        }
    }

    /// `alpha` must be positive; the betas may be zero (ablations) but not
    /// negative.
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidCoefficient(m));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        for (name, v) in [("beta_text", self.beta_text), ("beta_noisy", self.beta_noisy)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Cached reference log-probabilities for the fixed sequences of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLogps {
    pub preferred: f64,
    pub dispreferred_text: f64,
}

/// One training example. `noisy_image` and `dispreferred_noisy` are only
/// set during the noise-triggered stage. Responses include the trailing EOS.
#[derive(Debug, Clone)]
pub struct PreferenceExample {
    pub image: ImageFeatures,
    pub prompt: Vec<TokenId>,
    pub preferred: Vec<TokenId>,
    pub dispreferred_text: Vec<TokenId>,
    pub noisy_image: Option<ImageFeatures>,
    pub dispreferred_noisy: Option<Vec<TokenId>>,
    pub reference: Option<ReferenceLogps>,
}

impl PreferenceExample {
    pub fn new(image: ImageFeatures, prompt: Vec<TokenId>, preferred: Vec<TokenId>, dispreferred_text: Vec<TokenId>) -> Self {
        Self {
            image,
            prompt,
            preferred,
            dispreferred_text,
            noisy_image: None,
            dispreferred_noisy: None,
            reference: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradient of the mean loss; empty when not requested.
    pub grad: Vec<T>,
    /// Inner margin `z` per example.
    pub margins: Vec<f64>,
    /// Mean image attention mass over the preferred responses.
    pub attention_mass: f64,
}

impl<T> LossOutput<T> {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len().max(1) as f64
    }
}

/// Bradley–Terry preference probability `sigmoid(r_w - r_l)`.
pub fn bradley_terry_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// DPO loss for one example from its log-ratios.
pub fn dpo_loss_from_ratios(alpha: f64, delta_w: f64, delta_l: f64) -> f64 {
    neg_log_sigmoid(alpha * delta_w - alpha * delta_l)
}

/// Reward shaped by the divergence from the reference:
/// `r - alpha * (log pi_theta(y|x) - log pi_ref(y|x))`. Diagnostic only.
pub fn kl_regularized_reward<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    image: &ImageFeatures,
    prompt: &[TokenId],
    response: &[TokenId],
    reward: f64,
    alpha: f64,
) -> Result<f64, ObjectiveError> {
    if alpha == 0.0 {
        return Ok(reward);
    }
    let lp = theta.sequence_logprob(image, prompt, response)?.as_f64();
    let lr = reference.sequence_logprob(image, prompt, response)?.as_f64();
    Ok(reward - alpha * (lp - lr))
}

/// Reference log-probabilities of the preferred and textual dispreferred
/// responses.
pub fn reference_logps<T: Scalar>(reference: &PolicyParams<T>, ex: &PreferenceExample) -> Result<ReferenceLogps, ObjectiveError> {
    Ok(ReferenceLogps {
        preferred: reference.sequence_logprob(&ex.image, &ex.prompt, &ex.preferred)?.as_f64(),
        dispreferred_text: reference
            .sequence_logprob(&ex.image, &ex.prompt, &ex.dispreferred_text)?
            .as_f64(),
    })
}

/// Mean DPO loss `-log sigmoid(alpha * (delta_w - delta_l))` and its gradient.
pub fn dpo_loss<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    batch: &[PreferenceExample],
    alpha: f64,
) -> Result<LossOutput<T>, ObjectiveError> {
    preference_loss(theta, reference, batch, Coefficients::dpo(alpha), false, true)
}

/// Mean noise-triggered preference loss
/// `-log sigmoid(alpha*d_w - beta_text*d_text - beta_noisy*d_noisy)` and
/// its gradient. `d_noisy` is scored against the noisy image; its tokens are
/// treated as constants.
pub fn povid_loss<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    batch: &[PreferenceExample],
    coefficients: Coefficients,
) -> Result<LossOutput<T>, ObjectiveError> {
    preference_loss(theta, reference, batch, coefficients, true, true)
}

struct Term<'a> {
    image: &'a ImageFeatures,
    response: &'a [TokenId],
    coef: f64,
    cached_ref: Option<f64>,
}

fn terms<'a>(ex: &'a PreferenceExample, c: Coefficients, noisy: bool) -> Result<Vec<Term<'a>>, ObjectiveError> {
    let cache = ex.reference;
    let mut out = vec![Term {
        image: &ex.image,
        response: &ex.preferred,
        coef: c.alpha,
        cached_ref: cache.map(|r| r.preferred),
    }];
    if c.beta_text != 0.0 {
        out.push(Term {
            image: &ex.image,
            response: &ex.dispreferred_text,
            coef: -c.beta_text,
            cached_ref: cache.map(|r| r.dispreferred_text),
        });
    }
    if noisy && c.beta_noisy != 0.0 {
        let (Some(img), Some(resp)) = (&ex.noisy_image, &ex.dispreferred_noisy) else {
            return Err(ObjectiveError::MalformedBatch(
                "noise-triggered term needs a noisy image and its dispreferred response".into(),
            ));
        };
        out.push(Term {
            image: img,
            response: resp,
            coef: -c.beta_noisy,
            cached_ref: None,
        });
    }
    Ok(out)
}

struct ExampleResult<T> {
    loss: f64,
    margin: f64,
    attention: f64,
    grad: Vec<T>,
}

fn example_loss<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    ex: &PreferenceExample,
    c: Coefficients,
    noisy: bool,
    scale: f64,
    with_grad: bool,
) -> Result<ExampleResult<T>, ObjectiveError> {
    let terms = terms(ex, c, noisy)?;
    let mut scored = Vec::with_capacity(terms.len());
    let mut z = 0.0;
    for t in &terms {
        let s = theta.score(t.image, &ex.prompt, t.response)?;
        let r = match t.cached_ref {
            Some(r) => r,
            None => reference.sequence_logprob(t.image, &ex.prompt, t.response)?.as_f64(),
        };
        z += t.coef * (s.logprob.as_f64() - r);
        scored.push(s);
    }
    let loss = neg_log_sigmoid(z);
    let attention = scored[0].trace.image_attention_mass();
    let mut grad = Vec::new();
    if with_grad {
        grad = theta.zeros_like();
        let upstream = -sigmoid(-z) * scale;
        for (t, s) in terms.iter().zip(&scored) {
            theta.backward_scored(s, T::of(upstream * t.coef), &mut grad);
        }
    }
    Ok(ExampleResult {
        loss,
        margin: z,
        attention,
        grad,
    })
}

/// Shared implementation; `noisy` enables the noise-triggered term.
pub fn preference_loss<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    batch: &[PreferenceExample],
    coefficients: Coefficients,
    noisy: bool,
    with_grad: bool,
) -> Result<LossOutput<T>, ObjectiveError> {
    coefficients.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if theta.config != reference.config {
        return Err(ObjectiveError::MalformedBatch("policy and reference shapes differ".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<ExampleResult<T>> = batch
        .par_iter()
        .map(|ex| example_loss(theta, reference, ex, coefficients, noisy, scale, with_grad))
        .collect::<Result<_, _>>()?;

    // fixed-order reduction keeps results independent of scheduling
    let mut grad = if with_grad { theta.zeros_like() } else { Vec::new() };
    let mut loss = 0.0;
    let mut attention = 0.0;
    let mut margins = Vec::with_capacity(results.len());
    for r in results {
        loss += r.loss;
        attention += r.attention;
        margins.push(r.margin);
        for (g, v) in grad.iter_mut().zip(r.grad) {
            *g += v;
        }
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(ObjectiveError::NonFiniteLoss(loss));
    }
    Ok(LossOutput {
        loss,
        grad,
        margins,
        attention_mass: attention * scale,
    })
}
