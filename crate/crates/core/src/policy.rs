//! Tiny multimodal causal decoder.
//!
//! The input sequence is `[16 image cells ; <bos> prompt <sep> response]`.
//! Image cells are projected from their feature rows, text tokens are
//! embedded, and both receive learned position embeddings. A stack of
//! pre-norm attention/feed-forward blocks with full causal masking (image
//! positions included) feeds an untied output head.
//!
//! Layer norms carry no affine parameters. All parameters live in one flat
//! buffer; gradients use the same layout.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;
use crate::lexicon::{TokenId, BOS, EOS, PAD, SEP};
use crate::rng::{purpose, stream};
use crate::scenegen::{ImageFeatures, FEATURE_DIM, NUM_CELLS};
use crate::tensor::{
    argmax, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, log_sum_exp, mat, mat_mut,
    softmax_in_place, Scalar, View, ViewMut,
};

pub const IMAGE_TOKENS: usize = NUM_CELLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::lexicon::Vocabulary::standard().len(),
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            max_len: 96,
        }
    }
}

impl PolicyConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny(d_model: usize, layers: usize) -> Self {
        Self {
            d_model,
            layers,
            heads: 2,
            d_ff: 4 * d_model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.vocab_size < 4 || self.vocab_size > 256 {
            return bad("vocab_size must lie in [4, 256]");
        }
        if self.max_len < IMAGE_TOKENS + 3 {
            return bad("max_len must leave room for the image and some text");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Bound of the uniform initializer.
    pub fn init_bound(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Where each named tensor lives in the flat buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    img_w: usize,
    img_b: usize,
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
            };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let d = cfg.d_model;
        let img_w = add("img_proj.w".into(), vec![FEATURE_DIM, d]);
        let img_b = add("img_proj.b".into(), vec![d]);
        let tok = add("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos = add("pos_emb".into(), vec![cfg.max_len, d]);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                wq: add(format!("layers.{l}.attn.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.attn.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.attn.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.attn.wo"), vec![d, d]),
                w1: add(format!("layers.{l}.ff.w1"), vec![d, cfg.d_ff]),
                b1: add(format!("layers.{l}.ff.b1"), vec![cfg.d_ff]),
                w2: add(format!("layers.{l}.ff.w2"), vec![cfg.d_ff, d]),
                b2: add(format!("layers.{l}.ff.b2"), vec![d]),
            })
            .collect();
        let head_w = add("head.w".into(), vec![d, cfg.vocab_size]);
        let head_b = add("head.b".into(), vec![cfg.vocab_size]);
        Self {
            tensors,
            total,
            img_w,
            img_b,
            tok,
            pos,
            layers,
            head_w,
            head_b,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All weights of the policy. `T = f32` for training, `f64` for gradient
/// checks.
#[derive(Debug, Clone)]
pub struct PolicyParams<T> {
    pub config: PolicyConfig,
    layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> PartialEq for PolicyParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Scalar> PolicyParams<T> {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]` for weights and embeddings,
    /// zero biases. Deterministic in `(config, seed)`.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let bound = config.init_bound();
        let mut rng = stream(seed, purpose::INIT);
        let mut data = vec![T::zero(); layout.total];
        for spec in &layout.tensors {
            if spec.shape.len() == 2 {
                for v in &mut data[spec.range()] {
                    *v = T::of(rng.random_range(-bound..=bound));
                }
            }
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn from_data(config: PolicyConfig, data: Vec<T>) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        if data.len() != layout.total {
            return Err(PolicyError::InvalidConfig(format!(
                "{} parameters given, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Text stream fed to the decoder: `<bos> prompt <sep> response[..m-1]`.
pub fn text_input(prompt: &[TokenId], response: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(prompt.len() + response.len() + 1);
    t.push(BOS);
    t.extend_from_slice(prompt);
    t.push(SEP);
    if let Some((_, head)) = response.split_last() {
        t.extend_from_slice(head);
    }
    t
}

/// Positions whose next-token distributions score the response.
pub fn response_positions(prompt_len: usize, response_len: usize) -> Vec<usize> {
    let first = IMAGE_TOKENS + 1 + prompt_len;
    (first..first + response_len).collect()
}

struct LayerCache<T> {
    h1: Vec<T>,
    r1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x n x n` attention weights.
    probs: Vec<T>,
    o: Vec<T>,
    h2: Vec<T>,
    r2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations kept from a forward pass for backprop and diagnostics.
pub struct Trace<T> {
    n: usize,
    image: Vec<T>,
    text: Vec<TokenId>,
    outputs: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    hf: Vec<T>,
    rf: Vec<T>,
    /// `outputs.len() x vocab` logits.
    pub logits: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn logits_row(&self, i: usize, vocab: usize) -> &[T] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }

    /// Attention weight `(layer, head, query, key)`.
    pub fn attention(&self, layer: usize, head: usize, query: usize, key: usize) -> T {
        let n = self.n;
        self.layers[layer].probs[head * n * n + query * n + key]
    }

    /// Mean over output positions, layers and heads of the attention mass
    /// on the image positions.
    pub fn image_attention_mass(&self) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        let mut count = 0usize;
        for layer in &self.layers {
            let heads = layer.probs.len() / (n * n);
            for h in 0..heads {
                for &q in &self.outputs {
                    let row = &layer.probs[h * n * n + q * n..h * n * n + q * n + n];
                    total += row[..IMAGE_TOKENS.min(n)].iter().map(|v| v.as_f64()).sum::<f64>();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn image_as<T: Scalar>(image: &ImageFeatures) -> Vec<T> {
    image.as_slice().iter().map(|&v| T::of(v as f64)).collect()
}

fn view<T>(data: &[T], off: usize, cols: usize) -> View<'_, T> {
    mat(&data[off..], cols)
}

fn view_mut<T>(data: &mut [T], off: usize, cols: usize) -> ViewMut<'_, T> {
    mat_mut(&mut data[off..], cols)
}

fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

impl<T: Scalar> PolicyParams<T> {
    fn check_len(&self, n: usize) -> Result<(), PolicyError> {
        if n > self.config.max_len {
            Err(PolicyError::LengthExceeded {
                len: n,
                max: self.config.max_len,
            })
        } else {
            Ok(())
        }
    }

    /// Runs the decoder over `[image ; text]`, producing logits at `outputs`.
    pub fn forward(&self, image: &ImageFeatures, text: &[TokenId], outputs: &[usize]) -> Result<Trace<T>, PolicyError> {
        let cfg = &self.config;
        let (d, nh, dh, ff, vocab) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let n = IMAGE_TOKENS + text.len();
        self.check_len(n)?;
        if let Some(&bad) = text.iter().find(|&&t| t as usize >= vocab) {
            return Err(PolicyError::InvalidConfig(format!("token id {bad} outside vocabulary")));
        }
        assert!(outputs.iter().all(|&p| p < n), "output position beyond sequence");
        let p = &self.data;
        let lay = &self.layout;
        let img = image_as::<T>(image);

        let mut x = vec![T::zero(); n * d];
        gemm(IMAGE_TOKENS, FEATURE_DIM, d, T::one(), mat(&img, FEATURE_DIM), view(p, lay.img_w, d), T::zero(), mat_mut(&mut x[..IMAGE_TOKENS * d], d));
        add_bias(&mut x[..IMAGE_TOKENS * d], &p[lay.img_b..lay.img_b + d]);
        for (i, &t) in text.iter().enumerate() {
            let row = &mut x[(IMAGE_TOKENS + i) * d..(IMAGE_TOKENS + i + 1) * d];
            row.copy_from_slice(&p[lay.tok + t as usize * d..lay.tok + (t as usize + 1) * d]);
        }
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            for (v, &e) in row.iter_mut().zip(&p[lay.pos + i * d..lay.pos + (i + 1) * d]) {
                *v += e;
            }
        }

        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut caches = Vec::with_capacity(cfg.layers);
        for lo in &lay.layers {
            let mut h1 = vec![T::zero(); n * d];
            let r1 = layer_norm(&x, d, &mut h1);
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            gemm(n, d, d, T::one(), mat(&h1, d), view(p, lo.wq, d), T::zero(), mat_mut(&mut q, d));
            gemm(n, d, d, T::one(), mat(&h1, d), view(p, lo.wk, d), T::zero(), mat_mut(&mut k, d));
            gemm(n, d, d, T::one(), mat(&h1, d), view(p, lo.wv, d), T::zero(), mat_mut(&mut v, d));

            let mut probs = vec![T::zero(); nh * n * n];
            let mut o = vec![T::zero(); n * d];
            for h in 0..nh {
                let s = &mut probs[h * n * n..(h + 1) * n * n];
                gemm(n, dh, n, scale, View { data: &q[h * dh..], rs: d, cs: 1 }, View { data: &k[h * dh..], rs: 1, cs: d }, T::zero(), mat_mut(s, n));
                for i in 0..n {
                    let row = &mut s[i * n..(i + 1) * n];
                    softmax_in_place(&mut row[..=i]);
                    for v in &mut row[i + 1..] {
                        *v = T::zero();
                    }
                }
                gemm(n, n, dh, T::one(), mat(s, n), View { data: &v[h * dh..], rs: d, cs: 1 }, T::zero(), ViewMut { data: &mut o[h * dh..], rs: d, cs: 1 });
            }
            gemm(n, d, d, T::one(), mat(&o, d), view(p, lo.wo, d), T::one(), mat_mut(&mut x, d));

            let mut h2 = vec![T::zero(); n * d];
            let r2 = layer_norm(&x, d, &mut h2);
            let mut u = vec![T::zero(); n * ff];
            gemm(n, d, ff, T::one(), mat(&h2, d), view(p, lo.w1, ff), T::zero(), mat_mut(&mut u, ff));
            add_bias(&mut u, &p[lo.b1..lo.b1 + ff]);
            let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
            gemm(n, ff, d, T::one(), mat(&g, ff), view(p, lo.w2, d), T::one(), mat_mut(&mut x, d));
            add_bias(&mut x, &p[lo.b2..lo.b2 + d]);

            caches.push(LayerCache {
                h1,
                r1,
                q,
                k,
                v,
                probs,
                o,
                h2,
                r2,
                u,
                g,
            });
        }

        let mut hf = vec![T::zero(); n * d];
        let rf = layer_norm(&x, d, &mut hf);
        let mut sel = Vec::with_capacity(outputs.len() * d);
        for &pos in outputs {
            sel.extend_from_slice(&hf[pos * d..(pos + 1) * d]);
        }
        let mut logits = vec![T::zero(); outputs.len() * vocab];
        gemm(outputs.len(), d, vocab, T::one(), mat(&sel, d), view(p, lay.head_w, vocab), T::zero(), mat_mut(&mut logits, vocab));
        add_bias(&mut logits, &p[lay.head_b..lay.head_b + vocab]);

        Ok(Trace {
            n,
            image: img,
            text: text.to_vec(),
            outputs: outputs.to_vec(),
            layers: caches,
            hf,
            rf,
            logits,
        })
    }

    /// Accumulates `d(loss)/d(params)` into `grads`, given `d(loss)/d(logits)`
    /// for the trace's output rows.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T], grads: &mut [T]) {
        let cfg = &self.config;
        let (d, nh, dh, ff, vocab) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let n = trace.n;
        let lay = &self.layout;
        let p = &self.data;
        assert_eq!(grads.len(), p.len());
        assert_eq!(dlogits.len(), trace.outputs.len() * vocab);
        let m = trace.outputs.len();

        // output head
        let mut sel = Vec::with_capacity(m * d);
        for &pos in &trace.outputs {
            sel.extend_from_slice(&trace.hf[pos * d..(pos + 1) * d]);
        }
        gemm(d, m, vocab, T::one(), mat(&sel, d).t(), mat(dlogits, vocab), T::one(), view_mut(grads, lay.head_w, vocab));
        sum_rows_into(dlogits, vocab, &mut grads[lay.head_b..lay.head_b + vocab]);
        let mut dsel = vec![T::zero(); m * d];
        gemm(m, vocab, d, T::one(), mat(dlogits, vocab), view(p, lay.head_w, vocab).t(), T::zero(), mat_mut(&mut dsel, d));
        let mut dhf = vec![T::zero(); n * d];
        for (i, &pos) in trace.outputs.iter().enumerate() {
            for (a, &b) in dhf[pos * d..(pos + 1) * d].iter_mut().zip(&dsel[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(&trace.hf, &dhf, &trace.rf, d, &mut dx);

        let scale = T::one() / T::of(dh as f64).sqrt();
        for (lo, c) in lay.layers.iter().zip(&trace.layers).rev() {
            // feed-forward block
            gemm(ff, n, d, T::one(), mat(&c.g, ff).t(), mat(&dx, d), T::one(), view_mut(grads, lo.w2, d));
            sum_rows_into(&dx, d, &mut grads[lo.b2..lo.b2 + d]);
            let mut du = vec![T::zero(); n * ff];
            gemm(n, d, ff, T::one(), mat(&dx, d), view(p, lo.w2, d).t(), T::zero(), mat_mut(&mut du, ff));
            for (g, &u) in du.iter_mut().zip(&c.u) {
                *g *= gelu_grad(u);
            }
            gemm(d, n, ff, T::one(), mat(&c.h2, d).t(), mat(&du, ff), T::one(), view_mut(grads, lo.w1, ff));
            sum_rows_into(&du, ff, &mut grads[lo.b1..lo.b1 + ff]);
            let mut dh2 = vec![T::zero(); n * d];
            gemm(n, ff, d, T::one(), mat(&du, ff), view(p, lo.w1, ff).t(), T::zero(), mat_mut(&mut dh2, d));
            layer_norm_backward(&c.h2, &dh2, &c.r2, d, &mut dx);

            // attention block
            gemm(d, n, d, T::one(), mat(&c.o, d).t(), mat(&dx, d), T::one(), view_mut(grads, lo.wo, d));
            let mut dout = vec![T::zero(); n * d];
            gemm(n, d, d, T::one(), mat(&dx, d), view(p, lo.wo, d).t(), T::zero(), mat_mut(&mut dout, d));
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..nh {
                let pr = &c.probs[h * n * n..(h + 1) * n * n];
                let dout_h = View { data: &dout[h * dh..], rs: d, cs: 1 };
                gemm(n, dh, n, T::one(), dout_h, View { data: &c.v[h * dh..], rs: 1, cs: d }, T::zero(), mat_mut(&mut dp, n));
                gemm(n, n, dh, T::one(), mat(pr, n).t(), dout_h, T::zero(), ViewMut { data: &mut dv[h * dh..], rs: d, cs: 1 });
                for i in 0..n {
                    let prow = &pr[i * n..i * n + i + 1];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in drow[..=i].iter_mut().zip(prow) {
                        *g = pv * (*g - dot) * scale;
                    }
                    for g in &mut drow[i + 1..] {
                        *g = T::zero();
                    }
                }
                gemm(n, n, dh, T::one(), mat(&dp, n), View { data: &c.k[h * dh..], rs: d, cs: 1 }, T::zero(), ViewMut { data: &mut dq[h * dh..], rs: d, cs: 1 });
                gemm(n, n, dh, T::one(), mat(&dp, n).t(), View { data: &c.q[h * dh..], rs: d, cs: 1 }, T::zero(), ViewMut { data: &mut dk[h * dh..], rs: d, cs: 1 });
            }
            let mut dh1 = vec![T::zero(); n * d];
            for (w, dm) in [(lo.wq, &dq), (lo.wk, &dk), (lo.wv, &dv)] {
                gemm(d, n, d, T::one(), mat(&c.h1, d).t(), mat(dm, d), T::one(), view_mut(grads, w, d));
                gemm(n, d, d, T::one(), mat(dm, d), view(p, w, d).t(), T::one(), mat_mut(&mut dh1, d));
            }
            layer_norm_backward(&c.h1, &dh1, &c.r1, d, &mut dx);
        }

        // embeddings
        for (i, row) in dx.chunks_exact(d).enumerate() {
            for (g, &v) in grads[lay.pos + i * d..lay.pos + (i + 1) * d].iter_mut().zip(row) {
                *g += v;
            }
        }
        for (i, &t) in trace.text.iter().enumerate() {
            let src = &dx[(IMAGE_TOKENS + i) * d..(IMAGE_TOKENS + i + 1) * d];
            let off = lay.tok + t as usize * d;
            for (g, &v) in grads[off..off + d].iter_mut().zip(src) {
                *g += v;
            }
        }
        gemm(FEATURE_DIM, IMAGE_TOKENS, d, T::one(), mat(&trace.image, FEATURE_DIM).t(), mat(&dx[..IMAGE_TOKENS * d], d), T::one(), view_mut(grads, lay.img_w, d));
        sum_rows_into(&dx[..IMAGE_TOKENS * d], d, &mut grads[lay.img_b..lay.img_b + d]);
    }
}

/// A response scored by a forward pass; feed to
/// [`PolicyParams::backward_scored`].
pub struct Scored<T> {
    pub trace: Trace<T>,
    targets: Vec<TokenId>,
    probs: Vec<T>,
    pub logprob: T,
}

/// Response length once trailing padding is removed.
fn unpadded_len(response: &[TokenId]) -> usize {
    response.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1)
}

impl<T: Scalar> PolicyParams<T> {
    fn response_trace(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<Trace<T>, PolicyError> {
        if response.is_empty() {
            return Err(PolicyError::EmptyResponse);
        }
        let text = text_input(prompt, response);
        let outputs = response_positions(prompt.len(), response.len());
        self.forward(image, &text, &outputs)
    }

    /// Log-probability of each response token under causal conditioning on
    /// `[image ; prompt ; response prefix]`. Trailing PAD tokens are masked
    /// and reported as 0.
    pub fn token_logprobs(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<T>, PolicyError> {
        let m = unpadded_len(response);
        let mut out = vec![T::zero(); response.len()];
        if m == 0 {
            return Ok(out);
        }
        let tr = self.response_trace(image, prompt, &response[..m])?;
        let v = self.config.vocab_size;
        for (j, &y) in response[..m].iter().enumerate() {
            let row = tr.logits_row(j, v);
            out[j] = row[y as usize] - log_sum_exp(row);
        }
        Ok(out)
    }

    pub fn sequence_logprob(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<T, PolicyError> {
        Ok(self.token_logprobs(image, prompt, response)?.into_iter().sum())
    }

    /// Full next-token distributions at each response position.
    pub fn next_token_distributions(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<T>>, PolicyError> {
        let tr = self.response_trace(image, prompt, response)?;
        let v = self.config.vocab_size;
        Ok((0..response.len())
            .map(|j| {
                let mut row = tr.logits_row(j, v).to_vec();
                softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    /// Forward pass over one response, keeping what the backward pass needs.
    pub fn score(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<Scored<T>, PolicyError> {
        let m = unpadded_len(response);
        if m == 0 {
            return Err(PolicyError::EmptyResponse);
        }
        let response = &response[..m];
        let trace = self.response_trace(image, prompt, response)?;
        let v = self.config.vocab_size;
        let mut logprob = T::zero();
        let mut probs = Vec::with_capacity(m * v);
        for (j, &y) in response.iter().enumerate() {
            let mut row = trace.logits_row(j, v).to_vec();
            let lse = softmax_in_place(&mut row);
            logprob += trace.logits_row(j, v)[y as usize] - lse;
            probs.extend_from_slice(&row);
        }
        Ok(Scored {
            trace,
            targets: response.to_vec(),
            probs,
            logprob,
        })
    }

    /// Adds `weight * d(logprob)/d(params)` for a scored response into `grads`.
    pub fn backward_scored(&self, scored: &Scored<T>, weight: T, grads: &mut [T]) {
        let v = self.config.vocab_size;
        let mut dlogits: Vec<T> = scored.probs.iter().map(|&p| -weight * p).collect();
        for (j, &y) in scored.targets.iter().enumerate() {
            dlogits[j * v + y as usize] += weight;
        }
        self.backward(&scored.trace, &dlogits, grads);
    }

    /// Sequence log-probability plus `weight * d(logprob)/d(params)` added
    /// into `grads`. Returns the log-probability and the trace's image
    /// attention mass.
    pub fn logprob_backward(
        &self,
        image: &ImageFeatures,
        prompt: &[TokenId],
        response: &[TokenId],
        weight: T,
        grads: &mut [T],
    ) -> Result<(T, f64), PolicyError> {
        let scored = self.score(image, prompt, response)?;
        self.backward_scored(&scored, weight, grads);
        Ok((scored.logprob, scored.trace.image_attention_mass()))
    }

    /// Greedy argmax continuation of `prefix`, stopping after EOS or `steps`
    /// tokens. Ties go to the lowest token id.
    pub fn greedy_continuation(
        &self,
        image: &ImageFeatures,
        prompt: &[TokenId],
        prefix: &[TokenId],
        steps: usize,
    ) -> Result<Vec<TokenId>, PolicyError> {
        let mut text = text_input(prompt, &[]);
        text.extend_from_slice(prefix);
        let mut out = Vec::new();
        for _ in 0..steps {
            let pos = IMAGE_TOKENS + text.len() - 1;
            let tr = self.forward(image, &text, &[pos])?;
            let next = argmax(&tr.logits) as TokenId;
            out.push(next);
            if next == EOS {
                break;
            }
            text.push(next);
        }
        Ok(out)
    }

    /// Caption-style decode from an empty prefix, with EOS stripped.
    pub fn generate(&self, image: &ImageFeatures, prompt: &[TokenId], steps: usize) -> Result<Vec<TokenId>, PolicyError> {
        let budget = steps.min(self.config.max_len.saturating_sub(IMAGE_TOKENS + 2 + prompt.len()));
        let mut out = self.greedy_continuation(image, prompt, &[], budget)?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    }

    /// Teacher-forced argmax: position `i` takes the most likely token given
    /// the image, prompt and the preferred prefix `preferred[..i]`.
    pub fn triggered_dispref(&self, noisy_image: &ImageFeatures, prompt: &[TokenId], preferred: &[TokenId]) -> Result<Vec<TokenId>, PolicyError> {
        let tr = self.response_trace(noisy_image, prompt, preferred)?;
        let v = self.config.vocab_size;
        Ok((0..preferred.len())
            .map(|j| argmax(tr.logits_row(j, v)) as TokenId)
            .collect())
    }

    /// Reference implementation of [`triggered_dispref`](Self::triggered_dispref)
    /// with one forward pass per position.
    pub fn triggered_dispref_incremental(
        &self,
        noisy_image: &ImageFeatures,
        prompt: &[TokenId],
        preferred: &[TokenId],
    ) -> Result<Vec<TokenId>, PolicyError> {
        if preferred.is_empty() {
            return Err(PolicyError::EmptyResponse);
        }
        (0..preferred.len())
            .map(|i| {
                let next = self.greedy_continuation(noisy_image, prompt, &preferred[..i], 1)?;
                Ok(next[0])
            })
            .collect()
    }

    /// Mean attention mass on the image positions over response positions,
    /// layers and heads.
    pub fn attention_image_mass(&self, image: &ImageFeatures, prompt: &[TokenId], response: &[TokenId]) -> Result<f64, PolicyError> {
        Ok(self.response_trace(image, prompt, response)?.image_attention_mass())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Vocabulary;
    use crate::scenegen::{render_features, sample_scene, CooccurrencePrior};

    fn setup() -> (PolicyParams<f64>, ImageFeatures, Vec<TokenId>, Vec<TokenId>) {
        let v = Vocabulary::standard();
        let params = PolicyParams::<f64>::init(PolicyConfig::tiny(16, 2), 3).unwrap();
        let img = render_features(&sample_scene(&CooccurrencePrior::standard(), 1));
        let prompt = v.tokenize("describe the image .").unwrap();
        let mut resp = v.tokenize("in the image there is a red cup").unwrap();
        resp.push(EOS);
        (params, img, prompt, resp)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = PolicyConfig::default();
        let a = PolicyParams::<f32>::init(cfg, 7).unwrap();
        let b = PolicyParams::<f32>::init(cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, PolicyParams::<f32>::init(cfg, 8).unwrap());
        let bound = cfg.init_bound() as f32;
        assert!(a.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn config_validation() {
        let mut c = PolicyConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = PolicyConfig::default();
        c.max_len = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logprobs_are_normalized() {
        let (p, img, prompt, resp) = setup();
        let lp = p.token_logprobs(&img, &prompt, &resp).unwrap();
        assert_eq!(lp.len(), resp.len());
        assert!(lp.iter().all(|&v| v <= 0.0));
        for dist in p.next_token_distributions(&img, &prompt, &resp).unwrap() {
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn trailing_padding_is_masked() {
        let (p, img, prompt, resp) = setup();
        let plain = p.token_logprobs(&img, &prompt, &resp).unwrap();
        let mut padded = resp.clone();
        padded.extend([PAD, PAD, PAD]);
        let lp = p.token_logprobs(&img, &prompt, &padded).unwrap();
        assert_eq!(&lp[..resp.len()], plain.as_slice());
        assert!(lp[resp.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality() {
        let (p, img, prompt, resp) = setup();
        let base = p.token_logprobs(&img, &prompt, &resp).unwrap();
        for j in 0..resp.len() {
            let mut alt = resp.clone();
            alt[j] = if alt[j] == 10 { 11 } else { 10 };
            let lp = p.token_logprobs(&img, &prompt, &alt).unwrap();
            assert_eq!(&lp[..j], &base[..j], "position {j}");
        }
    }

    #[test]
    fn length_limit() {
        let (p, img, prompt, _) = setup();
        let long = vec![10; 200];
        assert!(matches!(
            p.token_logprobs(&img, &prompt, &long),
            Err(PolicyError::LengthExceeded { .. })
        ));
    }

    #[test]
    fn greedy_is_deterministic_and_stops_at_eos() {
        let (p, img, prompt, _) = setup();
        let a = p.greedy_continuation(&img, &prompt, &[], 20).unwrap();
        assert_eq!(a, p.greedy_continuation(&img, &prompt, &[], 20).unwrap());
        assert!(a.len() <= 20);
        if let Some(i) = a.iter().position(|&t| t == EOS) {
            assert_eq!(i, a.len() - 1);
        }
        // force EOS to be the argmax everywhere
        let mut q = p.clone();
        q.tensor_mut("head.b").unwrap()[EOS as usize] = 1e6;
        assert_eq!(q.greedy_continuation(&img, &prompt, &[], 20).unwrap(), vec![EOS]);
    }

    #[test]
    fn triggered_matches_incremental() {
        let (p, img, prompt, resp) = setup();
        let a = p.triggered_dispref(&img, &prompt, &resp).unwrap();
        let b = p.triggered_dispref_incremental(&img, &prompt, &resp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), resp.len());
    }

    #[test]
    fn uniform_attention_mass() {
        let (mut p, img, prompt, _) = setup();
        for l in 0..p.config.layers {
            p.tensor_mut(&format!("layers.{l}.attn.wq")).unwrap().fill(0.0);
            p.tensor_mut(&format!("layers.{l}.attn.wk")).unwrap().fill(0.0);
        }
        let resp = vec![EOS];
        let n = IMAGE_TOKENS + text_input(&prompt, &resp).len();
        let mass = p.attention_image_mass(&img, &prompt, &resp).unwrap();
        assert!((mass - IMAGE_TOKENS as f64 / n as f64).abs() < 1e-12);
        // several positions: mean of 16/(q+1)
        let resp = vec![10, 11, EOS];
        let pos = response_positions(prompt.len(), resp.len());
        let want = pos.iter().map(|&q| 16.0 / (q + 1) as f64).sum::<f64>() / pos.len() as f64;
        let mass = p.attention_image_mass(&img, &prompt, &resp).unwrap();
        assert!((mass - want).abs() < 1e-12);
    }

    #[test]
    fn cast_round_trip_is_exact_for_f32() {
        let p = PolicyParams::<f32>::init(PolicyConfig::default(), 1).unwrap();
        let back: PolicyParams<f32> = p.cast::<f64>().cast();
        assert_eq!(p, back);
    }
}
