//! The toy noise-prediction network and its checkpoint format.
//!
//! The denoiser is a token transformer over non-overlapping image patches.
//! Each layer is a residual feed-forward block, a self-attention block, and a
//! cross-attention block over a single condition token (whose attention
//! weight is identically 1, so the block reduces to a value/output projection
//! of the condition added to every token). Conditioning on the timestep is an
//! additive learned per-timestep embedding; a learned positional embedding
//! breaks patch symmetry.
//!
//! Every forward pass can expose per-layer activation taps (f, q, k, v, h)
//! and accept cross-chunk injection hooks; both exist to let a source
//! stream's hidden state be re-used inside another model's denoising loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::Vocabulary;
use crate::error::{Error, Result};
use crate::provenance::sha256_hex;
use crate::rng::Rng;
use crate::schedule::Schedule;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Scalar, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub cond_dim: usize,
}

impl ModelConfig {
    /// The shipped default: 24x24 RGB, patch 4 -> 36 tokens, width 64, 8 layers.
    pub fn default_toy() -> Self {
        ModelConfig { layers: 8, dim: 64, patch: 4, image_size: 24, channels: 3, cond_dim: 32 }
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn token_count(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.patch == 0 || self.cond_dim == 0 {
            return Err(Error::Config("model config: zero extent".into()));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "model config: image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    /// Default injection layer sets for this depth: the residual set is the
    /// single layer at 3/8 of the stack, attention covers the upper 5/8.
    pub fn default_res_layers(&self) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        s.insert(self.layers * 3 / 8);
        s
    }

    pub fn default_attn_layers(&self) -> BTreeSet<usize> {
        (self.layers * 3 / 8..self.layers).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerWeights<T: Scalar> {
    norm1_g: Tensor<T>,
    norm1_b: Tensor<T>,
    ff_w1: Tensor<T>,
    ff_b1: Tensor<T>,
    ff_w2: Tensor<T>,
    ff_b2: Tensor<T>,
    norm2_g: Tensor<T>,
    norm2_b: Tensor<T>,
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    cross_wv: Tensor<T>,
    cross_bv: Tensor<T>,
    cross_wo: Tensor<T>,
    cross_bo: Tensor<T>,
}

/// Training provenance recorded in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingProvenance {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl TrainingProvenance {
    pub fn init(seed: u64) -> Self {
        TrainingProvenance { kind: "init".into(), seed: Some(seed), ..Default::default() }
    }
}

/// The noise-prediction model epsilon_hat(z_t, t, c; theta).
#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Scalar = f32> {
    config: ModelConfig,
    input_w: Tensor<T>,
    input_b: Tensor<T>,
    pos_embedding: Tensor<T>,
    time_embedding: Tensor<T>,
    layers: Vec<LayerWeights<T>>,
    final_norm_g: Tensor<T>,
    final_norm_b: Tensor<T>,
    output_w: Tensor<T>,
    output_b: Tensor<T>,
    schedule: Schedule,
    vocab: Vocabulary,
    provenance: TrainingProvenance,
}

impl<T: Scalar> DenoiserModel<T> {
    /// Seeded initialization.
    ///
    /// A single stream seeded by `seed` fills the weight tensors in canonical
    /// parameter order: matrices are N(0, 1/fan_in), biases zero, norm scales
    /// one, the positional embedding N(0, 0.02^2). The time-embedding table
    /// starts from sinusoidal features of the timestep (scaled by 0.1) so
    /// neighboring rows are smooth before training refines them.
    pub fn init(
        config: ModelConfig,
        schedule: Schedule,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.d_c() != config.cond_dim {
            return Err(Error::Config(format!(
                "vocabulary width {} vs model condition width {}",
                vocab.d_c(),
                config.cond_dim
            )));
        }
        let mut rng = Rng::new(seed);
        let d = config.dim;
        let n = config.token_count();
        let td = config.token_dim();
        let dc = config.cond_dim;
        let mat = |rows: usize, cols: usize, rng: &mut Rng| -> Tensor<T> {
            let s = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| T::from_f64(rng.next_normal() * s)).collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        let input_w = mat(td, d, &mut rng);
        let input_b = Tensor::zeros(vec![d]);
        let pos_data =
            (0..n * d).map(|_| T::from_f64(rng.next_normal() * 0.02)).collect::<Vec<_>>();
        let pos_embedding = Tensor::new(vec![n, d], pos_data)?;
        let time_embedding = sinusoidal_table(schedule.t_train(), d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                norm1_g: Tensor::full(vec![d], T::one()),
                norm1_b: Tensor::zeros(vec![d]),
                ff_w1: mat(d, d, &mut rng),
                ff_b1: Tensor::zeros(vec![d]),
                ff_w2: mat(d, d, &mut rng),
                ff_b2: Tensor::zeros(vec![d]),
                norm2_g: Tensor::full(vec![d], T::one()),
                norm2_b: Tensor::zeros(vec![d]),
                wq: mat(d, d, &mut rng),
                bq: Tensor::zeros(vec![d]),
                wk: mat(d, d, &mut rng),
                bk: Tensor::zeros(vec![d]),
                wv: mat(d, d, &mut rng),
                bv: Tensor::zeros(vec![d]),
                wo: mat(d, d, &mut rng),
                bo: Tensor::zeros(vec![d]),
                cross_wv: mat(dc, d, &mut rng),
                cross_bv: Tensor::zeros(vec![d]),
                cross_wo: mat(d, d, &mut rng),
                cross_bo: Tensor::zeros(vec![d]),
            });
        }
        Ok(DenoiserModel {
            final_norm_g: Tensor::full(vec![d], T::one()),
            final_norm_b: Tensor::zeros(vec![d]),
            output_w: mat(d, td, &mut rng),
            output_b: Tensor::zeros(vec![td]),
            config,
            input_w,
            input_b,
            pos_embedding,
            time_embedding,
            layers,
            schedule,
            vocab,
            provenance: TrainingProvenance::init(seed),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn provenance(&self) -> &TrainingProvenance {
        &self.provenance
    }

    pub fn set_provenance(&mut self, p: TrainingProvenance) {
        self.provenance = p;
    }

    /// Replaces the inference step count, keeping the training discretization.
    pub fn with_sample_count(&self, s: usize) -> Result<Self> {
        let mut m = self.clone();
        m.schedule = self.schedule.with_sample_count(s)?;
        Ok(m)
    }

    /// Canonical parameter order, the single source of truth for checkpoints,
    /// tape registration and SGD updates.
    pub(crate) fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> =
            vec![&self.input_w, &self.input_b, &self.pos_embedding, &self.time_embedding];
        for l in &self.layers {
            out.extend([
                &l.norm1_g, &l.norm1_b, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2, &l.norm2_g,
                &l.norm2_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.cross_wv,
                &l.cross_bv, &l.cross_wo, &l.cross_bo,
            ]);
        }
        out.extend([&self.final_norm_g, &self.final_norm_b, &self.output_w, &self.output_b]);
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            vec![&mut self.input_w, &mut self.input_b, &mut self.pos_embedding, &mut self.time_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.norm1_g, &mut l.norm1_b, &mut l.ff_w1, &mut l.ff_b1, &mut l.ff_w2,
                &mut l.ff_b2, &mut l.norm2_g, &mut l.norm2_b, &mut l.wq, &mut l.bq, &mut l.wk,
                &mut l.bk, &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.cross_wv,
                &mut l.cross_bv, &mut l.cross_wo, &mut l.cross_bo,
            ]);
        }
        out.extend([
            &mut self.final_norm_g,
            &mut self.final_norm_b,
            &mut self.output_w,
            &mut self.output_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_f64(&self) -> DenoiserModel<f64> {
        DenoiserModel {
            config: self.config.clone(),
            input_w: self.input_w.to_f64(),
            input_b: self.input_b.to_f64(),
            pos_embedding: self.pos_embedding.to_f64(),
            time_embedding: self.time_embedding.to_f64(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    norm1_g: l.norm1_g.to_f64(),
                    norm1_b: l.norm1_b.to_f64(),
                    ff_w1: l.ff_w1.to_f64(),
                    ff_b1: l.ff_b1.to_f64(),
                    ff_w2: l.ff_w2.to_f64(),
                    ff_b2: l.ff_b2.to_f64(),
                    norm2_g: l.norm2_g.to_f64(),
                    norm2_b: l.norm2_b.to_f64(),
                    wq: l.wq.to_f64(),
                    bq: l.bq.to_f64(),
                    wk: l.wk.to_f64(),
                    bk: l.bk.to_f64(),
                    wv: l.wv.to_f64(),
                    bv: l.bv.to_f64(),
                    wo: l.wo.to_f64(),
                    bo: l.bo.to_f64(),
                    cross_wv: l.cross_wv.to_f64(),
                    cross_bv: l.cross_bv.to_f64(),
                    cross_wo: l.cross_wo.to_f64(),
                    cross_bo: l.cross_bo.to_f64(),
                })
                .collect(),
            final_norm_g: self.final_norm_g.to_f64(),
            final_norm_b: self.final_norm_b.to_f64(),
            output_w: self.output_w.to_f64(),
            output_b: self.output_b.to_f64(),
            schedule: self.schedule.clone(),
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

fn sinusoidal_table<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows * d];
    let half = d / 2;
    for t in 0..rows {
        for j in 0..half {
            let freq = (-(j as f64) / half as f64 * 10_000.0f64.ln()).exp();
            let phase = (t + 1) as f64 * freq;
            data[t * d + 2 * j] = T::from_f64(0.1 * phase.sin());
            data[t * d + 2 * j + 1] = T::from_f64(0.1 * phase.cos());
        }
    }
    Tensor::new(vec![rows, d], data).expect("sized")
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-layer activation taps from one forward pass.
///
/// `f` is the residual block output, `q`/`k`/`v` the self-attention
/// projections, `h` the block output. Taps record the values the subsequent
/// computation actually consumed, so with injection hooks active the blended
/// state is what appears here; a hook-free forward records the chunk's own
/// activations.
#[derive(Debug, Clone)]
pub struct LayerTaps<T: Scalar = f32> {
    pub f: Vec<Tensor<T>>,
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub h: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerTaps<T> {
    fn with_capacity(n: usize) -> Self {
        LayerTaps {
            f: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            k: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            h: Vec::with_capacity(n),
        }
    }
}

/// Per-layer source activations available for blending: residual state at
/// residual-injection layers, q/k at attention-injection layers.
#[derive(Debug, Clone, Default)]
pub struct SourceFeatures<T: Scalar = f32> {
    pub f: BTreeMap<usize, Tensor<T>>,
    pub q: BTreeMap<usize, Tensor<T>>,
    pub k: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> SourceFeatures<T> {
    /// Extracts the configured layers' activations from a tap set.
    pub fn from_taps(
        taps: &LayerTaps<T>,
        res_layers: &BTreeSet<usize>,
        attn_layers: &BTreeSet<usize>,
    ) -> Self {
        let mut out = SourceFeatures::default();
        for &l in res_layers {
            out.f.insert(l, taps.f[l].clone());
        }
        for &l in attn_layers {
            out.q.insert(l, taps.q[l].clone());
            out.k.insert(l, taps.k[l].clone());
        }
        out
    }
}

/// Cross-chunk blending plan for one forwarded step.
///
/// `src` supplies the activations to blend in; `mask` is the token-grid mask.
/// The flags gate each blend kind for this step (threshold decisions are made
/// by the caller per step).
#[derive(Debug)]
pub struct InjectionHooks<'a, T: Scalar = f32> {
    pub res_layers: &'a BTreeSet<usize>,
    pub attn_layers: &'a BTreeSet<usize>,
    pub res_active: bool,
    pub attn_active: bool,
    pub token_mask: &'a Tensor<T>,
    pub src: &'a SourceFeatures<T>,
}

impl<'a, T: Scalar> InjectionHooks<'a, T> {
    fn wants_res(&self, layer: usize) -> bool {
        self.res_active && self.res_layers.contains(&layer)
    }

    fn wants_attn(&self, layer: usize) -> bool {
        self.attn_active && self.attn_layers.contains(&layer)
    }
}

/// Blends rows of `x` toward `src` under a per-token mask in [0, 1]:
/// `out[i, :] = m_i * src[i, :] + (1 - m_i) * x[i, :]`.
pub fn masked_lerp<T: Scalar>(
    src: &Tensor<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if src.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "masked_lerp: src {:?} vs x {:?}",
            src.shape(),
            x.shape()
        )));
    }
    let (n, d) = tensor::dims2(x, "masked_lerp")?;
    if mask.len() != n {
        return Err(Error::Dimension(format!(
            "masked_lerp: mask length {} vs {} tokens",
            mask.len(),
            n
        )));
    }
    let mut out = x.clone();
    for i in 0..n {
        let m = mask.data()[i];
        if m == T::zero() {
            continue;
        }
        let inv = T::one() - m;
        let srow = &src.data()[i * d..(i + 1) * d];
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o = m * s + inv * *o;
        }
    }
    out.ensure_finite("masked_lerp")?;
    Ok(out)
}

impl<T: Scalar> DenoiserModel<T> {
    fn check_inputs(&self, z: &Tensor<T>, t: usize, c: &Tensor<T>) -> Result<()> {
        if z.shape() != self.config.image_shape().as_slice() {
            return Err(Error::Dimension(format!(
                "predict_noise: latent {:?} vs model {:?}",
                z.shape(),
                self.config.image_shape()
            )));
        }
        if t == 0 || t > self.schedule.t_train() {
            return Err(Error::Range(format!(
                "predict_noise: timestep {t} outside 1..={}",
                self.schedule.t_train()
            )));
        }
        if c.len() != self.config.cond_dim {
            return Err(Error::Dimension(format!(
                "predict_noise: condition width {} vs {}",
                c.len(),
                self.config.cond_dim
            )));
        }
        Ok(())
    }

    /// Single forward pass; hooks may blend per-layer activations toward a
    /// source stream, taps are returned when `capture` is set.
    fn forward(
        &self,
        z: &Tensor<T>,
        t: usize,
        c: &Tensor<T>,
        capture: bool,
        hooks: Option<&InjectionHooks<'_, T>>,
    ) -> Result<(Tensor<T>, Option<LayerTaps<T>>)> {
        self.check_inputs(z, t, c)?;
        let cfg = &self.config;
        let d = cfg.dim;
        let tokens = tensor::patchify(z, cfg.patch)?;
        let mut x = tensor::linear(&tokens, &self.input_w, &self.input_b)?;
        x = tensor::add(&x, &self.pos_embedding)?;
        let trow = Tensor::new(
            vec![d],
            self.time_embedding.data()[(t - 1) * d..t * d].to_vec(),
        )?;
        x = tensor::add_row(&x, &trow)?;
        let c_row = c.reshape(vec![1, cfg.cond_dim])?;

        let mut taps = capture.then(|| LayerTaps::with_capacity(cfg.layers));
        for (l, lw) in self.layers.iter().enumerate() {
            // residual feed-forward block
            let n1 = tensor::layer_norm(&x, &lw.norm1_g, &lw.norm1_b)?;
            let a1 = tensor::silu(&tensor::linear(&n1, &lw.ff_w1, &lw.ff_b1)?)?;
            let f2 = tensor::linear(&a1, &lw.ff_w2, &lw.ff_b2)?;
            x = tensor::add(&x, &f2)?;
            if let Some(h) = hooks {
                if h.wants_res(l) {
                    let src = h.src.f.get(&l).ok_or_else(|| {
                        Error::Config(format!("injection: no stored residual state for layer {l}"))
                    })?;
                    x = masked_lerp(src, &x, h.token_mask)?;
                }
            }
            if let Some(tp) = taps.as_mut() {
                tp.f.push(x.clone());
            }

            // self-attention block
            let n2 = tensor::layer_norm(&x, &lw.norm2_g, &lw.norm2_b)?;
            let mut q = tensor::linear(&n2, &lw.wq, &lw.bq)?;
            let mut k = tensor::linear(&n2, &lw.wk, &lw.bk)?;
            let v = tensor::linear(&n2, &lw.wv, &lw.bv)?;
            if let Some(h) = hooks {
                if h.wants_attn(l) {
                    let (sq, sk) = (h.src.q.get(&l), h.src.k.get(&l));
                    let (sq, sk) = sq.zip(sk).ok_or_else(|| {
                        Error::Config(format!("injection: no stored q/k for layer {l}"))
                    })?;
                    q = masked_lerp(sq, &q, h.token_mask)?;
                    k = masked_lerp(sk, &k, h.token_mask)?;
                }
            }
            if let Some(tp) = taps.as_mut() {
                tp.q.push(q.clone());
                tp.k.push(k.clone());
                tp.v.push(v.clone());
            }
            let (attended, _) = tensor::scaled_dot_attention(&q, &k, &v)?;
            let o = tensor::linear(&attended, &lw.wo, &lw.bo)?;
            x = tensor::add(&x, &o)?;

            // cross-attention over the single condition token: the attention
            // weight is 1, so only the value/output projections remain
            let cv = tensor::linear(&c_row, &lw.cross_wv, &lw.cross_bv)?;
            let co = tensor::linear(&cv, &lw.cross_wo, &lw.cross_bo)?;
            x = tensor::add_row(&x, &co.reshape(vec![d])?)?;
            if let Some(tp) = taps.as_mut() {
                tp.h.push(x.clone());
            }
        }

        let nf = tensor::layer_norm(&x, &self.final_norm_g, &self.final_norm_b)?;
        let out_tokens = tensor::linear(&nf, &self.output_w, &self.output_b)?;
        let eps = tensor::unpatchify(
            &out_tokens,
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            cfg.patch,
        )?;
        Ok((eps, taps))
    }
}

/// Predicts the corruption noise for one latent under one condition.
pub fn predict_noise<T: Scalar>(
    model: &DenoiserModel<T>,
    z_t: &Tensor<T>,
    t: usize,
    c: &Tensor<T>,
    capture: bool,
) -> Result<(Tensor<T>, Option<LayerTaps<T>>)> {
    model.forward(z_t, t, c, capture, None)
}

/// Forwards the (src, pos, neg) triple with optional cross-chunk injection.
///
/// Chunks are processed sequentially through the identical single-chunk code
/// path, so without hooks each output equals `predict_noise` on that chunk
/// bitwise. With hooks, the src chunk runs first (hook-free, capturing taps)
/// and supplies the blend source for the pos and neg chunks.
pub fn forward_batched3<T: Scalar>(
    model: &DenoiserModel<T>,
    z_triple: &[Tensor<T>; 3],
    t: usize,
    c_tilde: [&Tensor<T>; 3],
    hooks: Option<&BatchedInjection<'_, T>>,
    capture: bool,
) -> Result<([Tensor<T>; 3], Option<Box<[LayerTaps<T>; 3]>>)> {
    let (eps_src, src_taps) = model.forward(
        &z_triple[0],
        t,
        c_tilde[0],
        capture || hooks.is_some(),
        None,
    )?;
    let (chunk_hooks, src_features);
    match hooks {
        Some(b) => {
            let taps = src_taps.as_ref().expect("captured above");
            src_features = SourceFeatures::from_taps(taps, b.res_layers, b.attn_layers);
            chunk_hooks = Some(InjectionHooks {
                res_layers: b.res_layers,
                attn_layers: b.attn_layers,
                res_active: b.res_active,
                attn_active: b.attn_active,
                token_mask: b.token_mask,
                src: &src_features,
            });
        }
        None => chunk_hooks = None,
    }
    let (eps_pos, pos_taps) =
        model.forward(&z_triple[1], t, c_tilde[1], capture, chunk_hooks.as_ref())?;
    let (eps_neg, neg_taps) =
        model.forward(&z_triple[2], t, c_tilde[2], capture, chunk_hooks.as_ref())?;
    let taps = if capture {
        Some(Box::new([
            src_taps.expect("captured"),
            pos_taps.expect("captured"),
            neg_taps.expect("captured"),
        ]))
    } else {
        None
    };
    Ok(([eps_src, eps_pos, eps_neg], taps))
}

/// Injection request for [`forward_batched3`]: which layers, whether each
/// blend kind is active at this step, and the token mask.
#[derive(Debug)]
pub struct BatchedInjection<'a, T: Scalar = f32> {
    pub res_layers: &'a BTreeSet<usize>,
    pub attn_layers: &'a BTreeSet<usize>,
    pub res_active: bool,
    pub attn_active: bool,
    pub token_mask: &'a Tensor<T>,
}

/// Forwards only the pos/neg pair, blending from stored source features.
pub fn forward_pair_injected<T: Scalar>(
    model: &DenoiserModel<T>,
    z_tgt: &Tensor<T>,
    t: usize,
    c_pos: &Tensor<T>,
    c_neg: &Tensor<T>,
    hooks: &InjectionHooks<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (eps_pos, _) = model.forward(z_tgt, t, c_pos, false, Some(hooks))?;
    let (eps_neg, _) = model.forward(z_tgt, t, c_neg, false, Some(hooks))?;
    Ok((eps_pos, eps_neg))
}

// ---------------------------------------------------------------------------
// Tape forward (training path)
// ---------------------------------------------------------------------------

/// Handles to every parameter registered on a tape, in canonical order.
pub struct ParamVars {
    flat: Vec<Var>,
    layers: usize,
}

impl ParamVars {
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }

    fn input_w(&self) -> Var {
        self.flat[0]
    }
    fn input_b(&self) -> Var {
        self.flat[1]
    }
    fn pos(&self) -> Var {
        self.flat[2]
    }
    fn time(&self) -> Var {
        self.flat[3]
    }
    fn layer(&self, l: usize) -> &[Var] {
        &self.flat[4 + l * 20..4 + (l + 1) * 20]
    }
    fn final_norm_g(&self) -> Var {
        self.flat[4 + self.layers * 20]
    }
    fn final_norm_b(&self) -> Var {
        self.flat[4 + self.layers * 20 + 1]
    }
    fn output_w(&self) -> Var {
        self.flat[4 + self.layers * 20 + 2]
    }
    fn output_b(&self) -> Var {
        self.flat[4 + self.layers * 20 + 3]
    }
}

impl<T: Scalar> DenoiserModel<T> {
    /// Registers all parameters as trainable leaves, in canonical order.
    pub fn register_params(&self, tape: &mut Tape<T>) -> ParamVars {
        let flat =
            self.param_tensors().into_iter().map(|t| tape.leaf(t.clone(), true)).collect();
        ParamVars { flat, layers: self.layers.len() }
    }

    /// The forward pass expressed on the tape; bit-identical in value to
    /// [`predict_noise`] because both run the same kernels in the same order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &ParamVars,
        z_t: &Tensor<T>,
        t: usize,
        c: &Tensor<T>,
    ) -> Result<Var> {
        self.check_inputs(z_t, t, c)?;
        let cfg = &self.config;
        let d = cfg.dim;
        let z = tape.leaf(z_t.clone(), false);
        let tokens = tape.patchify(z, cfg.patch)?;
        let mut x = tape.linear(tokens, params.input_w(), params.input_b())?;
        x = tape.add(x, params.pos())?;
        let trow = tape.row_select(params.time(), t - 1)?;
        x = tape.add_row(x, trow)?;
        let c_leaf = tape.leaf(c.reshape(vec![1, cfg.cond_dim])?, false);

        for l in 0..cfg.layers {
            let [n1g, n1b, w1, b1, w2, b2, n2g, n2b, wq, bq, wk, bk, wv, bv, wo, bo, cwv, cbv, cwo, cbo] =
                <[Var; 20]>::try_from(params.layer(l)).expect("20 vars per layer");
            let n1 = tape.layer_norm(x, n1g, n1b)?;
            let h1 = tape.linear(n1, w1, b1)?;
            let a1 = tape.silu(h1)?;
            let f2 = tape.linear(a1, w2, b2)?;
            x = tape.add(x, f2)?;

            let n2 = tape.layer_norm(x, n2g, n2b)?;
            let q = tape.linear(n2, wq, bq)?;
            let k = tape.linear(n2, wk, bk)?;
            let v = tape.linear(n2, wv, bv)?;
            let attended = tape.attention(q, k, v)?;
            let o = tape.linear(attended, wo, bo)?;
            x = tape.add(x, o)?;

            let cv = tape.linear(c_leaf, cwv, cbv)?;
            let co = tape.linear(cv, cwo, cbo)?;
            let co_row = tape.reshape(co, vec![d])?;
            x = tape.add_row(x, co_row)?;
        }

        let nf = tape.layer_norm(x, params.final_norm_g(), params.final_norm_b())?;
        let out_tokens = tape.linear(nf, params.output_w(), params.output_b())?;
        tape.unpatchify(out_tokens, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch)
    }

    /// SGD step over the canonical parameter order.
    pub fn apply_gradients(
        &mut self,
        grads: &crate::tape::Gradients<T>,
        params: &ParamVars,
        lr: f64,
    ) -> Result<()> {
        let lr = T::from_f64(lr);
        let vars: Vec<Var> = params.flat().to_vec();
        for (tensor, var) in self.param_tensors_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(var) {
                for (w, &gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * gv;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format ("DTL1")
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DTL1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    arch: ModelConfig,
    schedule: ScheduleHeader,
    vocab: VocabHeader,
    provenance: TrainingProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleHeader {
    t_train: usize,
    beta_start: f64,
    beta_end: f64,
    sample_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabHeader {
    embed_seed: u64,
    words: Vec<String>,
}

impl DenoiserModel<f32> {
    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: 1,
            arch: self.config.clone(),
            schedule: ScheduleHeader {
                t_train: self.schedule.t_train(),
                beta_start: self.schedule.beta_start(),
                beta_end: self.schedule.beta_end(),
                sample_count: self.schedule.sample_steps().len(),
            },
            vocab: VocabHeader {
                embed_seed: self.vocab.embed_seed(),
                words: self.vocab.words().to_vec(),
            },
            provenance: self.provenance.clone(),
        }
    }

    /// Serializes to the documented byte layout: magic, little-endian header
    /// length, TOML header, then every parameter tensor's f32 data in
    /// canonical order, little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header())
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(8 + header.len() + self.param_count() * 4);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.param_tensors() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("checkpoint: file shorter than its preamble".into()));
        }
        if &bytes[0..4] != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "checkpoint: bad magic {:?}, expected \"DTL1\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::Format(format!(
                "checkpoint: header wants {header_len} bytes, file has {}",
                bytes.len() - 8
            )));
        }
        let header_text = std::str::from_utf8(&bytes[8..8 + header_len])
            .map_err(|_| Error::Format("checkpoint: header is not utf-8".into()))?;
        let header: CheckpointHeader = toml::from_str(header_text)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Format(format!("checkpoint: unsupported version {}", header.version)));
        }
        let schedule = Schedule::new(
            header.schedule.t_train,
            header.schedule.beta_start,
            header.schedule.beta_end,
            header.schedule.sample_count,
        )?;
        let vocab = Vocabulary::new(
            header.vocab.words,
            header.arch.cond_dim,
            header.vocab.embed_seed,
        )?;
        let mut model = DenoiserModel::init(header.arch, schedule, vocab, 0)?;
        model.provenance = header.provenance;

        let payload = &bytes[8 + header_len..];
        let expected = model.param_count() * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint payload: expected {expected} bytes for field data, got {}",
                payload.len()
            )));
        }
        let mut off = 0;
        for t in model.param_tensors_mut() {
            for v in t.data_mut() {
                *v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
                off += 4;
            }
        }
        Ok(model)
    }

    /// Writes the checkpoint atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        DenoiserModel::from_bytes(&bytes)
    }

    /// Hash of architecture, schedule and vocabulary (not the weights).
    pub fn arch_hash(&self) -> String {
        sha256_hex(self.arch_canon().as_bytes())
    }

    fn arch_canon(&self) -> String {
        let cfg = &self.config;
        format!(
            "arch:{}:{}:{}:{}:{}:{}|sched:{}:{:016x}:{:016x}:{}|vocab:{}:{}",
            cfg.layers,
            cfg.dim,
            cfg.patch,
            cfg.image_size,
            cfg.channels,
            cfg.cond_dim,
            self.schedule.t_train(),
            self.schedule.beta_start().to_bits(),
            self.schedule.beta_end().to_bits(),
            self.schedule.sample_steps().len(),
            self.vocab.embed_seed(),
            self.vocab.words().join(",")
        )
    }

    /// Hash of architecture plus weight bytes; training provenance excluded.
    pub fn identity_hash(&self) -> String {
        let mut bytes = self.arch_canon().into_bytes();
        for t in self.param_tensors() {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}
