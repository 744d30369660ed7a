//! Cross-model content injection.
//!
//! A source generation (or inversion) leaves behind a trajectory: either the
//! per-step latents, or the per-layer residual/attention activations a null-
//! conditioned forward of those latents produces. During the target model's
//! denoising loop the source state is blended into the positive and negative
//! streams' residual outputs and self-attention q/k — per token mask, while
//! the step's countdown position is above a per-kind threshold — so the
//! target renders the source's structure in its own style.
//!
//! The attention values `v` are never replaced, and the source stream itself
//! is never modified.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner;
use crate::denoiser::{
    forward_batched3, forward_pair_injected, BatchedInjection, DenoiserModel, InjectionHooks,
    LayerTaps, SourceFeatures,
};
use crate::error::{Error, Result};
use crate::provenance::{schedule_hash, sha256_hex};
use crate::schedule::ddim_step;
use crate::tensor::{self, Scalar, Tensor};

pub use crate::denoiser::masked_lerp;

// ---------------------------------------------------------------------------
// Block-level substitution (the per-layer formulas)
// ---------------------------------------------------------------------------

/// Residual-output substitution for the pos and neg streams:
/// `h' = mask * h_src + (1 - mask) * h`. The src state is untouched.
pub fn inj_forward_res<T: Scalar>(
    h_src: &Tensor<T>,
    h_pos: &Tensor<T>,
    h_neg: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((masked_lerp(h_src, h_pos, mask)?, masked_lerp(h_src, h_neg, mask)?))
}

/// Query/key substitution for the pos and neg streams; values are not an
/// input on purpose — they are never blended.
#[allow(clippy::too_many_arguments)]
pub fn inj_forward_attn<T: Scalar>(
    q_src: &Tensor<T>,
    q_pos: &Tensor<T>,
    q_neg: &Tensor<T>,
    k_src: &Tensor<T>,
    k_pos: &Tensor<T>,
    k_neg: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<((Tensor<T>, Tensor<T>), (Tensor<T>, Tensor<T>))> {
    Ok((
        (masked_lerp(q_src, q_pos, mask)?, masked_lerp(k_src, k_pos, mask)?),
        (masked_lerp(q_src, q_neg, mask)?, masked_lerp(k_src, k_neg, mask)?),
    ))
}

/// Classifier-free guidance: `eps_neg + omega * (eps_pos - eps_neg)`,
/// evaluated per element in f64 and rounded once.
pub fn guidance_combine<T: Scalar>(
    eps_pos: &Tensor<T>,
    eps_neg: &Tensor<T>,
    omega: f64,
) -> Result<Tensor<T>> {
    if eps_pos.shape() != eps_neg.shape() {
        return Err(Error::Dimension("guidance_combine: shape mismatch".into()));
    }
    let data = eps_pos
        .data()
        .iter()
        .zip(eps_neg.data())
        .map(|(&p, &n)| {
            let (p, n) = (p.to_f64(), n.to_f64());
            T::from_f64(n + omega * (p - n))
        })
        .collect();
    let out = Tensor::new(eps_pos.shape().to_vec(), data)?;
    out.ensure_finite("guidance_combine")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which source state a trajectory carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptureMode {
    /// Per-step latents; injection states are recomputed live by the target.
    Latent,
    /// Per-step, per-layer (f, q, k) activations stored outright.
    Feature,
}

/// Pixel-grid regional mask in [0, 1]; 1 = inject, 0 = keep.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionMask {
    pixels: Tensor<f32>,
}

impl InjectionMask {
    /// Everything injected.
    pub fn full(h: usize, w: usize) -> Self {
        InjectionMask { pixels: Tensor::full(vec![h, w], 1.0) }
    }

    /// Nothing injected.
    pub fn zero(h: usize, w: usize) -> Self {
        InjectionMask { pixels: Tensor::full(vec![h, w], 0.0) }
    }

    /// Builds from a `[h, w]` coverage map, clamping into [0, 1].
    pub fn from_pixels(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "mask: expected [h, w], got {:?}",
                pixels.shape()
            )));
        }
        Ok(InjectionMask { pixels: pixels.map(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn is_zero(&self) -> bool {
        self.pixels.data().iter().all(|&v| v == 0.0)
    }

    /// Downsamples to the token grid by area maximum: a token is injected as
    /// strongly as its most-covered pixel.
    pub fn token_mask(&self, patch: usize) -> Result<Tensor<f32>> {
        let (h, w) = tensor::dims2(&self.pixels, "mask")?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Dimension(format!(
                "mask: {h}x{w} not divisible by patch {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let mut out = vec![0.0f32; gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut m = 0.0f32;
                for py in 0..patch {
                    for px in 0..patch {
                        m = m.max(self.pixels.data()[(gy * patch + py) * w + gx * patch + px]);
                    }
                }
                out[gy * gw + gx] = m;
            }
        }
        Tensor::new(vec![gh * gw], out)
    }
}

/// Full injection setup for a transfer run.
#[derive(Debug, Clone)]
pub struct InjectionConfig {
    pub residual_layers: BTreeSet<usize>,
    pub attention_layers: BTreeSet<usize>,
    /// Residual blending stays active while countdown > frac * total steps.
    pub thresh_res_frac: f64,
    pub thresh_attn_frac: f64,
    /// Classifier-free guidance strength.
    pub omega: f64,
    pub mask: InjectionMask,
    pub mode: CaptureMode,
}

impl InjectionConfig {
    /// Paper-default thresholds (0.8 / 0.5), guidance 7.5, full mask, latent
    /// capture, and the depth-proportional layer sets of the model family.
    pub fn default_for(cfg: &crate::denoiser::ModelConfig) -> Self {
        InjectionConfig {
            residual_layers: cfg.default_res_layers(),
            attention_layers: cfg.default_attn_layers(),
            thresh_res_frac: 0.8,
            thresh_attn_frac: 0.5,
            omega: 7.5,
            mask: InjectionMask::full(cfg.image_size, cfg.image_size),
            mode: CaptureMode::Latent,
        }
    }

    pub fn validate(&self, model: &crate::denoiser::ModelConfig) -> Result<()> {
        for frac in [self.thresh_res_frac, self.thresh_attn_frac] {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::Config(format!("threshold fraction {frac} outside [0, 1]")));
            }
        }
        for &l in self.residual_layers.iter().chain(&self.attention_layers) {
            if l >= model.layers {
                return Err(Error::Config(format!(
                    "injection layer {l} out of range for {} layers",
                    model.layers
                )));
            }
        }
        if self.mask.pixels().shape() != [model.image_size, model.image_size] {
            return Err(Error::Dimension(format!(
                "mask {:?} vs image {}x{}",
                self.mask.pixels().shape(),
                model.image_size,
                model.image_size
            )));
        }
        Ok(())
    }

    pub fn with_mask(mut self, mask: InjectionMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_mode(mut self, mode: CaptureMode) -> Self {
        self.mode = mode;
        self
    }
}

/// The two hook kinds a threshold can gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionKind {
    Residual,
    Attention,
}

/// Threshold gate: injection is active while the step's countdown value
/// (total_steps at the first step, 1 at the last) exceeds the kind's
/// fractional threshold of the total step count.
pub fn should_inject(
    step_index: usize,
    total_steps: usize,
    kind: InjectionKind,
    config: &InjectionConfig,
) -> bool {
    debug_assert!(step_index < total_steps);
    let countdown = (total_steps - step_index) as f64;
    let frac = match kind {
        InjectionKind::Residual => config.thresh_res_frac,
        InjectionKind::Attention => config.thresh_attn_frac,
    };
    countdown > frac * total_steps as f64
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Captured source state plus the provenance needed to re-use it safely.
#[derive(Debug, Clone)]
pub struct Trajectory {
    mode: CaptureMode,
    /// Strictly decreasing, equal to the producing schedule's sample steps.
    steps: Vec<usize>,
    image_shape: [usize; 3],
    /// Latent mode: one latent per step. Feature mode: empty.
    latents: Vec<Tensor<f32>>,
    /// Feature mode: the step-0 latent the target loop starts from.
    init_latent: Option<Tensor<f32>>,
    /// Feature mode: one activation set per step.
    features: Vec<SourceFeatures<f32>>,
    res_layers: BTreeSet<usize>,
    attn_layers: BTreeSet<usize>,
    /// Clean-image latent (generation output / inversion input).
    final_latent: Option<Tensor<f32>>,
    pub provenance: TrajectoryProvenance,
}

/// Who produced a trajectory, and under what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryProvenance {
    pub model_hash: String,
    pub schedule_hash: String,
    pub prompt_pos: String,
    pub prompt_neg: String,
    pub seed: u64,
    pub omega: f64,
}

impl Trajectory {
    /// Builds a latent-mode trajectory from per-step latents (descending
    /// step order, aligned with `steps`).
    pub fn from_latents(
        steps: Vec<usize>,
        latents: Vec<Tensor<f32>>,
        final_latent: Option<Tensor<f32>>,
        provenance: TrajectoryProvenance,
    ) -> Result<Self> {
        if steps.is_empty() || steps.len() != latents.len() {
            return Err(Error::Usage(format!(
                "trajectory: {} steps vs {} latents",
                steps.len(),
                latents.len()
            )));
        }
        if !steps.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Usage("trajectory: steps must strictly decrease".into()));
        }
        let shape = latents[0].shape();
        let image_shape = match shape {
            [c, h, w] => [*c, *h, *w],
            _ => return Err(Error::Dimension(format!("trajectory: latent shape {shape:?}"))),
        };
        if !latents.iter().all(|z| z.shape() == shape) {
            return Err(Error::Dimension("trajectory: inconsistent latent shapes".into()));
        }
        Ok(Trajectory {
            mode: CaptureMode::Latent,
            steps,
            image_shape,
            latents,
            init_latent: None,
            features: Vec::new(),
            res_layers: BTreeSet::new(),
            attn_layers: BTreeSet::new(),
            final_latent,
            provenance,
        })
    }

    /// Converts to feature mode by extracting, for every stored latent, the
    /// taps of a null-conditioned forward of `model` at the given layers.
    ///
    /// This is the definition of feature capture: the stored activations are
    /// exactly what the source stream of a denoising loop would compute, so
    /// substituting them reproduces the live path bit for bit when the same
    /// model is used.
    pub fn to_feature_mode(
        &self,
        model: &DenoiserModel<f32>,
        res_layers: &BTreeSet<usize>,
        attn_layers: &BTreeSet<usize>,
    ) -> Result<Trajectory> {
        if self.mode != CaptureMode::Latent {
            return Err(Error::Usage("trajectory: already in feature mode".into()));
        }
        let n = model.vocab().null_embedding();
        let mut features = Vec::with_capacity(self.steps.len());
        for (i, &t) in self.steps.iter().enumerate() {
            let (_, taps) = crate::denoiser::predict_noise(model, &self.latents[i], t, &n, true)?;
            let taps: LayerTaps<f32> = taps.expect("capture requested");
            features.push(SourceFeatures::from_taps(&taps, res_layers, attn_layers));
        }
        Ok(Trajectory {
            mode: CaptureMode::Feature,
            steps: self.steps.clone(),
            image_shape: self.image_shape,
            latents: Vec::new(),
            init_latent: Some(self.latents[0].clone()),
            features,
            res_layers: res_layers.clone(),
            attn_layers: attn_layers.clone(),
            final_latent: self.final_latent.clone(),
            provenance: TrajectoryProvenance {
                model_hash: model.identity_hash(),
                ..self.provenance.clone()
            },
        })
    }

    pub fn mode(&self) -> CaptureMode {
        self.mode
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn res_layers(&self) -> &BTreeSet<usize> {
        &self.res_layers
    }

    pub fn attn_layers(&self) -> &BTreeSet<usize> {
        &self.attn_layers
    }

    /// The latent the target loop starts from (stored at `steps[0]`).
    pub fn initial_latent(&self) -> &Tensor<f32> {
        match self.mode {
            CaptureMode::Latent => &self.latents[0],
            CaptureMode::Feature => self.init_latent.as_ref().expect("feature mode stores it"),
        }
    }

    pub fn latent_at(&self, step_index: usize) -> Result<&Tensor<f32>> {
        self.latents
            .get(step_index)
            .ok_or_else(|| Error::Usage(format!("trajectory: no latent at step {step_index}")))
    }

    pub fn features_at(&self, step_index: usize) -> Result<&SourceFeatures<f32>> {
        self.features
            .get(step_index)
            .ok_or_else(|| Error::Usage(format!("trajectory: no features at step {step_index}")))
    }

    pub fn final_latent(&self) -> Option<&Tensor<f32>> {
        self.final_latent.as_ref()
    }
}

// ---------------------------------------------------------------------------
// Trajectory file format ("DTRJ")
// ---------------------------------------------------------------------------

const TRAJ_MAGIC: &[u8; 4] = b"DTRJ";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFileHeader {
    version: u32,
    mode: CaptureMode,
    steps: Vec<usize>,
    image_shape: [usize; 3],
    token_count: usize,
    dim: usize,
    res_layers: Vec<usize>,
    attn_layers: Vec<usize>,
    has_final_latent: bool,
    provenance: TrajectoryProvenance,
}

/// Analytic payload size for the accounting tests: latent mode stores one
/// latent per step (plus the optional final latent); feature mode stores the
/// initial latent plus, per step, one `[tokens, dim]` array per residual
/// layer and two per attention layer.
pub fn expected_payload_bytes(
    mode: CaptureMode,
    n_steps: usize,
    image_elems: usize,
    token_count: usize,
    dim: usize,
    n_res_layers: usize,
    n_attn_layers: usize,
    has_final_latent: bool,
) -> usize {
    let fin = if has_final_latent { image_elems } else { 0 };
    let floats = match mode {
        CaptureMode::Latent => n_steps * image_elems + fin,
        CaptureMode::Feature => {
            image_elems + n_steps * (n_res_layers + 2 * n_attn_layers) * token_count * dim + fin
        }
    };
    floats * 4
}

impl Trajectory {
    fn token_geometry(&self) -> (usize, usize) {
        match self.mode {
            CaptureMode::Latent => (0, 0),
            CaptureMode::Feature => {
                let any = self
                    .features
                    .first()
                    .and_then(|f| f.f.values().chain(f.q.values()).next());
                match any {
                    Some(t) => (t.shape()[0], t.shape()[1]),
                    None => (0, 0),
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (token_count, dim) = self.token_geometry();
        let header = TrajectoryFileHeader {
            version: 1,
            mode: self.mode,
            steps: self.steps.clone(),
            image_shape: self.image_shape,
            token_count,
            dim,
            res_layers: self.res_layers.iter().copied().collect(),
            attn_layers: self.attn_layers.iter().copied().collect(),
            has_final_latent: self.final_latent.is_some(),
            provenance: self.provenance.clone(),
        };
        let header = toml::to_string(&header)
            .map_err(|e| Error::Format(format!("trajectory header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(TRAJ_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut push = |t: &Tensor<f32>| {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match self.mode {
            CaptureMode::Latent => {
                for z in &self.latents {
                    push(z);
                }
            }
            CaptureMode::Feature => {
                push(self.init_latent.as_ref().expect("feature mode"));
                for f in &self.features {
                    // per step: ascending layer order, f then q then k per layer
                    for l in self.res_layers.iter() {
                        push(&f.f[l]);
                    }
                    for l in self.attn_layers.iter() {
                        push(&f.q[l]);
                        push(&f.k[l]);
                    }
                }
            }
        }
        if let Some(z) = &self.final_latent {
            push(z);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("trajectory: file shorter than its preamble".into()));
        }
        if &bytes[0..4] != TRAJ_MAGIC {
            return Err(Error::Format(format!(
                "trajectory: bad magic {:?}, expected \"DTRJ\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::Format("trajectory: truncated header".into()));
        }
        let header: TrajectoryFileHeader =
            toml::from_str(std::str::from_utf8(&bytes[8..8 + header_len]).map_err(|_| {
                Error::Format("trajectory: header is not utf-8".into())
            })?)
            .map_err(|e| Error::Format(format!("trajectory header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Format(format!(
                "trajectory: unsupported version {}",
                header.version
            )));
        }
        let [c, h, w] = header.image_shape;
        let image_elems = c * h * w;
        let expected = expected_payload_bytes(
            header.mode,
            header.steps.len(),
            image_elems,
            header.token_count,
            header.dim,
            header.res_layers.len(),
            header.attn_layers.len(),
            header.has_final_latent,
        );
        let payload = &bytes[8 + header_len..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "trajectory payload: expected {expected} bytes, got {}",
                payload.len()
            )));
        }
        let mut off = 0usize;
        let mut take = |shape: Vec<usize>| -> Tensor<f32> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            Tensor::new(shape, data).expect("sized")
        };
        let res_layers: BTreeSet<usize> = header.res_layers.iter().copied().collect();
        let attn_layers: BTreeSet<usize> = header.attn_layers.iter().copied().collect();
        let (mut latents, mut features, mut init_latent) = (Vec::new(), Vec::new(), None);
        match header.mode {
            CaptureMode::Latent => {
                for _ in 0..header.steps.len() {
                    latents.push(take(vec![c, h, w]));
                }
            }
            CaptureMode::Feature => {
                init_latent = Some(take(vec![c, h, w]));
                for _ in 0..header.steps.len() {
                    let mut sf = SourceFeatures::default();
                    for &l in &res_layers {
                        sf.f.insert(l, take(vec![header.token_count, header.dim]));
                    }
                    for &l in &attn_layers {
                        sf.q.insert(l, take(vec![header.token_count, header.dim]));
                        sf.k.insert(l, take(vec![header.token_count, header.dim]));
                    }
                    features.push(sf);
                }
            }
        }
        let final_latent = header.has_final_latent.then(|| take(vec![c, h, w]));
        Ok(Trajectory {
            mode: header.mode,
            steps: header.steps,
            image_shape: header.image_shape,
            latents,
            init_latent,
            features,
            res_layers,
            attn_layers,
            final_latent,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trajectory::from_bytes(&std::fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// The denoising loop with injection
// ---------------------------------------------------------------------------

/// Runs the target model's guided denoising loop over a captured source
/// trajectory and returns the decoded image latent.
///
/// The loop starts from the trajectory's top latent. At each step the source
/// state — re-forwarded stored latents under the null condition (latent
/// mode), or stored activations (feature mode) — is blended into the pos/neg
/// streams per mask wherever the step's threshold gate is open; the combined
/// guidance noise then advances the target latent by one DDIM step.
pub fn ditail(
    traj: &Trajectory,
    p_pos: &str,
    p_neg: &str,
    target: &DenoiserModel<f32>,
    config: &InjectionConfig,
) -> Result<Tensor<f32>> {
    config.validate(target.config())?;
    let sched = target.schedule();
    if traj.provenance.schedule_hash != schedule_hash(sched) {
        return Err(Error::Provenance(format!(
            "trajectory schedule {} vs target schedule {}",
            &traj.provenance.schedule_hash[..12.min(traj.provenance.schedule_hash.len())],
            &schedule_hash(sched)[..12]
        )));
    }
    if traj.steps() != sched.sample_steps() {
        return Err(Error::Provenance("trajectory steps differ from target schedule".into()));
    }
    if traj.image_shape().to_vec() != target.config().image_shape() {
        return Err(Error::Dimension("trajectory latent shape differs from target".into()));
    }
    if config.mode != traj.mode() {
        return Err(Error::Usage(format!(
            "configured capture mode {:?} but the trajectory is {:?}",
            config.mode,
            traj.mode()
        )));
    }
    if traj.mode() == CaptureMode::Feature {
        if !config.residual_layers.is_subset(traj.res_layers()) {
            return Err(Error::Config(
                "feature trajectory lacks required residual layers".into(),
            ));
        }
        if !config.attention_layers.is_subset(traj.attn_layers()) {
            return Err(Error::Config(
                "feature trajectory lacks required attention layers".into(),
            ));
        }
    }

    let b = conditioner::bundle(p_pos, p_neg, 1.0, 0.0, target.vocab())?;
    let token_mask = config.mask.token_mask(target.config().patch)?;
    let steps = traj.steps();
    let total = steps.len();
    let mask_zero = config.mask.is_zero();

    let mut z = traj.initial_latent().clone();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let res_on = should_inject(i, total, InjectionKind::Residual, config)
            && !config.residual_layers.is_empty();
        let attn_on = should_inject(i, total, InjectionKind::Attention, config)
            && !config.attention_layers.is_empty();

        let (eps_pos, eps_neg) = if (!res_on && !attn_on) || mask_zero {
            // no injection work this step: plain pair of forwards
            let (p, _) = crate::denoiser::predict_noise(target, &z, t, &b.e_pos, false)?;
            let (n, _) = crate::denoiser::predict_noise(target, &z, t, &b.e_neg, false)?;
            (p, n)
        } else {
            match traj.mode() {
                CaptureMode::Latent => {
                    let z_src = traj.latent_at(i)?.clone();
                    let hooks = BatchedInjection {
                        res_layers: &config.residual_layers,
                        attn_layers: &config.attention_layers,
                        res_active: res_on,
                        attn_active: attn_on,
                        token_mask: &token_mask,
                    };
                    let ([_, p, n], _) = forward_batched3(
                        target,
                        &[z_src, z.clone(), z.clone()],
                        t,
                        [&b.n, &b.e_pos, &b.e_neg],
                        Some(&hooks),
                        false,
                    )?;
                    (p, n)
                }
                CaptureMode::Feature => {
                    let hooks = InjectionHooks {
                        res_layers: &config.residual_layers,
                        attn_layers: &config.attention_layers,
                        res_active: res_on,
                        attn_active: attn_on,
                        token_mask: &token_mask,
                        src: traj.features_at(i)?,
                    };
                    forward_pair_injected(target, &z, t, &b.e_pos, &b.e_neg, &hooks)?
                }
            }
        };
        let eps = guidance_combine(&eps_pos, &eps_neg, config.omega)?;
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}

/// Provenance constructor shared by the capture paths.
pub fn trajectory_provenance(
    model: &DenoiserModel<f32>,
    prompt_pos: &str,
    prompt_neg: &str,
    seed: u64,
    omega: f64,
) -> TrajectoryProvenance {
    TrajectoryProvenance {
        model_hash: model.identity_hash(),
        schedule_hash: schedule_hash(model.schedule()),
        prompt_pos: prompt_pos.to_string(),
        prompt_neg: prompt_neg.to_string(),
        seed,
        omega,
    }
}

/// Stable id for reports: first 12 hex chars of the hash of a trajectory's
/// serialized bytes.
pub fn trajectory_id(traj: &Trajectory) -> Result<String> {
    Ok(sha256_hex(&traj.to_bytes()?)[..12].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::rng::Rng;
    use crate::schedule::Schedule;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> DenoiserModel<f32> {
        let cfg =
            ModelConfig { layers: 2, dim: 16, patch: 4, image_size: 8, channels: 3, cond_dim: 32 };
        let sched = Schedule::new(100, 1e-4, 2e-2, 10).unwrap();
        DenoiserModel::init(cfg, sched, crate::conditioner::Vocabulary::standard(1), seed).unwrap()
    }

    fn small_config(m: &DenoiserModel<f32>) -> InjectionConfig {
        InjectionConfig::default_for(m.config())
    }

    fn rand_tokens(seed: u64) -> Tensor<f32> {
        Tensor::randn(vec![4, 16], &mut Rng::new(seed))
    }

    #[test]
    fn res_blend_mask_extremes() {
        let (s, p, n) = (rand_tokens(1), rand_tokens(2), rand_tokens(3));
        let ones = Tensor::full(vec![4], 1.0f32);
        let zeros = Tensor::zeros(vec![4]);
        let (bp, bn) = inj_forward_res(&s, &p, &n, &ones).unwrap();
        assert_eq!(bp, s);
        assert_eq!(bn, s);
        let (bp, bn) = inj_forward_res(&s, &p, &n, &zeros).unwrap();
        assert_eq!(bp, p);
        assert_eq!(bn, n);
    }

    #[test]
    fn res_blend_midpoint_matches_average_oracle() {
        let (s, p, n) = (rand_tokens(4), rand_tokens(5), rand_tokens(6));
        let half = Tensor::full(vec![4], 0.5f32);
        let (bp, _) = inj_forward_res(&s, &p, &n, &half).unwrap();
        for i in 0..bp.len() {
            let want = (s.data()[i] + p.data()[i]) / 2.0;
            assert_eq!(bp.data()[i], want);
        }
    }

    #[test]
    fn attn_blend_replaces_q_and_k_only() {
        let (qs, qp, qn) = (rand_tokens(7), rand_tokens(8), rand_tokens(9));
        let (ks, kp, kn) = (rand_tokens(10), rand_tokens(11), rand_tokens(12));
        let ones = Tensor::full(vec![4], 1.0f32);
        let ((bqp, bkp), (bqn, bkn)) =
            inj_forward_attn(&qs, &qp, &qn, &ks, &kp, &kn, &ones).unwrap();
        assert_eq!(bqp, qs);
        assert_eq!(bkp, ks);
        assert_eq!(bqn, qs);
        assert_eq!(bkn, ks);
    }

    #[test]
    fn guidance_identities_exact() {
        let p = rand_tokens(13);
        let n = rand_tokens(14);
        assert_eq!(guidance_combine(&p, &n, 1.0).unwrap(), p);
        assert_eq!(guidance_combine(&p, &n, 0.0).unwrap(), n);
        // equal inputs: omega-independent
        let a = guidance_combine(&p, &p, 0.3).unwrap();
        let b = guidance_combine(&p, &p, 15.0).unwrap();
        assert_eq!(a, p);
        assert_eq!(b, p);
    }

    #[test]
    fn guidance_matches_scalar_oracle_at_paper_settings() {
        let p = rand_tokens(15);
        let n = rand_tokens(16);
        for omega in [7.5, 15.0] {
            let out = guidance_combine(&p, &n, omega).unwrap();
            for i in 0..out.len() {
                let want =
                    n.data()[i] as f64 + omega * (p.data()[i] as f64 - n.data()[i] as f64);
                assert!((out.data()[i] as f64 - want).abs() <= want.abs().max(1.0) * 1e-6);
            }
        }
    }

    #[test]
    fn guidance_chunk_permutation_identity() {
        let p = rand_tokens(17);
        let n = rand_tokens(18);
        for omega in [0.0, 0.25, 1.0, 7.5] {
            let a = guidance_combine(&p, &n, omega).unwrap();
            let b = guidance_combine(&n, &p, 1.0 - omega).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn threshold_table_at_fifty_steps() {
        let m = small_model(1);
        let mut cfg = small_config(&m);
        cfg.thresh_res_frac = 0.8;
        cfg.thresh_attn_frac = 0.5;
        let total = 50;
        let res: Vec<usize> = (0..total)
            .filter(|&i| should_inject(i, total, InjectionKind::Residual, &cfg))
            .collect();
        let attn: Vec<usize> = (0..total)
            .filter(|&i| should_inject(i, total, InjectionKind::Attention, &cfg))
            .collect();
        // countdown t = 50 - i; residual active while t > 40, attention t > 25
        assert_eq!(res, (0..10).collect::<Vec<_>>());
        assert_eq!(attn, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_fraction_one_never_fires() {
        let m = small_model(2);
        let mut cfg = small_config(&m);
        cfg.thresh_res_frac = 1.0;
        for i in 0..50 {
            assert!(!should_inject(i, 50, InjectionKind::Residual, &cfg));
        }
    }

    #[test]
    fn mask_downsample_is_area_maximum() {
        let mut px = Tensor::zeros(vec![8, 8]);
        px.data_mut()[2 * 8 + 3] = 0.7; // inside patch (0,0)
        px.data_mut()[5 * 8 + 6] = 0.2; // inside patch (1,1)
        let mask = InjectionMask::from_pixels(px).unwrap();
        let tok = mask.token_mask(4).unwrap();
        assert_eq!(tok.data(), &[0.7, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn mask_clamps_and_represents_extremes() {
        let px = Tensor::new(vec![1, 3], vec![-0.5, 0.5, 1.5]).unwrap();
        let mask = InjectionMask::from_pixels(px).unwrap();
        assert_eq!(mask.pixels().data(), &[0.0, 0.5, 1.0]);
        assert!(InjectionMask::zero(4, 4).is_zero());
        assert!(!InjectionMask::full(4, 4).is_zero());
    }

    fn toy_latent_traj(m: &DenoiserModel<f32>, seed: u64) -> Trajectory {
        let steps = m.schedule().sample_steps().to_vec();
        let mut rng = Rng::new(seed);
        let latents: Vec<Tensor<f32>> =
            steps.iter().map(|_| Tensor::randn(m.config().image_shape(), &mut rng)).collect();
        Trajectory::from_latents(
            steps,
            latents,
            None,
            trajectory_provenance(m, "", "", seed, 7.5),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_file_round_trip_latent_and_feature() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model(3);
        let traj = toy_latent_traj(&m, 21);
        let p = dir.path().join("t.dtrj");
        traj.save(&p).unwrap();
        let back = Trajectory::load(&p).unwrap();
        assert_eq!(back.steps(), traj.steps());
        assert_eq!(back.provenance, traj.provenance);
        for i in 0..traj.steps().len() {
            assert_eq!(back.latent_at(i).unwrap(), traj.latent_at(i).unwrap());
        }
        // feature mode round trip
        let res: BTreeSet<usize> = [0].into();
        let attn: BTreeSet<usize> = [0, 1].into();
        let ft = traj.to_feature_mode(&m, &res, &attn).unwrap();
        let p2 = dir.path().join("f.dtrj");
        ft.save(&p2).unwrap();
        let back = Trajectory::load(&p2).unwrap();
        assert_eq!(back.mode(), CaptureMode::Feature);
        assert_eq!(back.initial_latent(), ft.initial_latent());
        for i in 0..ft.steps().len() {
            let (a, b) = (back.features_at(i).unwrap(), ft.features_at(i).unwrap());
            assert_eq!(a.f, b.f);
            assert_eq!(a.q, b.q);
            assert_eq!(a.k, b.k);
        }
        // byte-level determinism
        assert_eq!(ft.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn trajectory_sizes_match_analytic_formula() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model(4);
        let traj = toy_latent_traj(&m, 22);
        let p = dir.path().join("t.dtrj");
        traj.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = bytes.len() - 8 - header_len;
        assert_eq!(
            payload,
            expected_payload_bytes(CaptureMode::Latent, 10, 3 * 8 * 8, 0, 0, 0, 0, false)
        );
        let res: BTreeSet<usize> = [0].into();
        let attn: BTreeSet<usize> = [0, 1].into();
        let ft = traj.to_feature_mode(&m, &res, &attn).unwrap();
        let p2 = dir.path().join("f.dtrj");
        ft.save(&p2).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = bytes.len() - 8 - header_len;
        assert_eq!(
            payload,
            expected_payload_bytes(CaptureMode::Feature, 10, 3 * 8 * 8, 4, 16, 1, 2, false)
        );
        // the paper's direction: latent storage is the smaller of the two
        assert!(
            expected_payload_bytes(CaptureMode::Latent, 10, 3 * 8 * 8, 4, 16, 1, 2, false)
                < expected_payload_bytes(CaptureMode::Feature, 10, 3 * 8 * 8, 4, 16, 1, 2, false)
        );
    }

    #[test]
    fn trajectory_truncation_detected() {
        let m = small_model(5);
        let traj = toy_latent_traj(&m, 23);
        let mut bytes = traj.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        match Trajectory::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("expected"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn ditail_rejects_schedule_mismatch() {
        let m = small_model(6);
        let other = m.with_sample_count(5).unwrap();
        let traj = toy_latent_traj(&m, 24);
        let cfg = small_config(&other);
        match ditail(&traj, "", "", &other, &cfg) {
            Err(Error::Provenance(_)) => {}
            other => panic!("expected provenance error, got {other:?}"),
        }
    }

    #[test]
    fn ditail_feature_mode_requires_layers() {
        let m = small_model(7);
        let traj = toy_latent_traj(&m, 25);
        let res: BTreeSet<usize> = [0].into();
        let attn: BTreeSet<usize> = [0].into();
        let ft = traj.to_feature_mode(&m, &res, &attn).unwrap();
        let mut cfg = small_config(&m).with_mode(CaptureMode::Feature);
        cfg.residual_layers = [0].into();
        cfg.attention_layers = [0, 1].into(); // layer 1 not captured
        match ditail(&ft, "", "", &m, &cfg) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn ditail_runs_deterministically() {
        let m = small_model(8);
        let traj = toy_latent_traj(&m, 26);
        let cfg = small_config(&m);
        let a = ditail(&traj, "red circle", "", &m, &cfg).unwrap();
        let b = ditail(&traj, "red circle", "", &m, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn threshold_monotonic_in_fraction(
            frac_lo in 0.0f64..1.0,
            bump in 0.0f64..0.5,
            total in 1usize..80,
        ) {
            let m = small_model(9);
            let mut lo_cfg = small_config(&m);
            lo_cfg.thresh_res_frac = frac_lo;
            let mut hi_cfg = small_config(&m);
            hi_cfg.thresh_res_frac = (frac_lo + bump).min(1.0);
            let count = |cfg: &InjectionConfig| {
                (0..total)
                    .filter(|&i| should_inject(i, total, InjectionKind::Residual, cfg))
                    .count()
            };
            prop_assert!(count(&hi_cfg) <= count(&lo_cfg));
        }

        #[test]
        fn blend_stays_between_inputs(seed in 0u64..200, mval in 0.0f32..=1.0) {
            let s = rand_tokens(seed);
            let x = rand_tokens(seed + 1);
            let mask = Tensor::full(vec![4], mval);
            let out = masked_lerp(&s, &x, &mask).unwrap();
            for i in 0..out.len() {
                let (lo, hi) = if s.data()[i] < x.data()[i] {
                    (s.data()[i], x.data()[i])
                } else {
                    (x.data()[i], s.data()[i])
                };
                prop_assert!(out.data()[i] >= lo - 1e-6 && out.data()[i] <= hi + 1e-6);
            }
        }
    }
}
