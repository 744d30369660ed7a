//! Procedural styled-image datasets and the SGD trainer that turns the base
//! architecture into a family of same-architecture, different-style models.
//!
//! Rendering is a pure function of (style, content parameters, size); content
//! parameters are drawn from per-sample derived streams so a dataset is fully
//! determined by its seed. Training minimizes the standard noise-prediction
//! objective || eps - eps_hat(z_t, t, c) ||^2 with plain fixed-rate SGD; all
//! stochastic choices are derived from (run seed, step index), so identical
//! inputs reproduce identical checkpoints bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::encode_prompt;
use crate::denoiser::{DenoiserModel, ParamVars, TrainingProvenance};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::forward_diffuse;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Mini-batch size of one SGD step.
pub const TRAIN_BATCH: usize = 4;
/// Dataset size a fine-tune renders per style.
pub const SAMPLES_PER_STYLE: usize = 512;
/// Default optimization settings of the shipped family.
pub const DEFAULT_TRAIN_STEPS: u64 = 3000;
pub const DEFAULT_LR: f64 = 1e-3;

const DATAGEN_DOMAIN: u64 = 0xD17A_0001;
const TRAIN_DOMAIN: u64 = 0xD17A_0002;

// ---------------------------------------------------------------------------
// Styles and rendering
// ---------------------------------------------------------------------------

/// Fill rule of a style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleKind {
    Filled,
    Outline,
    Stripes,
    Checker,
}

/// A renderable style: fill rule, palette, background and stroke parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub kind: StyleKind,
    /// Color words drawn for the shape; all must be vocabulary colors.
    pub palette: Vec<String>,
    /// Background gray level in [0, 1].
    pub background: f32,
    /// Gray level of the non-color cells of stripes/checker fills.
    pub secondary: f32,
    /// Outline band width in pixels.
    pub stroke_width: f32,
    /// Stripe/checker cell edge in pixels.
    pub cell: usize,
}

fn chromatic_palette() -> Vec<String> {
    ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl StyleSpec {
    pub fn filled() -> Self {
        StyleSpec {
            kind: StyleKind::Filled,
            palette: chromatic_palette(),
            background: 0.82,
            secondary: 0.93,
            stroke_width: 1.6,
            cell: 3,
        }
    }

    pub fn outline() -> Self {
        StyleSpec {
            kind: StyleKind::Outline,
            palette: chromatic_palette(),
            background: 0.96,
            secondary: 0.93,
            stroke_width: 1.8,
            cell: 3,
        }
    }

    pub fn stripes() -> Self {
        StyleSpec {
            kind: StyleKind::Stripes,
            palette: chromatic_palette(),
            background: 0.70,
            secondary: 0.25,
            stroke_width: 1.6,
            cell: 3,
        }
    }

    pub fn checker() -> Self {
        StyleSpec {
            kind: StyleKind::Checker,
            palette: chromatic_palette(),
            background: 0.58,
            secondary: 0.95,
            stroke_width: 1.6,
            cell: 3,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "filled" => Ok(StyleSpec::filled()),
            "outline" => Ok(StyleSpec::outline()),
            "stripes" => Ok(StyleSpec::stripes()),
            "checker" => Ok(StyleSpec::checker()),
            other => Err(Error::Config(format!(
                "unknown style {other:?} (expected filled|outline|stripes|checker)"
            ))),
        }
    }

    pub fn style_word(&self) -> &'static str {
        match self.kind {
            StyleKind::Filled => "filled",
            StyleKind::Outline => "outline",
            StyleKind::Stripes => "stripes",
            StyleKind::Checker => "checker",
        }
    }
}

/// RGB of the vocabulary's color words, in [0, 1].
pub fn named_color(word: &str) -> Option<[f32; 3]> {
    Some(match word {
        "red" => [0.85, 0.10, 0.10],
        "green" => [0.10, 0.75, 0.15],
        "blue" => [0.12, 0.25, 0.85],
        "yellow" => [0.90, 0.85, 0.10],
        "cyan" => [0.10, 0.80, 0.85],
        "magenta" => [0.85, 0.10, 0.80],
        "orange" => [0.95, 0.55, 0.10],
        "purple" => [0.55, 0.15, 0.80],
        "white" => [0.95, 0.95, 0.95],
        "black" => [0.08, 0.08, 0.08],
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Point-inside test at radius `r`, with (dx, dy) relative to center.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs().max(dy.abs()) <= 0.82 * r,
            Shape::Triangle => {
                // upward triangle: apex (0, -r), base at y = 0.65 r
                let (ax, ay) = (0.0, -r);
                let (bx, by) = (-0.9 * r, 0.65 * r);
                let (cx, cy) = (0.9 * r, 0.65 * r);
                let sign = |x1: f32, y1: f32, x2: f32, y2: f32| {
                    (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Content parameters of one rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub shape: Shape,
    pub color_word: String,
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
}

/// Rasterizes a shape in a style; pure in all arguments. Output is a
/// `[3, size, size]` tensor in [-1, 1].
pub fn render(style: &StyleSpec, content: &ShapeParams, size: usize) -> Result<Tensor<f32>> {
    let color = named_color(&content.color_word)
        .ok_or_else(|| Error::Config(format!("style palette: {:?}", content.color_word)))?;
    let secondary = [style.secondary; 3];
    let bg = [style.background; 3];
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - content.cx;
            let dy = y as f32 + 0.5 - content.cy;
            let inside = content.shape.contains(dx, dy, content.r);
            let px = if !inside {
                bg
            } else {
                match style.kind {
                    StyleKind::Filled => color,
                    StyleKind::Outline => {
                        let inner = (content.r - style.stroke_width).max(0.0);
                        if content.shape.contains(dx, dy, inner) {
                            bg
                        } else {
                            color
                        }
                    }
                    StyleKind::Stripes => {
                        if (x / style.cell) % 2 == 0 {
                            color
                        } else {
                            secondary
                        }
                    }
                    StyleKind::Checker => {
                        if (x / style.cell + y / style.cell) % 2 == 0 {
                            color
                        } else {
                            secondary
                        }
                    }
                }
            };
            for c in 0..3 {
                data[c * plane + y * size + x] = px[c] * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// One dataset entry.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub caption: String,
}

/// Renders `n` deterministic samples: random shape, palette color, position
/// and scale within margins, captioned "color shape style-word".
pub fn datagen(
    style: &StyleSpec,
    n: usize,
    size: usize,
    seed: u64,
    patch: usize,
) -> Result<Vec<Sample>> {
    if patch == 0 || size % patch != 0 {
        return Err(Error::Config(format!("datagen: size {size} not divisible by patch {patch}")));
    }
    if style.palette.is_empty() {
        return Err(Error::Config("datagen: empty palette".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::derive(seed ^ DATAGEN_DOMAIN, i as u64);
        let params = sample_params(style, size, &mut rng);
        let image = render(style, &params, size)?;
        let caption = format!("{} {} {}", params.color_word, params.shape.word(), style.style_word());
        out.push(Sample { image, caption });
    }
    Ok(out)
}

fn sample_params(style: &StyleSpec, size: usize, rng: &mut Rng) -> ShapeParams {
    let shape = match rng.next_below(3) {
        0 => Shape::Circle,
        1 => Shape::Square,
        _ => Shape::Triangle,
    };
    let color_word = style.palette[rng.next_below(style.palette.len() as u64) as usize].clone();
    let s = size as f32;
    let r = (0.20 + 0.13 * rng.next_uniform() as f32) * s;
    let margin = r + 1.0;
    let cx = margin + (s - 2.0 * margin) * rng.next_uniform() as f32;
    let cy = margin + (s - 2.0 * margin) * rng.next_uniform() as f32;
    ShapeParams { shape, color_word, cx, cy, r }
}

// ---------------------------------------------------------------------------
// Dataset directory format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub style: StyleSpec,
    pub seed: u64,
    pub size: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub caption: String,
}

/// Writes one PPM per sample plus `manifest.toml`.
pub fn save_dataset(
    dir: &Path,
    samples: &[Sample],
    style: &StyleSpec,
    seed: u64,
    size: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:04}.ppm");
        crate::codec::write_image(&dir.join(&file), &s.image)?;
        entries.push(ManifestEntry { file, caption: s.caption.clone() });
    }
    let manifest =
        DatasetManifest { style: style.clone(), seed, size, samples: entries };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    crate::codec::atomic_write(&dir.join("manifest.toml"), text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = crate::codec::read_image(&dir.join(&e.file))?;
        samples.push(Sample { image, caption: e.caption.clone() });
    }
    Ok((samples, manifest))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Loss trace of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// (step, batch loss) at step 0, every 50 steps, and the final step.
    pub entries: Vec<(u64, f64)>,
}

/// One training item: clean image, timestep, corruption noise, condition.
struct BatchItem<T: Scalar> {
    z0: Tensor<T>,
    t: usize,
    eps: Tensor<T>,
    c: Tensor<T>,
}

/// Records the batch's mean noise-prediction loss on the tape.
fn denoising_loss_on_tape<T: Scalar>(
    model: &DenoiserModel<T>,
    tape: &mut Tape<T>,
    params: &ParamVars,
    items: &[BatchItem<T>],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for item in items {
        let z_t = forward_diffuse(&item.z0, item.t, &item.eps, model.schedule())?;
        let eps_hat = model.forward_on_tape(tape, params, &z_t, item.t, &item.c)?;
        let target = tape.leaf(item.eps.clone(), false);
        let diff = tape.sub(eps_hat, target)?;
        let l = tape.mean_sq(diff)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let total = acc.ok_or_else(|| Error::Training("empty batch".into()))?;
    tape.scale(total, T::from_f64(1.0 / items.len() as f64))
}

fn draw_batch<T: Scalar>(
    model: &DenoiserModel<T>,
    data: &[Sample],
    rng: &mut Rng,
) -> Result<Vec<BatchItem<T>>> {
    let t_train = model.schedule().t_train();
    let shape = model.config().image_shape();
    let mut items = Vec::with_capacity(TRAIN_BATCH);
    for _ in 0..TRAIN_BATCH {
        let sample = &data[rng.next_below(data.len() as u64) as usize];
        if sample.image.shape() != shape.as_slice() {
            return Err(Error::Training(format!(
                "sample shape {:?} vs model {:?}",
                sample.image.shape(),
                shape
            )));
        }
        let t = 1 + rng.next_below(t_train as u64) as usize;
        let eps = Tensor::<T>::randn(shape.clone(), rng);
        let c = encode_prompt(&sample.caption, model.vocab())?.map(|v| T::from_f64(v as f64));
        items.push(BatchItem { z0: sample.image.map(|v| T::from_f64(v as f64)), t, eps, c });
    }
    Ok(items)
}

/// SGD over the denoising objective; returns the updated model and its loss
/// log. `steps = 0` returns the model unchanged.
pub fn train(
    model: &DenoiserModel<f32>,
    data: &[Sample],
    steps: u64,
    lr: f64,
    seed: u64,
) -> Result<(DenoiserModel<f32>, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    if lr <= 0.0 {
        return Err(Error::Training(format!("learning rate must be positive, got {lr}")));
    }
    let mut model = model.clone();
    let mut log = TrainLog::default();
    for step in 0..steps {
        let mut rng = Rng::derive(seed ^ TRAIN_DOMAIN, step);
        let items = draw_batch(&model, data, &mut rng)?;
        let mut tape = Tape::new();
        let params = model.register_params(&mut tape);
        let loss = denoising_loss_on_tape(&model, &mut tape, &params, &items)?;
        let loss_value = loss_scalar(&tape, loss);
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        if step == 0 || step % 50 == 0 || step + 1 == steps {
            log.entries.push((step, loss_value));
        }
        let grads = tape.backward(loss)?;
        model.apply_gradients(&grads, &params, lr)?;
    }
    Ok((model, log))
}

fn loss_scalar<T: Scalar>(tape: &Tape<T>, loss: Var) -> f64 {
    tape.value(loss).data()[0].to_f64()
}

/// Evaluates the batch loss without recording gradients; test/refresh helper.
pub fn batch_loss(
    model: &DenoiserModel<f32>,
    data: &[Sample],
    seed: u64,
    step: u64,
) -> Result<f64> {
    let mut rng = Rng::derive(seed ^ TRAIN_DOMAIN, step);
    let items = draw_batch(model, data, &mut rng)?;
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape);
    let loss = denoising_loss_on_tape(model, &mut tape, &params, &items)?;
    Ok(loss_scalar(&tape, loss))
}

/// Fine-tunes a base model on a style: renders [`SAMPLES_PER_STYLE`] samples
/// of the style at the model's image size, trains, and records provenance.
pub fn finetune(
    base: &DenoiserModel<f32>,
    style: &StyleSpec,
    steps: u64,
    lr: f64,
    seed: u64,
) -> Result<(DenoiserModel<f32>, TrainLog)> {
    let size = base.config().image_size;
    let data = datagen(style, SAMPLES_PER_STYLE, size, seed, base.config().patch)?;
    let (mut model, log) = train(base, &data, steps, lr, seed)?;
    model.set_provenance(TrainingProvenance {
        kind: "finetune".into(),
        base_hash: Some(base.identity_hash()),
        style: Some(style.style_word().into()),
        steps: Some(steps),
        lr: Some(lr),
        seed: Some(seed),
        data_seed: Some(seed ^ DATAGEN_DOMAIN),
    });
    Ok((model, log))
}
