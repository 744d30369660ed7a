//! Deterministic desk-scale evaluation metrics.
//!
//! Three axes, mirroring the usual prompt-compliance / structure / style
//! split but with no pretrained networks anywhere:
//!
//! * [`compliance_score`] — cosine between a prompt embedding and the image's
//!   descriptor projected into embedding space by a fixed co-embedding matrix
//!   built from per-word descriptor prototypes (colors map to histogram
//!   signatures, styles to edge-density signatures).
//! * [`structure_distance`] — Frobenius distance between the cosine-
//!   normalized self-similarity Gram matrices of self-attention keys, probed
//!   from a frozen model at a fixed timestep.
//! * [`frechet_distance`] — the Fréchet formula over sample mean/covariance
//!   of image descriptors, matrix square root by eigendecomposition of the
//!   symmetrized product.

use crate::conditioner::{encode_prompt, Vocabulary};
use crate::denoiser::{predict_noise, DenoiserModel};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::forward_diffuse;
use crate::tensor::{self, Tensor};
use crate::trainer::named_color;

/// Histogram bins per channel.
const HIST_BINS: usize = 8;
/// Descriptor layout: 3*8 histogram, 2 centroid, 3 second moments, 4 edges.
pub const DESCRIPTOR_LEN: usize = 3 * HIST_BINS + 2 + 3 + 4;
/// Fixed noise stream for the structure probe input.
const PROBE_NOISE_SEED: u64 = 0xD17A_11;

// ---------------------------------------------------------------------------
// Descriptor
// ---------------------------------------------------------------------------

/// Fixed-length image descriptor: per-channel color histogram, gradient
/// centroid, second central moments, and edge density per quadrant.
pub fn descriptor(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let [c, h, w] = tensor::dims3(image, "descriptor")?;
    if c != 3 || h < 3 || w < 3 {
        return Err(Error::Codec(format!("descriptor: unusable image shape {:?}", image.shape())));
    }
    let plane = h * w;
    let mut out = vec![0.0f64; DESCRIPTOR_LEN];

    // color histograms over [0, 1] values
    for ch in 0..3 {
        for i in 0..plane {
            let v01 = ((image.data()[ch * plane + i] as f64) + 1.0) / 2.0;
            let bin = ((v01 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            out[ch * HIST_BINS + bin] += 1.0 / plane as f64;
        }
    }

    // central-difference gradient magnitude of the luminance
    let lum = |x: usize, y: usize| -> f64 {
        let i = y * w + x;
        let sum = image.data()[i] as f64
            + image.data()[plane + i] as f64
            + image.data()[2 * plane + i] as f64;
        (sum / 3.0 + 1.0) / 2.0
    };
    let mut grad = vec![0.0f64; plane];
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (lum(x + 1, y) - lum(x - 1, y)) / 2.0;
            let gy = (lum(x, y + 1) - lum(x, y - 1)) / 2.0;
            let g = (gx * gx + gy * gy).sqrt();
            grad[y * w + x] = g;
            total += g;
        }
    }

    // gradient-mass centroid and second central moments, normalized
    let denom = total + 1e-9;
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            cx += g * x as f64;
            cy += g * y as f64;
        }
    }
    cx /= denom;
    cy /= denom;
    out[24] = cx / w as f64;
    out[25] = cy / h as f64;
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            mxx += g * dx * dx;
            myy += g * dy * dy;
            mxy += g * dx * dy;
        }
    }
    out[26] = mxx / (denom * (w * w) as f64);
    out[27] = myy / (denom * (h * h) as f64);
    out[28] = mxy / (denom * (w * h) as f64);

    // mean edge density per quadrant (row-major quadrant order)
    for (qi, (y0, x0)) in [(0, 0), (0, w / 2), (h / 2, 0), (h / 2, w / 2)].iter().enumerate() {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in *y0..(y0 + h / 2) {
            for x in *x0..(x0 + w / 2) {
                acc += grad[y * w + x];
                count += 1.0;
            }
        }
        out[29 + qi] = acc / count;
    }
    Ok(out)
}

/// Mean value per channel in [0, 1]; the dominant-hue summary used by the
/// color-edit checks.
pub fn channel_means(image: &Tensor<f32>) -> Result<[f64; 3]> {
    let [c, h, w] = tensor::dims3(image, "channel_means")?;
    if c != 3 {
        return Err(Error::Codec("channel_means: expected 3 channels".into()));
    }
    let plane = h * w;
    let mut out = [0.0f64; 3];
    for ch in 0..3 {
        let sum: f64 = image.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| ((v as f64) + 1.0) / 2.0)
            .sum();
        out[ch] = sum / plane as f64;
    }
    Ok(out)
}

/// Peak signal-to-noise ratio over the [-1, 1] value range (peak 2.0).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension("psnr: shape mismatch".into()));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(10.0 * (4.0 / mse.max(1e-20)).log10())
}

// ---------------------------------------------------------------------------
// Prompt compliance
// ---------------------------------------------------------------------------

/// Descriptor-space prototype of a word: what images described by that word
/// look like. Words without a visual signature have no prototype.
fn word_prototype(word: &str) -> Option<[f64; DESCRIPTOR_LEN]> {
    let mut proto = [0.0f64; DESCRIPTOR_LEN];
    if let Some(rgb) = named_color(word) {
        let mean = (rgb[0] as f64 + rgb[1] as f64 + rgb[2] as f64) / 3.0;
        for c in 0..3 {
            let dev = rgb[c] as f64 - mean;
            for b in 0..HIST_BINS {
                let center = (b as f64 + 0.5) / HIST_BINS as f64;
                proto[c * HIST_BINS + b] = 4.0 * dev * (center - 0.5);
            }
        }
        return Some(proto);
    }
    match word {
        "bright" | "dark" => {
            let sign = if word == "bright" { 1.0 } else { -1.0 };
            for c in 0..3 {
                for b in 0..HIST_BINS {
                    let center = (b as f64 + 0.5) / HIST_BINS as f64;
                    proto[c * HIST_BINS + b] = sign * (center - 0.5);
                }
            }
            Some(proto)
        }
        "filled" | "outline" | "stripes" | "checker" => {
            let weight = match word {
                "filled" => -0.6,
                "outline" => 0.1,
                _ => 0.5,
            };
            for q in 0..4 {
                proto[29 + q] = weight;
            }
            Some(proto)
        }
        _ => None,
    }
}

/// The fixed co-embedding matrix `[d_c, DESCRIPTOR_LEN]`: sum over words of
/// (embedding row) x (descriptor prototype). Seeded through the vocabulary's
/// embedding table.
fn projection_matrix(vocab: &Vocabulary) -> Result<Vec<f64>> {
    let d_c = vocab.d_c();
    let mut m = vec![0.0f64; d_c * DESCRIPTOR_LEN];
    for word in vocab.words() {
        let Some(proto) = word_prototype(word) else { continue };
        let row = vocab.row(word)?;
        for (i, &e) in row.data().iter().enumerate() {
            for (j, &p) in proto.iter().enumerate() {
                m[i * DESCRIPTOR_LEN + j] += e as f64 * p;
            }
        }
    }
    Ok(m)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine between the projected image descriptor and the prompt embedding,
/// in [-1, 1].
pub fn compliance_score(image: &Tensor<f32>, prompt: &str, vocab: &Vocabulary) -> Result<f64> {
    let e = encode_prompt(prompt, vocab)?;
    let d = descriptor(image)?;
    let m = projection_matrix(vocab)?;
    let d_c = vocab.d_c();
    let mut projected = vec![0.0f64; d_c];
    for (i, p) in projected.iter_mut().enumerate() {
        let row = &m[i * DESCRIPTOR_LEN..(i + 1) * DESCRIPTOR_LEN];
        *p = row.iter().zip(&d).map(|(a, b)| a * b).sum();
    }
    let e64: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
    Ok(cosine(&projected, &e64))
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

/// Self-similarity map of a designated probe layer's attention keys.
#[derive(Debug, Clone)]
pub struct StructureMap {
    /// Cosine Gram matrix `[tokens, tokens]`; symmetric, unit diagonal.
    gram: Vec<f64>,
    tokens: usize,
}

impl StructureMap {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }
}

/// Probe timestep: a tenth of the training discretization.
pub fn probe_timestep(model: &DenoiserModel<f32>) -> usize {
    (model.schedule().t_train() / 10).max(1)
}

/// The designated probe layer: the middle of the stack.
pub fn probe_layer(model: &DenoiserModel<f32>) -> usize {
    model.config().layers / 2
}

/// Extracts the key self-similarity map of an image under a frozen probe.
///
/// The image is diffused to `t_probe` with a fixed seeded noise draw (shared
/// by every call, so the metric stays a pure function of the image), then
/// forwarded under the null condition; the probe layer's key rows are
/// L2-normalized and their Gram matrix returned.
pub fn structure_map(
    image: &Tensor<f32>,
    probe: &DenoiserModel<f32>,
    t_probe: usize,
) -> Result<StructureMap> {
    if image.shape() != probe.config().image_shape().as_slice() {
        return Err(Error::Codec(format!(
            "structure: image {:?} vs probe grid {:?}",
            image.shape(),
            probe.config().image_shape()
        )));
    }
    let mut noise_rng = Rng::new(PROBE_NOISE_SEED);
    let eps = Tensor::randn(probe.config().image_shape(), &mut noise_rng);
    let z = forward_diffuse(image, t_probe, &eps, probe.schedule())?;
    let null = probe.vocab().null_embedding();
    let (_, taps) = predict_noise(probe, &z, t_probe, &null, true)?;
    let keys = &taps.expect("capture on").k[probe_layer(probe)];
    let (n, d) = tensor::dims2(keys, "structure keys")?;
    let mut rows = vec![0.0f64; n * d];
    for i in 0..n {
        let krow = &keys.data()[i * d..(i + 1) * d];
        let norm = krow.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt().max(1e-12);
        for j in 0..d {
            rows[i * d + j] = krow[j] as f64 / norm;
        }
    }
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for kidx in 0..d {
                acc += rows[i * d + kidx] * rows[j * d + kidx];
            }
            gram[i * n + j] = acc;
        }
    }
    Ok(StructureMap { gram, tokens: n })
}

/// Frobenius distance between the two images' structure maps, scaled by the
/// token count.
pub fn structure_distance(
    image_a: &Tensor<f32>,
    image_b: &Tensor<f32>,
    probe: &DenoiserModel<f32>,
    t_probe: usize,
) -> Result<f64> {
    let ma = structure_map(image_a, probe, t_probe)?;
    let mb = structure_map(image_b, probe, t_probe)?;
    if ma.tokens != mb.tokens {
        return Err(Error::Codec("structure: token grids differ".into()));
    }
    let mut acc = 0.0;
    for (a, b) in ma.gram.iter().zip(&mb.gram) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc.sqrt() / ma.tokens as f64)
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

/// Fréchet distance plus a flag recording covariance regularization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    pub regularized: bool,
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` over sample
/// statistics. Covariances are unbiased; sets smaller than `dim + 1` get an
/// `1e-6 I` ridge and set the `regularized` flag.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<FrechetResult> {
    let dim = match (set_a.first(), set_b.first()) {
        (Some(a), Some(b)) if a.len() == b.len() && !a.is_empty() => a.len(),
        _ => return Err(Error::Usage("frechet: empty sets or dimension mismatch".into())),
    };
    if set_a.iter().chain(set_b).any(|v| v.len() != dim) {
        return Err(Error::Usage("frechet: ragged descriptor set".into()));
    }
    let (mu_a, mut cov_a) = stats(set_a, dim);
    let (mu_b, mut cov_b) = stats(set_b, dim);
    let mut regularized = false;
    if set_a.len() <= dim {
        ridge(&mut cov_a, dim);
        regularized = true;
    }
    if set_b.len() <= dim {
        ridge(&mut cov_b, dim);
        regularized = true;
    }

    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr_a: f64 = (0..dim).map(|i| cov_a[i * dim + i]).sum();
    let tr_b: f64 = (0..dim).map(|i| cov_b[i * dim + i]).sum();

    // tr((S_a S_b)^1/2) via the symmetrized product: eigenvalues of
    // sqrt(S_a) S_b sqrt(S_a) are those of S_a S_b.
    let sqrt_a = sym_sqrt(&cov_a, dim);
    let mut inner = mat_mul(&sqrt_a, &mat_mul(&cov_b, &sqrt_a, dim), dim);
    symmetrize(&mut inner, dim);
    let eig = jacobi_eigenvalues(&inner, dim);
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let distance = (mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetResult { distance, regularized })
}

fn stats(set: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = set.len();
    let mut mu = vec![0.0f64; dim];
    for v in set {
        for (m, &x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; dim * dim];
    if n > 1 {
        for v in set {
            for i in 0..dim {
                let di = v[i] - mu[i];
                for j in 0..dim {
                    cov[i * dim + j] += di * (v[j] - mu[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for c in cov.iter_mut() {
            *c /= denom;
        }
    }
    (mu, cov)
}

fn ridge(cov: &mut [f64], dim: usize) {
    for i in 0..dim {
        cov[i * dim + i] += 1e-6;
    }
}

fn mat_mul(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let av = a[i * dim + k];
            for j in 0..dim {
                out[i * dim + j] += av * b[k * dim + j];
            }
        }
    }
    out
}

fn symmetrize(m: &mut [f64], dim: usize) {
    for i in 0..dim {
        for j in 0..i {
            let v = (m[i * dim + j] + m[j * dim + i]) / 2.0;
            m[i * dim + j] = v;
            m[j * dim + i] = v;
        }
    }
}

/// Symmetric PSD square root via Jacobi eigendecomposition.
fn sym_sqrt(a: &[f64], dim: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, dim);
    let mut out = vec![0.0f64; dim * dim];
    for k in 0..dim {
        let s = vals[k].max(0.0).sqrt();
        for i in 0..dim {
            let vik = vecs[i * dim + k];
            for j in 0..dim {
                out[i * dim + j] += s * vik * vecs[j * dim + k];
            }
        }
    }
    out
}

fn jacobi_eigenvalues(a: &[f64], dim: usize) -> Vec<f64> {
    jacobi_eigen(a, dim).0
}

/// Cyclic Jacobi rotations on a symmetric matrix; returns (values, column
/// eigenvectors). Deterministic sweep order.
fn jacobi_eigen(a: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; dim * dim];
    for i in 0..dim {
        v[i * dim + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                off += m[i * dim + j] * m[i * dim + j];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = m[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * dim + p];
                let aqq = m[q * dim + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let mkp = m[k * dim + p];
                    let mkq = m[k * dim + q];
                    m[k * dim + p] = c * mkp - s * mkq;
                    m[k * dim + q] = s * mkp + c * mkq;
                }
                for k in 0..dim {
                    let mpk = m[p * dim + k];
                    let mqk = m[q * dim + k];
                    m[p * dim + k] = c * mpk - s * mqk;
                    m[q * dim + k] = s * mpk + c * mqk;
                }
                for k in 0..dim {
                    let vkp = v[k * dim + p];
                    let vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..dim).map(|i| m[i * dim + i]).collect();
    (vals, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::Vocabulary;
    use crate::denoiser::ModelConfig;
    use crate::schedule::Schedule;
    use crate::trainer::{render, Shape, ShapeParams, StyleSpec};

    fn probe() -> DenoiserModel<f32> {
        let cfg =
            ModelConfig { layers: 2, dim: 16, patch: 4, image_size: 24, channels: 3, cond_dim: 32 };
        let sched = Schedule::new(100, 1e-4, 2e-2, 10).unwrap();
        DenoiserModel::init(cfg, sched, Vocabulary::standard(1), 5).unwrap()
    }

    fn red_circle(seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let params = ShapeParams {
            shape: Shape::Circle,
            color_word: "red".into(),
            cx: 8.0 + 8.0 * rng.next_uniform() as f32,
            cy: 8.0 + 8.0 * rng.next_uniform() as f32,
            r: 5.0 + 2.0 * rng.next_uniform() as f32,
        };
        render(&StyleSpec::filled(), &params, 24).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        let a = vec![1.0, 2.0, -3.0];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let b = vec![2.0, -1.0, 0.0];
        let c = vec![1.0, 2.0, 0.0];
        assert!(cosine(&b, &c).abs() < 1e-12);
    }

    #[test]
    fn compliance_prefers_matching_prompt_over_16_renders() {
        let vocab = Vocabulary::standard(7);
        let mut wins = 0;
        for seed in 0..16 {
            let img = red_circle(seed);
            let matching = compliance_score(&img, "red circle", &vocab).unwrap();
            let other = compliance_score(&img, "blue square", &vocab).unwrap();
            assert!((-1.0..=1.0).contains(&matching));
            if matching > other {
                wins += 1;
            }
        }
        assert_eq!(wins, 16, "matching prompt must dominate");
    }

    #[test]
    fn compliance_invariant_under_descriptor_scaling() {
        // cosine is scale-free in the projected descriptor; constructed case
        let d: Vec<f64> = (0..DESCRIPTOR_LEN).map(|i| (i as f64 * 0.37).sin()).collect();
        let d2: Vec<f64> = d.iter().map(|v| v * 2.0).collect();
        let e: Vec<f64> = (0..DESCRIPTOR_LEN).map(|i| (i as f64 * 0.11).cos()).collect();
        assert!((cosine(&d, &e) - cosine(&d2, &e)).abs() < 1e-12);
    }

    #[test]
    fn structure_distance_identity_and_symmetry() {
        let p = probe();
        let a = red_circle(1);
        let b = red_circle(2);
        let t = probe_timestep(&p);
        assert_eq!(structure_distance(&a, &a, &p, t).unwrap(), 0.0);
        let ab = structure_distance(&a, &b, &p, t).unwrap();
        let ba = structure_distance(&b, &a, &p, t).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn structure_map_is_normalized_gram() {
        let p = probe();
        let m = structure_map(&red_circle(3), &p, probe_timestep(&p)).unwrap();
        let n = m.tokens();
        for i in 0..n {
            assert!((m.gram()[i * n + i] - 1.0).abs() < 1e-9, "unit diagonal");
            for j in 0..n {
                assert!((m.gram()[i * n + j] - m.gram()[j * n + i]).abs() < 1e-12);
                assert!(m.gram()[i * n + j] <= 1.0 + 1e-9, "diagonal is maximal");
            }
        }
    }

    #[test]
    fn structure_triangle_inequality_on_random_triples() {
        let p = probe();
        let t = probe_timestep(&p);
        for seed in 0..20u64 {
            let a = red_circle(3 * seed);
            let b = red_circle(3 * seed + 1);
            let c = red_circle(3 * seed + 2);
            let ab = structure_distance(&a, &b, &p, t).unwrap();
            let bc = structure_distance(&b, &c, &p, t).unwrap();
            let ac = structure_distance(&a, &c, &p, t).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn structure_rejects_grid_mismatch() {
        let p = probe();
        let img = Tensor::zeros(vec![3, 8, 8]);
        assert!(matches!(
            structure_distance(&img, &img, &p, 5),
            Err(Error::Codec(_))
        ));
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let set: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.61).sin()).collect())
            .collect();
        let r = frechet_distance(&set, &set).unwrap();
        assert!(!r.regularized);
        assert!(r.distance.abs() < 1e-8, "distance {}", r.distance);
    }

    #[test]
    fn frechet_point_masses_give_delta_squared() {
        let delta = 0.75f64;
        let a: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0]).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|_| vec![delta]).collect();
        let r = frechet_distance(&a, &b).unwrap();
        assert!(!r.regularized);
        assert!((r.distance - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn frechet_small_sets_are_flagged_regularized() {
        let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 0.0, 0.0, 1.0]).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|i| vec![0.0, i as f64, 1.0, 0.0]).collect();
        let r = frechet_distance(&a, &b).unwrap();
        assert!(r.regularized);
        assert!(r.distance >= 0.0);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = Rng::new(9);
        let a: Vec<Vec<f64>> =
            (0..50).map(|_| (0..4).map(|_| rng.next_normal()).collect()).collect();
        let b: Vec<Vec<f64>> =
            (0..50).map(|_| (0..4).map(|_| rng.next_normal() + 0.3).collect()).collect();
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        assert!((ab - ba).abs() < 1e-9);
    }

    /// Independent oracle: matrix square root by Denman-Beavers iteration and
    /// the Fréchet formula assembled from scratch.
    mod oracle {
        pub fn frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            let dim = a[0].len();
            let (mu_a, cov_a) = stats(a, dim);
            let (mu_b, cov_b) = stats(b, dim);
            let mean: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
            let prod = mul(&cov_a, &cov_b, dim);
            let sqrt_prod = denman_beavers(&prod, dim);
            let tr = |m: &[f64]| -> f64 { (0..dim).map(|i| m[i * dim + i]).sum() };
            mean + tr(&cov_a) + tr(&cov_b) - 2.0 * tr(&sqrt_prod)
        }

        fn stats(set: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
            let n = set.len() as f64;
            let mut mu = vec![0.0; dim];
            for v in set {
                for i in 0..dim {
                    mu[i] += v[i] / n;
                }
            }
            let mut cov = vec![0.0; dim * dim];
            for v in set {
                for i in 0..dim {
                    for j in 0..dim {
                        cov[i * dim + j] += (v[i] - mu[i]) * (v[j] - mu[j]) / (n - 1.0);
                    }
                }
            }
            (mu, cov)
        }

        fn mul(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
            let mut out = vec![0.0; dim * dim];
            for i in 0..dim {
                for k in 0..dim {
                    for j in 0..dim {
                        out[i * dim + j] += a[i * dim + k] * b[k * dim + j];
                    }
                }
            }
            out
        }

        fn inverse(m: &[f64], dim: usize) -> Vec<f64> {
            let mut a = m.to_vec();
            let mut inv = vec![0.0; dim * dim];
            for i in 0..dim {
                inv[i * dim + i] = 1.0;
            }
            for col in 0..dim {
                let mut pivot = col;
                for r in col + 1..dim {
                    if a[r * dim + col].abs() > a[pivot * dim + col].abs() {
                        pivot = r;
                    }
                }
                for j in 0..dim {
                    a.swap(col * dim + j, pivot * dim + j);
                    inv.swap(col * dim + j, pivot * dim + j);
                }
                let p = a[col * dim + col];
                for j in 0..dim {
                    a[col * dim + j] /= p;
                    inv[col * dim + j] /= p;
                }
                for r in 0..dim {
                    if r == col {
                        continue;
                    }
                    let f = a[r * dim + col];
                    for j in 0..dim {
                        a[r * dim + j] -= f * a[col * dim + j];
                        inv[r * dim + j] -= f * inv[col * dim + j];
                    }
                }
            }
            inv
        }

        fn denman_beavers(m: &[f64], dim: usize) -> Vec<f64> {
            let mut y = m.to_vec();
            let mut z = vec![0.0; dim * dim];
            for i in 0..dim {
                z[i * dim + i] = 1.0;
            }
            for _ in 0..60 {
                let y_inv = inverse(&y, dim);
                let z_inv = inverse(&z, dim);
                let mut ny = vec![0.0; dim * dim];
                let mut nz = vec![0.0; dim * dim];
                for i in 0..dim * dim {
                    ny[i] = 0.5 * (y[i] + z_inv[i]);
                    nz[i] = 0.5 * (z[i] + y_inv[i]);
                }
                y = ny;
                z = nz;
            }
            y
        }
    }

    #[test]
    fn frechet_matches_independent_oracle() {
        let mut rng = Rng::new(31);
        for case in 0..3 {
            let dim = 3 + case;
            let shift = 0.2 * case as f64;
            let a: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..dim).map(|_| rng.next_normal()).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..60)
                .map(|j| {
                    (0..dim)
                        .map(|k| 0.8 * rng.next_normal() + shift + 0.01 * (j * k) as f64)
                        .collect()
                })
                .collect();
            let mine = frechet_distance(&a, &b).unwrap();
            assert!(!mine.regularized);
            let want = oracle::frechet(&a, &b);
            let rel = (mine.distance - want).abs() / want.abs().max(1e-9);
            assert!(rel <= 1e-6, "case {case}: {} vs {want}", mine.distance);
        }
    }

    #[test]
    fn style_datasets_separate_in_descriptor_space() {
        // pairwise distance across styles exceeds the within-style
        // split-half distance, and is strictly positive
        // equal set sizes everywhere (64 vs 64) so the statistics compare
        let styles = [StyleSpec::filled(), StyleSpec::outline(), StyleSpec::stripes()];
        let sets: Vec<Vec<Vec<f64>>> = styles
            .iter()
            .map(|s| {
                crate::trainer::datagen(s, 128, 24, 77, 4)
                    .unwrap()
                    .iter()
                    .map(|smp| descriptor(&smp.image).unwrap())
                    .collect()
            })
            .collect();
        for i in 0..3 {
            let (first, second) = sets[i].split_at(64);
            let within = frechet_distance(first, second).unwrap().distance;
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let across = frechet_distance(&sets[i][..64], &sets[j][..64]).unwrap().distance;
                assert!(across > 0.0);
                assert!(
                    across > within,
                    "style {i} vs {j}: across {across} within {within}"
                );
            }
        }
    }

    #[test]
    fn psnr_of_identical_images_is_large() {
        let img = red_circle(4);
        assert!(psnr(&img, &img).unwrap() > 100.0);
        let mut other = img.clone();
        other.data_mut()[0] += 0.5;
        assert!(psnr(&img, &other).unwrap() < 60.0);
    }

    #[test]
    fn channel_means_track_dominant_color() {
        let img = red_circle(5);
        let m = channel_means(&img).unwrap();
        assert!(m[0] > m[2]);
    }
}
