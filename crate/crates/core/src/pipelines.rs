//! End-to-end procedures built on the denoising loop: seeded guided
//! generation with trajectory capture, DDIM inversion of real images, novel
//! cross-model generation, model style transfer, stylized prompt editing,
//! and the m x m cross-transfer matrix.
//!
//! Every pipeline is a pure function of (inputs, seeds, config); repeated
//! runs agree bit for bit.

use crate::conditioner::{bundle, scale_condition};
use crate::denoiser::{predict_noise, DenoiserModel};
use crate::error::{Error, Result};
use crate::injection::{
    ditail, guidance_combine, trajectory_provenance, CaptureMode, InjectionConfig, Trajectory,
};
use crate::rng::Rng;
use crate::schedule::{ddim_invert_step, ddim_step};
use crate::tensor::Tensor;

/// A finished generation plus everything needed to replay or transfer it.
#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub image: Tensor<f32>,
    pub trajectory: Option<Trajectory>,
    pub prompt_pos: String,
    pub prompt_neg: String,
    pub seed: u64,
    pub model_hash: String,
    pub omega: f64,
}

/// Deterministic guided DDIM sampling from a given starting latent.
///
/// Returns the final latent and, when `record` is set, the latent at every
/// visited timestep (descending, aligned with the schedule's sample steps).
pub fn guided_sample(
    model: &DenoiserModel<f32>,
    z_init: Tensor<f32>,
    e_pos: &Tensor<f32>,
    e_neg: &Tensor<f32>,
    omega: f64,
    record: bool,
) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let steps = model.schedule().sample_steps().to_vec();
    let mut z = z_init;
    let mut recorded = Vec::with_capacity(if record { steps.len() } else { 0 });
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        if record {
            recorded.push(z.clone());
        }
        let (eps_pos, _) = predict_noise(model, &z, t, e_pos, false)?;
        let (eps_neg, _) = predict_noise(model, &z, t, e_neg, false)?;
        let eps = guidance_combine(&eps_pos, &eps_neg, omega)?;
        z = ddim_step(&z, &eps, t, t_prev, model.schedule())?;
    }
    Ok((z, recorded))
}

/// Seeded guided generation; captures a trajectory when requested.
///
/// The starting latent is a standard normal draw from a stream seeded by
/// `seed`. Feature capture derives the per-layer activations from the latent
/// trajectory with the model family's default injection layer sets.
pub fn generate(
    model: &DenoiserModel<f32>,
    p_pos: &str,
    p_neg: &str,
    seed: u64,
    omega: f64,
    capture: Option<CaptureMode>,
) -> Result<GenerationRecord> {
    let b = bundle(p_pos, p_neg, 1.0, 0.0, model.vocab())?;
    let mut rng = Rng::new(seed);
    let z_init = Tensor::randn(model.config().image_shape(), &mut rng);
    let (image, latents) =
        guided_sample(model, z_init, &b.e_pos, &b.e_neg, omega, capture.is_some())?;
    let trajectory = match capture {
        None => None,
        Some(mode) => {
            let traj = Trajectory::from_latents(
                model.schedule().sample_steps().to_vec(),
                latents,
                Some(image.clone()),
                trajectory_provenance(model, p_pos, p_neg, seed, omega),
            )?;
            Some(match mode {
                CaptureMode::Latent => traj,
                CaptureMode::Feature => traj.to_feature_mode(
                    model,
                    &model.config().default_res_layers(),
                    &model.config().default_attn_layers(),
                )?,
            })
        }
    };
    Ok(GenerationRecord {
        image,
        trajectory,
        prompt_pos: p_pos.to_string(),
        prompt_neg: p_neg.to_string(),
        seed,
        model_hash: model.identity_hash(),
        omega,
    })
}

/// DDIM inversion of an image under a single scaled condition (no guidance).
///
/// `inv_steps` selects the inversion discretization; the recorded trajectory
/// always lists the model's sampling steps, so the sampling steps must be a
/// subset of the inversion steps (equal counts, or a finer inversion such as
/// the 1000-step mode). The noise estimate is re-evaluated at the current
/// latent with the destination timestep.
pub fn invert(
    model: &DenoiserModel<f32>,
    image: &Tensor<f32>,
    p_pos: &str,
    p_neg: &str,
    alpha: f64,
    beta: f64,
    inv_steps: usize,
) -> Result<Trajectory> {
    if image.shape() != model.config().image_shape().as_slice() {
        return Err(Error::Codec(format!(
            "invert: image {:?} vs model grid {:?}",
            image.shape(),
            model.config().image_shape()
        )));
    }
    let b = bundle(p_pos, p_neg, alpha, beta, model.vocab())?;
    let c = scale_condition(&b.e_pos, &b.e_neg, alpha, beta)?;
    let sample_steps = model.schedule().sample_steps().to_vec();
    let inv_sched = model.schedule().with_sample_count(inv_steps)?;
    let ascending: Vec<usize> = inv_sched.sample_steps().iter().rev().copied().collect();
    let wanted: std::collections::BTreeSet<usize> = sample_steps.iter().copied().collect();
    if !wanted.iter().all(|t| ascending.binary_search(t).is_ok()) {
        return Err(Error::Config(format!(
            "invert: {inv_steps} inversion steps do not cover the {} sampling steps",
            sample_steps.len()
        )));
    }

    let mut z = image.clone();
    let mut prev = 0usize;
    let mut stored: Vec<(usize, Tensor<f32>)> = Vec::with_capacity(sample_steps.len());
    for &t in &ascending {
        let (eps, _) = predict_noise(model, &z, t, &c, false)?;
        z = ddim_invert_step(&z, &eps, prev, t, model.schedule())?;
        if wanted.contains(&t) {
            stored.push((t, z.clone()));
        }
        prev = t;
    }
    stored.reverse();
    debug_assert_eq!(stored.len(), sample_steps.len());
    let latents = stored.into_iter().map(|(_, z)| z).collect();
    Trajectory::from_latents(
        sample_steps,
        latents,
        Some(image.clone()),
        trajectory_provenance(model, p_pos, p_neg, 0, 0.0),
    )
}

/// The four-image novel generation: two captured plain generations and the
/// two cross-injected transfers between them.
#[derive(Debug, Clone)]
pub struct NovelGeneration {
    pub i1: GenerationRecord,
    pub i2: GenerationRecord,
    pub i1_to_2: Tensor<f32>,
    pub i2_to_1: Tensor<f32>,
}

pub fn novel_generation(
    p_pos: &str,
    p_neg: &str,
    model1: &DenoiserModel<f32>,
    model2: &DenoiserModel<f32>,
    seed: u64,
    config: &InjectionConfig,
) -> Result<NovelGeneration> {
    if model1.arch_hash() != model2.arch_hash() {
        return Err(Error::Provenance(
            "novel generation: models differ in architecture or schedule".into(),
        ));
    }
    let i1 = generate(model1, p_pos, p_neg, seed, config.omega, Some(config.mode))?;
    let i2 = generate(model2, p_pos, p_neg, seed, config.omega, Some(config.mode))?;
    let t1 = i1.trajectory.as_ref().expect("captured");
    let t2 = i2.trajectory.as_ref().expect("captured");
    let i1_to_2 = ditail(t1, p_pos, p_neg, model2, config)?;
    let i2_to_1 = ditail(t2, p_pos, p_neg, model1, config)?;
    Ok(NovelGeneration { i1, i2, i1_to_2, i2_to_1 })
}

/// Style transfer of a real image: scaled-condition DDIM inversion under the
/// inversion model, then the injected denoising loop under the target model.
/// Both stages use the same prompts.
#[allow(clippy::too_many_arguments)]
pub fn style_transfer(
    i_src: &Tensor<f32>,
    inversion_model: &DenoiserModel<f32>,
    target_model: &DenoiserModel<f32>,
    p_pos: &str,
    p_neg: &str,
    alpha: f64,
    beta: f64,
    config: &InjectionConfig,
) -> Result<Tensor<f32>> {
    let inv_steps = inversion_model.schedule().sample_steps().len();
    let mut traj = invert(inversion_model, i_src, p_pos, p_neg, alpha, beta, inv_steps)?;
    if config.mode == CaptureMode::Feature {
        traj = traj.to_feature_mode(
            inversion_model,
            &config.residual_layers,
            &config.attention_layers,
        )?;
    }
    ditail(&traj, p_pos, p_neg, target_model, config)
}

/// Stylized editing: inversion under caption/empty prompts, the injected
/// denoising loop under the edit prompts, with an explicit guidance scale.
///
/// With edit prompts equal to the inversion prompts and `omega` equal to the
/// config's, this reduces exactly to [`style_transfer`].
#[allow(clippy::too_many_arguments)]
pub fn stylized_edit(
    i_src: &Tensor<f32>,
    inversion_model: &DenoiserModel<f32>,
    target_model: &DenoiserModel<f32>,
    p_edit_pos: &str,
    p_edit_neg: &str,
    inv_prompts: (&str, &str),
    alpha: f64,
    beta: f64,
    omega: f64,
    config: &InjectionConfig,
) -> Result<Tensor<f32>> {
    let inv_steps = inversion_model.schedule().sample_steps().len();
    let mut traj =
        invert(inversion_model, i_src, inv_prompts.0, inv_prompts.1, alpha, beta, inv_steps)?;
    if config.mode == CaptureMode::Feature {
        traj = traj.to_feature_mode(
            inversion_model,
            &config.residual_layers,
            &config.attention_layers,
        )?;
    }
    let cfg = config.clone().with_omega(omega);
    ditail(&traj, p_edit_pos, p_edit_neg, target_model, &cfg)
}

/// All m x m transfer-matrix cells: `cells[i][j]` carries model i's content
/// rendered by model j; the diagonal is the plain generation.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub cells: Vec<Vec<Tensor<f32>>>,
}

pub fn transfer_matrix(
    models: &[&DenoiserModel<f32>],
    p_pos: &str,
    p_neg: &str,
    seed: u64,
    config: &InjectionConfig,
) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(Error::Usage("transfer matrix: no models".into()));
    }
    let records: Vec<GenerationRecord> = models
        .iter()
        .map(|m| generate(m, p_pos, p_neg, seed, config.omega, Some(config.mode)))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(models.len());
    for (i, rec) in records.iter().enumerate() {
        let mut row = Vec::with_capacity(models.len());
        for (j, target) in models.iter().enumerate() {
            if i == j {
                row.push(rec.image.clone());
            } else {
                let traj = rec.trajectory.as_ref().expect("captured");
                row.push(ditail(traj, p_pos, p_neg, target, config)?);
            }
        }
        cells.push(row);
    }
    Ok(TransferMatrix { cells })
}

/// Assembles m x m equally sized cells into one image, row-major: row i is
/// content source i, column j is style model j. Pixels are copied untouched.
pub fn assemble_grid(cells: &[Vec<Tensor<f32>>]) -> Result<Tensor<f32>> {
    let m = cells.len();
    if m == 0 || cells.iter().any(|row| row.len() != m) {
        return Err(Error::Usage("grid: cells must form a square".into()));
    }
    let [c, h, w] = crate::tensor::dims3(&cells[0][0], "grid cell")?;
    let (gh, gw) = (m * h, m * w);
    let mut out = Tensor::zeros(vec![c, gh, gw]);
    for (i, row) in cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if cell.shape() != [c, h, w] {
                return Err(Error::Dimension("grid: mixed cell shapes".into()));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.data_mut()[ch * gh * gw + (i * h + y) * gw + (j * w + x)] =
                            cell.data()[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}
