//! Command execution: resolve flags over config files, run the pipeline,
//! write outputs atomically, echo the resolved configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ditail_core::codec;
use ditail_core::conditioner::Vocabulary;
use ditail_core::denoiser::{DenoiserModel, ModelConfig, TrainingProvenance};
use ditail_core::error::{Error, Result};
use ditail_core::injection::{CaptureMode, InjectionConfig, InjectionMask, Trajectory};
use ditail_core::metrics as m;
use ditail_core::pipelines;
use ditail_core::schedule::Schedule;
use ditail_core::trainer;
use serde::Serialize;

use crate::resolved::*;
use crate::*;

fn file_config<C: CommandConfig>(common: &CommonArgs) -> Result<Option<C>> {
    common.config.as_deref().map(load_config::<C>).transpose()
}

fn parse_capture_mode(s: &str) -> Result<CaptureMode> {
    match s {
        "latent" => Ok(CaptureMode::Latent),
        "feature" => Ok(CaptureMode::Feature),
        other => Err(Error::Usage(format!("capture mode {other:?} (expected latent|feature)"))),
    }
}

fn parse_layer_list(s: &str) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.insert(
            part.parse::<usize>()
                .map_err(|_| Error::Usage(format!("bad layer index {part:?}")))?,
        );
    }
    Ok(out)
}

pub fn datagen(a: DatagenArgs) -> Result<()> {
    let f: Option<DatagenConfig> = file_config(&a.common)?;
    let cfg = DatagenConfig {
        command: "datagen".into(),
        seed: pick(a.common.seed, f.as_ref().map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, f.as_ref().map(|c| c.out.clone()), None, "out")?,
        style: pick(a.style, f.as_ref().map(|c| c.style.clone()), Some("filled".into()), "style")?,
        n: pick(a.n, f.as_ref().map(|c| c.n), Some(trainer::SAMPLES_PER_STYLE), "n")?,
        size: pick(a.size, f.as_ref().map(|c| c.size), Some(24), "size")?,
        patch: pick(a.patch, f.as_ref().map(|c| c.patch), Some(4), "patch")?,
    };
    let style = trainer::StyleSpec::by_name(&cfg.style)?;
    let samples = trainer::datagen(&style, cfg.n, cfg.size, cfg.seed, cfg.patch)?;
    trainer::save_dataset(&cfg.out, &samples, &style, cfg.seed, cfg.size)?;
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {} samples to {}", samples.len(), cfg.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let f: Option<TrainConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = TrainConfig {
        command: "train".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        data: pick(a.data, g.map(|c| c.data.clone()), None, "data")?,
        steps: pick(a.steps, g.map(|c| c.steps), Some(trainer::DEFAULT_TRAIN_STEPS), "steps")?,
        lr: pick(a.lr, g.map(|c| c.lr), Some(trainer::DEFAULT_LR), "lr")?,
        layers: pick(a.layers, g.map(|c| c.layers), Some(8), "layers")?,
        dim: pick(a.dim, g.map(|c| c.dim), Some(64), "dim")?,
        patch: pick(a.patch, g.map(|c| c.patch), Some(4), "patch")?,
        cond_dim: pick(a.cond_dim, g.map(|c| c.cond_dim), Some(32), "cond-dim")?,
        t_train: pick(a.t_train, g.map(|c| c.t_train), Some(1000), "t-train")?,
        beta_start: pick(a.beta_start, g.map(|c| c.beta_start), Some(1e-4), "beta-start")?,
        beta_end: pick(a.beta_end, g.map(|c| c.beta_end), Some(2e-2), "beta-end")?,
        sample_steps: pick(a.sample_steps, g.map(|c| c.sample_steps), Some(50), "sample-steps")?,
        embed_seed: pick(a.embed_seed, g.map(|c| c.embed_seed), Some(11), "embed-seed")?,
    };
    let (samples, manifest) = trainer::load_dataset(&cfg.data)?;
    let arch = ModelConfig {
        layers: cfg.layers,
        dim: cfg.dim,
        patch: cfg.patch,
        image_size: manifest.size,
        channels: 3,
        cond_dim: cfg.cond_dim,
    };
    let sched = Schedule::new(cfg.t_train, cfg.beta_start, cfg.beta_end, cfg.sample_steps)?;
    let vocab = Vocabulary::standard(cfg.embed_seed);
    let model = DenoiserModel::init(arch, sched, vocab, cfg.seed)?;
    let (mut trained, log) = trainer::train(&model, &samples, cfg.steps, cfg.lr, cfg.seed)?;
    trained.set_provenance(TrainingProvenance {
        kind: "train".into(),
        base_hash: None,
        style: Some(manifest.style.style_word().into()),
        steps: Some(cfg.steps),
        lr: Some(cfg.lr),
        seed: Some(cfg.seed),
        data_seed: Some(manifest.seed),
    });
    trained.save(&cfg.out)?;
    write_echo(&cfg.out, &cfg)?;
    for (step, loss) in &log.entries {
        println!("step {step} loss {loss:.6}");
    }
    println!("saved {}", cfg.out.display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let f: Option<FinetuneConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = FinetuneConfig {
        command: "finetune".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        base: pick(a.base, g.map(|c| c.base.clone()), None, "base")?,
        style: pick(a.style, g.map(|c| c.style.clone()), None, "style")?,
        steps: pick(a.steps, g.map(|c| c.steps), Some(1000), "steps")?,
        lr: pick(a.lr, g.map(|c| c.lr), Some(trainer::DEFAULT_LR), "lr")?,
    };
    let base = DenoiserModel::load(&cfg.base)?;
    let style = trainer::StyleSpec::by_name(&cfg.style)?;
    let (model, log) = trainer::finetune(&base, &style, cfg.steps, cfg.lr, cfg.seed)?;
    model.save(&cfg.out)?;
    write_echo(&cfg.out, &cfg)?;
    for (step, loss) in &log.entries {
        println!("step {step} loss {loss:.6}");
    }
    println!("saved {}", cfg.out.display());
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let f: Option<GenerateConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let capture_flag_given = a.capture_mode.is_some();
    let cfg = GenerateConfig {
        command: "generate".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        model: pick(a.model, g.map(|c| c.model.clone()), None, "model")?,
        prompt: pick(a.prompt, g.map(|c| c.prompt.clone()), Some(String::new()), "prompt")?,
        negative: pick(a.negative, g.map(|c| c.negative.clone()), Some(String::new()), "negative")?,
        omega: pick(a.omega, g.map(|c| c.omega), Some(7.5), "omega")?,
        steps: a.steps.or(g.and_then(|c| c.steps)),
        save_latents: a.save_latents.or(g.and_then(|c| c.save_latents.clone())),
        capture_mode: pick(
            a.capture_mode,
            g.map(|c| c.capture_mode.clone()),
            Some("latent".into()),
            "capture-mode",
        )?,
    };
    let mode = parse_capture_mode(&cfg.capture_mode)?;
    if capture_flag_given && cfg.save_latents.is_none() {
        return Err(Error::Usage("--capture-mode without --save-latents".into()));
    }
    let mut model = DenoiserModel::load(&cfg.model)?;
    if let Some(s) = cfg.steps {
        model = model.with_sample_count(s)?;
    }
    let capture = cfg.save_latents.as_ref().map(|_| mode);
    let rec =
        pipelines::generate(&model, &cfg.prompt, &cfg.negative, cfg.seed, cfg.omega, capture)?;
    codec::write_image(&cfg.out, &rec.image)?;
    if let Some(path) = &cfg.save_latents {
        rec.trajectory.as_ref().expect("captured").save(path)?;
    }
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn invert(a: InvertArgs) -> Result<()> {
    let f: Option<InvertConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = InvertConfig {
        command: "invert".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        model: pick(a.model, g.map(|c| c.model.clone()), None, "model")?,
        image: pick(a.image, g.map(|c| c.image.clone()), None, "image")?,
        prompt: pick(a.prompt, g.map(|c| c.prompt.clone()), Some(String::new()), "prompt")?,
        negative: pick(a.negative, g.map(|c| c.negative.clone()), Some(String::new()), "negative")?,
        alpha: pick(a.alpha, g.map(|c| c.alpha), Some(2.0), "alpha")?,
        beta: pick(a.beta, g.map(|c| c.beta), Some(0.5), "beta")?,
        inv_steps: a.inv_steps.or(g.and_then(|c| c.inv_steps)),
        capture_mode: pick(
            a.capture_mode,
            g.map(|c| c.capture_mode.clone()),
            Some("latent".into()),
            "capture-mode",
        )?,
    };
    let mode = parse_capture_mode(&cfg.capture_mode)?;
    let model = DenoiserModel::load(&cfg.model)?;
    let image = codec::read_image(&cfg.image)?;
    let inv_steps = cfg.inv_steps.unwrap_or_else(|| model.schedule().sample_steps().len());
    let mut traj =
        pipelines::invert(&model, &image, &cfg.prompt, &cfg.negative, cfg.alpha, cfg.beta, inv_steps)?;
    if mode == CaptureMode::Feature {
        traj = traj.to_feature_mode(
            &model,
            &model.config().default_res_layers(),
            &model.config().default_attn_layers(),
        )?;
    }
    traj.save(&cfg.out)?;
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {} ({} steps)", cfg.out.display(), traj.steps().len());
    Ok(())
}

/// Builds an [`InjectionConfig`] from resolved ditail-style options.
fn injection_config(
    model: &DenoiserModel<f32>,
    omega: f64,
    mask: Option<&Path>,
    mode: CaptureMode,
    res_layers: Option<&str>,
    attn_layers: Option<&str>,
    thresh_res: f64,
    thresh_attn: f64,
) -> Result<InjectionConfig> {
    let mut cfg = InjectionConfig::default_for(model.config())
        .with_omega(omega)
        .with_mode(mode);
    cfg.thresh_res_frac = thresh_res;
    cfg.thresh_attn_frac = thresh_attn;
    if let Some(list) = res_layers {
        cfg.residual_layers = parse_layer_list(list)?;
    }
    if let Some(list) = attn_layers {
        cfg.attention_layers = parse_layer_list(list)?;
    }
    if let Some(path) = mask {
        cfg.mask = InjectionMask::from_pixels(codec::read_mask(path)?)?;
    }
    Ok(cfg)
}

pub fn ditail(a: DitailArgs) -> Result<()> {
    let f: Option<DitailConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = DitailConfig {
        command: "ditail".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        src_latents: pick(a.src_latents, g.map(|c| c.src_latents.clone()), None, "src-latents")?,
        target: pick(a.target, g.map(|c| c.target.clone()), None, "target")?,
        prompt: pick(a.prompt, g.map(|c| c.prompt.clone()), Some(String::new()), "prompt")?,
        negative: pick(a.negative, g.map(|c| c.negative.clone()), Some(String::new()), "negative")?,
        omega: pick(a.omega, g.map(|c| c.omega), Some(7.5), "omega")?,
        mask: a.mask.or(g.and_then(|c| c.mask.clone())),
        mode: pick(a.mode, g.map(|c| c.mode.clone()), Some("latent".into()), "mode")?,
        res_layers: a.res_layers.or(g.and_then(|c| c.res_layers.clone())),
        attn_layers: a.attn_layers.or(g.and_then(|c| c.attn_layers.clone())),
        thresh_res: pick(a.thresh_res, g.map(|c| c.thresh_res), Some(0.8), "thresh-res")?,
        thresh_attn: pick(a.thresh_attn, g.map(|c| c.thresh_attn), Some(0.5), "thresh-attn")?,
    };
    let mode = parse_capture_mode(&cfg.mode)?;
    let traj = Trajectory::load(&cfg.src_latents)?;
    // flag conflicts are rejected before any denoising work happens
    if mode != traj.mode() {
        return Err(Error::Usage(format!(
            "--mode {} but {} holds a {:?} trajectory",
            cfg.mode,
            cfg.src_latents.display(),
            traj.mode()
        )));
    }
    let target = DenoiserModel::load(&cfg.target)?;
    let inj = injection_config(
        &target,
        cfg.omega,
        cfg.mask.as_deref(),
        mode,
        cfg.res_layers.as_deref(),
        cfg.attn_layers.as_deref(),
        cfg.thresh_res,
        cfg.thresh_attn,
    )?;
    let image = ditail_core::injection::ditail(&traj, &cfg.prompt, &cfg.negative, &target, &inj)?;
    codec::write_image(&cfg.out, &image)?;
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn matrix(a: MatrixArgs) -> Result<()> {
    let f: Option<MatrixConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = MatrixConfig {
        command: "matrix".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        models: pick(a.models, g.map(|c| c.models.clone()), None, "models")?,
        prompt: pick(a.prompt, g.map(|c| c.prompt.clone()), Some(String::new()), "prompt")?,
        negative: pick(a.negative, g.map(|c| c.negative.clone()), Some(String::new()), "negative")?,
        omega: pick(a.omega, g.map(|c| c.omega), Some(7.5), "omega")?,
    };
    if cfg.models.is_empty() {
        return Err(Error::Usage("matrix: at least one --models entry required".into()));
    }
    let models: Vec<DenoiserModel<f32>> =
        cfg.models.iter().map(|p| DenoiserModel::load(p)).collect::<Result<_>>()?;
    let refs: Vec<&DenoiserModel<f32>> = models.iter().collect();
    let inj = InjectionConfig::default_for(models[0].config()).with_omega(cfg.omega);
    let grid = pipelines::transfer_matrix(&refs, &cfg.prompt, &cfg.negative, cfg.seed, &inj)?;
    let image = pipelines::assemble_grid(&grid.cells)?;
    codec::write_image(&cfg.out, &image)?;
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {} ({}x{} cells)", cfg.out.display(), grid.cells.len(), grid.cells.len());
    Ok(())
}

pub fn edit(a: EditArgs) -> Result<()> {
    let f: Option<EditConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = EditConfig {
        command: "edit".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        image: pick(a.image, g.map(|c| c.image.clone()), None, "image")?,
        invert_with: pick(a.invert_with, g.map(|c| c.invert_with.clone()), None, "invert-with")?,
        target: pick(a.target, g.map(|c| c.target.clone()), None, "target")?,
        prompt: pick(a.prompt, g.map(|c| c.prompt.clone()), Some(String::new()), "prompt")?,
        negative: pick(a.negative, g.map(|c| c.negative.clone()), Some(String::new()), "negative")?,
        inv_prompt: pick(a.inv_prompt, g.map(|c| c.inv_prompt.clone()), Some(String::new()), "inv-prompt")?,
        inv_negative: pick(
            a.inv_negative,
            g.map(|c| c.inv_negative.clone()),
            Some(String::new()),
            "inv-negative",
        )?,
        alpha: pick(a.alpha, g.map(|c| c.alpha), Some(2.0), "alpha")?,
        beta: pick(a.beta, g.map(|c| c.beta), Some(0.5), "beta")?,
        omega: pick(a.omega, g.map(|c| c.omega), Some(7.5), "omega")?,
        mask: a.mask.or(g.and_then(|c| c.mask.clone())),
    };
    let inv_model = DenoiserModel::load(&cfg.invert_with)?;
    let target = DenoiserModel::load(&cfg.target)?;
    let image = codec::read_image(&cfg.image)?;
    let mut inj = InjectionConfig::default_for(target.config());
    if let Some(path) = &cfg.mask {
        inj.mask = InjectionMask::from_pixels(codec::read_mask(path)?)?;
    }
    let out = pipelines::stylized_edit(
        &image,
        &inv_model,
        &target,
        &cfg.prompt,
        &cfg.negative,
        (&cfg.inv_prompt, &cfg.inv_negative),
        cfg.alpha,
        cfg.beta,
        cfg.omega,
        &inj,
    )?;
    codec::write_image(&cfg.out, &out)?;
    write_echo(&cfg.out, &cfg)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Report {
    kind: String,
    pairs: Vec<PairScore>,
    aggregate: Aggregate,
}

#[derive(Serialize)]
struct PairScore {
    a: String,
    b: String,
    score: f64,
}

#[derive(Serialize)]
struct Aggregate {
    count: usize,
    mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    regularized: Option<bool>,
}

fn descriptor_set(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!("no images in {}", dir.display())));
    }
    files.iter().map(|p| m::descriptor(&codec::read_image(p)?)).collect()
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let f: Option<MetricsConfig> = file_config(&a.common)?;
    let g = f.as_ref();
    let cfg = MetricsConfig {
        command: "metrics".into(),
        seed: pick(a.common.seed, g.map(|c| c.seed), Some(0), "seed")?,
        out: pick(a.common.out, g.map(|c| c.out.clone()), None, "out")?,
        kind: pick(a.kind, g.map(|c| c.kind.clone()), None, "kind")?,
        image: a.image.or(g.and_then(|c| c.image.clone())),
        image_a: a.image_a.or(g.and_then(|c| c.image_a.clone())),
        image_b: a.image_b.or(g.and_then(|c| c.image_b.clone())),
        set_a: a.set_a.or(g.and_then(|c| c.set_a.clone())),
        set_b: a.set_b.or(g.and_then(|c| c.set_b.clone())),
        prompt: a.prompt.or(g.and_then(|c| c.prompt.clone())),
        probe: pick(a.probe, g.map(|c| c.probe.clone()), None, "probe")?,
        t_probe: a.t_probe.or(g.and_then(|c| c.t_probe)),
    };
    let probe = DenoiserModel::load(&cfg.probe)?;
    let report = match cfg.kind.as_str() {
        "compliance" => {
            let image_path = cfg
                .image
                .as_ref()
                .ok_or_else(|| Error::Usage("compliance needs --image".into()))?;
            let prompt = cfg
                .prompt
                .as_ref()
                .ok_or_else(|| Error::Usage("compliance needs --prompt".into()))?;
            let image = codec::read_image(image_path)?;
            let score = m::compliance_score(&image, prompt, probe.vocab())?;
            Report {
                kind: cfg.kind.clone(),
                pairs: vec![PairScore {
                    a: image_path.display().to_string(),
                    b: prompt.clone(),
                    score,
                }],
                aggregate: Aggregate { count: 1, mean: score, regularized: None },
            }
        }
        "structure" => {
            let (pa, pb) = match (&cfg.image_a, &cfg.image_b) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Usage("structure needs --image-a and --image-b".into())),
            };
            let t = cfg.t_probe.unwrap_or_else(|| m::probe_timestep(&probe));
            let ia = codec::read_image(pa)?;
            let ib = codec::read_image(pb)?;
            let score = m::structure_distance(&ia, &ib, &probe, t)?;
            Report {
                kind: cfg.kind.clone(),
                pairs: vec![PairScore {
                    a: pa.display().to_string(),
                    b: pb.display().to_string(),
                    score,
                }],
                aggregate: Aggregate { count: 1, mean: score, regularized: None },
            }
        }
        "frechet" => {
            let (da, db) = match (&cfg.set_a, &cfg.set_b) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Usage("frechet needs --set-a and --set-b".into())),
            };
            let sa = descriptor_set(da)?;
            let sb = descriptor_set(db)?;
            let r = m::frechet_distance(&sa, &sb)?;
            Report {
                kind: cfg.kind.clone(),
                pairs: vec![PairScore {
                    a: da.display().to_string(),
                    b: db.display().to_string(),
                    score: r.distance,
                }],
                aggregate: Aggregate {
                    count: 1,
                    mean: r.distance,
                    regularized: Some(r.regularized),
                },
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "metrics kind {other:?} (expected compliance|structure|frechet)"
            )))
        }
    };
    let text =
        toml::to_string_pretty(&report).map_err(|e| Error::Format(format!("report: {e}")))?;
    codec::atomic_write(&cfg.out, text.as_bytes())?;
    write_echo(&cfg.out, &cfg)?;
    println!("{}: {:.6}", report.kind, report.aggregate.mean);
    Ok(())
}
