//! Calibration probe for the trend suite (temporary dev tool).

use std::path::PathBuf;
use std::time::Instant;

use ditail_core::conditioner::Vocabulary;
use ditail_core::denoiser::{DenoiserModel, ModelConfig};
use ditail_core::injection::{ditail, CaptureMode, InjectionConfig, InjectionMask};
use ditail_core::metrics::{
    channel_means, compliance_score, descriptor, frechet_distance, psnr, structure_distance,
};
use ditail_core::pipelines::{generate, invert, novel_generation, style_transfer, stylized_edit};
use ditail_core::provenance::sha256_hex;
use ditail_core::rng::Rng;
use ditail_core::schedule::Schedule;
use ditail_core::tensor::Tensor;
use ditail_core::trainer::{datagen, finetune, train, Sample, StyleSpec};

const BASE_STEPS: u64 = 3000;
const STYLE_STEPS: u64 = 1500;
const LR: f64 = 1e-3;
const BASE_SEED: u64 = 41;

fn styles() -> [StyleSpec; 3] {
    [StyleSpec::filled(), StyleSpec::outline(), StyleSpec::stripes()]
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache")
}

fn trainer_fingerprint(init: &DenoiserModel<f32>, data: &[Sample]) -> String {
    let (probe, _) = train(init, &data[..4.min(data.len())], 3, LR, 99).unwrap();
    probe.identity_hash()
}

fn build_models() -> (DenoiserModel<f32>, Vec<DenoiserModel<f32>>) {
    let arch = ModelConfig::default_toy();
    let sched = Schedule::default_toy(50).unwrap();
    let vocab = Vocabulary::standard(11);
    let init = DenoiserModel::init(arch, sched, vocab, BASE_SEED).unwrap();

    let mut base_data = Vec::new();
    for (k, style) in styles().iter().enumerate() {
        let n = if k == 0 { 172 } else { 170 };
        base_data.extend(datagen(style, n, 24, 100 + k as u64, 4).unwrap());
    }

    let key = sha256_hex(
        format!(
            "v1|{}|{}|{}|{}|{}",
            init.identity_hash(),
            BASE_STEPS,
            STYLE_STEPS,
            LR,
            trainer_fingerprint(&init, &base_data)
        )
        .as_bytes(),
    );
    let dir = cache_dir().join(&key[..16]);
    let base_path = dir.join("base.dtl");
    if base_path.exists() {
        println!("cache hit: {}", dir.display());
        let base = DenoiserModel::load(&base_path).unwrap();
        let models = (0..3)
            .map(|i| DenoiserModel::load(&dir.join(format!("style{i}.dtl"))).unwrap())
            .collect();
        return (base, models);
    }

    println!("training base ({BASE_STEPS} steps)...");
    let t0 = Instant::now();
    let (base, log) = train(&init, &base_data, BASE_STEPS, LR, BASE_SEED).unwrap();
    println!(
        "  base done in {:.1}s; loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        log.entries.first().unwrap().1,
        log.entries.last().unwrap().1
    );
    let mut models = Vec::new();
    for (i, style) in styles().iter().enumerate() {
        let t0 = Instant::now();
        let (m, log) = finetune(&base, style, STYLE_STEPS, LR, 200 + i as u64).unwrap();
        println!(
            "  style {} done in {:.1}s; loss {:.4} -> {:.4}",
            style.style_word(),
            t0.elapsed().as_secs_f64(),
            log.entries.first().unwrap().1,
            log.entries.last().unwrap().1
        );
        models.push(m);
    }
    std::fs::create_dir_all(&dir).unwrap();
    base.save(&base_path).unwrap();
    for (i, m) in models.iter().enumerate() {
        m.save(&dir.join(format!("style{i}.dtl"))).unwrap();
    }
    (base, models)
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];

struct Case {
    src_style: usize,
    tgt_style: usize,
    image: Tensor<f32>,
    caption: String,
}

fn suite_cases() -> Vec<Case> {
    let st = styles();
    (0..32)
        .map(|k| {
            let (si, ti) = PAIRS[k % 6];
            let sample = datagen(&st[si], 1, 24, 9000 + k as u64, 4).unwrap().remove(0);
            Case { src_style: si, tgt_style: ti, image: sample.image, caption: sample.caption }
        })
        .collect()
}

fn main() {
    let t_all = Instant::now();
    let (base, models) = build_models();
    let cfg = InjectionConfig::default_for(base.config());
    let t_probe = ditail_core::metrics::probe_timestep(&base);

    // style expression sanity: channel means of unguided samples per model
    for (i, m) in models.iter().enumerate() {
        let rec = generate(m, "red circle", "", 5, 7.5, None).unwrap();
        let cm = channel_means(&rec.image).unwrap();
        println!("style {i} gen channel means: {:.3} {:.3} {:.3}", cm[0], cm[1], cm[2]);
    }

    // reconstruction PSNR: inversion round trip, no injection
    let mut psnrs = Vec::new();
    for k in 0..6 {
        let sample = datagen(&styles()[k % 3], 1, 24, 7700 + k as u64, 4).unwrap().remove(0);
        let out = style_transfer(
            &sample.image,
            &base,
            &base,
            "",
            "",
            1.0,
            0.0,
            &cfg.clone().with_mask(InjectionMask::zero(24, 24)),
        )
        .unwrap();
        psnrs.push(psnr(&sample.image, &out).unwrap());
    }
    println!("reconstruction PSNR: {psnrs:.2?}");

    // the 32-case suite
    let cases = suite_cases();
    let alphas = [1.0, 2.0, 4.0, 8.0];
    let t0 = Instant::now();
    let mut dist_inj: Vec<[f64; 4]> = Vec::new(); // per case, per alpha (injection on)
    let mut dist_scale_only: Vec<[f64; 4]> = Vec::new();
    let mut dist_tgt_inv: Vec<f64> = Vec::new(); // alpha=2, inversion with target
    let mut out_inj_a2: Vec<Tensor<f32>> = Vec::new();
    for case in &cases {
        let tgt = &models[case.tgt_style];
        let mut row = [0.0; 4];
        let mut row_scale = [0.0; 4];
        for (ai, &alpha) in alphas.iter().enumerate() {
            let out =
                style_transfer(&case.image, &base, tgt, &case.caption, "", alpha, 0.0, &cfg)
                    .unwrap();
            row[ai] = structure_distance(&out, &case.image, &base, t_probe).unwrap();
            if alpha == 2.0 {
                out_inj_a2.push(out);
            }
            let out_ns = style_transfer(
                &case.image,
                &base,
                tgt,
                &case.caption,
                "",
                alpha,
                0.0,
                &cfg.clone().with_mask(InjectionMask::zero(24, 24)),
            )
            .unwrap();
            row_scale[ai] = structure_distance(&out_ns, &case.image, &base, t_probe).unwrap();
        }
        let out_tgt_inv =
            style_transfer(&case.image, tgt, tgt, &case.caption, "", 2.0, 0.0, &cfg).unwrap();
        dist_tgt_inv.push(structure_distance(&out_tgt_inv, &case.image, &base, t_probe).unwrap());
        dist_inj.push(row);
        dist_scale_only.push(row_scale);
    }
    println!("suite computed in {:.1}s", t0.elapsed().as_secs_f64());

    let mono = |rows: &[[f64; 4]]| -> (usize, usize) {
        let mut good = 0;
        let mut total = 0;
        for r in rows {
            for w in r.windows(2) {
                total += 1;
                if w[1] <= w[0] {
                    good += 1;
                }
            }
        }
        (good, total)
    };
    let (g, t) = mono(&dist_inj);
    println!("alpha monotonic (injection on): {g}/{t} = {:.0}%", 100.0 * g as f64 / t as f64);
    let (g2, t2) = mono(&dist_scale_only);
    println!("alpha monotonic (scaling only): {g2}/{t2} = {:.0}%", 100.0 * g2 as f64 / t2 as f64);
    let mean_per_alpha = |rows: &[[f64; 4]]| -> [f64; 4] {
        let mut m = [0.0; 4];
        for r in rows {
            for i in 0..4 {
                m[i] += r[i] / rows.len() as f64;
            }
        }
        m
    };
    println!("mean d per alpha (inj): {:.4?}", mean_per_alpha(&dist_inj));
    println!("mean d per alpha (scale): {:.4?}", mean_per_alpha(&dist_scale_only));

    let inj_wins =
        dist_inj.iter().zip(&dist_scale_only).filter(|(a, b)| a[1] < b[1]).count();
    println!("injection beats scaling-only at alpha=2: {inj_wins}/32");

    let tgt_inv_wins =
        dist_tgt_inv.iter().zip(&dist_inj).filter(|(b, a)| **b < a[1]).count();
    println!("target-model inversion beats base inversion: {tgt_inv_wins}/32");

    // style shift per ordered pair
    let style_sets: Vec<Vec<Vec<f64>>> = styles()
        .iter()
        .map(|s| {
            datagen(s, 64, 24, 4242, 4)
                .unwrap()
                .iter()
                .map(|x| descriptor(&x.image).unwrap())
                .collect()
        })
        .collect();
    for (pi, pair) in PAIRS.iter().enumerate() {
        let idx: Vec<usize> = (0..32).filter(|k| k % 6 == pi).collect();
        let transferred: Vec<Vec<f64>> =
            idx.iter().map(|&k| descriptor(&out_inj_a2[k]).unwrap()).collect();
        let sources: Vec<Vec<f64>> =
            idx.iter().map(|&k| descriptor(&cases[k].image).unwrap()).collect();
        let d_t = frechet_distance(&transferred, &style_sets[pair.1]).unwrap().distance;
        let d_s = frechet_distance(&sources, &style_sets[pair.1]).unwrap().distance;
        println!(
            "pair {:?}: transferred->tgt {:.4} vs source->tgt {:.4}  {}",
            pair,
            d_t,
            d_s,
            if d_t < d_s { "OK" } else { "VIOLATED" }
        );
    }

    // novel generation matrix spot-check
    let ng = novel_generation("red circle", "", &models[0], &models[1], 77, &cfg).unwrap();
    let d_cross = structure_distance(&ng.i1_to_2, &ng.i1.image, &base, t_probe).unwrap();
    let traj = ng.i1.trajectory.as_ref().unwrap();
    let mut cfg_noinj = cfg.clone();
    cfg_noinj.residual_layers.clear();
    cfg_noinj.attention_layers.clear();
    let plain = ditail(traj, "red circle", "", &models[1], &cfg_noinj).unwrap();
    let d_plain = structure_distance(&plain, &ng.i1.image, &base, t_probe).unwrap();
    println!("novel-gen: injected {d_cross:.4} vs uninjected {d_plain:.4}");

    // edit suite
    let shapes = ["circle", "square", "triangle"];
    let mut comp_wins = 0;
    let mut hue_wins = 0;
    for k in 0..16 {
        let mut rng = Rng::new(8800 + k as u64);
        let shape_word = shapes[k % 3];
        let content = ditail_core::trainer::ShapeParams {
            shape: match k % 3 {
                0 => ditail_core::trainer::Shape::Circle,
                1 => ditail_core::trainer::Shape::Square,
                _ => ditail_core::trainer::Shape::Triangle,
            },
            color_word: "red".into(),
            cx: 9.0 + 6.0 * rng.next_uniform() as f32,
            cy: 9.0 + 6.0 * rng.next_uniform() as f32,
            r: 5.0 + 2.5 * rng.next_uniform() as f32,
        };
        let src = ditail_core::trainer::render(&styles()[0], &content, 24).unwrap();
        let caption = format!("red {shape_word} filled");
        let edit_pos = format!("blue {shape_word}");
        let tgt = &models[2 - (k % 2)];
        let mut outs = Vec::new();
        for omega in [7.5, 15.0] {
            let out = stylized_edit(
                &src,
                &base,
                tgt,
                &edit_pos,
                "red",
                (&caption, ""),
                2.0,
                0.5,
                omega,
                &cfg,
            )
            .unwrap();
            outs.push(out);
        }
        let c75 = compliance_score(&outs[0], &edit_pos, base.vocab()).unwrap();
        let c15 = compliance_score(&outs[1], &edit_pos, base.vocab()).unwrap();
        if c15 >= c75 {
            comp_wins += 1;
        }
        let blue_src = {
            let m = channel_means(&src).unwrap();
            m[2] - m[0]
        };
        let blue_out = {
            let m = channel_means(&outs[1]).unwrap();
            m[2] - m[0]
        };
        if blue_out > blue_src {
            hue_wins += 1;
        }
    }
    println!("edit compliance omega15 >= omega7.5: {comp_wins}/16");
    println!("color swap toward blue: {hue_wins}/16");

    // capture-mode equivalence on a trained model (bitwise)
    let rec = generate(&models[0], "", "", 3, 7.5, Some(CaptureMode::Latent)).unwrap();
    let lat = rec.trajectory.unwrap();
    let feat = lat.to_feature_mode(&models[0], &cfg.residual_layers, &cfg.attention_layers).unwrap();
    let o1 = ditail(&lat, "", "", &models[0], &cfg).unwrap();
    let o2 = ditail(&feat, "", "", &models[0], &cfg.clone().with_mode(CaptureMode::Feature)).unwrap();
    println!("capture-mode equivalence bitwise: {}", o1 == o2);

    // inversion with 1000 steps as a smoke check
    let sample = datagen(&styles()[0], 1, 24, 31337, 4).unwrap().remove(0);
    let t0 = Instant::now();
    let traj = invert(&base, &sample.image, "", "", 1.0, 0.0, 1000).unwrap();
    println!("1000-step inversion: {:.1}s, {} recorded steps", t0.elapsed().as_secs_f64(), traj.steps().len());

    println!("total calibration time {:.1}s", t_all.elapsed().as_secs_f64());
}
