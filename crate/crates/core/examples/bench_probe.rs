// quick perf probe (not part of the repo)
use std::time::Instant;
use ditail_core::conditioner::Vocabulary;
use ditail_core::denoiser::{predict_noise, DenoiserModel, ModelConfig};
use ditail_core::rng::Rng;
use ditail_core::schedule::Schedule;
use ditail_core::tensor::Tensor;
use ditail_core::trainer::{datagen, train, StyleSpec};

fn main() {
    let cfg = ModelConfig::default_toy();
    let sched = Schedule::default_toy(50).unwrap();
    let model = DenoiserModel::init(cfg.clone(), sched, Vocabulary::standard(11), 1).unwrap();
    let mut rng = Rng::new(2);
    let z = Tensor::randn(cfg.image_shape(), &mut rng);
    let c = model.vocab().null_embedding();

    let t0 = Instant::now();
    let reps = 100;
    for i in 0..reps {
        let _ = predict_noise(&model, &z, 1 + (i % 999), &c, false).unwrap();
    }
    let per_fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward: {:.3} ms", per_fwd * 1e3);

    let data = datagen(&StyleSpec::filled(), 64, 24, 3, 4).unwrap();
    let t0 = Instant::now();
    let steps = 30;
    let _ = train(&model, &data, steps, 1e-3, 4).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / steps as f64;
    println!("train step (batch 4): {:.3} ms", per_step * 1e3);
    println!("est. 3000-step train: {:.1} s", per_step * 3000.0);
    println!("est. 50-step guided gen (2 fwd/step): {:.2} s", per_fwd * 100.0);
    println!("est. ditail run (50 inv + ~125 fwd): {:.2} s", per_fwd * 175.0);
}
