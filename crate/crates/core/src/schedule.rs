//! Variance schedules and the diffusion step rules.
//!
//! The schedule keeps its per-step retention factors and their running
//! products in `f64` regardless of the tensor precision; step rules compute
//! per element in `f64` and round once into the tensor's scalar type. The
//! deterministic DDIM rule is the sampler used by the denoising loops; the
//! DDPM mean update exists as a verification reference only.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear-beta variance schedule plus the inference step subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    t_train: usize,
    beta_start: f64,
    beta_end: f64,
    /// Per-step retention factors alpha_t, index 0 holding t = 1.
    alphas: Vec<f64>,
    /// Running products alpha_bar_t, index 0 holding t = 1.
    alpha_bars: Vec<f64>,
    /// Strictly decreasing timesteps used at inference; last maps to t -> 0.
    sample_steps: Vec<usize>,
}

impl Schedule {
    /// Builds a schedule with betas linearly spaced over the training range
    /// and `s` evenly spaced sampling timesteps, descending.
    pub fn new(t_train: usize, beta_start: f64, beta_end: f64, s: usize) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::Config("schedule: t_train must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if s == 0 || s > t_train {
            return Err(Error::Config(format!(
                "schedule: sample count {s} outside 1..={t_train}"
            )));
        }
        let mut alphas = Vec::with_capacity(t_train);
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut running = 1.0f64;
        for i in 0..t_train {
            let beta = if t_train == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
            };
            let alpha = 1.0 - beta;
            running *= alpha;
            alphas.push(alpha);
            alpha_bars.push(running);
        }
        let sample_steps: Vec<usize> = (0..s).map(|k| t_train - k * t_train / s).collect();
        Ok(Schedule { t_train, beta_start, beta_end, alphas, alpha_bars, sample_steps })
    }

    /// The paper-scale default: T = 1000, beta in [1e-4, 2e-2], 50 steps.
    pub fn default_toy(s: usize) -> Result<Self> {
        Schedule::new(1000, 1e-4, 2e-2, s)
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn sample_steps(&self) -> &[usize] {
        &self.sample_steps
    }

    /// Same training discretization, different inference step count.
    pub fn with_sample_count(&self, s: usize) -> Result<Schedule> {
        Schedule::new(self.t_train, self.beta_start, self.beta_end, s)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_train {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.t_train)));
        }
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product alpha_bar_t, with alpha_bar_0 = 1 for the clean state.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.t_train {
            return Err(Error::Range(format!("timestep {t} outside 0..={}", self.t_train)));
        }
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }
}

/// Closed-form forward corruption: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn forward_diffuse<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &Schedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "forward_diffuse: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let abar = sched.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    axpy(z0, eps, a, b, "forward_diffuse")
}

/// The printed DDPM mean update; verification reference, not the sampler.
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &Schedule,
) -> Result<Tensor<T>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Dimension("ddpm_step: shape mismatch".into()));
    }
    let alpha = sched.alpha(t)?;
    let abar = sched.alpha_bar(t)?;
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - abar).sqrt();
    axpy(z_t, eps_hat, inv_sqrt_alpha, -inv_sqrt_alpha * coef, "ddpm_step")
}

/// Deterministic DDIM update from timestep `t` down to `t_prev`.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::Ordering(format!("ddim_step: need t > t_prev, got {t} <= {t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Dimension("ddim_step: shape mismatch".into()));
    }
    let abar_t = sched.alpha_bar(t)?;
    let abar_prev = sched.alpha_bar(t_prev)?;
    // z0_hat = (z - sqrt(1-abar_t) eps) / sqrt(abar_t)
    // out    = sqrt(abar_prev) z0_hat + sqrt(1-abar_prev) eps
    let a = (abar_prev / abar_t).sqrt();
    let b = (1.0 - abar_prev).sqrt() - a * (1.0 - abar_t).sqrt();
    axpy(z_t, eps_hat, a, b, "ddim_step")
}

/// Algebraic inverse of [`ddim_step`] for a fixed noise estimate, mapping
/// timestep `t_prev` up to `t`.
pub fn ddim_invert_step<T: Scalar>(
    z_prev: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t_prev: usize,
    t: usize,
    sched: &Schedule,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::Ordering(format!(
            "ddim_invert_step: need t > t_prev, got {t} <= {t_prev}"
        )));
    }
    if z_prev.shape() != eps_hat.shape() {
        return Err(Error::Dimension("ddim_invert_step: shape mismatch".into()));
    }
    let abar_t = sched.alpha_bar(t)?;
    let abar_prev = sched.alpha_bar(t_prev)?;
    let a = (abar_t / abar_prev).sqrt();
    let b = (1.0 - abar_t).sqrt() - a * (1.0 - abar_prev).sqrt();
    axpy(z_prev, eps_hat, a, b, "ddim_invert_step")
}

/// Elementwise a*x + b*y evaluated in f64 and rounded once into T.
fn axpy<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: f64,
    b: f64,
    op: &'static str,
) -> Result<Tensor<T>> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&xv, &yv)| T::from_f64(a * xv.to_f64() + b * yv.to_f64()))
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    out.ensure_finite(op)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use crate::rng::Rng;

    fn toy() -> Schedule {
        Schedule::default_toy(50).unwrap()
    }

    #[test]
    fn first_alpha_bar_is_single_factor() {
        let s = toy();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn final_alpha_bar_matches_serial_product_oracle() {
        let s = toy();
        // high-precision running product in extended order, recomputed here
        let mut product = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0;
            product *= 1.0 - beta;
        }
        let rel = (s.alpha_bar(1000).unwrap() - product).abs() / product;
        assert!(rel < 1e-14);
    }

    #[test]
    fn full_sample_steps_count_down_from_t() {
        let s = Schedule::new(10, 1e-4, 2e-2, 10).unwrap();
        assert_eq!(s.sample_steps(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = toy();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn parameter_bounds_rejected() {
        assert!(Schedule::new(0, 1e-4, 2e-2, 1).is_err());
        assert!(Schedule::new(10, 0.0, 2e-2, 5).is_err());
        assert!(Schedule::new(10, 0.3, 0.2, 5).is_err());
        assert!(Schedule::new(10, 1e-4, 1.0, 5).is_err());
        assert!(Schedule::new(10, 1e-4, 2e-2, 11).is_err());
        assert!(Schedule::new(10, 1e-4, 2e-2, 0).is_err());
    }

    #[test]
    fn forward_diffuse_t0_is_identity() {
        let s = toy();
        let mut rng = Rng::new(1);
        let z0 = Tensor::<f64>::randn(vec![2, 3], &mut rng);
        let eps = Tensor::<f64>::randn(vec![2, 3], &mut rng);
        let out = forward_diffuse(&z0, 0, &eps, &s).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn forward_diffuse_zero_noise_scales_input() {
        let s = toy();
        let z0 = Tensor::full(vec![4], 1.0f64);
        let eps = Tensor::zeros(vec![4]);
        let out = forward_diffuse(&z0, 400, &eps, &s).unwrap();
        let want = s.alpha_bar(400).unwrap().sqrt();
        for &v in out.data() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_range_checked() {
        let s = toy();
        let z = Tensor::<f64>::zeros(vec![2]);
        assert!(matches!(forward_diffuse(&z, 1001, &z, &s), Err(Error::Range(_))));
    }

    #[test]
    fn stepwise_composition_matches_closed_form() {
        // z_k = sqrt(alpha_k) z_{k-1} + sqrt(1-alpha_k) eps_k for k = 1..5
        // must equal the closed form with the accumulated effective noise.
        let s = toy();
        let mut rng = Rng::new(42);
        let z0 = Tensor::<f64>::randn(vec![3, 3], &mut rng);
        let noises: Vec<Tensor<f64>> =
            (0..5).map(|_| Tensor::<f64>::randn(vec![3, 3], &mut rng)).collect();
        let mut z = z0.clone();
        for (k, eps) in noises.iter().enumerate() {
            let alpha = s.alpha(k + 1).unwrap();
            z = axpy(&z, eps, alpha.sqrt(), (1.0 - alpha).sqrt(), "step").unwrap();
        }
        // effective noise: sum_k sqrt(abar_5/abar_k) sqrt(1-alpha_k) eps_k / sqrt(1-abar_5)
        let abar5 = s.alpha_bar(5).unwrap();
        let mut eff = Tensor::<f64>::zeros(vec![3, 3]);
        for (k, eps) in noises.iter().enumerate() {
            let t = k + 1;
            let w = (abar5 / s.alpha_bar(t).unwrap()).sqrt() * (1.0 - s.alpha(t).unwrap()).sqrt();
            eff = axpy(&eff, eps, 1.0, w, "acc").unwrap();
        }
        eff = eff.map(|v| v / (1.0 - abar5).sqrt());
        let closed = forward_diffuse(&z0, 5, &eff, &s).unwrap();
        for (a, b) in z.data().iter().zip(closed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_zero_eps_rescales() {
        let s = toy();
        let mut rng = Rng::new(3);
        let z = Tensor::<f64>::randn(vec![5], &mut rng);
        let eps = Tensor::zeros(vec![5]);
        let out = ddpm_step(&z, &eps, 700, &s).unwrap();
        let want = 1.0 / s.alpha(700).unwrap().sqrt();
        for (o, zv) in out.data().iter().zip(z.data()) {
            assert!((o - zv * want).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_identity_step_in_small_beta_limit() {
        // deviation from identity shrinks as O(sqrt(beta)) through the
        // eps coefficient beta/sqrt(1 - abar_t)
        let mut last = f64::INFINITY;
        for beta in [1e-6, 1e-9, 1e-12] {
            let s = Schedule::new(4, beta, beta, 4).unwrap();
            let mut rng = Rng::new(4);
            let z = Tensor::<f64>::randn(vec![5], &mut rng);
            let eps = Tensor::<f64>::randn(vec![5], &mut rng);
            let out = ddpm_step(&z, &eps, 2, &s).unwrap();
            let dev = out
                .data()
                .iter()
                .zip(z.data())
                .map(|(o, zv)| (o - zv).abs())
                .fold(0.0, f64::max);
            assert!(dev < last);
            last = dev;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn ddpm_matches_scalar_formula() {
        let s = toy();
        let mut rng = Rng::new(5);
        let z = Tensor::<f64>::randn(vec![7], &mut rng);
        let eps = Tensor::<f64>::randn(vec![7], &mut rng);
        let t = 531;
        let out = ddpm_step(&z, &eps, t, &s).unwrap();
        let alpha = s.alpha(t).unwrap();
        let abar = s.alpha_bar(t).unwrap();
        for i in 0..7 {
            let want = (z.data()[i] - (1.0 - alpha) / (1.0 - abar).sqrt() * eps.data()[i])
                / alpha.sqrt();
            assert!((out.data()[i] - want).abs() < 1e-7);
        }
    }

    #[test]
    fn ddim_exact_noise_recovers_marginal() {
        let s = toy();
        let mut rng = Rng::new(6);
        let z0 = Tensor::<f64>::randn(vec![2, 4], &mut rng);
        let eps = Tensor::<f64>::randn(vec![2, 4], &mut rng);
        let (t, t_prev) = (600, 480);
        let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let stepped = ddim_step(&z_t, &eps, t, t_prev, &s).unwrap();
        let want = forward_diffuse(&z0, t_prev, &eps, &s).unwrap();
        for (a, b) in stepped.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_bad_ordering() {
        let s = toy();
        let z = Tensor::<f64>::zeros(vec![2]);
        assert!(matches!(ddim_step(&z, &z, 100, 100, &s), Err(Error::Ordering(_))));
        assert!(matches!(ddim_invert_step(&z, &z, 100, 100, &s), Err(Error::Ordering(_))));
    }

    #[test]
    fn invert_with_zero_eps_is_pure_rescale() {
        let s = toy();
        let mut rng = Rng::new(8);
        let z = Tensor::<f64>::randn(vec![3], &mut rng);
        let eps = Tensor::zeros(vec![3]);
        let out = ddim_invert_step(&z, &eps, 200, 400, &s).unwrap();
        let want = (s.alpha_bar(400).unwrap() / s.alpha_bar(200).unwrap()).sqrt();
        for (o, zv) in out.data().iter().zip(z.data()) {
            assert!((o - zv * want).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_and_ddim_agree_to_first_order_at_tiny_beta() {
        // The two rules differ on the eps term by ~beta/(2 sqrt(1-abar_t)),
        // so agreement at 1e-6 relative needs the accumulated noise level to
        // dominate a single step's beta: tiny beta, late timestep.
        let s = Schedule::new(1000, 1e-10, 1e-10, 1000).unwrap();
        let mut rng = Rng::new(9);
        let z = Tensor::<f64>::randn(vec![6], &mut rng);
        let eps = Tensor::<f64>::randn(vec![6], &mut rng);
        for t in [400, 700, 1000] {
            let a = ddpm_step(&z, &eps, t, &s).unwrap();
            let b = ddim_step(&z, &eps, t, t - 1, &s).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                let scale = x.abs().max(1.0);
                assert!((x - y).abs() / scale < 1e-6, "t={t}: {x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn invert_then_sample_is_identity(seed in 0u64..500, pair in 0usize..49) {
            let s = toy();
            let steps = s.sample_steps().to_vec();
            let t = steps[pair];
            let t_prev = steps[pair + 1];
            let mut rng = Rng::new(seed);
            let z = Tensor::<f64>::randn(vec![4], &mut rng);
            let eps = Tensor::<f64>::randn(vec![4], &mut rng);
            let up = ddim_invert_step(&z, &eps, t_prev, t, &s).unwrap();
            let back = ddim_step(&up, &eps, t, t_prev, &s).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                let scale = b.abs().max(1e-3);
                prop_assert!((a - b).abs() / scale <= 1e-12);
            }
        }
    }
}
