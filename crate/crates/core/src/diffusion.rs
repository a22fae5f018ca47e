//! Forward and reverse diffusion kernels.
//!
//! Coefficients are evaluated in `f64` from the schedule and applied in
//! `f32`. The `*_items` variants take one timestep per leading-axis item;
//! the single-timestep functions are thin wrappers over them.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub type ImageTensor = Tensor<f32>;

/// Anything that predicts the noise in `x_t` at per-item timesteps.
pub trait NoisePredictor {
    fn predict(&self, x_t: &ImageTensor, ts: &[usize]) -> Result<ImageTensor>;
}

fn check_items(x: &ImageTensor, ts: &[usize], schedule: &NoiseSchedule, allow_zero: bool) -> Result<()> {
    let batch = x.shape().first().copied().unwrap_or(0);
    if ts.len() != batch {
        return Err(Error::Shape {
            op: "timesteps",
            expected: vec![batch],
            got: vec![ts.len()],
        });
    }
    for &t in ts {
        if !(allow_zero && t == 0) {
            schedule.check_t(t)?;
        }
    }
    Ok(())
}

fn per_item(
    a: &ImageTensor,
    b: &ImageTensor,
    ts: &[usize],
    f: impl Fn(usize, f32, f32) -> f32,
) -> ImageTensor {
    let mut out = a.clone();
    let n = a.item_len();
    for (i, &t) in ts.iter().enumerate() {
        let (src_a, src_b) = (&a.data()[i * n..(i + 1) * n], &b.data()[i * n..(i + 1) * n]);
        for ((o, &x), &e) in out.item_mut(i).iter_mut().zip(src_a).zip(src_b) {
            *o = f(t, x, e);
        }
    }
    out
}

/// One step of q(x_t | x_{t-1}): `√(1−β_t)·x_prev + √β_t·eps`.
pub fn forward_step(x_prev: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    x_prev.ensure_same_shape(eps, "forward_step")?;
    schedule.check_t(t)?;
    let a = schedule.alpha(t).sqrt() as f32;
    let b = schedule.beta(t).sqrt() as f32;
    let ts = vec![t; x_prev.shape()[0]];
    Ok(per_item(x_prev, eps, &ts, |_, x, e| a * x + b * e))
}

/// Closed-form q(x_t | x_0): `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_marginal(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    let ts = vec![t; x0.shape().first().copied().unwrap_or(0)];
    forward_marginal_items(x0, &ts, eps, schedule)
}

/// Per-item closed-form noising. `t = 0` returns the item unchanged.
pub fn forward_marginal_items(
    x0: &ImageTensor,
    ts: &[usize],
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    x0.ensure_same_shape(eps, "forward_marginal")?;
    check_items(x0, ts, schedule, true)?;
    let coef: Vec<(f32, f32)> = ts
        .iter()
        .map(|&t| {
            let ab = schedule.alpha_bar(t);
            (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
        })
        .collect();
    let mut out = x0.clone();
    let n = x0.item_len();
    for (i, &(a, b)) in coef.iter().enumerate() {
        let (xs, es) = (&x0.data()[i * n..(i + 1) * n], &eps.data()[i * n..(i + 1) * n]);
        for ((o, &x), &e) in out.item_mut(i).iter_mut().zip(xs).zip(es) {
            *o = a * x + b * e;
        }
    }
    Ok(out)
}

/// Coefficients of one reverse step at `t`:
/// `x_{t-1} = c_x·(x_t − c_eps·eps_pred) + σ_t·z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoefficients {
    pub c_x: f32,
    pub c_eps: f32,
    pub sigma: f32,
}

impl ReverseCoefficients {
    pub fn at(schedule: &NoiseSchedule, t: usize) -> Self {
        ReverseCoefficients {
            c_x: (1.0 / schedule.alpha(t).sqrt()) as f32,
            c_eps: (schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32,
            sigma: schedule.sigma(t) as f32,
        }
    }

    #[inline]
    pub fn apply(&self, x: f32, eps_pred: f32, z: f32) -> f32 {
        self.c_x * (x - self.c_eps * eps_pred) + self.sigma * z
    }

    /// d x_{t-1} / d eps_pred.
    pub fn eps_gradient(&self) -> f32 {
        -self.c_x * self.c_eps
    }
}

/// One ancestral step of p_θ(x_{t-1} | x_t) with the predicted noise.
pub fn reverse_step(
    x_t: &ImageTensor,
    t: usize,
    eps_pred: &ImageTensor,
    z: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    let ts = vec![t; x_t.shape().first().copied().unwrap_or(0)];
    reverse_step_items(x_t, &ts, eps_pred, z, schedule)
}

pub fn reverse_step_items(
    x_t: &ImageTensor,
    ts: &[usize],
    eps_pred: &ImageTensor,
    z: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    x_t.ensure_same_shape(eps_pred, "reverse_step")?;
    x_t.ensure_same_shape(z, "reverse_step")?;
    check_items(x_t, ts, schedule, false)?;
    let mut out = x_t.clone();
    let n = x_t.item_len();
    for (i, &t) in ts.iter().enumerate() {
        let c = ReverseCoefficients::at(schedule, t);
        let range = i * n..(i + 1) * n;
        let (xs, es, zs) = (&x_t.data()[range.clone()], &eps_pred.data()[range.clone()], &z.data()[range]);
        for (((o, &x), &e), &zz) in out.item_mut(i).iter_mut().zip(xs).zip(es).zip(zs) {
            *o = c.apply(x, e, zz);
        }
    }
    Ok(out)
}

/// Runs the reverse chain from `x` at step `t_start` down to 0. The noise
/// `z` is drawn from `rng` for t > 1 and is zero at t = 1.
pub fn denoise_from(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    mut x: ImageTensor,
    t_start: usize,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    schedule.check_t(t_start)?;
    let batch = x.shape()[0];
    for t in (1..=t_start).rev() {
        let ts = vec![t; batch];
        let eps_pred = denoiser.predict(&x, &ts)?;
        let z = if t > 1 {
            rng::normal_tensor(rng, x.shape())
        } else {
            Tensor::zeros(x.shape())
        };
        x = reverse_step_items(&x, &ts, &eps_pred, &z, schedule)?;
    }
    Ok(x)
}

/// Ancestral sampling from x_T ~ N(0, I).
pub fn sample(denoiser: &dyn NoisePredictor, schedule: &NoiseSchedule, shape: &[usize], rng_seed: u64) -> Result<ImageTensor> {
    if shape.len() != 4 {
        return Err(Error::Shape {
            op: "sample",
            expected: vec![0, 1, 0, 0],
            got: shape.to_vec(),
        });
    }
    let mut rng = rng::seeded(rng_seed);
    let x_t = rng::normal_tensor(&mut rng, shape);
    denoise_from(denoiser, schedule, x_t, schedule.steps(), &mut rng)
}

/// Noises `x0` to step `t_ad` in closed form and denoises it back.
pub fn partial_reconstruct(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x0: &ImageTensor,
    t_ad: usize,
    rng_seed: u64,
) -> Result<ImageTensor> {
    schedule.check_t(t_ad)?;
    x0.dims4()?;
    let mut rng = rng::seeded(rng_seed);
    let eps = rng::normal_tensor(&mut rng, x0.shape());
    let x_t = forward_marginal(x0, t_ad, &eps, schedule)?;
    denoise_from(denoiser, schedule, x_t, t_ad, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_linear_schedule, SigmaMode};
    use approx::assert_relative_eq;

    fn full(v: f32) -> ImageTensor {
        Tensor::full(&[2, 1, 3, 3], v)
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, x: &ImageTensor, _: &[usize]) -> Result<ImageTensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn forward_step_examples() {
        let s = NoiseSchedule::from_betas(vec![0.2, 0.1, 1e-12]).unwrap();
        let out = forward_step(&full(0.0), 1, &full(1.0), &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.447_213_6).abs() < 1e-6));
        let out = forward_step(&full(1.0), 2, &full(0.0), &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.948_683_3).abs() < 1e-6));
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.3, -0.7, 0.9]).unwrap();
        let e = Tensor::from_vec(&[1, 1, 1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let out = forward_step(&x, 3, &e, &s).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v).abs() < 1e-5);
        }
        assert!(forward_step(&x, 4, &e, &s).is_err());
        assert!(forward_step(&x, 1, &full(0.0), &s).is_err());
    }

    #[test]
    fn forward_marginal_examples() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        let out = forward_marginal(&full(1.0), 2, &full(1.0), &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.377_678_4).abs() < 1e-6));
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, -1.0]).unwrap();
        let out = forward_marginal(&x, 1, &Tensor::zeros(&[1, 1, 1, 2]), &s).unwrap();
        assert_eq!(out.data(), &[0.5 * 0.9f64.sqrt() as f32, -(0.9f64.sqrt() as f32)]);
        assert!(forward_marginal(&x, 0, &Tensor::zeros(&[1, 1, 1, 2]), &s).is_err());
    }

    #[test]
    fn marginal_items_zero_is_identity() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let e = Tensor::full(&[2, 1, 1, 2], 5.0);
        let out = forward_marginal_items(&x, &[0, 10], &e, &s).unwrap();
        assert_eq!(out.item(0), x.item(0));
        assert_ne!(out.item(1), x.item(1));
    }

    #[test]
    fn reverse_step_examples() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        for mode in [SigmaMode::Beta, SigmaMode::Posterior] {
            let s = s.clone().with_sigma_mode(mode);
            let out = reverse_step(&full(1.0), 2, &full(1.0), &full(0.0), &s).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.695_456_86).abs() < 1e-6), "{:?}", out.data());
        }
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, -2.0]).unwrap();
        let zeros = Tensor::zeros(&[1, 1, 1, 2]);
        let out = reverse_step(&x, 1, &zeros, &zeros, &s).unwrap();
        let k = (1.0 / 0.9f64.sqrt()) as f32;
        assert_eq!(out.data(), &[0.5 * k, -2.0 * k]);
        let again = reverse_step(&x, 1, &zeros, &zeros, &s).unwrap();
        assert_eq!(out, again);
        assert!(reverse_step(&x, 3, &zeros, &zeros, &s).is_err());
    }

    #[test]
    fn coefficient_identity() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= (1.0 - s.beta(t)).sqrt();
            assert_relative_eq!(s.alpha_bar(t).sqrt(), prod, max_relative = 1e-10);
        }
    }

    #[test]
    fn sample_shape_and_determinism() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let a = sample(&Zero, &s, &[3, 1, 4, 4], 11).unwrap();
        let b = sample(&Zero, &s, &[3, 1, 4, 4], 11).unwrap();
        let c = sample(&Zero, &s, &[3, 1, 4, 4], 12).unwrap();
        assert_eq!(a.shape(), &[3, 1, 4, 4]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample(&Zero, &s, &[4, 4], 11).is_err());
    }

    #[test]
    fn partial_reconstruct_range_and_determinism() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let x = Tensor::full(&[1, 1, 4, 4], 0.25);
        assert!(partial_reconstruct(&Zero, &s, &x, 0, 1).is_err());
        assert!(partial_reconstruct(&Zero, &s, &x, 21, 1).is_err());
        let a = partial_reconstruct(&Zero, &s, &x, 5, 3).unwrap();
        assert_eq!(a, partial_reconstruct(&Zero, &s, &x, 5, 3).unwrap());
        assert_eq!(a.shape(), x.shape());
    }

    /// A predictor that knows x0 recovers it from a one-step partial diffusion.
    #[test]
    fn partial_reconstruct_with_exact_predictor_is_near_identity() {
        struct Exact<'a>(&'a ImageTensor, &'a NoiseSchedule);
        impl NoisePredictor for Exact<'_> {
            fn predict(&self, x: &ImageTensor, ts: &[usize]) -> Result<ImageTensor> {
                let ab = self.1.alpha_bar(ts[0]);
                let mut out = x.clone();
                for (o, &x0) in out.data_mut().iter_mut().zip(self.0.data()) {
                    *o = ((*o as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32;
                }
                Ok(out)
            }
        }
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0, -0.2, 0.4, 0.9]).unwrap();
        let out = partial_reconstruct(&Exact(&x0, &s), &s, &x0, 1, 9).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
