//! Cosine-schedule Gaussian diffusion with clean-sample (x0) prediction.
//!
//! Step indices run `0..=steps`; index 0 is the clean data (`ᾱ_0 = 1`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::skeleton::{disassemble_vector, MotionSequence, JOINT_COUNT, MOTION_WIDTH};

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    betas: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T)+s)/(1+s)·π/2)`. Betas are clipped
    /// to [`MAX_BETA`] and `ᾱ` is rebuilt as the running product.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f(0)).collect();
        let mut alphas = vec![1.0; steps + 1];
        let mut betas = vec![0.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            let beta = (1.0 - raw[t] / raw[t - 1]).clamp(0.0, MAX_BETA);
            betas[t] = beta;
            alphas[t] = 1.0 - beta;
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let posterior_variance = (0..=steps)
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t]
                }
            })
            .collect();
        let s = Self {
            steps,
            alphas,
            alpha_bars,
            betas,
            posterior_variance,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        for t in 1..=self.steps {
            if !(self.alphas[t] > 0.0 && self.alphas[t] < 1.0) {
                return Err(Error::Config(format!("alpha_{t} = {} outside (0, 1)", self.alphas[t])));
            }
            if self.alpha_bars[t] >= self.alpha_bars[t - 1] {
                return Err(Error::Config(format!("alpha_bar not decreasing at step {t}")));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t > self.steps {
            return Err(Error::Index {
                index: t,
                max: self.steps,
            });
        }
        Ok(t)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t]
    }

    /// Uniform draw from `1..=steps`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let t = schedule.index(t)?;
    check_same("q_sample", x0, noise)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| a * x + b * n).collect();
    Tensor::new(x0.shape(), data)
}

/// Posterior `q(x_prev | x_t, x0_hat)` between two arbitrary indices
/// `t > prev`, sampled with `noise` unless `prev == 0`.
pub fn posterior_step(
    x_t: &Tensor,
    t: usize,
    prev: usize,
    x0_hat: &Tensor,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.index(t)?;
    if prev >= t {
        return Err(Error::Contract(format!("posterior step needs t > prev, got {t} -> {prev}")));
    }
    check_same("posterior_step", x_t, x0_hat)?;
    check_same("posterior_step", x_t, noise)?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
    let alpha = ab_t / ab_p;
    let beta = 1.0 - alpha;
    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let sd = if prev == 0 {
        0.0
    } else {
        ((1.0 - ab_p) / (1.0 - ab_t) * beta).sqrt()
    };
    let data = x0_hat
        .data()
        .iter()
        .zip(x_t.data())
        .zip(noise.data())
        .map(|((x0, xt), n)| c0 * x0 + ct * xt + sd * n)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// One ancestral step `t -> t-1`; deterministic at `t = 1`.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Contract("p_sample_step needs t >= 1".into()));
    }
    posterior_step(x_t, t, t - 1, x0_hat, schedule, noise)
}

/// Anything that maps a noisy sample and its step to a clean estimate with
/// the same shape. Conditions are carried by the implementor.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Every step (`steps, steps-1, ..., 1`).
pub fn full_steps(schedule: &NoiseSchedule) -> Vec<usize> {
    (1..=schedule.steps()).rev().collect()
}

/// `count` evenly strided steps ending at `steps`, decreasing.
pub fn strided_steps(schedule: &NoiseSchedule, count: usize) -> Result<Vec<usize>> {
    let n = schedule.steps();
    if count == 0 || count > n {
        return Err(Error::Config(format!("cannot take {count} of {n} diffusion steps")));
    }
    let mut v: Vec<usize> = (1..=count)
        .map(|i| ((i * n) as f64 / count as f64).round() as usize)
        .collect();
    v.dedup();
    v.reverse();
    Ok(v)
}

fn validate_subset(subset: &[usize], schedule: &NoiseSchedule) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Config("empty step subset".into()));
    }
    for w in subset.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(format!("step subset not decreasing at {} -> {}", w[0], w[1])));
        }
    }
    for &t in subset {
        if t == 0 || t > schedule.steps() {
            return Err(Error::Index {
                index: t,
                max: schedule.steps(),
            });
        }
    }
    Ok(())
}

/// Ancestral sampling from `x ~ N(0, I)` of `shape` along `subset`.
pub fn sample_tensor<M: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: &[usize],
    schedule: &NoiseSchedule,
    subset: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    validate_subset(subset, schedule)?;
    let mut x = Tensor::randn(shape, rng);
    for (i, &t) in subset.iter().enumerate() {
        let prev = subset.get(i + 1).copied().unwrap_or(0);
        let x0_hat = model.predict_x0(&x, t)?;
        if x0_hat.shape() != x.shape() {
            return Err(Error::Contract(format!(
                "model returned {:?} for input {:?}",
                x0_hat.shape(),
                x.shape()
            )));
        }
        let noise = if prev == 0 {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, rng)
        };
        x = posterior_step(&x, t, prev, &x0_hat, schedule, &noise)?;
    }
    Ok(x)
}

/// Samples a `frames × 300` motion vector and unpacks it. Velocities are
/// recomputed from the sampled positions.
pub fn sample<M: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    frames: usize,
    fps: f64,
    schedule: &NoiseSchedule,
    subset: &[usize],
    rng: &mut R,
) -> Result<MotionSequence> {
    let x = sample_tensor(model, &[frames, MOTION_WIDTH], schedule, subset, rng)?;
    let mut m = disassemble_vector(&x, JOINT_COUNT, fps)?;
    if m.frames >= 2 {
        m.recompute_velocities()?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1) >= 0.999);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!((1..=1000).all(|t| s.beta(t) <= MAX_BETA));
    }

    #[test]
    fn strided_subsets() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(strided_steps(&s, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(strided_steps(&s, 100).unwrap().len(), 100);
        assert_eq!(strided_steps(&s, 1000).unwrap(), full_steps(&s));
        assert!(strided_steps(&s, 0).is_err());
    }

    #[test]
    fn out_of_range_step_is_an_index_error() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(matches!(q_sample(&x, 11, &x, &s), Err(Error::Index { index: 11, max: 10 })));
    }

    #[test]
    fn bad_subset_is_rejected() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let zero = |x: &Tensor, _t: usize| Ok(Tensor::zeros(x.shape()));
        let mut rng = rand::rng();
        assert!(sample_tensor(&zero, &[2], &s, &[3, 5], &mut rng).is_err());
        assert!(sample_tensor(&zero, &[2], &s, &[11], &mut rng).is_err());
    }
}
