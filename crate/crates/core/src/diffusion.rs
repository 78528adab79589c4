//! Noise schedule, forward noising, and the deterministic DDIM reverse
//! sampler over encoded centerline matrices.
//!
//! The forward process is `v_t = √γ(t)·v₀ + √(1−γ(t))·ε` with a monotone
//! signal fraction γ running from 1 at t=0 to 0 at t=T. Sampling starts from
//! pure Gaussian noise and alternates clean-signal prediction with the DDIM
//! update `v̄_{t−Δt} = √γ(t−Δt)·v̂₀ + √(1−γ(t−Δt))·ε̂(t)`, where
//! `ε̂(t) = (v̄_t − √γ(t)·v̂₀) / √(1−γ(t))`. All arithmetic is f64.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::volume::Volume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// γ(t) = cos²(πt / 2T); endpoints pinned to exactly 1 and 0.
    Cosine,
    /// γ(t) = 1 − t/T.
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::Linear => write!(f, "linear"),
        }
    }
}

/// Tabulated signal fraction γ(0..=T), strictly decreasing from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len_t(&self) -> usize {
        self.gamma.len() - 1
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    let mut gamma: Vec<f64> = (0..=t_max)
        .map(|t| {
            let x = t as f64 / t_max as f64;
            match kind {
                ScheduleKind::Cosine => {
                    let c = (std::f64::consts::FRAC_PI_2 * x).cos();
                    c * c
                }
                ScheduleKind::Linear => 1.0 - x,
            }
        })
        .collect();
    gamma[0] = 1.0;
    gamma[t_max] = 0.0;
    for t in 0..t_max {
        if gamma[t] <= gamma[t + 1] {
            return Err(Error::Config(format!(
                "schedule not strictly decreasing at t={t}"
            )));
        }
    }
    Ok(NoiseSchedule { gamma })
}

/// `v_t = √γ(t)·v₀ + √(1−γ(t))·ε`.
pub fn forward_noise(v0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    if t > sched.len_t() {
        return Err(Error::Input(format!(
            "timestep {t} exceeds schedule T={}",
            sched.len_t()
        )));
    }
    let g = sched.gamma(t);
    v0.lin_comb(g.sqrt(), eps, (1.0 - g).sqrt())
}

/// `ε̂ = (v_t − √γ(t)·v̂₀) / √(1−γ(t))`; undefined at t=0 where γ=1.
pub fn predict_eps(v_t: &Mat, v0_hat: &Mat, t: usize, sched: &NoiseSchedule) -> Result<Mat> {
    if t == 0 || t > sched.len_t() {
        return Err(Error::Input(format!(
            "predict_eps needs 1 <= t <= {}, got {t}",
            sched.len_t()
        )));
    }
    let g = sched.gamma(t);
    let inv = 1.0 / (1.0 - g).sqrt();
    v_t.lin_comb(inv, v0_hat, -inv * g.sqrt())
}

/// One deterministic reverse step from `t` down to `t − dt`.
pub fn ddim_step(
    v_t: &Mat,
    v0_hat: &Mat,
    t: usize,
    dt: usize,
    sched: &NoiseSchedule,
) -> Result<Mat> {
    if dt == 0 || dt > t || t > sched.len_t() {
        return Err(Error::Input(format!(
            "ddim_step needs 0 < dt <= t <= {}, got t={t}, dt={dt}",
            sched.len_t()
        )));
    }
    let eps_hat = predict_eps(v_t, v0_hat, t, sched)?;
    let g_prev = sched.gamma(t - dt);
    v0_hat.lin_comb(g_prev.sqrt(), &eps_hat, (1.0 - g_prev).sqrt())
}

/// Standard-normal draw; keeps the f64 sampling unambiguous at call sites.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Anything that predicts the clean matrix from a noisy one, the conditioning
/// volume, and a timestep. Implementations must be pure so independent
/// sampling runs can share them across threads.
pub trait Denoiser: Sync {
    fn denoise(&self, v_t: &Mat, volume: &Volume, t: usize) -> Result<Mat>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Inference step count T′; must divide the schedule's T.
    pub t_prime: usize,
    /// Seed for the initial Gaussian matrix.
    pub seed: u64,
}

/// Runs DDIM from pure noise down to t=0 and returns the final matrix.
/// Deterministic given (denoiser, volume, seed); exactly T′ denoiser calls.
pub fn sample(
    denoiser: &dyn Denoiser,
    volume: &Volume,
    shape: (usize, usize),
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Mat> {
    let t_max = sched.len_t();
    if cfg.t_prime == 0 || cfg.t_prime > t_max || t_max % cfg.t_prime != 0 {
        return Err(Error::Config(format!(
            "T'={} must divide T={} and be in 1..=T",
            cfg.t_prime, t_max
        )));
    }
    let dt = t_max / cfg.t_prime;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = Mat::from_fn(shape.0, shape.1, |_, _| randn(&mut rng));

    let mut t = t_max;
    while t > 0 {
        let v0_hat = denoiser.denoise(&v, volume, t)?;
        v = ddim_step(&v, &v0_hat, t, dt, sched)?;
        t -= dt;
    }
    Ok(v)
}
