//! Reverse-process samplers over the discrete schedule.
//!
//! Every sampler draws `x_T` from the spec's seed, calls an [`EpsPredictor`]
//! for noise estimates and returns unclamped `x_0`; clamping to `[-1, 1]`
//! happens only when images are exported.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::UViTModel;
use crate::conditioning::{guided_eps, ConditionInput};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    DdpmAncestral,
    EulerMaruyama,
    DpmSolver,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [
        SamplerKind::DdpmAncestral,
        SamplerKind::EulerMaruyama,
        SamplerKind::DpmSolver,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::DdpmAncestral => "ddpm_ancestral",
            SamplerKind::EulerMaruyama => "euler_maruyama",
            SamplerKind::DpmSolver => "dpm_solver",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sampler '{s}', expected one of ddpm_ancestral, euler_maruyama, dpm_solver"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Solver order, 1 or 2. Only read by `dpm_solver`.
    pub order: usize,
    /// Classifier-free guidance strength; `None` samples the plain conditional model.
    pub guidance: Option<f64>,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            steps,
            order: 2,
            guidance: None,
            seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be positive".into()));
        }
        match self.kind {
            SamplerKind::DdpmAncestral if self.steps != schedule.steps() => {
                Err(Error::Config(format!(
                    "ddpm_ancestral runs the full chain: steps must be {}, got {}",
                    schedule.steps(),
                    self.steps
                )))
            }
            SamplerKind::DpmSolver if !(1..=2).contains(&self.order) => Err(Error::Config(
                format!("dpm_solver order must be 1 or 2, got {}", self.order),
            )),
            _ => Ok(()),
        }
    }
}

/// Anything that predicts the injected noise at step `t` for a batch.
pub trait EpsPredictor: Sync {
    fn predict(&self, x_t: &Tensor, t: usize, conds: &[ConditionInput]) -> Result<Tensor>;
}

/// Network predictor, optionally guided. Large batches are split into chunks.
pub struct ModelPredictor<'a> {
    pub model: &'a UViTModel,
    pub guidance: Option<f64>,
    pub chunk: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a UViTModel, guidance: Option<f64>) -> Self {
        Self {
            model,
            guidance,
            chunk: 256,
        }
    }
}

impl EpsPredictor for ModelPredictor<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, conds: &[ConditionInput]) -> Result<Tensor> {
        let n = x_t.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(self.chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + self.chunk).min(n)).collect();
            let x = x_t.select(&idx);
            let c = &conds[start..start + idx.len()];
            let ts = vec![t; idx.len()];
            parts.push(match self.guidance {
                Some(s) => guided_eps(self.model, &x, &ts, c, s)?,
                None => self.model.forward(&x, &ts, c)?,
            });
        }
        if parts.len() == 1 {
            return Ok(parts.pop().unwrap());
        }
        let mut data = Vec::with_capacity(x_t.len());
        for p in parts {
            data.extend(p.into_data());
        }
        Tensor::from_vec(x_t.shape(), data)
    }
}

/// Closed-form optimal noise predictor for data `x_0 ~ N(mu, sigma² I)`:
/// `ε* = √(1−ᾱ)·(x − √ᾱ·mu) / (ᾱ·sigma² + 1 − ᾱ)`.
pub struct GaussianOracle<'a> {
    pub mu: f64,
    pub sigma: f64,
    pub schedule: &'a NoiseSchedule,
}

impl EpsPredictor for GaussianOracle<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, _conds: &[ConditionInput]) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t)?;
        let c = (1.0 - ab).sqrt() / (ab * self.sigma * self.sigma + 1.0 - ab);
        let m = ab.sqrt() * self.mu;
        Ok(x_t.map(|x| c * (x - m)))
    }
}

/// Predicts zero noise, which removes the score term from every sampler.
pub struct ZeroPredictor;

impl EpsPredictor for ZeroPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize, _conds: &[ConditionInput]) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .expect("shape product matches")
}

fn batch_shape(image_shape: &[usize], conds: &[ConditionInput]) -> Result<Vec<usize>> {
    if conds.is_empty() {
        return Err(Error::Parameter("sample count must be positive".into()));
    }
    let mut shape = vec![conds.len()];
    shape.extend_from_slice(image_shape);
    Ok(shape)
}

/// Runs the sampler selected by `spec`. `conds` has one entry per sample;
/// `image_shape` is `[H, W, C]`.
pub fn sample(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    image_shape: &[usize],
    conds: &[ConditionInput],
) -> Result<Tensor> {
    match spec.kind {
        SamplerKind::DdpmAncestral => ddpm_ancestral(pred, schedule, spec, image_shape, conds),
        SamplerKind::EulerMaruyama => {
            euler_maruyama(pred, schedule, spec, image_shape, conds, &mut |_, _| {})
        }
        SamplerKind::DpmSolver => dpm_solver(pred, schedule, spec, image_shape, conds),
    }
}

/// Samples from a network, routing through guidance when the spec sets it.
pub fn sample_model(
    model: &UViTModel,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    conds: &[ConditionInput],
) -> Result<Tensor> {
    let cfg = model.config();
    if schedule.steps() != cfg.diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            cfg.diffusion_steps
        )));
    }
    let pred = ModelPredictor::new(model, spec.guidance);
    sample(
        &pred,
        schedule,
        spec,
        &[cfg.image_height, cfg.image_width, cfg.channels],
        conds,
    )
}

/// Full-chain ancestral sampling with `σ_t² = β_t`.
pub fn ddpm_ancestral(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    image_shape: &[usize],
    conds: &[ConditionInput],
) -> Result<Tensor> {
    spec.validate(schedule)?;
    let shape = batch_shape(image_shape, conds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = normal(&mut rng, &shape);
    for t in (1..=schedule.steps()).rev() {
        let eps = pred.predict(&x, t, conds)?;
        let mean = schedule.posterior_mean(&x, &eps, t)?;
        x = if t > 1 {
            let sd = schedule.beta(t)?.sqrt();
            let z = normal(&mut rng, &shape);
            mean.zip_map(&z, |m, z| m + sd * z)?
        } else {
            mean
        };
    }
    Ok(x)
}

/// Discrete step for normalized time `i / steps`.
fn grid_step(i: usize, steps: usize, t_max: usize) -> usize {
    let t = (i * t_max).div_ceil(steps);
    t.clamp(1, t_max)
}

/// Euler–Maruyama on the reverse VP-SDE with `Δ = 1/steps` and rate
/// `β(t) = T·β_t`. `on_step` sees the state after each update.
pub fn euler_maruyama(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    image_shape: &[usize],
    conds: &[ConditionInput],
    on_step: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    spec.validate(schedule)?;
    let shape = batch_shape(image_shape, conds)?;
    let t_max = schedule.steps();
    let dt = 1.0 / spec.steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = normal(&mut rng, &shape);
    for i in (1..=spec.steps).rev() {
        let t = grid_step(i, spec.steps, t_max);
        let beta = t_max as f64 * schedule.beta(t)?;
        let eps = pred.predict(&x, t, conds)?;
        let score = schedule.score_from_eps(&eps, t)?;
        let drift = x.zip_map(&score, |x, s| dt * (0.5 * beta * x + beta * s))?;
        x = x.add(&drift)?;
        if i > 1 {
            let sd = (beta * dt).sqrt();
            let z = normal(&mut rng, &shape);
            x = x.zip_map(&z, |x, z| x + sd * z)?;
        }
        on_step(i, &x);
    }
    Ok(x)
}

/// Grid times from `T` to 1, evenly spaced in log-SNR and rounded to the
/// nearest discrete step. Consecutive duplicates are dropped.
pub fn uniform_lambda_times(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("sampler steps must be positive".into()));
    }
    let t_max = schedule.steps();
    let lambdas: Vec<f64> = (1..=t_max)
        .map(|t| schedule.log_snr(t))
        .collect::<Result<_>>()?;
    let (lo, hi) = (lambdas[t_max - 1], lambdas[0]);
    let mut times = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let target = lo + (hi - lo) * j as f64 / steps as f64;
        times.push(nearest_step(&lambdas, target));
    }
    times.dedup();
    Ok(times)
}

/// λ is decreasing in `t`; returns the 1-based step closest to `target`.
fn nearest_step(lambdas: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, l) in lambdas.iter().enumerate() {
        if (l - target).abs() < (lambdas[best] - target).abs() {
            best = i;
        }
    }
    best + 1
}

/// Deterministic exponential-integrator sampler on uniform-λ times.
pub fn dpm_solver(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    image_shape: &[usize],
    conds: &[ConditionInput],
) -> Result<Tensor> {
    spec.validate(schedule)?;
    let times = uniform_lambda_times(schedule, spec.steps)?;
    dpm_solver_on_times(pred, schedule, &times, spec, image_shape, conds)
}

/// `dpm_solver` over explicit decreasing `times`, which must start at `T`
/// and end at 1. A final step maps `x_1` to the `x_0` estimate.
pub fn dpm_solver_on_times(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    times: &[usize],
    spec: &SamplerSpec,
    image_shape: &[usize],
    conds: &[ConditionInput],
) -> Result<Tensor> {
    if !(1..=2).contains(&spec.order) {
        return Err(Error::Config(format!(
            "dpm_solver order must be 1 or 2, got {}",
            spec.order
        )));
    }
    if times.first() != Some(&schedule.steps())
        || times.last() != Some(&1)
        || times.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::Config(
            "dpm_solver times must decrease strictly from T to 1".into(),
        ));
    }
    let shape = batch_shape(image_shape, conds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = normal(&mut rng, &shape);
    let coeffs = |t: usize| -> Result<(f64, f64, f64)> {
        let ab = schedule.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt(), schedule.log_snr(t)?))
    };
    for w in times.windows(2) {
        let (s, t) = (w[0], w[1]);
        let (a_s, _, l_s) = coeffs(s)?;
        let (a_t, sig_t, l_t) = coeffs(t)?;
        let h = l_t - l_s;
        let eps_s = pred.predict(&x, s, conds)?;
        let first = x.zip_map(&eps_s, |x, e| (a_t / a_s) * x - sig_t * h.exp_m1() * e)?;
        let mid = if spec.order == 2 {
            let target = l_s + 0.5 * h;
            let lambdas: Vec<f64> = (1..=schedule.steps())
                .map(|t| schedule.log_snr(t))
                .collect::<Result<_>>()?;
            let u = nearest_step(&lambdas, target);
            (u < s && u > t).then_some(u)
        } else {
            None
        };
        x = match mid {
            None => first,
            Some(u) => {
                let (a_u, sig_u, l_u) = coeffs(u)?;
                let r = (l_u - l_s) / h;
                let xu = x.zip_map(&eps_s, |x, e| (a_u / a_s) * x - sig_u * (r * h).exp_m1() * e)?;
                let eps_u = pred.predict(&xu, u, conds)?;
                let c = sig_t / (2.0 * r) * h.exp_m1();
                let diff = eps_u.sub(&eps_s)?;
                first.zip_map(&diff, |f, d| f - c * d)?
            }
        };
    }
    let (a_1, sig_1, _) = coeffs(1)?;
    let eps = pred.predict(&x, 1, conds)?;
    x.zip_map(&eps, |x, e| (x - sig_1 * e) / a_1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn unconditional(n: usize) -> Vec<ConditionInput> {
        vec![ConditionInput::Unconditional; n]
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SamplerKind::ALL {
            assert_eq!(k.as_str().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("ddim".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn ddpm_requires_full_chain() {
        let s = schedule();
        let spec = SamplerSpec::new(SamplerKind::DdpmAncestral, 50, 0);
        let oracle = GaussianOracle { mu: 0.0, sigma: 1.0, schedule: &s };
        assert!(matches!(
            sample(&oracle, &s, &spec, &[2, 2, 1], &unconditional(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_step_chain_is_posterior_mean() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let spec = SamplerSpec::new(SamplerKind::DdpmAncestral, 1, 9);
        let oracle = GaussianOracle { mu: 0.5, sigma: 0.7, schedule: &s };
        let out = sample(&oracle, &s, &spec, &[3, 1, 1], &unconditional(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = normal(&mut rng, &[2, 3, 1, 1]);
        let eps = oracle.predict(&x1, 1, &[]).unwrap();
        assert_eq!(out, s.posterior_mean(&x1, &eps, 1).unwrap());
    }

    #[test]
    fn invalid_order_rejected() {
        let s = schedule();
        let mut spec = SamplerSpec::new(SamplerKind::DpmSolver, 10, 0);
        spec.order = 3;
        assert!(matches!(
            sample(&ZeroPredictor, &s, &spec, &[1, 1, 1], &unconditional(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lambda_times_cover_the_chain() {
        let s = schedule();
        let times = uniform_lambda_times(&s, 50).unwrap();
        assert_eq!(times[0], 1000);
        assert_eq!(*times.last().unwrap(), 1);
        assert!(times.windows(2).all(|w| w[1] < w[0]));
        assert!(times.len() <= 51 && times.len() > 40);
    }

    #[test]
    fn samplers_are_deterministic_and_preserve_shape() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let oracle = GaussianOracle { mu: 0.1, sigma: 0.5, schedule: &s };
        for kind in SamplerKind::ALL {
            let spec = SamplerSpec::new(kind, 100, 3);
            let a = sample(&oracle, &s, &spec, &[2, 3, 2], &unconditional(4)).unwrap();
            let b = sample(&oracle, &s, &spec, &[2, 3, 2], &unconditional(4)).unwrap();
            assert_eq!(a.shape(), &[4, 2, 3, 2]);
            assert_eq!(a, b, "{kind}");
            let other = SamplerSpec { seed: 4, ..spec };
            assert_ne!(a, sample(&oracle, &s, &other, &[2, 3, 2], &unconditional(4)).unwrap());
        }
    }

    #[test]
    fn zero_score_only_injects_noise() {
        let s = schedule();
        let spec = SamplerSpec::new(SamplerKind::EulerMaruyama, 200, 1);
        let mut vars = Vec::new();
        euler_maruyama(&ZeroPredictor, &s, &spec, &[8, 8, 1], &unconditional(64), &mut |_, x| {
            let m = x.mean();
            vars.push(x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64);
        })
        .unwrap();
        assert_eq!(vars.len(), 200);
        // Without drift toward the data, each step scales by (1 + ½βΔ) and adds noise.
        assert!(vars.last().unwrap() > &1.5);
    }

    #[test]
    fn grid_mapping() {
        assert_eq!(grid_step(1000, 1000, 1000), 1000);
        assert_eq!(grid_step(1, 1000, 1000), 1);
        assert_eq!(grid_step(1, 2000, 1000), 1);
        assert_eq!(grid_step(3, 2000, 1000), 2);
        assert_eq!(grid_step(1, 50, 1000), 20);
    }
}
