//! Noise-prediction training: loss and gradients, AdamW with linear warmup,
//! and the seeded training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Graph;
use crate::backbone::{ConditionKind, ForwardHooks, UViTModel};
use crate::conditioning::ConditionInput;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub warmup_steps: usize,
    /// Probability of replacing a condition with `Null` (classifier-free guidance).
    pub p_uncond: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.03,
            betas: (0.99, 0.99),
            adam_epsilon: 1e-8,
            batch_size: 128,
            total_iterations: 1000,
            warmup_steps: 0,
            p_uncond: 0.0,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return err("p_uncond must lie in [0, 1]");
        }
        if self.warmup_steps > self.total_iterations {
            return err("warmup_steps exceeds total_iterations");
        }
        if self.batch_size == 0 || self.total_iterations == 0 || self.checkpoint_every == 0 {
            return err("batch_size, total_iterations and checkpoint_every must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.adam_epsilon >= 0.0) {
            return err("learning_rate, weight_decay and adam_epsilon must be non-negative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return err("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &UViTModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Learning rate at 1-based `step`: linear ramp to the target over the
/// warmup, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// One decoupled-weight-decay update on a single tensor.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(m)?;
    param.expect_same_shape(v)?;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (((p, g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
    }
    Ok(())
}

/// AdamW over every model parameter. Layer-norm parameters and position
/// embeddings are not decayed.
pub fn adamw_step(
    model: &mut UViTModel,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr_now: f64,
) -> Result<()> {
    if grads.len() != model.params().len() || state.m.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            model.params().len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        adamw_update(
            &mut p.tensor,
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            cfg.betas,
            cfg.adam_epsilon,
            wd,
            lr_now,
        )?;
    }
    Ok(())
}

/// Random quantities of one training step, drawn up front so the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub eps: Tensor,
    /// Per-sample condition dropout.
    pub drop: Vec<bool>,
}

impl NoiseDraws {
    pub fn sample(
        rng: &mut ChaCha8Rng,
        image_shape: &[usize],
        steps: usize,
        p_uncond: f64,
    ) -> Result<Self> {
        let b = image_shape[0];
        if b == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        let t = (0..b).map(|_| rng.random_range(1..=steps)).collect();
        let n: usize = image_shape.iter().product();
        let eps = Tensor::from_vec(
            image_shape,
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let drop = (0..b).map(|_| rng.random::<f64>() < p_uncond).collect();
        Ok(Self { t, eps, drop })
    }
}

fn effective_conditions(
    model: &UViTModel,
    conds: &[ConditionInput],
    drop: &[bool],
) -> Vec<ConditionInput> {
    conds
        .iter()
        .zip(drop)
        .map(|(c, &d)| {
            if d && model.config().condition != ConditionKind::None {
                ConditionInput::Null
            } else {
                c.clone()
            }
        })
        .collect()
}

/// Mean of squared differences over all elements.
pub fn noise_prediction_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

fn noisy_inputs(x0: &Tensor, draws: &NoiseDraws, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.shape()[0];
    if draws.t.len() != b {
        return Err(Error::Shape(format!("{} steps for {b} images", draws.t.len())));
    }
    x0.expect_same_shape(&draws.eps)?;
    let per = x0.len() / b;
    let mut xt = Vec::with_capacity(x0.len());
    for (i, &t) in draws.t.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (x, e) in x0.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&draws.eps.data()[i * per..(i + 1) * per])
        {
            xt.push(a * x + s * e);
        }
    }
    Tensor::from_vec(x0.shape(), xt)
}

/// Loss and per-parameter gradients for fixed draws.
pub fn loss_and_grads(
    model: &UViTModel,
    x0: &Tensor,
    conds: &[ConditionInput],
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    let xt = noisy_inputs(x0, draws, schedule)?;
    let conds = effective_conditions(model, conds, &draws.drop);
    let mut g = Graph::new();
    let x = g.constant(xt);
    let (pred, pv) =
        model.forward_graph(&mut g, x, &draws.t, &conds, true, &mut ForwardHooks::default())?;
    let target = g.constant(draws.eps.clone());
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    let out = pv
        .vars()
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((value, out))
}

/// Loss only, for fixed draws; used by finite-difference checks.
pub fn loss_value(
    model: &UViTModel,
    x0: &Tensor,
    conds: &[ConditionInput],
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = noisy_inputs(x0, draws, schedule)?;
    let conds = effective_conditions(model, conds, &draws.drop);
    let pred = model.forward(&xt, &draws.t, &conds)?;
    noise_prediction_loss(&pred, &draws.eps)
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and condition dropout, then returns
/// `mean ‖ε − ε_θ(x_t, t, c)‖²` and its gradients.
pub fn training_loss(
    model: &UViTModel,
    x0: &Tensor,
    conds: &[ConditionInput],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    if x0.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let draws = NoiseDraws::sample(rng, x0.shape(), schedule.steps(), p_uncond)?;
    loss_and_grads(model, x0, conds, &draws, schedule)
}

/// Receives training progress. Errors abort training.
pub trait TrainObserver {
    fn on_step(&mut self, _iteration: usize, _loss: f64, _lr: f64) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        _iteration: usize,
        _model: &UViTModel,
        _optimizer: &OptimizerState,
        _rng: &ChaCha8Rng,
    ) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<usize>,
    pub optimizer: OptimizerState,
}

impl TrainSummary {
    /// Mean loss over the last `n` iterations.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len());
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }

    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len());
        self.losses[..n].iter().sum::<f64>() / n as f64
    }
}

/// Seeded training loop. Batches come from per-epoch shuffles with the last
/// partial batch dropped.
pub fn train(
    model: &mut UViTModel,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Parameter("dataset is empty".into()));
    }
    if cfg.batch_size > n {
        return Err(Error::Parameter(format!(
            "batch size {} exceeds dataset size {n}",
            cfg.batch_size
        )));
    }
    if schedule.steps() != model.config().diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            model.config().diffusion_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a shuffle on the first iteration
    let mut losses = Vec::with_capacity(cfg.total_iterations);
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.total_iterations {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let x0 = dataset.images.select(idx);
        let conds: Vec<ConditionInput> = idx.iter().map(|&i| dataset.conditions[i].clone()).collect();
        let (loss, grads) = training_loss(model, &x0, &conds, schedule, cfg.p_uncond, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at iteration {it}")));
        }
        let lr = lr_at(it, cfg);
        adamw_step(model, &grads, &mut opt, cfg, lr)?;
        losses.push(loss);
        observer.on_step(it, loss, lr)?;
        if it % cfg.checkpoint_every == 0 || it == cfg.total_iterations {
            observer.on_checkpoint(it, model, &opt, &rng)?;
            checkpoints.push(it);
        }
    }
    Ok(TrainSummary {
        losses,
        checkpoints,
        optimizer: opt,
    })
}
