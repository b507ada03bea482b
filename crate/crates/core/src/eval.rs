//! Fréchet distance on pluggable features, PPM sample grids and the
//! design-choice ablation harness.
//!
//! Desk-scale FID uses pixel or small frozen-CNN features instead of the
//! standard pretrained network. Values are only comparable within one run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Graph;
use crate::backbone::{UViTConfig, UViTModel};
use crate::conditioning::ConditionInput;
use crate::data::{read_bytes, write_bytes, Dataset, TensorFile};
use crate::error::{Error, Result};
use crate::samplers::{sample_model, SamplerKind, SamplerSpec};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::{train, OptimizerState, TrainConfig, TrainObserver};

pub const DESK_SCALE_NOTE: &str = "metric: Frechet distance on desk-scale features \
(not Inception FID); only orderings within one report are meaningful";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Frozen convolutional feature model: 3x3 conv, GELU and 2x2 average pool
/// per layer, then a global channel mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallCnn {
    layers: Vec<(Tensor, Tensor)>,
}

impl SmallCnn {
    /// Seeded random weights with He-style scaling.
    pub fn random(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let mut layers = Vec::new();
        for &cout in widths {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let w: Vec<f64> = (0..9 * cin * cout)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push((
                Tensor::from_vec(&[3, 3, cin, cout], w).expect("sized"),
                Tensor::zeros(&[cout]),
            ));
            cin = cout;
        }
        Self { layers }
    }

    pub fn from_tensors(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("feature CNN needs at least one layer".into()));
        }
        let mut cin = None;
        for (i, (w, b)) in layers.iter().enumerate() {
            let &[3, 3, ci, co] = w.shape() else {
                return Err(Error::Shape(format!("layer {i} weight {:?}", w.shape())));
            };
            if b.shape() != [co] || cin.is_some_and(|c| c != ci) {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
            cin = Some(co);
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].0.shape()[2]
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().1.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            tensors.push((format!("cnn.{i}.weight"), w.clone()));
            tensors.push((format!("cnn.{i}.bias"), b.clone()));
        }
        let file = TensorFile {
            lines: vec![("kind".into(), "small_cnn".into())],
            iteration: 0,
            tensors,
        };
        write_bytes(&file.to_bytes()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::from_bytes(&read_bytes(path)?)?;
        if file.line("kind") != Some("small_cnn") {
            return Err(Error::Persistence(format!(
                "{} is not a feature CNN file",
                path.display()
            )));
        }
        let mut layers = Vec::new();
        let find = |name: &str| file.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        for i in 0.. {
            match (find(&format!("cnn.{i}.weight")), find(&format!("cnn.{i}.bias"))) {
                (Some(w), Some(b)) => layers.push((w, b)),
                _ => break,
            }
        }
        Self::from_tensors(layers)
    }

    /// `[n, H, W, C]` to `[n, feature_dim]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut x = g.constant(images.clone());
        for (w, b) in &self.layers {
            let (w, b) = (g.frozen(w), g.frozen(b));
            x = g.conv2d(x, w, Some(b))?;
            x = g.gelu(x);
            let pooled = avg_pool(g.value(x), 2);
            x = g.constant(pooled);
        }
        let h = g.value(x);
        let &[n, hh, ww, c] = h.shape() else {
            unreachable!("conv output is 4-D")
        };
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for p in 0..hh * ww {
                for ch in 0..c {
                    out[i * c + ch] += h.data()[(i * hh * ww + p) * c + ch];
                }
            }
        }
        let scale = 1.0 / (hh * ww) as f64;
        Tensor::from_vec(&[n, c], out.into_iter().map(|v| v * scale).collect())
    }
}

/// `k x k` average pooling on NHWC; leaves the input alone when a side is
/// not divisible by `k`.
fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let &[n, h, w, c] = x.shape() else {
        return x.clone();
    };
    if h % k != 0 || w % k != 0 || h < k {
        return x.clone();
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; n * oh * ow * c];
    let scale = 1.0 / (k * k) as f64;
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((i * h + y) * w + xx) * c;
                let dst = ((i * oh + y / k) * ow + xx / k) * c;
                for ch in 0..c {
                    out[dst + ch] += scale * x.data()[src + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out).expect("sized")
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureExtractor {
    RawPixels,
    PooledPixels,
    SmallCnn(SmallCnn),
}

impl FeatureExtractor {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureExtractor::RawPixels => "raw_pixels",
            FeatureExtractor::PooledPixels => "pooled_pixels",
            FeatureExtractor::SmallCnn(_) => "small_cnn",
        }
    }

    /// `[n, H, W, C]` to `[n, d]`.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let &[n, h, w, c] = images.shape() else {
            return Err(Error::Shape(format!(
                "images must be [n, H, W, C], got {:?}",
                images.shape()
            )));
        };
        match self {
            FeatureExtractor::RawPixels => images.clone().reshape(&[n, h * w * c]),
            FeatureExtractor::PooledPixels => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Shape(format!(
                        "pooled_pixels needs sides divisible by 4, got {h}x{w}"
                    )));
                }
                let p = avg_pool(images, 4);
                p.reshape(&[n, (h / 4) * (w / 4) * c])
            }
            FeatureExtractor::SmallCnn(cnn) => {
                if cnn.in_channels() != c {
                    return Err(Error::Shape(format!(
                        "feature CNN expects {} channels, images have {c}",
                        cnn.in_channels()
                    )));
                }
                let mut parts = Vec::new();
                for start in (0..n).step_by(256) {
                    let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
                    parts.push(cnn.features(&images.select(&idx))?);
                }
                let d = cnn.feature_dim();
                let data = parts.into_iter().flat_map(Tensor::into_data).collect();
                Tensor::from_vec(&[n, d], data)
            }
        }
    }
}

/// Sample mean and (n−1)-normalized covariance of extracted features.
pub fn feature_stats(images: &Tensor, extractor: &FeatureExtractor) -> Result<FeatureStats> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Parameter(format!(
            "feature statistics need at least 2 images, got {n}"
        )));
    }
    let f = extractor.extract(images)?;
    let d = f.shape()[1];
    let m = DMatrix::from_row_slice(n, d, f.data());
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let mut sigma = centered.tr_mul(&centered) / (n - 1) as f64;
    // Exact symmetry regardless of summation order.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(FeatureStats { mu, sigma, n })
}

const EIGEN_CLAMP: f64 = 1e-10;

/// Symmetric PSD square root with eigenvalues below the relative clamp
/// treated as zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let roots = eig.eigenvalues.map(|v| {
        if v <= EIGEN_CLAMP * top {
            0.0
        } else {
            v.sqrt()
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let mut m = &ra * b * &ra;
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    eig.eigenvalues
        .iter()
        .map(|&v| if v <= EIGEN_CLAMP * top { 0.0 } else { v.sqrt() })
        .sum()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.shape() != (d, d) || b.sigma.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            d,
            b.mu.len()
        )));
    }
    let finite = |s: &FeatureStats| {
        s.mu.iter().all(|v| v.is_finite()) && s.sigma.iter().all(|v| v.is_finite())
    };
    if !finite(a) || !finite(b) {
        return Err(Error::Numeric("non-finite feature statistics".into()));
    }
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    // The trace term is symmetric in (a, b); evaluating both orders and
    // averaging keeps rounding symmetric too.
    let cross = 0.5 * (trace_sqrt_product(&a.sigma, &b.sigma) + trace_sqrt_product(&b.sigma, &a.sigma));
    let fd = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// `[-1, 1]` to a byte, clamping first and rounding half to even.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// Tiles the first `rows * cols` images row-major into one binary PPM.
/// Single-channel images are written as gray.
pub fn encode_ppm_grid(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let &[n, h, w, c] = images.shape() else {
        return Err(Error::Shape(format!(
            "images must be [n, H, W, C], got {:?}",
            images.shape()
        )));
    };
    if rows == 0 || cols == 0 || rows * cols > n {
        return Err(Error::Parameter(format!(
            "a {rows}x{cols} grid needs between 1 and {n} images"
        )));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("grids need 1 or 3 channels, got {c}")));
    }
    let (gw, gh) = (cols * w, rows * h);
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    for gy in 0..gh {
        for gx in 0..gw {
            let (img, y, x) = ((gy / h) * cols + gx / w, gy % h, gx % w);
            let base = ((img * h + y) * w + x) * c;
            for ch in 0..3 {
                let v = images.data()[base + if c == 1 { 0 } else { ch }];
                out.push(unit_to_byte(v));
            }
        }
    }
    Ok(out)
}

pub fn sample_grid(images: &Tensor, rows: usize, cols: usize, path: &Path) -> Result<()> {
    write_bytes(&encode_ppm_grid(images, rows, cols)?, path)
}

/// Label of the nearest (L2) reference image for each sample, after clamping
/// samples to the data range.
pub fn nearest_neighbor_labels(samples: &Tensor, reference: &Dataset) -> Result<Vec<Option<usize>>> {
    let per = reference.images.len() / reference.len().max(1);
    if !samples.len().is_multiple_of(per) || samples.shape()[1..] != reference.images.shape()[1..] {
        return Err(Error::Shape(format!(
            "samples {:?} do not match reference images {:?}",
            samples.shape(),
            reference.images.shape()
        )));
    }
    let labels = reference.labels();
    let refs = reference.images.data();
    Ok(samples
        .data()
        .chunks(per)
        .map(|s| {
            let mut best = (f64::INFINITY, 0);
            for (j, r) in refs.chunks(per).enumerate() {
                let d: f64 = s
                    .iter()
                    .zip(r)
                    .map(|(a, b)| (a.clamp(-1.0, 1.0) - b).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            labels[best.1]
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Ablation harness

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    SkipMode,
    TimeMode,
    ConvMode,
    PatchEmbedMode,
    PosEmbedMode,
    Depth,
    Width,
    PatchSize,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::SkipMode,
        AblationAxis::TimeMode,
        AblationAxis::ConvMode,
        AblationAxis::PatchEmbedMode,
        AblationAxis::PosEmbedMode,
        AblationAxis::Depth,
        AblationAxis::Width,
        AblationAxis::PatchSize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::SkipMode => "skip_mode",
            AblationAxis::TimeMode => "time_mode",
            AblationAxis::ConvMode => "conv_mode",
            AblationAxis::PatchEmbedMode => "patch_embed_mode",
            AblationAxis::PosEmbedMode => "pos_embed_mode",
            AblationAxis::Depth => "depth",
            AblationAxis::Width => "width",
            AblationAxis::PatchSize => "patch_size",
        }
    }

    /// Applies one variant value to `cfg`. Width also sets the MLP size to 4x.
    pub fn apply(self, cfg: &mut UViTConfig, variant: &str) -> Result<()> {
        let int = || {
            variant.parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "{}: variant '{variant}' is not a positive integer",
                    self.as_str()
                ))
            })
        };
        match self {
            AblationAxis::Width => {
                let w = int()?;
                cfg.hidden_size = w;
                cfg.mlp_size = 4 * w;
            }
            AblationAxis::Depth | AblationAxis::PatchSize => {
                int()?;
                cfg.set(self.as_str(), variant)?;
            }
            _ => {
                cfg.set(self.as_str(), variant)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!(
                "unknown ablation axis '{s}', expected one of {}",
                names.join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationProtocol {
    pub axis: AblationAxis,
    pub variants: Vec<String>,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub total_iterations: usize,
}

impl AblationProtocol {
    /// Evaluation every 500 iterations on 1000 samples, a 1/100-scale protocol.
    pub fn new(axis: AblationAxis, variants: Vec<String>, total_iterations: usize) -> Self {
        Self {
            axis,
            variants,
            eval_every: 500.min(total_iterations.max(1)),
            eval_samples: 1000,
            total_iterations,
        }
    }

    pub fn validate(&self, base: &UViTConfig) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation needs at least one variant".into()));
        }
        if self.eval_every == 0 || self.eval_every > self.total_iterations {
            return Err(Error::Config(format!(
                "eval_every must lie in 1..={}, got {}",
                self.total_iterations, self.eval_every
            )));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be at least 2".into()));
        }
        for v in &self.variants {
            let mut cfg = base.clone();
            self.axis.apply(&mut cfg, v)?;
            cfg.validate()
                .map_err(|e| Error::Config(format!("variant {}={v}: {e}", self.axis)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub iteration: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantOutcome {
    pub variant: String,
    /// Mean training loss over the last 100 iterations (or all, if fewer).
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub outcomes: Vec<VariantOutcome>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,iteration,metric\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.variant, r.iteration, r.metric));
        }
        s
    }

    pub fn final_loss_csv(&self) -> String {
        let mut s = String::from("variant,final_loss,error\n");
        for o in &self.outcomes {
            let loss = o.final_loss.map(|l| l.to_string()).unwrap_or_default();
            let err = o.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!("{},{loss},{err}\n", o.variant));
        }
        s
    }

    pub fn final_loss(&self, variant: &str) -> Option<f64> {
        self.outcomes
            .iter()
            .find(|o| o.variant == variant)
            .and_then(|o| o.final_loss)
    }
}

/// Settings shared by every variant's evaluation.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub sampler: SamplerSpec,
    pub extractor: FeatureExtractor,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerSpec::new(SamplerKind::DpmSolver, 50, 0),
            extractor: FeatureExtractor::RawPixels,
        }
    }
}

/// Conditions for generated samples, cycling through the dataset's own.
pub fn eval_conditions(dataset: &Dataset, n: usize) -> Vec<ConditionInput> {
    (0..n)
        .map(|i| dataset.conditions[i % dataset.len()].clone())
        .collect()
}

struct EvalObserver<'a> {
    variant: &'a str,
    schedule: &'a NoiseSchedule,
    reference: &'a FeatureStats,
    conds: &'a [ConditionInput],
    settings: &'a EvalSettings,
    rows: Vec<AblationRow>,
}

impl TrainObserver for EvalObserver<'_> {
    fn on_checkpoint(
        &mut self,
        iteration: usize,
        model: &UViTModel,
        _optimizer: &OptimizerState,
        _rng: &ChaCha8Rng,
    ) -> Result<()> {
        let samples = sample_model(model, self.schedule, &self.settings.sampler, self.conds)?;
        let stats = feature_stats(&samples.map(|v| v.clamp(-1.0, 1.0)), &self.settings.extractor)?;
        let metric = frechet_distance(&stats, self.reference)?;
        self.rows.push(AblationRow {
            variant: self.variant.to_string(),
            iteration,
            metric,
        });
        Ok(())
    }
}

/// Trains one model per variant from the same seeds and evaluates the
/// Fréchet distance to the dataset at the protocol's cadence. A failing
/// variant keeps the rows it produced and the others continue.
pub fn run_ablation(
    protocol: &AblationProtocol,
    base: &UViTConfig,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    settings: &EvalSettings,
    model_seed: u64,
) -> Result<AblationReport> {
    protocol.validate(base)?;
    let reference = feature_stats(&dataset.images, &settings.extractor)?;
    let conds = eval_conditions(dataset, protocol.eval_samples);
    let cfg = TrainConfig {
        total_iterations: protocol.total_iterations,
        checkpoint_every: protocol.eval_every,
        ..train_cfg.clone()
    };
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for variant in &protocol.variants {
        let mut model_cfg = base.clone();
        protocol.axis.apply(&mut model_cfg, variant)?;
        let schedule = NoiseSchedule::linear(
            model_cfg.diffusion_steps,
            crate::schedule::DEFAULT_BETA_START,
            crate::schedule::DEFAULT_BETA_END,
        )?;
        let mut observer = EvalObserver {
            variant,
            schedule: &schedule,
            reference: &reference,
            conds: &conds,
            settings,
            rows: Vec::new(),
        };
        let result = UViTModel::build(model_cfg, model_seed)
            .and_then(|mut model| train(&mut model, dataset, &schedule, &cfg, &mut observer));
        rows.extend(observer.rows);
        outcomes.push(match result {
            Ok(summary) => VariantOutcome {
                variant: variant.clone(),
                final_loss: Some(summary.tail_mean(100)),
                error: None,
            },
            Err(e) => VariantOutcome {
                variant: variant.clone(),
                final_loss: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(AblationReport {
        axis: protocol.axis,
        rows,
        outcomes,
    })
}
