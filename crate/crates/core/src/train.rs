//! Patchwise training: sampling 15x15 windows around valid reference pixels,
//! the masked squared-error loss with a mean-square weight penalty, Adam, and
//! validation-based model selection.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Checkpoint, KernelMode, Mode, ModelConfig, ModelError, ModelParams, TrainMeta};
use crate::nn::{finite_diff_check, GradCheckReport, BN_MOMENTUM};
use crate::preprocess::{self, NormStats, PreprocessError, CLOUD_THRESHOLD_PCT};
use crate::raster::{HeightMap, RasterCube};
use crate::tensor::{Real, Tensor};

pub const PATCH_SIZE: usize = 15;
pub const PATCH_HALF: usize = PATCH_SIZE / 2;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no eligible patch centers")]
    NoEligibleCenters,
    #[error("no valid target pixels in batch")]
    NoValidTargets,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient for {name}")]
    NonFiniteGradient { name: String },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: u64,
        reason: String,
        /// Parameters and optimizer state just before the failing step.
        dump: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("writing loss curve: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    /// Weight of the mean-square parameter penalty.
    pub weight_decay: f64,
    pub max_iterations: u64,
    pub val_every: u64,
    pub val_patches: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch_size: 36,
            weight_decay: 0.0,
            max_iterations: 10_000,
            val_every: 500,
            val_patches: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// `N` training windows with per-pixel targets and validity.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `N x C x 15 x 15`, normalized.
    pub inputs: Tensor<f32>,
    /// `N x 1 x 15 x 15`, meters; 0 where invalid.
    pub targets: Tensor<f32>,
    pub target_valid: Vec<bool>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether a window with `cloudy` cloudy pixels out of 225 is usable: fewer
/// than 10 % may be cloudy.
pub fn patch_accepted(cloudy: usize) -> bool {
    cloudy * 10 < PATCH_PIXELS
}

/// A patch center: acquisition index and pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Center {
    pub date: u32,
    pub row: u32,
    pub col: u32,
}

/// Normalized acquisitions plus reference heights, restricted to a set of
/// pixels (a train or validation region).
#[derive(Debug, Clone)]
pub struct PatchSource {
    inputs: Vec<Tensor<f32>>,
    targets: Vec<f32>,
    target_valid: Vec<bool>,
    height: usize,
    width: usize,
    channels: usize,
    centers: Vec<Center>,
}

fn window_sums(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    // summed-area table with a zero border
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0u32;
        for c in 0..w {
            row += u32::from(mask[r * w + c]);
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
        }
    }
    sat
}

fn window_count(sat: &[u32], w: usize, r0: usize, c0: usize, size: usize) -> u32 {
    let s = |r: usize, c: usize| sat[r * (w + 1) + c];
    s(r0 + size, c0 + size) + s(r0, c0) - s(r0, c0 + size) - s(r0 + size, c0)
}

impl PatchSource {
    /// `region` marks pixels whose reference heights may be used, both as
    /// centers and as in-window targets. Cloudy and cube-invalid pixels both
    /// count toward the cloud rule.
    pub fn new(
        cubes: &[RasterCube],
        reference: &HeightMap,
        stats: &NormStats,
        region: &[bool],
    ) -> Result<Self, TrainError> {
        let (h, w) = (reference.height(), reference.width());
        if region.len() != h * w {
            return Err(TrainError::Shape(format!(
                "region mask has {} pixels, reference has {}",
                region.len(),
                h * w
            )));
        }
        let target_valid: Vec<bool> = reference
            .valid()
            .iter()
            .zip(region)
            .map(|(&v, &r)| v && r)
            .collect();
        let targets = reference
            .heights()
            .iter()
            .zip(&target_valid)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect();
        let mut inputs = Vec::with_capacity(cubes.len());
        let mut centers = Vec::new();
        for (d, cube) in cubes.iter().enumerate() {
            if cube.height() != h || cube.width() != w {
                return Err(TrainError::Shape(format!(
                    "cube {d} is {}x{}, reference is {h}x{w}",
                    cube.height(),
                    cube.width()
                )));
            }
            inputs.push(preprocess::prepare_input(cube, stats)?);
            let blocked: Vec<bool> = cube
                .cloud_prob()
                .iter()
                .zip(cube.valid())
                .map(|(&p, &ok)| !ok || p > CLOUD_THRESHOLD_PCT)
                .collect();
            let sat = window_sums(&blocked, h, w);
            if h < PATCH_SIZE || w < PATCH_SIZE {
                continue;
            }
            for r in PATCH_HALF..h - PATCH_HALF {
                for c in PATCH_HALF..w - PATCH_HALF {
                    if !target_valid[r * w + c] {
                        continue;
                    }
                    let cloudy = window_count(&sat, w, r - PATCH_HALF, c - PATCH_HALF, PATCH_SIZE);
                    if patch_accepted(cloudy as usize) {
                        centers.push(Center {
                            date: d as u32,
                            row: r as u32,
                            col: c as u32,
                        });
                    }
                }
            }
        }
        Ok(Self {
            inputs,
            targets,
            target_valid,
            height: h,
            width: w,
            channels: stats.n_channels(),
            centers,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn centers(&self) -> &[Center] {
        &self.centers
    }

    /// Draws `n` centers uniformly with replacement.
    pub fn sample_centers(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Center>, TrainError> {
        if self.centers.is_empty() {
            return Err(TrainError::NoEligibleCenters);
        }
        Ok((0..n)
            .map(|_| self.centers[rng.random_range(0..self.centers.len())])
            .collect())
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<PatchBatch, TrainError> {
        let centers = self.sample_centers(n, rng)?;
        Ok(self.extract(&centers))
    }

    /// Cuts the windows around `centers`, which must come from this source.
    pub fn extract(&self, centers: &[Center]) -> PatchBatch {
        let (c, w) = (self.channels, self.width);
        let plane = self.height * w;
        let n = centers.len();
        let mut inputs = Vec::with_capacity(n * c * PATCH_PIXELS);
        let mut targets = Vec::with_capacity(n * PATCH_PIXELS);
        let mut valid = Vec::with_capacity(n * PATCH_PIXELS);
        for ct in centers {
            let (r0, c0) = (ct.row as usize - PATCH_HALF, ct.col as usize - PATCH_HALF);
            let x = self.inputs[ct.date as usize].data();
            for ch in 0..c {
                for r in r0..r0 + PATCH_SIZE {
                    let start = ch * plane + r * w + c0;
                    inputs.extend_from_slice(&x[start..start + PATCH_SIZE]);
                }
            }
            for r in r0..r0 + PATCH_SIZE {
                let start = r * w + c0;
                targets.extend_from_slice(&self.targets[start..start + PATCH_SIZE]);
                valid.extend_from_slice(&self.target_valid[start..start + PATCH_SIZE]);
            }
        }
        PatchBatch {
            inputs: Tensor::from_vec(&[n, c, PATCH_SIZE, PATCH_SIZE], inputs).expect("sized"),
            targets: Tensor::from_vec(&[n, 1, PATCH_SIZE, PATCH_SIZE], targets).expect("sized"),
            target_valid: valid,
        }
    }
}

/// Convenience wrapper: builds a source over the whole grid and samples `n`
/// patches.
pub fn sample_patches(
    cubes: &[RasterCube],
    reference: &HeightMap,
    stats: &NormStats,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch, TrainError> {
    let region = vec![true; reference.len()];
    PatchSource::new(cubes, reference, stats, &region)?.sample(n, rng)
}

/// Mean squared residual over valid pixels and its gradient w.r.t. `pred`.
pub fn masked_mse<T: Real>(
    pred: &Tensor<T>,
    targets: &Tensor<T>,
    valid: &[bool],
) -> Result<(f64, Tensor<T>), TrainError> {
    if pred.shape() != targets.shape() || valid.len() != pred.len() {
        return Err(TrainError::Shape(format!(
            "prediction {:?}, targets {:?}, mask {}",
            pred.shape(),
            targets.shape(),
            valid.len()
        )));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(TrainError::NoValidTargets);
    }
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    let scale = 2.0 / n as f64;
    for (((g, &p), &t), &ok) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(targets.data())
        .zip(valid)
    {
        if ok {
            let r = p.as_f64() - t.as_f64();
            sum += r * r;
            *g = T::of(scale * r);
        }
    }
    Ok((sum / n as f64, grad))
}

/// Mean of squared values over every trainable tensor, and the total count.
pub fn weight_penalty<T: Real>(params: &[Tensor<T>]) -> (f64, usize) {
    let count: usize = params.iter().map(Tensor::len).sum();
    let sum: f64 = params.iter().map(Tensor::sum_sq).sum();
    (sum / count.max(1) as f64, count)
}

/// Masked mean squared error plus `lambda` times the mean squared weight.
pub fn loss<T: Real>(
    pred: &Tensor<T>,
    targets: &Tensor<T>,
    valid: &[bool],
    params: &[Tensor<T>],
    lambda: f64,
) -> Result<f64, TrainError> {
    let (mse, _) = masked_mse(pred, targets, valid)?;
    let penalty = if lambda == 0.0 {
        0.0
    } else {
        lambda * weight_penalty(params).0
    };
    Ok(mse + penalty)
}

/// Full loss and gradients for one batch. Returns the loss, gradients
/// aligned with `params.tensors()`, and the batch-norm batch statistics.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    valid: &[bool],
    lambda: f64,
) -> Result<(f64, Vec<Tensor<T>>, Vec<crate::nn::BatchStats>), TrainError> {
    let pass = params.forward(inputs, Mode::Train)?;
    let (mse, d_out) = masked_mse(&pass.output, targets, valid)?;
    let tape = pass.tape.as_ref().ok_or(ModelError::NoTape)?;
    let mut grads = params.backward(tape, &d_out)?;
    let mut total = mse;
    if lambda != 0.0 {
        let (mean_sq, count) = weight_penalty(params.tensors());
        total += lambda * mean_sq;
        let k = 2.0 * lambda / count as f64;
        for (g, p) in grads.iter_mut().zip(params.tensors()) {
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv = T::of(gv.as_f64() + k * pv.as_f64());
            }
        }
    }
    Ok((total, grads, pass.batch_stats))
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Moments as named tensors for a checkpoint.
    pub fn to_named(&self, names: &[String]) -> Vec<(String, Tensor<f32>)> {
        let m = names.iter().zip(&self.m).map(|(n, t)| (format!("adam.m.{n}"), t.clone()));
        let v = names.iter().zip(&self.v).map(|(n, t)| (format!("adam.v.{n}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restores moments written by [`AdamState::to_named`]; `None` when any
    /// is missing or mis-shaped.
    pub fn from_named(
        t: u64,
        names: &[String],
        params: &[Tensor<f32>],
        extra: &[(String, Tensor<f32>)],
    ) -> Option<Self> {
        let get = |prefix: &str, name: &str, shape: &[usize]| {
            let key = format!("{prefix}{name}");
            extra
                .iter()
                .find(|(n, t)| *n == key && t.shape() == shape)
                .map(|(_, t)| t.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (n, p) in names.iter().zip(params) {
            m.push(get("adam.m.", n, p.shape())?);
            v.push(get("adam.v.", n, p.shape())?);
        }
        Some(Self { t, m, v })
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    names: &[String],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::Shape(format!(
                "parameter {} has shape {:?}, gradient {:?}",
                names.get(i).map_or("?", String::as_str),
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                name: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = config.base_lr;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = f64::from(gv);
            let mn = b1 * f64::from(*mv) + (1.0 - b1) * g;
            let vn = b2 * f64::from(*vv) + (1.0 - b2) * g * g;
            *mv = mn as f32;
            *vv = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + config.eps);
            *pv = (f64::from(*pv) - update) as f32;
        }
    }
    Ok(())
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Writes `iteration,train_loss,val_loss` rows; `val_loss` is empty on
/// iterations without validation.
pub fn write_loss_curve(out: &mut impl Write, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "iteration,train_loss,val_loss")?;
    for p in curve {
        match p.val_loss {
            Some(v) => writeln!(out, "{},{},{}", p.iteration, p.train_loss, v)?,
            None => writeln!(out, "{},{},", p.iteration, p.train_loss)?,
        }
    }
    Ok(())
}

/// Masked MSE of the inference-mode model over a fixed batch, evaluated in
/// chunks. Pixels are pooled across the whole batch.
pub fn evaluate_loss(
    params: &ModelParams<f32>,
    batch: &PatchBatch,
    chunk: usize,
) -> Result<f64, TrainError> {
    let n = batch.len();
    let c = batch.inputs.shape()[1];
    let per_in = c * PATCH_PIXELS;
    let (mut sum, mut count) = (0.0f64, 0usize);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let k = end - start;
        let x = Tensor::from_vec(
            &[k, c, PATCH_SIZE, PATCH_SIZE],
            batch.inputs.data()[start * per_in..end * per_in].to_vec(),
        )
        .expect("sized");
        let y = params.predict(&x)?;
        let range = start * PATCH_PIXELS..end * PATCH_PIXELS;
        for ((&p, &t), &ok) in y
            .data()
            .iter()
            .zip(&batch.targets.data()[range.clone()])
            .zip(&batch.target_valid[range])
        {
            if ok {
                let r = f64::from(p) - f64::from(t);
                sum += r * r;
                count += 1;
            }
        }
        start = end;
    }
    if count == 0 {
        return Err(TrainError::NoValidTargets);
    }
    Ok(sum / count as f64)
}

/// Optimizer loop state over a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(params.tensors());
        Ok(Self {
            params,
            adam,
            config,
            iteration: 0,
        })
    }

    /// Resumes from a checkpoint, restoring Adam moments when present.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        let mut tr = Self::new(ck.params.clone(), config)?;
        if let Some(state) = AdamState::from_named(
            ck.meta.optimizer_step,
            ck.params.names(),
            ck.params.tensors(),
            &ck.extra,
        ) {
            tr.adam = state;
        }
        tr.iteration = ck.meta.iteration;
        Ok(tr)
    }

    pub fn checkpoint(&self, meta: TrainMeta) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: TrainMeta {
                iteration: self.iteration,
                optimizer_step: self.adam.t,
                ..meta
            },
            extra: self.adam.to_named(self.params.names()),
        }
    }

    fn diverged(&self, reason: String) -> TrainError {
        TrainError::Diverged {
            iteration: self.iteration + 1,
            reason,
            dump: Box::new(self.checkpoint(TrainMeta::default())),
        }
    }

    /// One optimization step on `batch`; returns the pre-update loss.
    pub fn step(&mut self, batch: &PatchBatch) -> Result<f64, TrainError> {
        let result = loss_and_grad(
            &self.params,
            &batch.inputs,
            &batch.targets,
            &batch.target_valid,
            self.config.weight_decay,
        );
        let (loss, grads, stats) = match result {
            Ok(r) => r,
            Err(TrainError::Model(ModelError::NonFinite { layer })) => {
                return Err(self.diverged(format!("non-finite activation after {layer}")))
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(self.diverged(format!("loss is {loss}")));
        }
        let names = self.params.names().to_vec();
        match adam_step(self.params.tensors_mut(), &grads, &names, &mut self.adam, &self.config) {
            Ok(()) => {}
            Err(TrainError::NonFiniteGradient { name }) => {
                return Err(self.diverged(format!("non-finite gradient for {name}")))
            }
            Err(e) => return Err(e),
        }
        self.params.update_running_stats(&stats, BN_MOMENTUM);
        self.iteration += 1;
        Ok(loss)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the final ones when no
    /// validation was run).
    pub best: Checkpoint,
    /// Parameters and optimizer state after the last iteration.
    pub last: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

/// Validation patch set: `n` patches drawn once from `source` with a fixed
/// seed.
pub fn validation_batch(source: &PatchSource, n: usize, seed: u64) -> Result<PatchBatch, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    source.sample(n, &mut rng)
}

/// Runs `config.max_iterations` steps from `trainer`'s state. Validation runs
/// every `val_every` iterations and after the last one; `progress` sees each
/// curve point as it is produced.
pub fn train(
    mut trainer: Trainer,
    train_src: &PatchSource,
    val: Option<&PatchBatch>,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome, TrainError> {
    let cfg = trainer.config.clone();
    // a resumed run draws a fresh sequence instead of replaying the first one
    let start = trainer.iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ start);
    rng.set_stream(1);
    let mut curve = Vec::new();
    let mut best: Option<(f64, u64, ModelParams<f32>)> = None;
    let stop = trainer.iteration + cfg.max_iterations;
    while trainer.iteration < stop {
        let batch = train_src.sample(cfg.batch_size, &mut rng)?;
        let train_loss = trainer.step(&batch)?;
        let it = trainer.iteration;
        let val_loss = match val {
            Some(v) if it % cfg.val_every == 0 || it == stop => {
                let l = evaluate_loss(&trainer.params, v, 100)?;
                if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
                    best = Some((l, it, trainer.params.clone()));
                }
                Some(l)
            }
            _ => None,
        };
        let point = CurvePoint {
            iteration: it,
            train_loss,
            val_loss,
        };
        progress(&point);
        curve.push(point);
    }
    let (best_val_loss, best_iteration) = match &best {
        Some((l, i, _)) => (Some(*l), Some(*i)),
        None => (None, None),
    };
    let meta = TrainMeta {
        iteration: trainer.iteration,
        best_iteration,
        best_val_loss,
        optimizer_step: trainer.adam.t,
    };
    let last = trainer.checkpoint(meta.clone());
    let best = match best {
        Some((_, _, params)) => Checkpoint {
            params,
            meta: TrainMeta {
                iteration: best_iteration.unwrap_or(0),
                ..meta
            },
            extra: Vec::new(),
        },
        None => Checkpoint {
            params: trainer.params,
            meta,
            extra: Vec::new(),
        },
    };
    Ok(TrainOutcome { best, last, curve })
}

/// Whole-model gradient check in `f64`: a reduced network (2 blocks, width
/// 16) on a random `1 x in_channels x 8 x 8` input with ~20 % invalid targets,
/// analytic gradients of the full loss against central differences.
pub fn model_gradcheck(in_channels: usize, lambda: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let cfg = ModelConfig {
        in_channels,
        trunk_width: 16,
        n_blocks: 2,
        entry_depths: [4, 8],
        kernel_mode: KernelMode::K3x3,
        seed,
    };
    let mut params = ModelParams::<f64>::build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    // random non-zero biases and affine terms so no ReLU input sits exactly on its kink
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if !name.ends_with(".weight") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = base + rng.random_range(-0.5..0.5));
        }
    }
    let x = Tensor::from_fn(&[1, in_channels, 8, 8], |_| rng.random_range(-1.0..1.0));
    let targets = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..30.0));
    let valid: Vec<bool> = (0..64).map(|_| rng.random_bool(0.8)).collect();
    let (_, grads, _) = loss_and_grad(&params, &x, &targets, &valid, lambda)?;
    let eval = |t: &[Tensor<f64>]| {
        let mut p = params.clone();
        p.tensors_mut().clone_from_slice(t);
        let (l, _, _) = loss_and_grad(&p, &x, &targets, &valid, lambda).expect("forward");
        l
    };
    Ok(finite_diff_check(params.tensors(), &grads, 1e-5, eval))
}
