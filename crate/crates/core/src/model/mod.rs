//! The height regressor: a pointwise entry block lifting the bands to the
//! trunk width, a stack of residual blocks of two depthwise-separable units
//! each, and a pointwise head producing one height per pixel. Every layer is
//! stride 1, so the network is fully convolutional and size preserving.

mod checkpoint;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::nn::{self, BatchNormCache, BatchStats, NnError, RunningStats};
use crate::preprocess::NormStats;
use crate::tensor::{Real, Tensor};

/// Trainable weight count reported for the full-size network in the original work.
pub const REFERENCE_PARAM_COUNT: u64 = 19_604_225;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {actual} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("backward pass needs a training-mode tape")]
    NoTape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelMode {
    #[default]
    #[serde(rename = "3x3")]
    K3x3,
    /// Every spatial kernel reduced to 1x1: a strictly per-pixel model.
    #[serde(rename = "1x1")]
    K1x1,
}

impl KernelMode {
    pub fn size(self) -> usize {
        match self {
            KernelMode::K3x3 => 3,
            KernelMode::K1x1 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub trunk_width: usize,
    pub n_blocks: usize,
    /// Output widths of the first two entry convolutions.
    pub entry_depths: [usize; 2],
    #[serde(default)]
    pub kernel_mode: KernelMode,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size network: 18 blocks at width 728.
    pub fn full(in_channels: usize) -> Self {
        Self {
            in_channels,
            trunk_width: 728,
            n_blocks: 18,
            entry_depths: [128, 364],
            kernel_mode: KernelMode::K3x3,
            seed: 0,
        }
    }

    /// Desk-scale network: 4 blocks at width 64.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            trunk_width: 64,
            n_blocks: 4,
            entry_depths: [16, 32],
            kernel_mode: KernelMode::K3x3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let [d1, d2] = self.entry_depths;
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be positive".into()));
        }
        if self.trunk_width == 0 {
            return Err(ModelError::Config("trunk_width must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(ModelError::Config("n_blocks must be at least 1".into()));
        }
        if !(0 < d1 && d1 < d2 && d2 < self.trunk_width) {
            return Err(ModelError::Config(format!(
                "entry_depths {:?} must increase strictly toward trunk_width {}",
                self.entry_depths, self.trunk_width
            )));
        }
        Ok(())
    }

    /// Chebyshev radius of the receptive field in pixels.
    pub fn receptive_radius(&self) -> usize {
        2 * self.n_blocks * (self.kernel_mode.size() / 2)
    }

    /// Names and shapes of the trainable tensors, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (cin, c) = (self.in_channels, self.trunk_width);
        let [d1, d2] = self.entry_depths;
        let k = self.kernel_mode.size();
        let mut v = vec![
            ("entry.conv1.weight".to_string(), vec![d1, cin]),
            ("entry.conv1.bias".to_string(), vec![d1]),
            ("entry.conv2.weight".to_string(), vec![d2, d1]),
            ("entry.conv2.bias".to_string(), vec![d2]),
            ("entry.conv3.weight".to_string(), vec![c, d2]),
            ("entry.conv3.bias".to_string(), vec![c]),
            ("entry.skip.weight".to_string(), vec![c, cin]),
            ("entry.skip.bias".to_string(), vec![c]),
        ];
        for b in 0..self.n_blocks {
            for u in 0..2 {
                let p = format!("block{b}.sep{u}");
                v.push((format!("{p}.depthwise.weight"), vec![c, k, k]));
                v.push((format!("{p}.pointwise.weight"), vec![c, c]));
                v.push((format!("{p}.pointwise.bias"), vec![c]));
                v.push((format!("{p}.bn.gamma"), vec![c]));
                v.push((format!("{p}.bn.beta"), vec![c]));
            }
        }
        v.push(("head.weight".to_string(), vec![1, c]));
        v.push(("head.bias".to_string(), vec![1]));
        v
    }

    pub fn n_units(&self) -> usize {
        2 * self.n_blocks
    }
}

/// Parameter counts by part of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub entry: u64,
    pub per_unit: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub head: u64,
    pub total: u64,
}

impl ParamCount {
    /// Signed difference to [`REFERENCE_PARAM_COUNT`] and its relative size.
    pub fn deviation(&self) -> (i64, f64) {
        let d = self.total as i64 - REFERENCE_PARAM_COUNT as i64;
        (d, d as f64 / REFERENCE_PARAM_COUNT as f64)
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, rel) = self.deviation();
        writeln!(f, "entry block        {:>12}", self.entry)?;
        writeln!(f, "separable unit     {:>12}", self.per_unit)?;
        writeln!(f, "residual block     {:>12}", self.per_block)?;
        writeln!(f, "all blocks         {:>12}", self.blocks)?;
        writeln!(f, "head               {:>12}", self.head)?;
        writeln!(f, "total              {:>12}", self.total)?;
        write!(
            f,
            "reference total    {:>12}  (deviation {d:+}, {:+.3}%)",
            REFERENCE_PARAM_COUNT,
            rel * 100.0
        )
    }
}

const ENTRY_PARAMS: usize = 8;
const UNIT_PARAMS: usize = 5;

/// Trainable tensors, batch-norm running statistics and the input
/// normalization the model was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    pub norm_stats: Option<NormStats>,
}

impl<T: Real> ModelParams<T> {
    /// He-style initialization: weights from N(0, 2 / fan_in), biases and
    /// betas 0, gammas 1.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let sd = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(sd * rng.sample::<f64, _>(StandardNormal)))
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        let running = (0..config.n_units())
            .map(|_| RunningStats::new(config.trunk_width))
            .collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            running,
            norm_stats: None,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        tensors: Vec<Tensor<T>>,
        running: Vec<RunningStats<T>>,
        norm_stats: Option<NormStats>,
    ) -> Self {
        let names = config.param_layout().into_iter().map(|(n, _)| n).collect();
        Self {
            config,
            names,
            tensors,
            running,
            norm_stats,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[BatchStats], momentum: f64) {
        for (r, b) in self.running.iter_mut().zip(batch) {
            r.update(b, momentum);
        }
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.config)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    fn unit(&self, u: usize) -> &[Tensor<T>] {
        let base = ENTRY_PARAMS + UNIT_PARAMS * u;
        &self.tensors[base..base + UNIT_PARAMS]
    }

    fn head(&self) -> (&Tensor<T>, &Tensor<T>) {
        let i = ENTRY_PARAMS + UNIT_PARAMS * self.config.n_units();
        (&self.tensors[i], &self.tensors[i + 1])
    }

    /// Runs the network. Training mode normalizes with batch statistics and
    /// records a tape for [`ModelParams::backward`]; inference mode uses the
    /// running statistics.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>, ModelError> {
        let (_, c, _, _) = x.dims4().map_err(NnError::from)?;
        if c != self.config.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.config.in_channels,
                actual: c,
            });
        }
        let train = mode == Mode::Train;
        let t = &self.tensors;
        let check = |y: &Tensor<T>, layer: &dyn Fn() -> String| {
            if y.all_finite() {
                Ok(())
            } else {
                Err(ModelError::NonFinite { layer: layer() })
            }
        };

        let e1 = nn::pointwise_forward(x, &t[0], Some(&t[1]))?;
        check(&e1, &|| "entry.conv1".into())?;
        let a1 = nn::relu(&e1);
        let e2 = nn::pointwise_forward(&a1, &t[2], Some(&t[3]))?;
        check(&e2, &|| "entry.conv2".into())?;
        let a2 = nn::relu(&e2);
        let e3 = nn::pointwise_forward(&a2, &t[4], Some(&t[5]))?;
        check(&e3, &|| "entry.conv3".into())?;
        let skip = nn::pointwise_forward(x, &t[6], Some(&t[7]))?;
        check(&skip, &|| "entry.skip".into())?;
        let mut h = nn::add_residual(&e3, &skip)?;

        let mut units = Vec::new();
        let mut batch_stats = Vec::new();
        for b in 0..self.config.n_blocks {
            let block_in = h.clone();
            for s in 0..2 {
                let u = 2 * b + s;
                let p = self.unit(u);
                let act = nn::relu(&h);
                let dw = nn::depthwise_forward(&act, &p[0])?;
                check(&dw, &|| format!("block{b}.sep{s}.depthwise"))?;
                let pw = nn::pointwise_forward(&dw, &p[1], Some(&p[2]))?;
                check(&pw, &|| format!("block{b}.sep{s}.pointwise"))?;
                let out = if train {
                    let (y, cache, stats) = nn::batchnorm_train(&pw, &p[3], &p[4])?;
                    batch_stats.push(stats);
                    units.push(UnitTape {
                        input: h,
                        act,
                        dw,
                        bn: cache,
                    });
                    y
                } else {
                    nn::batchnorm_infer(&pw, &p[3], &p[4], &self.running[u])?
                };
                check(&out, &|| format!("block{b}.sep{s}.bn"))?;
                h = out;
            }
            h = nn::add_residual(&h, &block_in)?;
        }

        let (hw, hb) = self.head();
        let output = nn::pointwise_forward(&h, hw, Some(hb))?;
        check(&output, &|| "head".into())?;
        let tape = train.then(|| Tape {
            input: x.clone(),
            e1,
            a1,
            e2,
            a2,
            units,
            trunk: h,
        });
        Ok(ForwardPass {
            output,
            tape,
            batch_stats,
        })
    }

    /// Inference-mode forward returning only the `N x 1 x H x W` heights.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward(x, Mode::Infer)?.output)
    }

    /// Gradients of a scalar loss w.r.t. every trainable tensor, given the
    /// loss gradient `d_out` w.r.t. the forward output.
    pub fn backward(&self, tape: &Tape<T>, d_out: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        let t = &self.tensors;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; t.len()];
        let (head_w, _) = self.head();
        let head_i = ENTRY_PARAMS + UNIT_PARAMS * self.config.n_units();
        let (mut g, dw, db) = nn::pointwise_backward(&tape.trunk, head_w, d_out, true)?;
        grads[head_i] = Some(dw);
        grads[head_i + 1] = db;

        for b in (0..self.config.n_blocks).rev() {
            // gradient into the block input through the identity skip
            let g_skip = g.clone();
            for s in (0..2).rev() {
                let u = 2 * b + s;
                let p = self.unit(u);
                let ut = &tape.units[u];
                let base = ENTRY_PARAMS + UNIT_PARAMS * u;
                let (g_pw, dgamma, dbeta) = nn::batchnorm_backward(&ut.bn, &p[3], &g)?;
                let (g_dw, dpw, dpb) = nn::pointwise_backward(&ut.dw, &p[1], &g_pw, true)?;
                let (g_act, ddw) = nn::depthwise_backward(&ut.act, &p[0], &g_dw)?;
                g = nn::relu_backward(&ut.input, &g_act)?;
                grads[base] = Some(ddw);
                grads[base + 1] = Some(dpw);
                grads[base + 2] = dpb;
                grads[base + 3] = Some(dgamma);
                grads[base + 4] = Some(dbeta);
            }
            g.add_assign(&g_skip).map_err(NnError::from)?;
        }

        // entry: h = conv3(relu(conv2(relu(conv1(x))))) + skip(x)
        let (dskip_w, dskip_b) = nn::pointwise_param_grads(&tape.input, &t[6], &g, true)?;
        let (g_a2, dw3, db3) = nn::pointwise_backward(&tape.a2, &t[4], &g, true)?;
        let g_e2 = nn::relu_backward(&tape.e2, &g_a2)?;
        let (g_a1, dw2, db2) = nn::pointwise_backward(&tape.a1, &t[2], &g_e2, true)?;
        let g_e1 = nn::relu_backward(&tape.e1, &g_a1)?;
        let (dw1, db1) = nn::pointwise_param_grads(&tape.input, &t[0], &g_e1, true)?;
        grads[0] = Some(dw1);
        grads[1] = db1;
        grads[2] = Some(dw2);
        grads[3] = db2;
        grads[4] = Some(dw3);
        grads[5] = db3;
        grads[6] = Some(dskip_w);
        grads[7] = dskip_b;

        Ok(grads
            .into_iter()
            .map(|g| g.expect("every parameter receives a gradient"))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct UnitTape<T> {
    input: Tensor<T>,
    act: Tensor<T>,
    dw: Tensor<T>,
    bn: BatchNormCache<T>,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    input: Tensor<T>,
    e1: Tensor<T>,
    a1: Tensor<T>,
    e2: Tensor<T>,
    a2: Tensor<T>,
    units: Vec<UnitTape<T>>,
    trunk: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub output: Tensor<T>,
    /// Present in training mode only.
    pub tape: Option<Tape<T>>,
    /// Per-unit batch statistics (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// Trainable weights per part for a configuration; batch-norm running
/// statistics are not counted.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let layout = config.param_layout();
    let size = |s: &[usize]| s.iter().product::<usize>() as u64;
    let entry: u64 = layout[..ENTRY_PARAMS].iter().map(|(_, s)| size(s)).sum();
    let per_unit: u64 = layout[ENTRY_PARAMS..ENTRY_PARAMS + UNIT_PARAMS]
        .iter()
        .map(|(_, s)| size(s))
        .sum();
    let head: u64 = layout[layout.len() - 2..].iter().map(|(_, s)| size(s)).sum();
    let per_block = 2 * per_unit;
    let blocks = per_block * config.n_blocks as u64;
    ParamCount {
        entry,
        per_unit,
        per_block,
        blocks,
        head,
        total: entry + blocks + head,
    }
}
