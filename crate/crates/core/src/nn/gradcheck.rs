//! Central finite-difference gradient checking in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    add_residual, batchnorm_backward, batchnorm_train, depthwise_backward, depthwise_forward,
    pointwise_backward, pointwise_forward, relu, relu_backward,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Relative error of each checked tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// Worst entry of `per_tensor`.
    pub max_rel_error: f64,
}

/// Per-tensor error scales are floored at this fraction of the largest
/// gradient entry across all checked tensors, so a tensor whose true gradient
/// is identically zero (a bias feeding straight into batch norm) is judged
/// against the overall gradient size rather than against rounding noise.
pub const GLOBAL_SCALE_FRACTION: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|, floor)`; 0 when the
/// numerator and denominator both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(floor);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Compares `analytic[k]` against central differences of `loss` with respect
/// to every element of `inputs[k]`.
pub fn finite_diff_check(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    loss: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len(), "one gradient per input");
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numerics = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        assert_eq!(inputs[k].shape(), analytic[k].shape(), "gradient shape of input {k}");
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = loss(&work);
            work[k].data_mut()[i] = orig - eps;
            let down = loss(&work);
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        numerics.push(numeric);
    }
    let global = analytic
        .iter()
        .map(|a| max_abs(a.data()))
        .chain(numerics.iter().map(|n| max_abs(n)))
        .fold(0.0, f64::max);
    let floor = GLOBAL_SCALE_FRACTION * global;
    let per_tensor: Vec<f64> = analytic
        .iter()
        .zip(&numerics)
        .map(|(a, n)| relative_error(a.data(), n, floor))
        .collect();
    let max_rel_error = per_tensor.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_tensor,
        max_rel_error,
    }
}

/// Outcome of checking one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    /// Acceptance threshold for this layer.
    pub tolerance: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks every layer backward against central differences on random
/// tensors of at most `1 x 8 x 8 x 8`, with the scalar loss `<r, f(x)>` for a
/// random projection `r`.
pub fn layer_suite(seed: u64) -> Vec<LayerCheck> {
    const EPS: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=8);
    let h = rng.random_range(3..=8);
    let w = rng.random_range(3..=8);
    let shape = vec![1, c, h, w];
    let x = uniform(&mut rng, &shape);
    let r = uniform(&mut rng, &shape);
    let mut out = Vec::new();
    let mut push = |layer, shape: &[usize], e, tolerance| {
        out.push(LayerCheck {
            layer,
            shape: shape.to_vec(),
            max_rel_error: e,
            tolerance,
        })
    };

    // pointwise with bias
    let cout = rng.random_range(1..=8);
    let pw = uniform(&mut rng, &[cout, c]);
    let pb = uniform(&mut rng, &[cout]);
    let rp = uniform(&mut rng, &[1, cout, h, w]);
    let (dx, dw, db) = pointwise_backward(&x, &pw, &rp, true).expect("shapes");
    let rep = finite_diff_check(
        &[x.clone(), pw.clone(), pb.clone()],
        &[dx, dw, db.expect("bias grad")],
        EPS,
        |t| dot(&rp, &pointwise_forward(&t[0], &t[1], Some(&t[2])).expect("shapes")),
    );
    push("pointwise", &shape, rep.max_rel_error, 1e-4);

    // depthwise 3x3
    let dk = uniform(&mut rng, &[c, 3, 3]);
    let (dx, dw) = depthwise_backward(&x, &dk, &r).expect("shapes");
    let rep = finite_diff_check(&[x.clone(), dk.clone()], &[dx, dw], EPS, |t| {
        dot(&r, &depthwise_forward(&t[0], &t[1]).expect("shapes"))
    });
    push("depthwise3x3", &shape, rep.max_rel_error, 1e-4);

    // relu, inputs kept away from the kink
    let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let dx = relu_backward(&xr, &r).expect("shapes");
    let rep = finite_diff_check(&[xr], &[dx], EPS, |t| dot(&r, &relu(&t[0])));
    push("relu", &shape, rep.max_rel_error, 1e-4);

    // batchnorm in training mode
    let gamma = uniform(&mut rng, &[c]).map(|v| v + 1.5);
    let beta = uniform(&mut rng, &[c]);
    let (_, cache, _) = batchnorm_train(&x, &gamma, &beta).expect("shapes");
    let (dx, dg, dbeta) = batchnorm_backward(&cache, &gamma, &r).expect("shapes");
    let rep = finite_diff_check(
        &[x.clone(), gamma.clone(), beta.clone()],
        &[dx, dg, dbeta],
        EPS,
        |t| dot(&r, &batchnorm_train(&t[0], &t[1], &t[2]).expect("shapes").0),
    );
    push("batchnorm", &shape, rep.max_rel_error, 1e-3);

    // residual add: both inputs receive the output gradient
    let skip = uniform(&mut rng, &shape);
    let rep = finite_diff_check(&[x.clone(), skip], &[r.clone(), r.clone()], EPS, |t| {
        dot(&r, &add_residual(&t[0], &t[1]).expect("shapes"))
    });
    push("residual_add", &shape, rep.max_rel_error, 1e-4);
    out
}
