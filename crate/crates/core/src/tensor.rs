//! Dense row-major tensors and the scalar trait shared by `f32` and `f64`.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type for tensors. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row-major views.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each operand is given
    /// as (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every strided access lies
                // inside the borrowed slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape mismatch between tensors.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{context}: expected shape {expected:?}, got {actual:?}")]
pub struct ShapeError {
    pub context: String,
    pub expected: Vec<usize>,
    pub actual: Vec<usize>,
}

impl ShapeError {
    pub fn new(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Self {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

/// Row-major tensor. Activations are 4-D `N x C x H x W`; parameters use
/// `[Cout, Cin]` (pointwise), `[C, k, k]` (depthwise) or `[C]` (vectors).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Activation tensor alias; always 4-D.
pub type Tensor4<T> = Tensor<T>;

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ShapeError::new("from_vec", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), ShapeError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(ShapeError::new("expected a 4-D tensor", &[0, 0, 0, 0], &self.shape)),
        }
    }

    pub fn expect_shape(&self, context: &str, shape: &[usize]) -> Result<(), ShapeError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(ShapeError::new(context, shape, &self.shape))
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = self.dims4().expect("4-D tensor");
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let (_, cc, hh, ww) = self.dims4().expect("4-D tensor");
        self.data[((n * cc + c) * hh + h) * ww + w] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        // v - v is 0 for finite v and NaN otherwise; independent lanes vectorize
        const L: usize = 8;
        let mut lanes = [T::zero(); L];
        let chunks = self.data.chunks_exact(L);
        let tail = chunks.remainder();
        for c in chunks {
            for l in 0..L {
                lanes[l] = lanes[l] + (c[l] - c[l]);
            }
        }
        lanes.iter().all(|v| *v == T::zero()) && tail.iter().all(|x| x.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        self.expect_shape("add_assign", &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Sum of squares accumulated in `f64`.
    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    /// Copies the `h x w` window at `(top, left)` of every plane.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self, ShapeError> {
        let (n, c, hh, ww) = self.dims4()?;
        if top + h > hh || left + w > ww {
            return Err(ShapeError::new("crop window", &[hh, ww], &[top + h, left + w]));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(hh * ww) {
            for r in top..top + h {
                out.extend_from_slice(&plane[r * ww + left..r * ww + left + w]);
            }
        }
        Self::from_vec(&[n, c, h, w], out)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

const LANES: usize = 8;

/// `sum_i f(a_i)` in `f64` with eight interleaved partial sums, combined in a
/// fixed order. Much faster than a single running sum and deterministic.
pub(crate) fn lane_sum<T: Real>(a: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            lanes[l] += f(c[l].as_f64());
        }
    }
    lanes.iter().sum::<f64>() + rest.iter().map(|v| f(v.as_f64())).sum::<f64>()
}

/// `sum_i f(a_i, b_i)` over two equal-length slices, as [`lane_sum`].
pub(crate) fn lane_sum2<T: Real>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += f(x[l].as_f64(), y[l].as_f64());
        }
    }
    lanes.iter().sum::<f64>()
        + ra.iter().zip(rb).map(|(x, y)| f(x.as_f64(), y.as_f64())).sum::<f64>()
}
