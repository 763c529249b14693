use super::NnError;
use crate::par;
use crate::tensor::{lane_sum, Real, ShapeError, Tensor};

/// `y[n,o] = b[o] + sum_i w[o,i] * x[n,i]` at every pixel; `w` is `[Cout, Cin]`.
pub fn pointwise_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>, NnError> {
    let (n, cin, h, wd) = x.dims4()?;
    let cout = match w.shape()[..] {
        [o, i] if i == cin => o,
        _ => return Err(ShapeError::new("pointwise weight", &[w.shape()[0], cin], w.shape()).into()),
    };
    if let Some(b) = b {
        b.expect_shape("pointwise bias", &[cout])?;
    }
    let hw = h * wd;
    let mut y = Tensor::zeros(&[n, cout, h, wd]);
    let xd = x.data();
    let wdata = w.data();
    par::for_each_chunk_mut(y.data_mut(), cout * hw, |s, ys| {
        let xs = &xd[s * cin * hw..(s + 1) * cin * hw];
        T::gemm(cout, cin, hw, T::one(), wdata, (cin, 1), xs, (hw, 1), T::zero(), ys, (hw, 1));
        if let Some(b) = b {
            for (o, row) in ys.chunks_mut(hw).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    });
    Ok(y)
}

/// Returns `(dx, dw, db)`; `db` is `None` when `with_bias` is false.
pub fn pointwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>), NnError> {
    let (dw, db) = pointwise_param_grads(x, w, dy, with_bias)?;
    let (_, cin, h, wd) = x.dims4()?;
    let cout = w.shape()[0];
    let hw = h * wd;
    let (dyd, wdata) = (dy.data(), w.data());
    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), cin * hw, |s, dxs| {
        let g = &dyd[s * cout * hw..(s + 1) * cout * hw];
        T::gemm(cin, cout, hw, T::one(), wdata, (1, cin), g, (hw, 1), T::zero(), dxs, (hw, 1));
    });
    Ok((dx, dw, db))
}

/// Weight and bias gradients only, for layers whose input needs no gradient.
pub fn pointwise_param_grads<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    with_bias: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>), NnError> {
    let (n, cin, h, wd) = x.dims4()?;
    let cout = w.shape()[0];
    w.expect_shape("pointwise weight", &[cout, cin])?;
    dy.expect_shape("pointwise output grad", &[n, cout, h, wd])?;
    let hw = h * wd;
    let (dyd, xd) = (dy.data(), x.data());

    let mut dw = Tensor::zeros(&[cout, cin]);
    for s in 0..n {
        let g = &dyd[s * cout * hw..(s + 1) * cout * hw];
        let xs = &xd[s * cin * hw..(s + 1) * cin * hw];
        T::gemm(cout, hw, cin, T::one(), g, (hw, 1), xs, (1, hw), T::one(), dw.data_mut(), (cin, 1));
    }

    let db = with_bias.then(|| {
        let sums = par::map_range(cout, |o| {
            (0..n)
                .map(|s| {
                    let off = (s * cout + o) * hw;
                    lane_sum(&dyd[off..off + hw], |v| v)
                })
                .sum::<f64>()
        });
        Tensor::from_vec(&[cout], sums.into_iter().map(T::of).collect()).expect("cout values")
    });
    Ok((dw, db))
}

fn depthwise_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize), NnError> {
    let (n, c, h, wd) = x.dims4()?;
    let k = match w.shape()[..] {
        [cc, k1, k2] if cc == c && k1 == k2 => k1,
        _ => return Err(ShapeError::new("depthwise weight", &[c, 3, 3], w.shape()).into()),
    };
    if k % 2 == 0 {
        return Err(NnError::EvenKernel(k));
    }
    Ok((n, c, h, wd, k))
}

/// Copies an `h x w` plane into the centre of a zeroed `(h+2r) x (w+2r)` buffer.
fn pad_plane<T: Real>(src: &[T], h: usize, w: usize, r: usize, buf: &mut Vec<T>) {
    let pw = w + 2 * r;
    buf.clear();
    buf.resize((h + 2 * r) * pw, T::zero());
    for i in 0..h {
        let dst = (i + r) * pw + r;
        buf[dst..dst + w].copy_from_slice(&src[i * w..(i + 1) * w]);
    }
}

/// `out[i,j] = sum_ab kern[a,b] * padded[i+a, j+b]`. Computed on the
/// flattened padded plane so every tap is one long contiguous loop; the
/// columns past `w` are scratch and dropped.
fn corr_plane<T: Real>(padded: &[T], h: usize, w: usize, kern: &[T], k: usize, wide: &mut Vec<T>, out: &mut [T]) {
    let pw = w + k - 1;
    let len = h * pw - (k - 1);
    wide.clear();
    wide.resize(len, T::zero());
    for a in 0..k {
        for b in 0..k {
            let wv = kern[a * k + b];
            let off = a * pw + b;
            for (o, &v) in wide.iter_mut().zip(&padded[off..off + len]) {
                *o = *o + wv * v;
            }
        }
    }
    for i in 0..h {
        out[i * w..(i + 1) * w].copy_from_slice(&wide[i * pw..i * pw + w]);
    }
}

/// Dot product with eight independent partial sums (fixed order), the
/// partials combined in `f64`.
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> f64 {
    const L: usize = 8;
    let mut lanes = [T::zero(); L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..L {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    lanes.iter().map(|v| v.as_f64()).sum::<f64>() + tail
}

/// Runs `f(plane_index, plane)` over every `hw`-sized plane of `data`,
/// handing each call a scratch buffer.
fn for_each_plane<T: Real>(
    data: &mut [T],
    hw: usize,
    f: impl Fn(usize, &mut [T], &mut Vec<T>, &mut Vec<T>) + Sync + Send,
) {
    let per_task = (16_384 / hw.max(1)).max(1);
    par::for_each_chunk_mut(data, per_task * hw, |t, chunk| {
        let (mut buf, mut wide) = (Vec::new(), Vec::new());
        for (j, plane) in chunk.chunks_mut(hw).enumerate() {
            f(t * per_task + j, plane, &mut buf, &mut wide);
        }
    });
}

/// Per-channel `k x k` cross-correlation, zero padding `k/2`, stride 1.
/// `w` is `[C, k, k]`; no bias.
pub fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, h, wd, k) = depthwise_dims(x, w)?;
    let r = k / 2;
    let hw = h * wd;
    let mut y = Tensor::zeros(&[n, c, h, wd]);
    let (xd, wdata) = (x.data(), w.data());
    for_each_plane(y.data_mut(), hw, |p, yp, buf, wide| {
        let ch = p % c;
        pad_plane(&xd[p * hw..(p + 1) * hw], h, wd, r, buf);
        corr_plane(buf, h, wd, &wdata[ch * k * k..(ch + 1) * k * k], k, wide, yp);
    });
    Ok(y)
}

/// Returns `(dx, dw)`.
pub fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (n, c, h, wd, k) = depthwise_dims(x, w)?;
    dy.expect_shape("depthwise output grad", x.shape())?;
    let r = k / 2;
    let hw = h * wd;
    let (xd, wdata, dyd) = (x.data(), w.data(), dy.data());

    // dx is the correlation of dy with the flipped kernel
    let flipped: Vec<T> = (0..c)
        .flat_map(|ch| (0..k * k).rev().map(move |t| wdata[ch * k * k + t]))
        .collect();
    let mut dx = Tensor::zeros(x.shape());
    for_each_plane(dx.data_mut(), hw, |p, dxp, buf, wide| {
        let ch = p % c;
        pad_plane(&dyd[p * hw..(p + 1) * hw], h, wd, r, buf);
        corr_plane(buf, h, wd, &flipped[ch * k * k..(ch + 1) * k * k], k, wide, dxp);
    });

    // dw[a,b] = sum_ij dy[i,j] * xpad[i+a, j+b], with dy laid out on the
    // padded row stride (zeros in the scratch columns) so each tap is one
    // contiguous dot product
    let pw = wd + 2 * r;
    let len = h * pw - 2 * r;
    let per_channel = par::map_range(c, |ch| {
        let mut acc = vec![0.0f64; k * k];
        let mut buf = Vec::new();
        let mut g = vec![T::zero(); h * pw];
        for s in 0..n {
            let p = s * c + ch;
            pad_plane(&xd[p * hw..(p + 1) * hw], h, wd, r, &mut buf);
            for i in 0..h {
                g[i * pw..i * pw + wd].copy_from_slice(&dyd[p * hw + i * wd..p * hw + (i + 1) * wd]);
            }
            for a in 0..k {
                for b in 0..k {
                    let off = a * pw + b;
                    acc[a * k + b] += dot_lanes(&g[..len], &buf[off..off + len]);
                }
            }
        }
        acc
    });
    let dw = Tensor::from_vec(
        &[c, k, k],
        per_channel.into_iter().flatten().map(T::of).collect(),
    )
    .expect("c*k*k values");
    Ok((dx, dw))
}
