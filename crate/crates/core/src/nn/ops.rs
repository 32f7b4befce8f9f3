//! Forward/backward pairs for the primitives the captioning network is built
//! from. Every backward function accumulates parameter gradients (`+=`) and
//! returns the gradient with respect to its input.

use super::scalar::Scalar;
use super::tensor::{gemm, matmul, Tensor, View, ViewMut};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let mut y = Tensor::zeros(&[x.rows(), w.cols()]);
    if let Some(b) = b {
        for i in 0..y.rows() {
            y.row_mut(i).copy_from_slice(b.data());
        }
    }
    gemm(T::one(), View::of(x), View::of(w), T::one(), ViewMut::of(&mut y));
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
) -> Tensor<T> {
    gemm(T::one(), View::of(x).t(), View::of(dy), T::one(), ViewMut::of(dw));
    if let Some(db) = db {
        let dbd = db.data_mut();
        for i in 0..dy.rows() {
            for (acc, &g) in dbd.iter_mut().zip(dy.row(i)) {
                *acc += g;
            }
        }
    }
    matmul(View::of(dy), View::of(w).t())
}

/// Saved activations of a layer norm.
#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, LnCache<T>) {
    let (n, d) = (x.rows(), x.cols());
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat.data()[i * d + j] * gain.data()[j] + bias.data()[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    dgain: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (dy.rows(), dy.cols());
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += g[j] * xh[j];
            dbias.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gain.data()[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
            g * (half * (T::one() + t) + half * v * dt)
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// In-place softmax of one row restricted to `allowed` positions; disallowed
/// entries become exactly zero. A row with nothing allowed becomes all zeros.
fn masked_softmax_row<T: Scalar>(row: &mut [T], allowed: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Which keys a query may attend to.
#[derive(Clone, Copy, Debug)]
pub struct AttnMask<'a> {
    /// Query `i` sees keys `0..=i + offset` when set.
    pub causal: Option<usize>,
    /// `false` entries are padding keys.
    pub keys: Option<&'a [bool]>,
}

impl AttnMask<'_> {
    pub const NONE: AttnMask<'static> = AttnMask {
        causal: None,
        keys: None,
    };

    fn allowed(&self, i: usize, j: usize) -> bool {
        if let Some(off) = self.causal {
            if j > i + off {
                return false;
            }
        }
        self.keys.map_or(true, |k| k[j])
    }
}

/// Per-head attention probabilities kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    probs: Vec<Tensor<T>>,
}

/// Scaled dot-product attention over already-projected `q: [n, d]`,
/// `k, v: [m, d]`, split into `heads` column blocks.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: AttnMask<'_>,
) -> (Tensor<T>, AttnCache<T>) {
    let (n, d, m) = (q.rows(), q.cols(), k.rows());
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = Tensor::zeros(&[n, m]);
        gemm(
            scale,
            View::of(q).col_block(h * dh, dh),
            View::of(k).col_block(h * dh, dh).t(),
            T::zero(),
            ViewMut::of(&mut s),
        );
        for i in 0..n {
            masked_softmax_row(s.row_mut(i), |j| mask.allowed(i, j));
        }
        gemm(
            T::one(),
            View::of(&s),
            View::of(v).col_block(h * dh, dh),
            T::zero(),
            ViewMut::of(&mut out).col_block(h * dh, dh),
        );
        probs.push(s);
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    cache: &AttnCache<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d, m) = (q.rows(), q.cols(), k.rows());
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[m, d]);
    let mut dv = Tensor::zeros(&[m, d]);
    for (h, p) in cache.probs.iter().enumerate() {
        let dout_h = View::of(dout).col_block(h * dh, dh);
        gemm(
            T::one(),
            View::of(p).t(),
            dout_h,
            T::zero(),
            ViewMut::of(&mut dv).col_block(h * dh, dh),
        );
        let mut ds = matmul(dout_h, View::of(v).col_block(h * dh, dh).t());
        for i in 0..n {
            let pr = p.row(i);
            let dr = ds.row_mut(i);
            let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot);
            }
        }
        gemm(
            scale,
            View::of(&ds),
            View::of(k).col_block(h * dh, dh),
            T::zero(),
            ViewMut::of(&mut dq).col_block(h * dh, dh),
        );
        gemm(
            scale,
            View::of(&ds).t(),
            View::of(q).col_block(h * dh, dh),
            T::zero(),
            ViewMut::of(&mut dk).col_block(h * dh, dh),
        );
    }
    (dq, dk, dv)
}

/// Gathers rows of `table` for each id.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let d = table.cols();
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.rows() {
            return Err(Error::Argument(format!(
                "token id {id} outside table of {} rows",
                table.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub fn embedding_backward<T: Scalar>(ids: &[u32], dy: &Tensor<T>, dtable: &mut Tensor<T>) {
    for (i, &id) in ids.iter().enumerate() {
        let src = dy.row(i);
        for (acc, &g) in dtable.row_mut(id as usize).iter_mut().zip(src) {
            *acc += g;
        }
    }
}

/// Row-wise concatenation `[a; b]`.
pub fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cannot stack widths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// `log(sum exp(l)) - l[target]` and its gradient `softmax(l) - onehot(target)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::Argument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
    grad[target] -= T::one();
    Ok((loss, grad))
}

/// Cross-entropy minus `ln(classes)`, the loss of a uniform prediction.
///
/// Evaluated as `ln_1p(mean(exp_m1(l - l[target])))`, which keeps full
/// relative precision while the logits are close together.
pub fn excess_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::Argument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let zt = logits[target];
    let n = T::lit(logits.len() as f64);
    let s = logits.iter().map(|&l| (l - zt).exp_m1()).sum::<T>() / n;
    if s.is_finite() {
        Ok(s.ln_1p())
    } else {
        Ok(softmax_cross_entropy(logits, target)?.0 - n.ln())
    }
}

/// Numerically stable `log softmax(logits / temperature)`.
pub fn log_softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max) / temperature;
    let lse = logits
        .iter()
        .map(|&l| (l / temperature - max).exp())
        .sum::<T>()
        .ln()
        + max;
    logits.iter().map(|&l| l / temperature - lse).collect()
}
