use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Additive logit on disallowed pairs; large enough that the softmax weight
/// underflows to exactly zero, finite so rows never become NaN.
pub const MASK_LOGIT: f64 = -1e9;

/// Square allow-matrix over token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.allowed[i * self.n + j] = on;
    }

    pub fn row_allows_any(&self, i: usize) -> bool {
        self.allowed[i * self.n..(i + 1) * self.n].iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionConstraint {
    Free,
    /// Softmax over allowed positions only.
    Mask(AttentionMask),
    /// Row `i` attends exactly to `targets[i]`; softmax is bypassed.
    Fixed(Vec<usize>),
}

impl AttentionConstraint {
    pub fn check(&self, n: usize) -> Result<()> {
        match self {
            AttentionConstraint::Free => Ok(()),
            AttentionConstraint::Mask(m) => {
                if m.size() != n {
                    return Err(Error::Shape(format!("mask is {0}x{0}, sequence has {n}", m.size())));
                }
                match (0..n).find(|&i| !m.row_allows_any(i)) {
                    Some(row) => Err(Error::EmptyAttentionRow { row }),
                    None => Ok(()),
                }
            }
            AttentionConstraint::Fixed(t) => {
                if t.len() != n {
                    return Err(Error::Shape(format!("fixed map has {} rows, sequence has {n}", t.len())));
                }
                if let Some(&bad) = t.iter().find(|&&j| j >= n) {
                    return Err(Error::Shape(format!("fixed target {bad} out of range")));
                }
                Ok(())
            }
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, AttentionConstraint::Fixed(_))
    }
}

/// Single-head attention under a constraint. Returns `(α·V, α)`.
pub fn constrained_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    constraint: &AttentionConstraint,
) -> Result<(Mat, Mat)> {
    let n = q.rows;
    if k.rows != n || v.rows != n || q.cols != k.cols {
        return Err(Error::Shape(format!(
            "q {}x{}, k {}x{}, v {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    constraint.check(n)?;
    let alpha = attention_weights(q, k, constraint);
    Ok((alpha.matmul(v), alpha))
}

pub(crate) fn attention_weights(q: &Mat, k: &Mat, constraint: &AttentionConstraint) -> Mat {
    let n = q.rows;
    if let AttentionConstraint::Fixed(targets) = constraint {
        let mut alpha = Mat::zeros(n, n);
        for (i, &j) in targets.iter().enumerate() {
            alpha[(i, j)] = 1.0;
        }
        return alpha;
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut s = q.matmul_t(k);
    for i in 0..n {
        let row = s.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x *= scale;
            if let AttentionConstraint::Mask(m) = constraint {
                if !m.allows(i, j) {
                    *x += MASK_LOGIT;
                }
            }
        }
        softmax_in_place(row);
    }
    s
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Gradients of one head given `dout = ∂L/∂(α·V)`. Fixed heads return zero
/// query/key gradients.
pub(crate) fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    alpha: &Mat,
    fixed: bool,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let dv = alpha.t_matmul(dout);
    if fixed {
        return (Mat::zeros(q.rows, q.cols), Mat::zeros(k.rows, k.cols), dv);
    }
    let dalpha = dout.matmul_t(v);
    let n = alpha.rows;
    let mut ds = Mat::zeros(n, n);
    for i in 0..n {
        let a = alpha.row(i);
        let da = dalpha.row(i);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (o, (x, y)) in ds.row_mut(i).iter_mut().zip(a.iter().zip(da)) {
            *o = x * (y - inner);
        }
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    ds.scale(scale);
    (ds.matmul(k), ds.t_matmul(q), dv)
}
