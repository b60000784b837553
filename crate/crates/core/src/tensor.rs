//! Dense row-major `f64` tensors and the handful of kernels the attention
//! chain is built from.

use crate::cost::{CostCounters, FlopKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.require_same_shape(other, "axpby")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let inner = *out_shape.last().unwrap();
        let inner_stride = *gather_strides.last().unwrap();
        let outer: usize = out_shape[..rank - 1].iter().product();
        for _ in 0..outer {
            let base: usize = index[..rank - 1]
                .iter()
                .zip(&gather_strides)
                .map(|(i, s)| i * s)
                .sum();
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[base..base + inner]);
            } else {
                data.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            // odometer over all but the last axis
            for ax in (0..rank - 1).rev() {
                index[ax] += 1;
                if index[ax] < out_shape[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Slice `i` along axis 0, dropping that axis.
    pub fn index_first(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::Index(format!("index {i} on axis 0 of {:?}", self.shape)));
        }
        let block = self.data.len() / self.shape[0];
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * block..(i + 1) * block].to_vec(),
        })
    }

    /// Concatenates equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.require_same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    fn require_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "every axis needs length >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strided view of a row-major matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, written with row stride `out_stride`.
///
/// Each output element is a k-ordered accumulation that depends only on
/// its own row of `a` and column of `b`, so results are identical no
/// matter how many rows are batched into one call.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], out_offset: usize, out_stride: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len());
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out_offset + (m - 1) * out_stride + n <= out.len());
    // SAFETY: the bounds of all three strided views were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            out.as_mut_ptr().add(out_offset),
            out_stride as isize,
            1,
        );
    }
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Matrix product of `[m,k]` and `[k,n]` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul needs [m,k]·[k,n], got {:?}·{:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        MatRef::dense(&a.data, m, k),
        MatRef::dense(&b.data, k, n),
        &mut out,
        0,
        n,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// [`matmul`] that charges `2·m·n·k` FLOPs to `cost`.
pub fn matmul_counted(
    a: &Tensor,
    b: &Tensor,
    cost: &mut CostCounters,
    kind: FlopKind,
) -> Result<Tensor> {
    let out = matmul(a, b)?;
    cost.charge(kind, matmul_flops(a.shape[0], a.shape[1], b.shape[1]));
    Ok(out)
}

/// In-place max-subtracted softmax over one row. Returns the number of
/// exponentials evaluated.
pub fn softmax_row(row: &mut [f64]) -> u64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    row.len() as u64
}

/// Softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape.last().unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        softmax_row(row);
    }
    out
}

/// Cosine similarity of the flattened tensors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.require_same_shape(b, "cosine")?;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm tensor".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest scores in ascending index order. Ties go to
/// the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("top-k with k={k} over {n} scores")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn check_indices(indices: &[usize], len: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Index("empty index list".into()));
    }
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Index(format!(
                "indices must be strictly increasing, saw {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= len {
            return Err(Error::Index(format!("index {last} >= {len} positions")));
        }
    }
    Ok(())
}

/// Selects spatial positions from a tensor whose last three axes are
/// `[H, W, C]`. `indices` address the flattened `H·W` plane; the result has
/// shape `[..., K, C]`.
pub fn gather_tokens(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let rank = x.shape.len();
    if rank < 3 {
        return Err(Error::dim(format!("gather_tokens needs [..,H,W,C], got {:?}", x.shape)));
    }
    let c = x.shape[rank - 1];
    let plane = x.shape[rank - 3] * x.shape[rank - 2];
    check_indices(indices, plane)?;
    let outer = x.data.len() / (plane * c);
    let mut data = Vec::with_capacity(outer * indices.len() * c);
    for o in 0..outer {
        let base = o * plane * c;
        for &p in indices {
            data.extend_from_slice(&x.data[base + p * c..base + (p + 1) * c]);
        }
    }
    let mut shape = x.shape[..rank - 3].to_vec();
    shape.extend([indices.len(), c]);
    Ok(Tensor { shape, data })
}

/// Inverse of [`gather_tokens`]: positions in `indices` take their values
/// from `computed` (`[..., K, C]`), all others from `cached` (`[..., H, W, C]`).
pub fn scatter_refill(computed: &Tensor, cached: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let rank = cached.shape.len();
    if rank < 3 {
        return Err(Error::dim(format!("scatter_refill needs [..,H,W,C], got {:?}", cached.shape)));
    }
    let c = cached.shape[rank - 1];
    let plane = cached.shape[rank - 3] * cached.shape[rank - 2];
    check_indices(indices, plane)?;
    let mut expected = cached.shape[..rank - 3].to_vec();
    expected.extend([indices.len(), c]);
    if computed.shape != expected {
        return Err(Error::shape(format!(
            "computed block {:?} does not cover {} positions of {:?}",
            computed.shape,
            indices.len(),
            cached.shape
        )));
    }
    let mut out = cached.clone();
    let outer = cached.data.len() / (plane * c);
    let k = indices.len();
    for o in 0..outer {
        for (j, &p) in indices.iter().enumerate() {
            let src = (o * k + j) * c;
            let dst = (o * plane + p) * c;
            out.data[dst..dst + c].copy_from_slice(&computed.data[src..src + c]);
        }
    }
    Ok(out)
}

/// Standard normal tensor filled in row-major order.
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    validate_shape(shape)?;
    Ok(Tensor::from_fn(shape, |_| rng.next_normal()))
}

/// Peak signal-to-noise ratio of `b` against reference `a`, in dB, with
/// peak `max(|a|∞, 1)`. Identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.require_same_shape(b, "psnr")?;
    let peak = a.max_abs().max(1.0);
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
