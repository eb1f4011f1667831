//! Dense row-major tensors over `f32`/`f64` with the small op set the rest of
//! the crate needs: broadcasted elementwise arithmetic, batched matmul,
//! stabilized softmax, reductions, and the shape ops (permute, slice, concat,
//! window unfolding, causal depthwise convolution).
//!
//! Every public operation validates that its output is finite and returns an
//! error otherwise; NaN/Inf never propagates silently.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};

/// Element type tag carried by checkpoints and configs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Elem:
    Float + Debug + Display + Default + Send + Sync + 'static + serde::Serialize
{
    const DTYPE: DType;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Right-aligned numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::shape(op, a, b));
        }
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..out_shape.len() {
        if i < pad {
            out[i] = 0;
        } else {
            let d = shape[i - pad];
            out[i] = if d == 1 { 0 } else { strides[i - pad] };
        }
    }
    out
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// For literals in tests and builders; panics on length mismatch.
    pub fn new(shape: &[usize], data: &[T]) -> Self {
        Self::from_vec(shape.to_vec(), data.to_vec()).expect("valid tensor literal")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    /// Single element of a scalar (numel == 1) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ))
        }
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = row_major_strides(&self.shape);
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let strides = row_major_strides(&self.shape);
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat] = v;
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(
                    op,
                    format!("element {} of shape {:?} is {}", i, self.shape, v),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn neg(&self) -> Result<Self> {
        self.map("neg", |v| -v)
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", |v| v.exp())
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.map("sqrt", |v| v.sqrt())
    }

    pub fn tanh(&self) -> Result<Self> {
        self.map("tanh", |v| v.tanh())
    }

    /// Numerically stable softplus: `max(x,0) + ln(1+exp(-|x|))`.
    pub fn softplus(&self) -> Result<Self> {
        self.map("softplus", |v| {
            v.max(T::zero()) + (-v.abs()).exp().ln_1p()
        })
    }

    pub fn silu(&self) -> Result<Self> {
        self.map("silu", |v| v * sigmoid(v))
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map("scale", |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Self> {
        self.map("add_scalar", |v| v + c)
    }

    fn binary(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data: Vec<T> = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            let t = Tensor {
                shape: self.shape.clone(),
                data,
            };
            t.check_finite(op)?;
            return Ok(t);
        }
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n = numel_of(&out_shape);
        let rank = out_shape.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off_a = 0usize;
        let mut off_b = 0usize;
        for _ in 0..n {
            data.push(f(self.data[off_a], other.data[off_b]));
            // advance multi-index with carried stride offsets
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off_a += sa[ax];
                off_b += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off_a -= sa[ax] * out_shape[ax];
                off_b -= sb[ax] * out_shape[ax];
            }
        }
        let t = Tensor {
            shape: out_shape,
            data,
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, "div", |a, b| a / b)
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`
    /// with right-aligned broadcast over the leading dims.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k1) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k1 != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let lead_a = &self.shape[..self.rank() - 2];
        let lead_b = &other.shape[..other.rank() - 2];
        let lead = broadcast_shape("matmul", lead_a, lead_b)?;
        let batch = numel_of(&lead);
        let sa = broadcast_strides(lead_a, &lead);
        let sb = broadcast_strides(lead_b, &lead);
        // leading strides are in units of matrices
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![T::zero(); batch * m * n];
        let mut idx = vec![0usize; lead.len()];
        let (mat_a, mat_b) = (m * k1, k2 * n);
        for bi in 0..batch {
            let off_a: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum::<usize>() * mat_a;
            let off_b: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum::<usize>() * mat_b;
            let a = &self.data[off_a..off_a + mat_a];
            let b = &other.data[off_b..off_b + mat_b];
            let c = &mut data[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for p in 0..k1 {
                    let aip = a[i * k1 + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] = crow[j] + aip * brow[j];
                    }
                }
            }
            for ax in (0..lead.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < lead[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let t = Tensor {
            shape: out_shape,
            data,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        if self.shape[axis] == 0 {
            return Err(Error::invalid("softmax", "empty axis"));
        }
        let mut out = self.clone();
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..axis_len {
                    mx = mx.max(self.data[base + a * inner]);
                }
                let mut sum = T::zero();
                for a in 0..axis_len {
                    let e = (self.data[base + a * inner] - mx).exp();
                    out.data[base + a * inner] = e;
                    sum = sum + e;
                }
                for a in 0..axis_len {
                    out.data[base + a * inner] = out.data[base + a * inner] / sum;
                }
            }
        }
        out.check_finite("softmax")?;
        Ok(out)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> T {
        if self.data.is_empty() {
            T::zero()
        } else {
            self.sum_all() / T::from_f64(self.data.len() as f64)
        }
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape = self.shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let src = o * axis_len * inner + a * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] = data[dst + i] + self.data[src + i];
                }
            }
        }
        let t = Tensor {
            shape: out_shape,
            data,
        };
        t.check_finite("sum_axis")?;
        Ok(t)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::invalid(
                "permute",
                format!("axes {:?} do not match rank {}", axes, rank),
            ));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::invalid("permute", format!("bad axes {:?}", axes)));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = row_major_strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= src_strides[ax] * out_shape[ax];
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start,
                    start + len,
                    axis,
                    self.shape
                ),
            ));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let axis_len = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Adds `delta` into the `[start, start+len)` range of `axis` in place.
    /// Counterpart of `slice` used by gradient accumulation.
    pub fn slice_add_assign(&mut self, axis: usize, start: usize, delta: &Self) -> Result<()> {
        let len = delta.shape[axis];
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::invalid("slice_add_assign", "range out of bounds"));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let axis_len = self.shape[axis];
        for o in 0..outer {
            let dst = o * axis_len * inner + start * inner;
            let src = o * len * inner;
            for i in 0..len * inner {
                self.data[dst + i] = self.data[dst + i] + delta.data[src + i];
            }
        }
        Ok(())
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat", &parts[0].shape, &p.shape));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::shape("concat", &parts[0].shape, &p.shape));
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = axis_total;
        let inner: usize = parts[0].shape[axis + 1..].iter().product();
        let outer: usize = parts[0].shape[..axis].iter().product();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let al = p.shape[axis];
                let base = o * al * inner;
                data.extend_from_slice(&p.data[base..base + al * inner]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sliding windows over the last axis: `[..., l] -> [..., n_win, size]`
    /// with `n_win = (l - size) / step + 1`.
    pub fn unfold_last(&self, size: usize, step: usize) -> Result<Self> {
        let l = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("unfold", "rank-0 tensor"))?;
        if size == 0 || step == 0 || size > l {
            return Err(Error::invalid(
                "unfold",
                format!("window {size} step {step} on axis of extent {l}"),
            ));
        }
        let n_win = (l - size) / step + 1;
        let outer = self.numel() / l;
        let mut out_shape = self.shape[..self.rank() - 1].to_vec();
        out_shape.push(n_win);
        out_shape.push(size);
        let mut data = Vec::with_capacity(outer * n_win * size);
        for o in 0..outer {
            let row = &self.data[o * l..(o + 1) * l];
            for w in 0..n_win {
                data.extend_from_slice(&row[w * step..w * step + size]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Scatter-add inverse of `unfold_last`: folds `[..., n_win, size]`
    /// windows back onto `[..., l]` (overlaps accumulate).
    pub fn fold_last_add(&self, l: usize, step: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::invalid("fold", "need at least 2 dims"));
        }
        let size = self.shape[self.rank() - 1];
        let n_win = self.shape[self.rank() - 2];
        let outer = self.numel() / (n_win * size);
        let mut out_shape = self.shape[..self.rank() - 2].to_vec();
        out_shape.push(l);
        let mut data = vec![T::zero(); outer * l];
        for o in 0..outer {
            for w in 0..n_win {
                let src = (o * n_win + w) * size;
                let dst = o * l + w * step;
                for j in 0..size {
                    data[dst + j] = data[dst + j] + self.data[src + j];
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Causal depthwise convolution over the second-to-last axis.
    /// `x: [..., l, d]`, `w: [k, d]`, `b: [d]`; output matches `x`.
    /// Position `t` sees inputs `t-k+1 ..= t` (left zero padding).
    pub fn conv_causal_depthwise(&self, w: &Self, b: &Self) -> Result<Self> {
        if self.rank() < 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape("conv", &self.shape, &w.shape));
        }
        let d = self.shape[self.rank() - 1];
        let l = self.shape[self.rank() - 2];
        let k = w.shape[0];
        if w.shape[1] != d || b.shape[0] != d {
            return Err(Error::shape("conv", &self.shape, &w.shape));
        }
        let outer = self.numel() / (l * d);
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            let base = o * l * d;
            for t in 0..l {
                let dst = base + t * d;
                for j in 0..d {
                    out[dst + j] = b.data[j];
                }
                for kk in 0..k {
                    // input index t - (k-1) + kk
                    let ti = t as isize - (k as isize - 1) + kk as isize;
                    if ti < 0 {
                        continue;
                    }
                    let src = base + (ti as usize) * d;
                    let wrow = &w.data[kk * d..(kk + 1) * d];
                    for j in 0..d {
                        out[dst + j] = out[dst + j] + wrow[j] * self.data[src + j];
                    }
                }
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.check_finite("conv")?;
        Ok(t)
    }

    /// Sums `self` down to `target` shape by collapsing broadcast axes.
    /// Used to push gradients back through broadcasted ops.
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let pad = self.rank() - target.len();
        let mut cur = self.clone();
        for _ in 0..pad {
            cur = cur.sum_axis(0, false)?;
        }
        for ax in 0..target.len() {
            if cur.shape[ax] != target[ax] {
                debug_assert_eq!(target[ax], 1);
                cur = cur.sum_axis(ax, true)?;
            }
        }
        Ok(cur)
    }

    /// Broadcasts to `shape` (self must be right-align compatible).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape("broadcast_to", &self.shape, shape)?;
        if out_shape != shape {
            return Err(Error::shape("broadcast_to", &self.shape, shape));
        }
        Tensor::zeros(shape).add(self)
    }

    /// Reverses order along the leading axis.
    pub fn reverse_axis0(&self) -> Result<Self> {
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        let l = self.shape[0];
        let lane = self.numel() / l.max(1);
        let mut data = Vec::with_capacity(self.numel());
        for t in (0..l).rev() {
            data.extend_from_slice(&self.data[t * lane..(t + 1) * lane]);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub fn sigmoid<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_and_annihilator() {
        let i = Tensor::<f64>::eye(2);
        let v = Tensor::new(&[2, 1], &[5.0, 7.0]);
        assert_eq!(i.matmul(&v).unwrap().data(), &[5.0, 7.0]);

        let a = Tensor::new(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::new(&[2, 1], &[0.0, 0.0]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::new(&[1, 2], &[1.0, 2.0]);
        let b = Tensor::new(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        // [2,2] x [3,2,2] -> [3,2,2]
        let a = Tensor::new(&[2, 2], &[0.0, 1.0, 1.0, 0.0]); // swap
        let b = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        // each 2x2 block has rows swapped
        assert_eq!(&c.data()[0..4], &[2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = Tensor::new(&[2], &[0.0f64, 0.0]);
        assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);

        let big = Tensor::new(&[2], &[1000.0f64, 1000.0]);
        assert_eq!(big.softmax(0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic() {
        let t = Tensor::new(&[2], &[(3.0f64).ln(), 0.0]);
        let s = t.softmax(0).unwrap();
        assert_relative_eq!(s.data()[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(s.data()[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let t = Tensor::<f64>::zeros(&[3, 0]);
        assert!(t.softmax(1).is_err());
    }

    #[test]
    fn nan_raises() {
        let t = Tensor::new(&[1], &[0.0f64]);
        let bad = t.map("test", |_| f64::NAN);
        assert!(matches!(bad, Err(Error::NonFinite { .. })));
        let z = Tensor::new(&[1], &[0.0f64]);
        assert!(z.div(&z).is_err());
    }

    #[test]
    fn unfold_fold_roundtrip_no_overlap() {
        let x = Tensor::from_fn(&[2, 6], |i| i as f64);
        let w = x.unfold_last(3, 3).unwrap();
        assert_eq!(w.shape(), &[2, 2, 3]);
        let back = w.fold_last_add(6, 3).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn conv_is_causal() {
        // single kernel tap on the oldest position; perturbing the future
        // cannot change earlier outputs
        let x = Tensor::new(&[1, 4, 1], &[1.0f64, 2.0, 3.0, 4.0]);
        let w = Tensor::new(&[2, 1], &[1.0, 0.0]); // only x[t-1] contributes
        let b = Tensor::zeros(&[1]);
        let y = x.conv_causal_depthwise(&w, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let x = Tensor::<f64>::ones(&[2, 3, 4]);
        let r = x.reduce_to_shape(&[3, 1]).unwrap();
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| (v - 8.0).abs() < 1e-12));
    }
}
