//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records primitive operations in creation order (which is a
//! topological order), and [`Graph::backward`] replays them in exact reverse,
//! accumulating `d(loss)/d(param)` into each reachable [`Parameter`]'s grad.
//! The graph is built per forward pass and discarded afterwards.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Elem, Tensor};
use crate::sscan::{scan_par_stacked, scan_seq_stacked, ScanMode};
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named trainable array and its accumulated gradient.
/// `grad.shape == value.shape` at all times.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns all trainable parameters of a model, indexed by stable [`ParamId`]s
/// assigned at registration order (which fixes checkpoint layout).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Sum of squared parameter norms per parameter, for diagnostics.
    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.grad.l2_norm()))
            .collect()
    }
}

enum Op<T> {
    Leaf { param: Option<ParamId> },
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Sqrt(Var),
    Tanh(Var),
    Softplus(Var),
    Silu(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Matmul(Var, Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize, keepdim: bool },
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    UnfoldLast { x: Var, step: usize },
    ConvCausal { x: Var, w: Var, b: Var },
    Scan { a: Var, b: Var, mode: ScanMode },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward pass. Create one per step; `backward` consumes nothing
/// and may be called repeatedly (gradients accumulate).
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input; gradients stop here.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Tracked leaf bound to a stored parameter (value snapshot).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies the value and blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Detach(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).neg()?;
        Ok(self.push(v, Op::Neg(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).exp()?;
        Ok(self.push(v, Op::Exp(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sqrt()?;
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).tanh()?;
        Ok(self.push(v, Op::Tanh(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softplus()?;
        Ok(self.push(v, Op::Softplus(a)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).silu()?;
        Ok(self.push(v, Op::Silu(a)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).add_scalar(c)?;
        Ok(self.push(v, Op::AddScalar(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum_all());
        v.check_finite("sum_all")?;
        Ok(self.push(v, Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(x).sum_axis(axis, keepdim)?;
        Ok(self.push(v, Op::SumAxis { x, axis, keepdim }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn unfold_last(&mut self, x: Var, size: usize, step: usize) -> Result<Var> {
        let v = self.value(x).unfold_last(size, step)?;
        Ok(self.push(v, Op::UnfoldLast { x, step }))
    }

    pub fn conv_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = self
            .value(x)
            .conv_causal_depthwise(self.value(w), self.value(b))?;
        Ok(self.push(v, Op::ConvCausal { x, w, b }))
    }

    /// Linear recurrence over the leading axis with zero initial state:
    /// `h_t = a_t ⊙ h_{t-1} + b_t`. Differentiable; the adjoint is the same
    /// recurrence run in reverse time.
    pub fn scan(&mut self, a: Var, b: Var, mode: ScanMode) -> Result<Var> {
        let v = match mode {
            ScanMode::Sequential => scan_seq_stacked(self.value(a), self.value(b), None)?,
            ScanMode::Parallel => scan_par_stacked(self.value(a), self.value(b), None)?,
        };
        Ok(self.push(v, Op::Scan { a, b, mode }))
    }

    /// Reverse pass from a scalar `loss` node. Nodes are visited in exact
    /// reverse topological (creation) order; each reachable parameter's grad
    /// is accumulated with `+=`, so calling twice doubles every grad.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            g.check_finite("backward")?;
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        let p = &mut store.params[pid.0];
                        p.grad = p.grad.add(&g)?;
                    }
                }
                Op::Detach(_) => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.reduce_to_shape(self.shape(*a))?)?;
                    self.acc(&mut grads, *b, g.reduce_to_shape(self.shape(*b))?)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.reduce_to_shape(self.shape(*a))?)?;
                    self.acc(&mut grads, *b, g.neg()?.reduce_to_shape(self.shape(*b))?)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?.reduce_to_shape(self.shape(*a))?;
                    let gb = g.mul(self.value(*a))?.reduce_to_shape(self.shape(*b))?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let ga = g.div(self.value(*b))?.reduce_to_shape(self.shape(*a))?;
                    let y = &self.nodes[id].value;
                    let gb = g
                        .mul(y)?
                        .div(self.value(*b))?
                        .neg()?
                        .reduce_to_shape(self.shape(*b))?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::Neg(a) => self.acc(&mut grads, *a, g.neg()?)?,
                Op::Exp(a) => {
                    let d = g.mul(&self.nodes[id].value)?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) = 0.5 / sqrt(x)
                    let d = g.div(&self.nodes[id].value)?.scale(T::from_f64(0.5))?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let one_minus = y.mul(y)?.neg()?.add_scalar(T::one())?;
                    self.acc(&mut grads, *a, g.mul(&one_minus)?)?;
                }
                Op::Softplus(a) => {
                    let s = self.value(*a).map("sigmoid", crate::numerics::tensor::sigmoid)?;
                    self.acc(&mut grads, *a, g.mul(&s)?)?;
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let d = x.map("silu_grad", |v| {
                        let s = crate::numerics::tensor::sigmoid(v);
                        s * (T::one() + v * (T::one() - s))
                    })?;
                    self.acc(&mut grads, *a, g.mul(&d)?)?;
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, g.scale(*c)?)?,
                Op::AddScalar(a, _) => self.acc(&mut grads, *a, g)?,
                Op::Matmul(a, b) => {
                    let at = transpose_last(self.value(*a))?;
                    let bt = transpose_last(self.value(*b))?;
                    let ga = g.matmul(&bt)?.reduce_to_shape(self.shape(*a))?;
                    let gb = at.matmul(&g)?.reduce_to_shape(self.shape(*b))?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::SumAll(a) => {
                    let d = Tensor::full(self.shape(*a), g.item()?);
                    self.acc(&mut grads, *a, d)?;
                }
                Op::SumAxis { x, axis, keepdim } => {
                    let target = self.shape(*x);
                    let gk = if *keepdim {
                        g.clone()
                    } else {
                        let mut s = g.shape().to_vec();
                        s.insert(*axis, 1);
                        g.reshape(&s)?
                    };
                    self.acc(&mut grads, *x, gk.broadcast_to(target)?)?;
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[id].value;
                    let gy = g.mul(y)?;
                    let dot = gy.sum_axis(*axis, true)?;
                    let d = g.sub(&dot)?.mul(y)?;
                    self.acc(&mut grads, *x, d)?;
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, g.reshape(self.shape(*x))?)?,
                Op::Permute { x, axes } => {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    self.acc(&mut grads, *x, g.permute(&inv)?)?;
                }
                Op::Slice { x, axis, start } => {
                    let mut full = Tensor::zeros(self.shape(*x));
                    full.slice_add_assign(*axis, *start, &g)?;
                    self.acc(&mut grads, *x, full)?;
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        let gp = g.slice(*axis, offset, len)?;
                        self.acc(&mut grads, *p, gp)?;
                        offset += len;
                    }
                }
                Op::UnfoldLast { x, step } => {
                    let l = *self.shape(*x).last().unwrap();
                    self.acc(&mut grads, *x, g.fold_last_add(l, *step)?)?;
                }
                Op::ConvCausal { x, w, b } => {
                    let (gx, gw, gb) = conv_causal_backward(self.value(*x), self.value(*w), &g)?;
                    self.acc(&mut grads, *x, gx)?;
                    self.acc(&mut grads, *w, gw)?;
                    let _ = b;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::Scan { a, b, mode } => {
                    let (ga, gb) =
                        scan_backward(self.value(*a), &self.nodes[id].value, &g, *mode)?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) -> Result<()> {
        debug_assert_eq!(self.shape(v), delta.shape());
        match &mut grads[v.0] {
            Some(g) => *g = g.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }
}

fn transpose_last<T: Elem>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    t.permute(&axes)
}

/// Adjoint of the linear recurrence. With upstream grads `g_t` on the states,
/// `λ_t = g_t + a_{t+1} ⊙ λ_{t+1}` gives `d/db_t = λ_t` and
/// `d/da_t = λ_t ⊙ h_{t-1}`. The λ recurrence is itself a scan over reversed
/// time, so the same kernel (and mode) evaluates it.
fn scan_backward<T: Elem>(
    a: &Tensor<T>,
    h: &Tensor<T>,
    g: &Tensor<T>,
    mode: ScanMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let a_rev = a.reverse_axis0()?;
    let a_shift = shift_axis0(&a_rev)?;
    let g_rev = g.reverse_axis0()?;
    let mu = match mode {
        ScanMode::Sequential => scan_seq_stacked(&a_shift, &g_rev, None)?,
        ScanMode::Parallel => scan_par_stacked(&a_shift, &g_rev, None)?,
    };
    let lambda = mu.reverse_axis0()?;
    let h_prev = shift_axis0(h)?; // h_{t-1}, zero at t = 0 (h0 = 0)
    let ga = lambda.mul(&h_prev)?;
    Ok((ga, lambda))
}

/// Shifts rows down one step along axis 0, filling the first row with zeros.
fn shift_axis0<T: Elem>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let l = t.shape()[0];
    let lane = t.numel() / l;
    let mut data = vec![T::zero(); t.numel()];
    data[lane..].copy_from_slice(&t.data()[..(l - 1) * lane]);
    Tensor::from_vec(t.shape().to_vec(), data)
}

fn conv_causal_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.shape()[x.rank() - 1];
    let l = x.shape()[x.rank() - 2];
    let k = w.shape()[0];
    let outer = x.numel() / (l * d);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); k * d];
    let mut gb = vec![T::zero(); d];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for o in 0..outer {
        let base = o * l * d;
        for t in 0..l {
            let gt = &gd[base + t * d..base + (t + 1) * d];
            for j in 0..d {
                gb[j] = gb[j] + gt[j];
            }
            for kk in 0..k {
                let ti = t as isize - (k as isize - 1) + kk as isize;
                if ti < 0 {
                    continue;
                }
                let src = base + (ti as usize) * d;
                for j in 0..d {
                    gx[src + j] = gx[src + j] + wd[kk * d + j] * gt[j];
                    gw[kk * d + j] = gw[kk * d + j] + xd[src + j] * gt[j];
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), gx)?,
        Tensor::from_vec(w.shape().to_vec(), gw)?,
        Tensor::from_vec(vec![d], gb)?,
    ))
}
