//! Selective SSM inner loop: input-dependent (Δ, B, C), zero-order-hold
//! discretization, the linear state recurrence in sequential and
//! work-efficient parallel-scan forms, and the readout with skip term.
//!
//! The recurrence `h_t = a_t ⊙ h_{t-1} + b_t` is associative under the
//! combine `(a2, b2) ∘ (a1, b1) = (a2·a1, a2·b1 + b2)` (second element
//! applied after the first), which is what the parallel form exploits.

use crate::error::{Error, Result};
use crate::numerics::{Elem, Tensor};
use rayon::prelude::*;

/// Input-dependent projection parameters of one selective-SSM layer.
///
/// `a_log` stores the diagonal state matrix as log magnitudes,
/// `A = -exp(a_log)`, so the continuous system is always strictly stable.
#[derive(Clone, Debug)]
pub struct SelectiveParams<T> {
    /// `[d, n]` log-magnitude of the diagonal state matrix.
    pub a_log: Tensor<T>,
    /// Δ projection `d -> d`.
    pub w_delta: Tensor<T>,
    /// Δ projection bias `[d]`.
    pub b_delta: Tensor<T>,
    /// B projection `d -> n` (no bias).
    pub w_b: Tensor<T>,
    /// C projection `d -> n` (no bias).
    pub w_c: Tensor<T>,
    /// Skip connection weights `[d]`.
    pub d_skip: Tensor<T>,
}

impl<T: Elem> SelectiveParams<T> {
    /// `a_log[d][n] = ln(n+1)`, i.e. the diagonal of the LegS operator,
    /// so `A = -(n+1)` at initialization.
    pub fn legs_init(d: usize, n: usize, mut proj_init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let a_log = Tensor::from_fn(&[d, n], |i| T::from_f64(((i % n + 1) as f64).ln()));
        SelectiveParams {
            a_log,
            w_delta: proj_init(&[d, d]),
            b_delta: proj_init(&[d]),
            w_b: proj_init(&[d, n]),
            w_c: proj_init(&[d, n]),
            d_skip: Tensor::ones(&[d]),
        }
    }
}

/// One discretized step of the recurrence.
#[derive(Clone, Debug)]
pub struct DiscretizedStep<T> {
    /// `[batch, c, d, n]`, in (0,1) whenever Δ > 0.
    pub a_bar: Tensor<T>,
    /// `[batch, c, d, n]` input-scaled discrete drive.
    pub b_bar_x: Tensor<T>,
}

/// Which scan evaluation strategy to use.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScanMode {
    #[serde(rename = "sequential")]
    Sequential,
    #[serde(rename = "parallel")]
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(ScanMode::Sequential),
            "par" | "parallel" => Ok(ScanMode::Parallel),
            other => Err(Error::Config(format!("unknown scan mode `{other}`"))),
        }
    }
}

/// Input-dependent (Δ, B, C) from the current input token.
///
/// `x_t: [batch, c, d]` gives `delta = softplus(x_t·W_delta + b_delta)`
/// (strictly positive), `b_t = x_t·W_b`, `c_t = x_t·W_c`.
pub fn selectivize<T: Elem>(
    x_t: &Tensor<T>,
    p: &SelectiveParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let delta = x_t.matmul(&p.w_delta)?.add(&p.b_delta)?.softplus()?;
    let b_t = x_t.matmul(&p.w_b)?;
    let c_t = x_t.matmul(&p.w_c)?;
    Ok((delta, b_t, c_t))
}

/// Discretize the diagonal continuous system for one step:
/// `a_bar = exp(delta·A)` (zero-order hold) and
/// `b_bar_x = delta·b_t·x_t` (Euler drive).
///
/// `delta, x_t: [batch, c, d]`, `a_log: [d, n]`, `b_t: [batch, c, n]`.
pub fn discretize<T: Elem>(
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b_t: &Tensor<T>,
    x_t: &Tensor<T>,
) -> Result<DiscretizedStep<T>> {
    if delta.data().iter().any(|v| *v <= T::zero()) {
        return Err(Error::invalid("discretize", "delta must be positive"));
    }
    let (d, n) = (a_log.shape()[0], a_log.shape()[1]);
    let a = a_log.exp()?.neg()?; // [d, n], strictly negative
    let mut lead = delta.shape().to_vec();
    lead.push(1);
    let delta5 = delta.reshape(&lead)?; // [batch, c, d, 1]
    let x5 = x_t.reshape(&lead)?;
    let mut bshape = b_t.shape().to_vec();
    bshape.insert(bshape.len() - 1, 1);
    let b5 = b_t.reshape(&bshape)?; // [batch, c, 1, n]
    let a_bar = delta5.mul(&a)?.exp()?;
    let b_bar_x = delta5.mul(&b5)?.mul(&x5)?;
    debug_assert_eq!(a_bar.shape().last(), Some(&n));
    debug_assert_eq!(a_bar.shape()[a_bar.rank() - 2], d);
    Ok(DiscretizedStep { a_bar, b_bar_x })
}

fn stack_steps<T: Elem>(steps: &[DiscretizedStep<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    if steps.is_empty() {
        return Err(Error::invalid("scan", "no steps"));
    }
    let per = steps[0].a_bar.shape().to_vec();
    let mut shape = vec![steps.len()];
    shape.extend_from_slice(&per);
    let mut a = Vec::with_capacity(steps.len() * steps[0].a_bar.numel());
    let mut b = Vec::with_capacity(a.capacity());
    for s in steps {
        if s.a_bar.shape() != per.as_slice() || s.b_bar_x.shape() != per.as_slice() {
            return Err(Error::shape("scan", &per, s.a_bar.shape()));
        }
        a.extend_from_slice(s.a_bar.data());
        b.extend_from_slice(s.b_bar_x.data());
    }
    Ok((Tensor::from_vec(shape.clone(), a)?, Tensor::from_vec(shape, b)?))
}

/// Sequential reference scan over stacked coefficients.
///
/// `a, b: [l, ...]`; returns all states `[l, ...]` of
/// `h_t = a_t ⊙ h_{t-1} + b_t` with `h_0` given (zero when `None`).
pub fn scan_seq_stacked<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_scan_args(a, b, h0)?;
    let l = a.shape()[0];
    let lane = a.numel() / l;
    let mut state = match h0 {
        Some(h) => h.data().to_vec(),
        None => vec![T::zero(); lane],
    };
    let mut out = Vec::with_capacity(a.numel());
    let (ad, bd) = (a.data(), b.data());
    for t in 0..l {
        let base = t * lane;
        for i in 0..lane {
            state[i] = ad[base + i] * state[i] + bd[base + i];
        }
        out.extend_from_slice(&state);
    }
    let t = Tensor::from_vec(a.shape().to_vec(), out)?;
    t.check_finite("scan")?;
    Ok(t)
}

/// Work-efficient (Blelloch) parallel scan: an up-sweep builds segment
/// composites, a down-sweep distributes exclusive prefixes, and each step
/// is finished by combining with its own element. The combine order is
/// fixed by the tree shape, so results are identical for any worker count.
pub fn scan_par_stacked<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_scan_args(a, b, h0)?;
    let l = a.shape()[0];
    let lane = a.numel() / l;
    let p = l.next_power_of_two();
    // padded pair arrays, identity element (1, 0)
    let mut pa = vec![T::one(); p * lane];
    let mut pb = vec![T::zero(); p * lane];
    pa[..l * lane].copy_from_slice(a.data());
    pb[..l * lane].copy_from_slice(b.data());

    // up-sweep: combine left sibling into right
    let mut s = 1;
    while s < p {
        let block = 2 * s * lane;
        let sweep = |(ca, cb): (&mut [T], &mut [T])| {
            let (lo, hi) = ((s - 1) * lane, (2 * s - 1) * lane);
            for i in 0..lane {
                let (a1, b1) = (ca[lo + i], cb[lo + i]);
                let (a2, b2) = (ca[hi + i], cb[hi + i]);
                ca[hi + i] = a2 * a1;
                cb[hi + i] = a2 * b1 + b2;
            }
        };
        if p * lane >= 1 << 16 {
            pa.par_chunks_mut(block)
                .zip(pb.par_chunks_mut(block))
                .for_each(sweep);
        } else {
            pa.chunks_mut(block).zip(pb.chunks_mut(block)).for_each(sweep);
        }
        s *= 2;
    }
    // down-sweep: root becomes identity, exclusive prefixes flow down
    for i in 0..lane {
        pa[(p - 1) * lane + i] = T::one();
        pb[(p - 1) * lane + i] = T::zero();
    }
    let mut s = p / 2;
    while s >= 1 {
        let block = 2 * s * lane;
        let sweep = |(ca, cb): (&mut [T], &mut [T])| {
            let (lo, hi) = ((s - 1) * lane, (2 * s - 1) * lane);
            for i in 0..lane {
                let (ta, tb) = (ca[lo + i], cb[lo + i]);
                ca[lo + i] = ca[hi + i];
                cb[lo + i] = cb[hi + i];
                // prefix before right child = left subtree total ∘ carried prefix
                cb[hi + i] = ta * cb[hi + i] + tb;
                ca[hi + i] = ta * ca[hi + i];
            }
        };
        if p * lane >= 1 << 16 {
            pa.par_chunks_mut(block)
                .zip(pb.par_chunks_mut(block))
                .for_each(sweep);
        } else {
            pa.chunks_mut(block).zip(pb.chunks_mut(block)).for_each(sweep);
        }
        s /= 2;
    }
    // inclusive state: h_t = apply(e_t ∘ exclusive_prefix_t, h0)
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(a.numel());
    for t in 0..l {
        let base = t * lane;
        for i in 0..lane {
            let (a1, b1) = (pa[base + i], pb[base + i]); // exclusive prefix
            let (a2, b2) = (ad[base + i], bd[base + i]); // own element
            let (ca, cb) = (a2 * a1, a2 * b1 + b2);
            let h = match h0 {
                Some(h) => ca * h.data()[i] + cb,
                None => cb,
            };
            out.push(h);
        }
    }
    let t = Tensor::from_vec(a.shape().to_vec(), out)?;
    t.check_finite("scan")?;
    Ok(t)
}

fn check_scan_args<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, h0: Option<&Tensor<T>>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("scan", a.shape(), b.shape()));
    }
    if a.rank() == 0 || a.shape()[0] == 0 {
        return Err(Error::invalid("scan", "need at least one step"));
    }
    if let Some(h) = h0 {
        if h.shape() != &a.shape()[1..] {
            return Err(Error::shape("scan", a.shape(), h.shape()));
        }
    }
    Ok(())
}

/// All states of the recurrence, one leading time axis per step.
pub fn scan_sequential<T: Elem>(
    steps: &[DiscretizedStep<T>],
    h0: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (a, b) = stack_steps(steps)?;
    scan_seq_stacked(&a, &b, h0)
}

/// Same contract as [`scan_sequential`], evaluated by associative scan.
pub fn scan_parallel<T: Elem>(
    steps: &[DiscretizedStep<T>],
    h0: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (a, b) = stack_steps(steps)?;
    scan_par_stacked(&a, &b, h0)
}

/// Streams states in windows of `chunk` steps without materializing the
/// whole `[l, ...]` trajectory; only the boundary state is carried. The
/// consumer receives `(first_step_index, states_block)` per window.
pub fn scan_streamed<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    h0: Option<&Tensor<T>>,
    chunk: usize,
    mut consume: impl FnMut(usize, &Tensor<T>) -> Result<()>,
) -> Result<()> {
    check_scan_args(a, b, h0)?;
    if chunk == 0 {
        return Err(Error::invalid("scan", "chunk must be positive"));
    }
    let l = a.shape()[0];
    let mut carry = h0.cloned();
    let mut t = 0;
    while t < l {
        let len = chunk.min(l - t);
        let ac = a.slice(0, t, len)?;
        let bc = b.slice(0, t, len)?;
        let states = scan_seq_stacked(&ac, &bc, carry.as_ref())?;
        carry = Some(states.slice(0, len - 1, 1)?.reshape(&a.shape()[1..])?);
        consume(t, &states)?;
        t += len;
    }
    Ok(())
}

/// Readout `y = Σ_n c_t[..,n]·h'[..,d,n] + d_skip ⊙ x_t`.
///
/// `h_prime: [batch, c, d, n]`, `c_t: [batch, c, n]`,
/// `x_t: [batch, c, d]`, `d_skip: [d]` -> `[batch, c, d]`.
pub fn readout<T: Elem>(
    h_prime: &Tensor<T>,
    c_t: &Tensor<T>,
    x_t: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rank = h_prime.rank();
    let mut cshape = c_t.shape().to_vec();
    cshape.insert(cshape.len() - 1, 1);
    let c4 = c_t.reshape(&cshape)?; // [batch, c, 1, n]
    let weighted = h_prime.mul(&c4)?.sum_axis(rank - 1, false)?;
    weighted.add(&d_skip.mul(x_t)?)
}
