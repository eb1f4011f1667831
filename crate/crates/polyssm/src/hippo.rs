//! The LegS operator and online function approximation: streaming a signal
//! through the coefficient ODE `c'(T) = (A/T)c + (B/T)u(T)` keeps `c` equal
//! to the best degree-N Legendre approximation of the whole history under a
//! uniform measure, which is what the state of the SSM encoder carries.

use crate::error::{Error, Result};
use crate::legendre::{self, QuadratureRule};
use crate::numerics::Tensor;

/// The LegS pair: `A[n][k] = -sqrt((2n+1)(2k+1))` below the diagonal,
/// `A[n][n] = -(n+1)`, zero above; `B[n] = sqrt(2(2n+1))`.
#[derive(Clone, Debug)]
pub struct LegsOperator {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub n: usize,
}

pub fn build_legs(n: usize) -> Result<LegsOperator> {
    if n == 0 {
        return Err(Error::invalid("build_legs", "state size must be positive"));
    }
    let mut a = Tensor::zeros(&[n, n]);
    let mut b = Tensor::zeros(&[n]);
    for row in 0..n {
        for col in 0..n {
            let v = if row > col {
                -(((2 * row + 1) as f64) * ((2 * col + 1) as f64)).sqrt()
            } else if row == col {
                -((row + 1) as f64)
            } else {
                0.0
            };
            a.set(&[row, col], v);
        }
        b.set(&[row], (2.0 * (2 * row + 1) as f64).sqrt());
    }
    Ok(LegsOperator { a, b, n })
}

/// Coefficient trajectory `c_n(t)` of an online approximation run.
#[derive(Clone, Debug)]
pub struct CoeffTrajectory {
    pub times: Vec<f64>,
    /// `[t, n]` coefficients at each sample time.
    pub coeffs: Tensor<f64>,
    /// Integration actually started here (start-time clamp applied).
    pub start_time: f64,
}

impl CoeffTrajectory {
    /// Coefficients at the final sample time.
    pub fn final_coeffs(&self) -> Tensor<f64> {
        let t = self.times.len();
        let n = self.coeffs.shape()[1];
        self.coeffs
            .slice(0, t - 1, 1)
            .and_then(|s| s.reshape(&[n]))
            .expect("trajectory slice")
    }
}

/// Streams `(t, u)` samples through the scaled LegS ODE with an explicit
/// midpoint stepper (one step per sample interval, `u` linearly interpolated
/// at midpoints). Integration begins at `max(first sample time, 1e-2 · final
/// time)` to stay clear of the 1/T singularity; the applied start time is
/// reported in the trajectory.
///
/// The state is initialized at the constant-history equilibrium
/// `c(t0) = u(t0) · sqrt(2) · e_0`, i.e. the signal is taken to have held its
/// first value for all earlier time. A zero start instead plants an O(t0/T)
/// transient along the slowest mode that never decays on finite horizons.
pub fn legs_online_approx(signal: &[(f64, f64)], n: usize) -> Result<CoeffTrajectory> {
    if signal.len() < 2 {
        return Err(Error::invalid("legs_online_approx", "need at least 2 samples"));
    }
    for w in signal.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::invalid(
                "legs_online_approx",
                format!("sample times not strictly increasing at t={}", w[1].0),
            ));
        }
    }
    if signal[0].0 <= 0.0 {
        return Err(Error::invalid(
            "legs_online_approx",
            "first sample time must be positive",
        ));
    }
    let op = build_legs(n)?;
    let t_end = signal.last().unwrap().0;
    let start_time = signal[0].0.max(1e-2 * t_end);

    let interp = |t: f64| -> f64 {
        // linear interpolation inside the sampled range; callers only ask
        // for midpoints of sample intervals
        match signal.binary_search_by(|s| s.0.total_cmp(&t)) {
            Ok(i) => signal[i].1,
            Err(i) => {
                let (t0, u0) = signal[i - 1];
                let (t1, u1) = signal[i];
                u0 + (u1 - u0) * (t - t0) / (t1 - t0)
            }
        }
    };

    let deriv = |t: f64, c: &[f64], out: &mut [f64]| {
        let u = interp(t);
        for row in 0..n {
            let mut acc = 0.0;
            for col in 0..=row {
                acc += op.a.at(&[row, col]) * c[col];
            }
            out[row] = (acc + op.b.at(&[row]) * u) / t;
        }
    };

    let mut state = vec![0.0f64; n];
    state[0] = signal[0].1 * 2.0f64.sqrt();
    let mut coeffs = Vec::with_capacity(signal.len() * n);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut mid = vec![0.0; n];
    let mut prev_t: Option<f64> = None;
    for (step_idx, &(t, _)) in signal.iter().enumerate() {
        if t > start_time {
            let t0 = prev_t.unwrap_or(start_time).max(start_time);
            let h = t - t0;
            if h > 0.0 {
                deriv(t0, &state, &mut k1);
                for i in 0..n {
                    mid[i] = state[i] + 0.5 * h * k1[i];
                }
                deriv(t0 + 0.5 * h, &mid, &mut k2);
                for i in 0..n {
                    state[i] += h * k2[i];
                    if !state[i].is_finite() {
                        return Err(Error::non_finite(
                            "legs_online_approx",
                            format!("state diverged at step {step_idx} (t={t})"),
                        ));
                    }
                }
            }
        }
        coeffs.extend_from_slice(&state);
        prev_t = Some(t);
    }
    Ok(CoeffTrajectory {
        times: signal.iter().map(|s| s.0).collect(),
        coeffs: Tensor::from_vec(vec![signal.len(), n], coeffs)?,
        start_time,
    })
}

/// `u(t) ≈ Σ_n c_n g_n(2t/T - 1)` — evaluates the approximation held by a
/// coefficient vector at query time `t ∈ [0, T]`.
pub fn reconstruct(c: &Tensor<f64>, horizon: f64, t: f64) -> Result<f64> {
    if t < 0.0 || t > horizon {
        return Err(Error::domain(
            "reconstruct",
            format!("t={t} outside [0, {horizon}]"),
        ));
    }
    let n = c.numel();
    let s = 2.0 * t / horizon - 1.0;
    let mut acc = 0.0;
    for k in 0..n {
        acc += c.data()[k] * legendre::eval_normalized(k, s)?;
    }
    Ok(acc)
}

/// Batch projection oracle: `c_n = ∫ u(t(s)) g_n(s) ds` with
/// `t(s) = (s+1)·T/2`, evaluated exactly for the piecewise-linear
/// interpolant of the samples by per-interval Gauss quadrature. The signal
/// is extended backward from its first sample at a constant value, matching
/// the warm start of the online method, so the two routes project the same
/// function.
pub fn project_coefficients(samples: &[(f64, f64)], horizon: f64, n: usize) -> Result<Tensor<f64>> {
    if samples.len() < 4 * (n + 1) {
        return Err(Error::invalid(
            "project_coefficients",
            format!(
                "grid too coarse: {} points for N={} (need at least {})",
                samples.len(),
                n,
                4 * (n + 1)
            ),
        ));
    }
    let t_last = samples.last().unwrap().0;
    if t_last < horizon * (1.0 - 1e-9) {
        return Err(Error::invalid(
            "project_coefficients",
            format!("grid ends at {t_last}, does not reach T={horizon}"),
        ));
    }
    // integrand on one sample interval is a polynomial of degree n+1;
    // ceil((n+3)/2) Gauss nodes integrate it exactly
    let nodes = (n + 3).div_ceil(2);
    let rule = QuadratureRule::gauss_legendre(nodes)?;
    let mut coeffs = vec![0.0f64; n];
    let mut g_vals = vec![0.0f64; n];
    let mut extended: Vec<(f64, f64)> = Vec::new();
    if samples[0].0 > 0.0 {
        extended.push((0.0, samples[0].1));
    }
    extended.extend_from_slice(samples);
    let samples = &extended[..];
    for w in samples.windows(2) {
        let (t0, u0) = w[0];
        let (t1, u1) = w[1];
        if t1 <= t0 {
            return Err(Error::invalid(
                "project_coefficients",
                "sample times not strictly increasing",
            ));
        }
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t0 + t1);
        for (&x, &wq) in rule.nodes.iter().zip(&rule.weights) {
            let t = mid + half * x;
            let u = u0 + (u1 - u0) * (t - t0) / (t1 - t0);
            let s = (2.0 * t / horizon - 1.0).clamp(-1.0, 1.0);
            normalized_upto(n, s, &mut g_vals);
            // ds = (2/T) dt
            let scale = wq * half * u * 2.0 / horizon;
            for k in 0..n {
                coeffs[k] += scale * g_vals[k];
            }
        }
    }
    Tensor::from_vec(vec![n], coeffs)
}

/// All g_0..g_{n-1} at one point via a single recurrence pass.
fn normalized_upto(n: usize, x: f64, out: &mut [f64]) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 0..n {
        let pk = match k {
            0 => 1.0,
            1 => x,
            _ => {
                let next =
                    ((2 * k - 1) as f64 * x * p - (k - 1) as f64 * p_prev) / k as f64;
                p_prev = p;
                p = next;
                p
            }
        };
        out[k] = ((2 * k + 1) as f64 / 2.0).sqrt() * pk;
    }
}
