//! Per-step transforms of the hidden coefficient state: linear channel
//! mixing (a learned C×C map across channels), order-wise multivariate
//! polynomial reweighting (a Hadamard factor on the high-order coefficient
//! slice), and the order-combining gate that splices LCM low orders with a
//! softmax-gated blend of the two high-order paths.
//!
//! The state enters in channel-major layout `[batch, d, c, n]`; the last
//! axis indexes polynomial order, with orders {0, 1} carrying trend.

use crate::error::{Error, Result};
use crate::legendre::{count_degree, count_total};
use crate::numerics::{Elem, Graph, ParamId, ParamStore, Tensor, Var};

/// Trainable arrays of one transform: channel mixer `l_mat` (C×C),
/// high-order reweighting `m_mat` (C×(N−2)), and the scalar gate weights.
#[derive(Clone, Debug)]
pub struct PolyParams<T> {
    pub l_mat: Tensor<T>,
    pub m_mat: Tensor<T>,
    pub p_l: T,
    pub p_m: T,
}

impl<T: Elem> PolyParams<T> {
    /// The degenerate point: `L = I`, `M = 1`, `P_L = P_M = 0`, at which the
    /// whole transform is the identity map and the network equals a vanilla
    /// selective-SSM network.
    pub fn identity_init(c: usize, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid("poly_params", "state size must be at least 3"));
        }
        Ok(PolyParams {
            l_mat: Tensor::eye(c),
            m_mat: Tensor::ones(&[c, n - 2]),
            p_l: T::zero(),
            p_m: T::zero(),
        })
    }
}

/// Elementwise two-way gate over the scaled high-order paths.
#[derive(Clone, Debug)]
pub struct GateDecision<T> {
    pub g_l: Tensor<T>,
    pub g_m: Tensor<T>,
}

/// Channel mixing: `out[b,d,:,n] = l_mat · h[b,d,:,n]`.
pub fn lcm_apply<T: Elem>(h: &Tensor<T>, l_mat: &Tensor<T>) -> Result<Tensor<T>> {
    let c = l_mat.shape()[0];
    if h.rank() < 2 || h.shape()[h.rank() - 2] != c {
        return Err(Error::shape("lcm_apply", h.shape(), l_mat.shape()));
    }
    l_mat.matmul(h)
}

/// Order-wise reweighting of the high-order slice:
/// `out[b,d,c,k] = m_mat[c,k] · h_high[b,d,c,k]`.
pub fn mopa_apply<T: Elem>(h_high: &Tensor<T>, m_mat: &Tensor<T>) -> Result<Tensor<T>> {
    let r = h_high.rank();
    if r < 2 || m_mat.rank() != 2 || h_high.shape()[r - 2..] != *m_mat.shape() {
        return Err(Error::shape("mopa_apply", h_high.shape(), m_mat.shape()));
    }
    h_high.mul(m_mat)
}

/// Softmax gate over the pair `(p_l·lcm_high, p_m·mopa_high)` followed by
/// the gated sum. The gates are convex: `g_l + g_m = 1` elementwise.
pub fn gate_combine<T: Elem>(
    lcm_high: &Tensor<T>,
    mopa_high: &Tensor<T>,
    p_l: T,
    p_m: T,
) -> Result<(Tensor<T>, GateDecision<T>)> {
    if lcm_high.shape() != mopa_high.shape() {
        return Err(Error::shape("gate_combine", lcm_high.shape(), mopa_high.shape()));
    }
    let mut stacked = lcm_high.shape().to_vec();
    stacked.push(1);
    let z_l = lcm_high.scale(p_l)?.reshape(&stacked)?;
    let z_m = mopa_high.scale(p_m)?.reshape(&stacked)?;
    let pair = Tensor::concat(&[&z_l, &z_m], stacked.len() - 1)?;
    let sm = pair.softmax(stacked.len() - 1)?;
    let g_l = sm
        .slice(stacked.len() - 1, 0, 1)?
        .reshape(lcm_high.shape())?;
    let g_m = sm
        .slice(stacked.len() - 1, 1, 1)?
        .reshape(lcm_high.shape())?;
    let mix = g_l.mul(lcm_high)?.add(&g_m.mul(mopa_high)?)?;
    Ok((mix, GateDecision { g_l, g_m }))
}

/// Splices LCM's untouched low orders {0,1} with the gated high-order mix.
pub fn order_combine<T: Elem>(lcm_full: &Tensor<T>, mix: &Tensor<T>) -> Result<Tensor<T>> {
    let r = lcm_full.rank();
    let n = lcm_full.shape()[r - 1];
    if n < 3 {
        return Err(Error::invalid("order_combine", "state size must be at least 3"));
    }
    if mix.shape()[..r - 1] != lcm_full.shape()[..r - 1] || mix.shape()[r - 1] != n - 2 {
        return Err(Error::shape("order_combine", lcm_full.shape(), mix.shape()));
    }
    let low = lcm_full.slice(r - 1, 0, 2)?;
    Tensor::concat(&[&low, mix], r - 1)
}

/// The whole per-step transform `h -> h'` on a state in `[batch, c, d, n]`
/// layout: reshape to channel-major, mix channels, reweight and gate the
/// high orders, splice, reshape back.
pub fn poly_state_transform<T: Elem>(h: &Tensor<T>, p: &PolyParams<T>) -> Result<Tensor<T>> {
    if h.rank() != 4 {
        return Err(Error::invalid(
            "poly_state_transform",
            format!("expected rank-4 state, got {:?}", h.shape()),
        ));
    }
    let n = h.shape()[3];
    if n < 3 {
        return Err(Error::invalid("poly_state_transform", "state size must be at least 3"));
    }
    let hp = h.permute(&[0, 2, 1, 3])?; // [batch, d, c, n]
    let lcm_full = lcm_apply(&hp, &p.l_mat)?;
    let h_high = hp.slice(3, 2, n - 2)?;
    let mopa_high = mopa_apply(&h_high, &p.m_mat)?;
    let lcm_high = lcm_full.slice(3, 2, n - 2)?;
    let (mix, _) = gate_combine(&lcm_high, &mopa_high, p.p_l, p.p_m)?;
    let h_prime = order_combine(&lcm_full, &mix)?;
    h_prime.permute(&[0, 2, 1, 3])
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Desk-scale reference of the unsimplified two-step construction: expand
/// into the multivariate basis (one degree-≤n block per order), project each
/// order's block down to a single coefficient. Validates the dimensional
/// claim behind the Hadamard simplification; not a training path.
#[derive(Clone, Debug)]
pub struct FullProjectionRef {
    pub channels: usize,
    pub n_deg: usize,
    /// `[n_phi_total, n_deg + 1]` projection weights; order n reads the rows
    /// of its own block only.
    pub w: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub activation: Activation,
}

impl FullProjectionRef {
    pub fn new(
        channels: usize,
        n_deg: usize,
        w: Tensor<f64>,
        bias: Tensor<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let n_phi = count_total(channels, n_deg) as usize;
        if w.shape() != [n_phi, n_deg + 1] {
            return Err(Error::invalid(
                "full_projection",
                format!("W must be [{}, {}], got {:?}", n_phi, n_deg + 1, w.shape()),
            ));
        }
        if bias.shape() != [n_deg + 1] {
            return Err(Error::invalid(
                "full_projection",
                format!("bias must be [{}], got {:?}", n_deg + 1, bias.shape()),
            ));
        }
        Ok(FullProjectionRef {
            channels,
            n_deg,
            w,
            bias,
            activation,
        })
    }

    /// Uniform averaging weights and zero bias; with constant coefficients k
    /// per block the output is k at every order.
    pub fn averaging(channels: usize, n_deg: usize, activation: Activation) -> Result<Self> {
        let n_phi = count_total(channels, n_deg) as usize;
        let mut w = Tensor::zeros(&[n_phi, n_deg + 1]);
        let mut offset = 0usize;
        for order in 0..=n_deg {
            let block = count_degree(channels, order) as usize;
            for r in 0..block {
                w.set(&[offset + r, order], 1.0 / block as f64);
            }
            offset += block;
        }
        Self::new(channels, n_deg, w, Tensor::zeros(&[n_deg + 1]), activation)
    }
}

/// `output_n = f(Σ_i w_i·c_{n,i} + b_n)` over the degree-≤n block of order n.
/// Input length must be `count_total(C, N_deg)`; output length is `N_deg+1`.
pub fn full_projection_reference(
    coeffs: &Tensor<f64>,
    spec: &FullProjectionRef,
) -> Result<Tensor<f64>> {
    let n_phi = count_total(spec.channels, spec.n_deg) as usize;
    if coeffs.numel() != n_phi {
        return Err(Error::invalid(
            "full_projection",
            format!(
                "expected {} coefficients (count_total({}, {})), got {}",
                n_phi,
                spec.channels,
                spec.n_deg,
                coeffs.numel()
            ),
        ));
    }
    let mut out = Tensor::zeros(&[spec.n_deg + 1]);
    let mut offset = 0usize;
    for order in 0..=spec.n_deg {
        let block = count_degree(spec.channels, order) as usize;
        let mut acc = spec.bias.at(&[order]);
        for r in 0..block {
            acc += spec.w.at(&[offset + r, order]) * coeffs.data()[offset + r];
        }
        let v = match spec.activation {
            Activation::Identity => acc,
            Activation::Tanh => acc.tanh(),
        };
        out.set(&[order], v);
        offset += block;
    }
    Ok(out)
}

/// Which structural variant of the transform a model runs, mirroring the
/// ablation grid: the full transform, gating over all orders without the
/// low-order splice, each path alone, or the frozen identity.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PolyVariant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "gate_only")]
    GateOnly,
    #[serde(rename = "no_lcm")]
    NoLcm,
    #[serde(rename = "no_mopa")]
    NoMopa,
    #[serde(rename = "vanilla")]
    Vanilla,
}

impl PolyVariant {
    pub const ALL: [PolyVariant; 5] = [
        PolyVariant::Full,
        PolyVariant::GateOnly,
        PolyVariant::NoLcm,
        PolyVariant::NoMopa,
        PolyVariant::Vanilla,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolyVariant::Full => "full",
            PolyVariant::GateOnly => "gate_only",
            PolyVariant::NoLcm => "no_lcm",
            PolyVariant::NoMopa => "no_mopa",
            PolyVariant::Vanilla => "vanilla",
        }
    }
}

impl std::str::FromStr for PolyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PolyVariant::Full),
            "gate_only" => Ok(PolyVariant::GateOnly),
            "no_lcm" => Ok(PolyVariant::NoLcm),
            "no_mopa" => Ok(PolyVariant::NoMopa),
            "vanilla" => Ok(PolyVariant::Vanilla),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for PolyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameter handles of one transform inside a [`ParamStore`]; which handles
/// exist depends on the variant.
#[derive(Clone, Debug)]
pub struct PolyParamIds {
    pub l_mat: Option<ParamId>,
    pub m_mat: Option<ParamId>,
    pub p_l: Option<ParamId>,
    pub p_m: Option<ParamId>,
}

/// Registers the transform's parameters at the degenerate init.
pub fn register_poly_params<T: Elem>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    n: usize,
    variant: PolyVariant,
) -> Result<PolyParamIds> {
    if n < 3 {
        return Err(Error::invalid("poly_params", "state size must be at least 3"));
    }
    let mut ids = PolyParamIds {
        l_mat: None,
        m_mat: None,
        p_l: None,
        p_m: None,
    };
    let gated = matches!(variant, PolyVariant::Full | PolyVariant::GateOnly);
    if matches!(
        variant,
        PolyVariant::Full | PolyVariant::GateOnly | PolyVariant::NoMopa
    ) {
        ids.l_mat = Some(store.add(format!("{prefix}.l_mat"), Tensor::eye(c))?);
    }
    if matches!(
        variant,
        PolyVariant::Full | PolyVariant::GateOnly | PolyVariant::NoLcm
    ) {
        let k = if variant == PolyVariant::GateOnly { n } else { n - 2 };
        ids.m_mat = Some(store.add(format!("{prefix}.m_mat"), Tensor::ones(&[c, k]))?);
    }
    if gated {
        ids.p_l = Some(store.add(format!("{prefix}.p_l"), Tensor::zeros(&[1]))?);
        ids.p_m = Some(store.add(format!("{prefix}.p_m"), Tensor::zeros(&[1]))?);
    }
    Ok(ids)
}

/// Differentiable graph build of the transform on a channel-major state
/// `[batch, d, c, n]`. Returns the transformed state plus, for gated
/// variants, the LCM-side gate values (for diagnostics). Returns the input
/// unchanged for `Vanilla`.
pub fn poly_transform_graph<T: Elem>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    hp: Var,
    ids: &PolyParamIds,
    variant: PolyVariant,
) -> Result<(Var, Option<Var>)> {
    if variant == PolyVariant::Vanilla {
        return Ok((hp, None));
    }
    let shape = g.shape(hp).to_vec();
    let n = shape[3];
    let gate = |g: &mut Graph<T>, lcm: Var, mopa: Var| -> Result<(Var, Var)> {
        let p_l = g.param(store, ids.p_l.expect("gated variant has p_l"));
        let p_m = g.param(store, ids.p_m.expect("gated variant has p_m"));
        let z_l = g.mul(lcm, p_l)?;
        let z_m = g.mul(mopa, p_m)?;
        let mut stacked = g.shape(z_l).to_vec();
        stacked.push(1);
        let z_l = g.reshape(z_l, &stacked)?;
        let z_m = g.reshape(z_m, &stacked)?;
        let pair = g.concat(&[z_l, z_m], stacked.len() - 1)?;
        let sm = g.softmax(pair, stacked.len() - 1)?;
        let base = &stacked[..stacked.len() - 1];
        let g_l = g.slice(sm, stacked.len() - 1, 0, 1)?;
        let g_l = g.reshape(g_l, base)?;
        let g_m = g.slice(sm, stacked.len() - 1, 1, 1)?;
        let g_m = g.reshape(g_m, base)?;
        let a = g.mul(g_l, lcm)?;
        let b = g.mul(g_m, mopa)?;
        Ok((g.add(a, b)?, g_l))
    };
    match variant {
        PolyVariant::Full => {
            let l = g.param(store, ids.l_mat.expect("full has l_mat"));
            let m = g.param(store, ids.m_mat.expect("full has m_mat"));
            let lcm_full = g.matmul(l, hp)?;
            let h_high = g.slice(hp, 3, 2, n - 2)?;
            let mopa_high = g.mul(h_high, m)?;
            let lcm_high = g.slice(lcm_full, 3, 2, n - 2)?;
            let (mix, g_l) = gate(g, lcm_high, mopa_high)?;
            let low = g.slice(lcm_full, 3, 0, 2)?;
            Ok((g.concat(&[low, mix], 3)?, Some(g_l)))
        }
        PolyVariant::GateOnly => {
            let l = g.param(store, ids.l_mat.expect("gate_only has l_mat"));
            let m = g.param(store, ids.m_mat.expect("gate_only has m_mat"));
            let lcm_full = g.matmul(l, hp)?;
            let mopa_full = g.mul(hp, m)?;
            let (mix, g_l) = gate(g, lcm_full, mopa_full)?;
            Ok((mix, Some(g_l)))
        }
        PolyVariant::NoLcm => {
            let m = g.param(store, ids.m_mat.expect("no_lcm has m_mat"));
            let h_high = g.slice(hp, 3, 2, n - 2)?;
            let mopa_high = g.mul(h_high, m)?;
            let low = g.slice(hp, 3, 0, 2)?;
            Ok((g.concat(&[low, mopa_high], 3)?, None))
        }
        PolyVariant::NoMopa => {
            let l = g.param(store, ids.l_mat.expect("no_mopa has l_mat"));
            Ok((g.matmul(l, hp)?, None))
        }
        PolyVariant::Vanilla => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_state(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lcm_identity_permutation_and_shear() {
        let mut rng = StdRng::seed_from_u64(1);
        let h = rand_state(&mut rng, &[2, 3, 2, 4]);

        let out = lcm_apply(&h, &Tensor::eye(2)).unwrap();
        assert_eq!(out.data(), h.data());

        let swap = Tensor::new(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let sw = lcm_apply(&h, &swap).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                for n in 0..4 {
                    assert_eq!(sw.at(&[b, d, 0, n]), h.at(&[b, d, 1, n]));
                    assert_eq!(sw.at(&[b, d, 1, n]), h.at(&[b, d, 0, n]));
                }
            }
        }

        let shear = Tensor::new(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        let sh = lcm_apply(&h, &shear).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                for n in 0..4 {
                    let u = h.at(&[b, d, 0, n]);
                    let v = h.at(&[b, d, 1, n]);
                    assert_eq!(sh.at(&[b, d, 0, n]), u + v);
                    assert_eq!(sh.at(&[b, d, 1, n]), v);
                }
            }
        }

        let bad = Tensor::eye(3);
        assert!(lcm_apply(&h, &bad).is_err());
    }

    #[test]
    fn mopa_cases() {
        let mut rng = StdRng::seed_from_u64(2);
        let h = rand_state(&mut rng, &[2, 3, 2, 5]);
        let high = h.slice(3, 2, 3).unwrap();

        let ones = Tensor::ones(&[2, 3]);
        assert_eq!(mopa_apply(&high, &ones).unwrap().data(), high.data());

        let zeros = Tensor::zeros(&[2, 3]);
        assert!(mopa_apply(&high, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut m = Tensor::ones(&[2, 3]);
        m.set(&[1, 2], 2.0);
        let mut h3 = Tensor::ones(&[1, 1, 2, 3]);
        h3.set(&[0, 0, 1, 2], 3.0);
        let out = mopa_apply(&h3, &m).unwrap();
        assert_eq!(out.at(&[0, 0, 1, 2]), 6.0);

        assert!(mopa_apply(&high, &Tensor::ones(&[2, 4])).is_err());
    }

    #[test]
    fn gate_symmetry_and_equal_inputs() {
        let mut rng = StdRng::seed_from_u64(3);
        let l = rand_state(&mut rng, &[2, 2, 3, 4]);
        let m = rand_state(&mut rng, &[2, 2, 3, 4]);

        let (mix, gd) = gate_combine(&l, &m, 0.0, 0.0).unwrap();
        assert!(gd.g_l.data().iter().all(|&v| v == 0.5));
        assert!(gd.g_m.data().iter().all(|&v| v == 0.5));
        let half_sum = l.add(&m).unwrap().scale(0.5).unwrap();
        assert!(mix.max_abs_diff(&half_sum) < 1e-15);

        // equal inputs: any gate weights give the common value back
        let (mix, _) = gate_combine(&l, &l, 3.7, -1.2).unwrap();
        assert!(mix.max_abs_diff(&l) < 1e-12);
    }

    #[test]
    fn gate_saturation() {
        let mut rng = StdRng::seed_from_u64(4);
        let l = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |_| rng.random_range(0.5..1.5));
        let m = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |_| rng.random_range(0.5..1.5));
        let (mix, gd) = gate_combine(&l, &m, 20.0, -20.0).unwrap();
        assert!(gd.g_l.data().iter().all(|&v| v >= 1.0 - 1e-6));
        // direct evaluation of the saturated softmax as the oracle
        for (i, v) in mix.data().iter().enumerate() {
            let zl = 20.0 * l.data()[i];
            let zm = -20.0 * m.data()[i];
            let e = (zm - zl).exp();
            let gl = 1.0 / (1.0 + e);
            let expect = gl * l.data()[i] + (1.0 - gl) * m.data()[i];
            assert!((v - expect).abs() < 1e-12);
            assert!((v - l.data()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn gate_convexity_property() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let l = rand_state(&mut rng, &[1, 2, 2, 3]);
            let m = rand_state(&mut rng, &[1, 2, 2, 3]);
            let p_l: f64 = rng.random_range(-5.0..5.0);
            let p_m: f64 = rng.random_range(-5.0..5.0);
            let (mix, gd) = gate_combine(&l, &m, p_l, p_m).unwrap();
            for i in 0..mix.numel() {
                let s = gd.g_l.data()[i] + gd.g_m.data()[i];
                assert!((s - 1.0).abs() <= 1e-6);
                let (lo, hi) = (
                    l.data()[i].min(m.data()[i]),
                    l.data()[i].max(m.data()[i]),
                );
                assert!(mix.data()[i] >= lo - 1e-12 && mix.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn order_combine_cases() {
        let mut rng = StdRng::seed_from_u64(6);
        let lcm = rand_state(&mut rng, &[2, 2, 3, 5]);

        let own_high = lcm.slice(3, 2, 3).unwrap();
        let spliced = order_combine(&lcm, &own_high).unwrap();
        assert_eq!(spliced.data(), lcm.data());

        let zeros = Tensor::zeros(&[2, 2, 3, 3]);
        let z = order_combine(&lcm, &zeros).unwrap();
        assert_eq!(
            z.slice(3, 0, 2).unwrap().data(),
            lcm.slice(3, 0, 2).unwrap().data()
        );
        assert!(z.slice(3, 2, 3).unwrap().data().iter().all(|&v| v == 0.0));

        let mix = rand_state(&mut rng, &[2, 2, 3, 3]);
        let out = order_combine(&lcm, &mix).unwrap();
        assert_eq!(out.slice(3, 2, 3).unwrap().data(), mix.data());
        assert_eq!(
            out.slice(3, 0, 2).unwrap().data(),
            lcm.slice(3, 0, 2).unwrap().data()
        );

        let tiny = rand_state(&mut rng, &[1, 1, 1, 2]);
        let empty_mix = Tensor::zeros(&[1, 1, 1, 0]);
        assert!(order_combine(&tiny, &empty_mix).is_err());
    }

    #[test]
    fn transform_is_identity_at_init() {
        let mut rng = StdRng::seed_from_u64(7);
        let h = rand_state(&mut rng, &[2, 3, 4, 5]); // [batch, c, d, n]
        let p = PolyParams::identity_init(3, 5).unwrap();
        let out = poly_state_transform(&h, &p).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn transform_kills_high_orders_under_saturated_mopa_gate() {
        let mut rng = StdRng::seed_from_u64(8);
        // positive states so the gate saturates in a known direction
        let h = Tensor::<f64>::from_fn(&[1, 2, 2, 4], |_| rng.random_range(0.5..1.5));
        let p = PolyParams {
            l_mat: Tensor::eye(2),
            m_mat: Tensor::zeros(&[2, 2]),
            p_l: -40.0,
            p_m: 0.0,
        };
        // z_l = -40·h (very negative), z_m = 0 → gate picks MOPA = 0
        let out = poly_state_transform(&h, &p).unwrap();
        let low = out.slice(3, 0, 2).unwrap();
        assert_eq!(low.data(), h.slice(3, 0, 2).unwrap().data());
        assert!(out
            .slice(3, 2, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn single_channel_degenerates_to_scalar_mixing() {
        let h = Tensor::<f64>::new(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = PolyParams {
            l_mat: Tensor::new(&[1, 1], &[2.5]),
            m_mat: Tensor::ones(&[1, 1]),
            p_l: 0.0,
            p_m: 0.0,
        };
        let out = poly_state_transform(&h, &p).unwrap();
        // low orders: 2.5·h; high order: gate mixes 2.5·h and 1·h evenly
        for d in 0..2 {
            for n in 0..2 {
                assert!((out.at(&[0, 0, d, n]) - 2.5 * h.at(&[0, 0, d, n])).abs() < 1e-12);
            }
            let v = h.at(&[0, 0, d, 2]);
            // both gate logits are zero, so the mix is an even average
            let expect = 0.5 * 2.5 * v + 0.5 * v;
            assert!((out.at(&[0, 0, d, 2]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_roundtrip_is_identity() {
        let mut rng = StdRng::seed_from_u64(9);
        let h = rand_state(&mut rng, &[2, 3, 4, 5]);
        let back = h
            .permute(&[0, 2, 1, 3])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap();
        assert_eq!(back.data(), h.data());
    }

    #[test]
    fn full_projection_dimensions() {
        let spec = FullProjectionRef::averaging(2, 2, Activation::Identity).unwrap();
        assert_eq!(count_total(2, 2), 10);
        let coeffs = Tensor::from_fn(&[10], |i| i as f64);
        let out = full_projection_reference(&coeffs, &spec).unwrap();
        assert_eq!(out.shape(), &[3]);

        let wrong = Tensor::zeros(&[9]);
        let err = full_projection_reference(&wrong, &spec).unwrap_err().to_string();
        assert!(err.contains("count_total"), "{err}");
    }

    #[test]
    fn full_projection_averaging_recovers_constants() {
        let spec = FullProjectionRef::averaging(2, 2, Activation::Identity).unwrap();
        // constant k per degree block
        let mut coeffs = Tensor::zeros(&[10]);
        let ks = [3.0, -1.0, 0.5];
        let mut offset = 0;
        for (order, &k) in ks.iter().enumerate() {
            let block = count_degree(2, order) as usize;
            for r in 0..block {
                coeffs.set(&[offset + r], k);
            }
            offset += block;
        }
        let out = full_projection_reference(&coeffs, &spec).unwrap();
        for (order, &k) in ks.iter().enumerate() {
            assert!((out.at(&[order]) - k).abs() < 1e-12);
        }
    }

    #[test]
    fn full_projection_univariate_is_per_order_scaling() {
        // C = 1: block n holds n+1 entries; scaling weights on the last
        // entry of each block reproduce per-order scalar scaling
        let c = 1;
        let n_deg = 3;
        let n_phi = count_total(c, n_deg) as usize;
        let mut w = Tensor::zeros(&[n_phi, n_deg + 1]);
        let scales = [2.0, 3.0, 4.0, 5.0];
        let mut offset = 0;
        for order in 0..=n_deg {
            let block = count_degree(c, order) as usize;
            w.set(&[offset + block - 1, order], scales[order]);
            offset += block;
        }
        let spec = FullProjectionRef::new(
            c,
            n_deg,
            w,
            Tensor::zeros(&[n_deg + 1]),
            Activation::Identity,
        )
        .unwrap();
        // coefficient of exact degree n placed at the end of each block
        let mut coeffs = Tensor::zeros(&[n_phi]);
        let mut offset = 0;
        for order in 0..=n_deg {
            let block = count_degree(c, order) as usize;
            coeffs.set(&[offset + block - 1], (order + 1) as f64);
            offset += block;
        }
        let out = full_projection_reference(&coeffs, &spec).unwrap();
        for order in 0..=n_deg {
            assert!((out.at(&[order]) - scales[order] * (order + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn output_length_matches_simplification_for_valid_sizes() {
        for c in 1..=3 {
            for n_deg in 0..=4 {
                let spec = FullProjectionRef::averaging(c, n_deg, Activation::Tanh).unwrap();
                let coeffs = Tensor::zeros(&[count_total(c, n_deg) as usize]);
                let out = full_projection_reference(&coeffs, &spec).unwrap();
                assert_eq!(out.numel(), n_deg + 1);
            }
        }
    }

    #[test]
    fn graph_transform_matches_plain_transform() {
        use crate::numerics::{Graph, ParamStore};
        let mut rng = StdRng::seed_from_u64(10);
        let h = rand_state(&mut rng, &[2, 3, 2, 4]); // [batch, c, d, n]
        let plain = {
            let mut p = PolyParams::identity_init(3, 4).unwrap();
            p.l_mat.set(&[0, 1], 0.3);
            p.m_mat.set(&[2, 1], -0.7);
            p.p_l = 0.4;
            p.p_m = -0.2;
            poly_state_transform(&h, &p).unwrap()
        };
        let mut store = ParamStore::<f64>::new();
        let ids = register_poly_params(&mut store, "t", 3, 4, PolyVariant::Full).unwrap();
        store.value_mut(ids.l_mat.unwrap()).set(&[0, 1], 0.3);
        store.value_mut(ids.m_mat.unwrap()).set(&[2, 1], -0.7);
        store.value_mut(ids.p_l.unwrap()).set(&[0], 0.4);
        store.value_mut(ids.p_m.unwrap()).set(&[0], -0.2);
        let mut g = Graph::new();
        let hv = g.constant(h.permute(&[0, 2, 1, 3]).unwrap());
        let (out, gates) = poly_transform_graph(&mut g, &store, hv, &ids, PolyVariant::Full).unwrap();
        assert!(gates.is_some());
        let out = g.value(out).permute(&[0, 2, 1, 3]).unwrap();
        assert!(out.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn all_variants_are_identity_at_init() {
        use crate::numerics::{Graph, ParamStore};
        let mut rng = StdRng::seed_from_u64(11);
        let hp = rand_state(&mut rng, &[2, 3, 4, 5]); // channel-major already
        for variant in PolyVariant::ALL {
            let mut store = ParamStore::<f64>::new();
            let ids = register_poly_params(&mut store, "t", 4, 5, variant).unwrap();
            let mut g = Graph::new();
            let hv = g.constant(hp.clone());
            let (out, _) = poly_transform_graph(&mut g, &store, hv, &ids, variant).unwrap();
            assert_eq!(g.value(out).data(), hp.data(), "variant {variant}");
        }
    }
}
