//! Legendre polynomials on [-1, 1]: Bonnet-recurrence evaluation,
//! L2-normalized basis functions, tensor-product multivariate extension,
//! basis counting, and Gauss–Legendre quadrature for orthogonality checks.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DOMAIN_SLACK: f64 = 1e-12;

fn check_domain(op: &'static str, x: f64) -> Result<()> {
    if x.abs() > 1.0 + DOMAIN_SLACK {
        Err(Error::domain(op, format!("{x} outside [-1, 1]")))
    } else {
        Ok(())
    }
}

/// `P_n(x)` by the three-term (Bonnet) recurrence
/// `(n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}`.
pub fn eval_legendre(n: usize, x: f64) -> Result<f64> {
    check_domain("eval_legendre", x)?;
    Ok(eval_unchecked(n, x))
}

fn eval_unchecked(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let mut p_prev = 1.0;
            let mut p = x;
            for k in 1..n {
                let next = ((2 * k + 1) as f64 * x * p - k as f64 * p_prev) / (k + 1) as f64;
                p_prev = p;
                p = next;
            }
            p
        }
    }
}

/// `P_n` and its derivative, used by the quadrature Newton iteration.
fn eval_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 1..n {
        let next = ((2 * k + 1) as f64 * x * p - k as f64 * p_prev) / (k + 1) as f64;
        p_prev = p;
        p = next;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Orthonormal basis function `g_n(x) = sqrt((2n+1)/2) · P_n(x)`,
/// satisfying `∫ g_n^2 = 1` on [-1, 1].
pub fn eval_normalized(n: usize, x: f64) -> Result<f64> {
    let p = eval_legendre(n, x)?;
    Ok(((2 * n + 1) as f64 / 2.0).sqrt() * p)
}

/// Per-channel degrees of one multivariate basis element
/// `Π_c P_{n_c}(x_c)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiIndex {
    pub degrees: Vec<usize>,
}

impl MultiIndex {
    pub fn new(degrees: Vec<usize>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::invalid("multi_index", "needs at least one channel"));
        }
        Ok(MultiIndex { degrees })
    }

    pub fn channels(&self) -> usize {
        self.degrees.len()
    }

    /// Total degree `Σ_c n_c`.
    pub fn total_degree(&self) -> usize {
        self.degrees.iter().sum()
    }
}

/// Product evaluation `Π_c P_{n_c}(x_c)` at one point of `[-1, 1]^C`.
pub fn eval_multivariate(idx: &MultiIndex, point: &[f64]) -> Result<f64> {
    if point.len() != idx.channels() {
        return Err(Error::invalid(
            "eval_multivariate",
            format!("{} degrees vs {} coordinates", idx.channels(), point.len()),
        ));
    }
    let mut prod = 1.0;
    for (&n, &x) in idx.degrees.iter().zip(point) {
        check_domain("eval_multivariate", x)?;
        prod *= eval_unchecked(n, x);
    }
    Ok(prod)
}

/// Number of multivariate basis elements in `c` variables with total degree
/// at most `n_deg`: `binomial(c + n_deg, c)`.
pub fn count_degree(c: usize, n_deg: usize) -> u64 {
    binomial((c + n_deg) as u64, c as u64)
}

/// Dimension of the expanded basis space up to max degree `n_deg`:
/// `Σ_{d=0}^{n_deg} binomial(c + d, c)` (one degree-≤d block per order d).
pub fn count_total(c: usize, n_deg: usize) -> u64 {
    (0..=n_deg).map(|d| count_degree(c, d)).sum()
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// All multi-indices in `c` variables with total degree ≤ `max_deg`,
/// graded-lexicographic: sorted by total degree, then lexicographically.
pub fn enumerate_indices(c: usize, max_deg: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for d in 0..=max_deg {
        let mut idx = vec![0usize; c];
        emit_exact(&mut idx, 0, d, &mut out);
    }
    out
}

fn emit_exact(idx: &mut Vec<usize>, pos: usize, remaining: usize, out: &mut Vec<MultiIndex>) {
    if pos == idx.len() - 1 {
        idx[pos] = remaining;
        out.push(MultiIndex {
            degrees: idx.clone(),
        });
        return;
    }
    for d in 0..=remaining {
        idx[pos] = d;
        emit_exact(idx, pos + 1, remaining - d, out);
    }
}

/// Gauss–Legendre quadrature rule on [-1, 1]: exact for polynomials up to
/// degree `2·order − 1`. Nodes are the roots of `P_order`, found by Newton
/// iteration from the Chebyshev initial guess to 1e-14.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl QuadratureRule {
    pub fn gauss_legendre(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("quadrature", "order must be positive"));
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Chebyshev-angle initial guess for the i-th root
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = eval_with_derivative(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-14 {
                    break;
                }
            }
            let (_, dp) = eval_with_derivative(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        // roots come out descending; store ascending
        nodes.reverse();
        weights.reverse();
        Ok(QuadratureRule {
            nodes,
            weights,
            order,
        })
    }

    /// `∫_{-1}^{1} f(x) dx` under this rule.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Pairwise quadrature inner products of all multivariate Legendre basis
/// elements with total degree ≤ `max_deg`, over `[-1,1]^c` with a full
/// tensor-product grid. Diagonal entries are `Π_c 2/(2 n_c + 1)`;
/// off-diagonal entries vanish to quadrature accuracy.
pub fn gram_matrix(c: usize, max_deg: usize, rule: &QuadratureRule) -> Result<Tensor<f64>> {
    if rule.order < max_deg + 1 {
        return Err(Error::invalid(
            "gram_matrix",
            format!(
                "quadrature order {} insufficient for degree {} (need ≥ {})",
                rule.order,
                max_deg,
                max_deg + 1
            ),
        ));
    }
    let basis = enumerate_indices(c, max_deg);
    let m = basis.len();
    // cache univariate evaluations at all nodes: one row per degree
    let nq = rule.nodes.len();
    let mut table = vec![vec![0.0; nq]; max_deg + 1];
    for (d, row) in table.iter_mut().enumerate() {
        for (qi, &x) in rule.nodes.iter().enumerate() {
            row[qi] = eval_unchecked(d, x);
        }
    }
    let mut gram = Tensor::zeros(&[m, m]);
    // iterate the tensor-product grid once, accumulating all pair products
    let mut grid = vec![0usize; c];
    loop {
        let mut wprod = 1.0;
        for &qi in &grid {
            wprod *= rule.weights[qi];
        }
        // basis values at this grid point
        let vals: Vec<f64> = basis
            .iter()
            .map(|idx| {
                idx.degrees
                    .iter()
                    .zip(&grid)
                    .map(|(&deg, &qi)| table[deg][qi])
                    .product()
            })
            .collect();
        for i in 0..m {
            let vi = wprod * vals[i];
            for j in i..m {
                let v = vi * vals[j];
                let cur = gram.at(&[i, j]);
                gram.set(&[i, j], cur + v);
            }
        }
        // advance grid
        let mut ax = 0;
        loop {
            if ax == c {
                break;
            }
            grid[ax] += 1;
            if grid[ax] < nq {
                break;
            }
            grid[ax] = 0;
            ax += 1;
        }
        if ax == c {
            break;
        }
    }
    for i in 0..m {
        for j in 0..i {
            let v = gram.at(&[j, i]);
            gram.set(&[i, j], v);
        }
    }
    Ok(gram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn low_order_values() {
        assert_eq!(eval_legendre(0, 0.3).unwrap(), 1.0);
        assert_eq!(eval_legendre(1, -0.4).unwrap(), -0.4);
        // P_2(x) = (3x^2 - 1)/2
        assert_relative_eq!(eval_legendre(2, 0.5).unwrap(), -0.125, epsilon = 1e-15);
    }

    #[test]
    fn domain_enforced() {
        assert!(eval_legendre(3, 1.1).is_err());
        assert!(eval_legendre(3, 1.0 + 5e-13).is_ok());
    }

    #[test]
    fn normalized_values() {
        for x in [-0.7, 0.0, 0.9] {
            assert_relative_eq!(
                eval_normalized(0, x).unwrap(),
                (0.5f64).sqrt(),
                epsilon = 1e-15
            );
        }
        assert_relative_eq!(
            eval_normalized(1, 1.0).unwrap(),
            (1.5f64).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn normalized_g2_has_unit_l2_norm_under_16_node_rule() {
        let rule = QuadratureRule::gauss_legendre(16).unwrap();
        let integral = rule.integrate(|x| {
            let g = eval_normalized(2, x).unwrap();
            g * g
        });
        assert!((integral - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn bonnet_matches_monomial_expansion() {
        // explicit monomial coefficients for P_0..P_6
        let coeffs: [&[f64]; 7] = [
            &[1.0],
            &[0.0, 1.0],
            &[-0.5, 0.0, 1.5],
            &[0.0, -1.5, 0.0, 2.5],
            &[0.375, 0.0, -3.75, 0.0, 4.375],
            &[0.0, 1.875, 0.0, -8.75, 0.0, 7.875],
            &[-0.3125, 0.0, 6.5625, 0.0, -19.6875, 0.0, 14.4375],
        ];
        let mut x = -1.0;
        for k in 0..100 {
            x = -1.0 + 2.0 * (k as f64) / 99.0;
            for (n, c) in coeffs.iter().enumerate() {
                let direct: f64 = c
                    .iter()
                    .enumerate()
                    .map(|(p, &a)| a * x.powi(p as i32))
                    .sum();
                assert!(
                    (eval_legendre(n, x).unwrap() - direct).abs() < 1e-12,
                    "n={n} x={x}"
                );
            }
        }
    }

    #[test]
    fn bounded_on_domain() {
        for n in 0..12 {
            for k in 0..50 {
                let x = -1.0 + 2.0 * (k as f64) / 49.0;
                assert!(eval_legendre(n, x).unwrap().abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn multivariate_cases() {
        let idx = MultiIndex::new(vec![0, 0]).unwrap();
        assert_eq!(eval_multivariate(&idx, &[0.3, -0.8]).unwrap(), 1.0);

        let idx = MultiIndex::new(vec![1, 1]).unwrap();
        assert_relative_eq!(
            eval_multivariate(&idx, &[0.5, -0.5]).unwrap(),
            -0.25,
            epsilon = 1e-15
        );

        let idx = MultiIndex::new(vec![2, 0]).unwrap();
        assert_relative_eq!(
            eval_multivariate(&idx, &[0.5, 0.9]).unwrap(),
            -0.125,
            epsilon = 1e-15
        );

        assert!(eval_multivariate(&idx, &[1.5, 0.0]).is_err());
        assert!(eval_multivariate(&idx, &[0.5]).is_err());
    }

    #[test]
    fn counting_matches_enumeration() {
        assert_eq!(count_degree(2, 2), 6);
        assert_eq!(count_degree(1, 7), 8);
        assert_eq!(count_degree(3, 4), 35);
        for c in 1..=4 {
            for n in 0..=5 {
                let enumerated = enumerate_indices(c, n).len() as u64;
                assert_eq!(count_degree(c, n), enumerated, "c={c} n={n}");
            }
        }
    }

    #[test]
    fn count_total_cases() {
        assert_eq!(count_total(2, 2), 10); // 1 + 3 + 6
        assert_eq!(count_total(1, 3), 10); // 1 + 2 + 3 + 4
        for c in 1..=5 {
            assert_eq!(count_total(c, 0), 1);
        }
    }

    #[test]
    fn quadrature_weights_sum_to_two() {
        for order in [2, 4, 8, 16, 32] {
            let rule = QuadratureRule::gauss_legendre(order).unwrap();
            let s: f64 = rule.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-12, "order {order}: {s}");
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            assert!(rule.nodes.iter().all(|&x| x.abs() < 1.0));
        }
    }

    #[test]
    fn quadrature_exact_for_polynomials() {
        // order m integrates degree 2m-1 exactly: x^k on [-1,1]
        let rule = QuadratureRule::gauss_legendre(5).unwrap();
        for k in 0..=9usize {
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            let got = rule.integrate(|x| x.powi(k as i32));
            assert!((got - exact).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn gram_univariate_diagonal() {
        let rule = QuadratureRule::gauss_legendre(8).unwrap();
        let g = gram_matrix(1, 1, &rule).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert!((g.at(&[0, 0]) - 2.0).abs() <= 1e-12);
        assert!((g.at(&[1, 1]) - 2.0 / 3.0).abs() <= 1e-12);
        assert!(g.at(&[0, 1]).abs() <= 1e-12);
    }

    #[test]
    fn gram_bivariate_orthogonality() {
        let rule = QuadratureRule::gauss_legendre(8).unwrap();
        let basis = enumerate_indices(2, 2);
        let g = gram_matrix(2, 2, &rule).unwrap();
        let m = basis.len();
        assert_eq!(m, 6);
        for i in 0..m {
            for j in 0..m {
                let v = g.at(&[i, j]);
                if i == j {
                    let expect: f64 = basis[i]
                        .degrees
                        .iter()
                        .map(|&n| 2.0 / (2.0 * n as f64 + 1.0))
                        .product();
                    assert!((v - expect).abs() <= 1e-10, "diag {i}");
                } else {
                    assert!(v.abs() <= 1e-10, "offdiag {i},{j} = {v}");
                    // symmetry
                    assert!((v - g.at(&[j, i])).abs() <= 1e-12);
                }
            }
        }
        // constant element diagonal is 2^C
        assert!((g.at(&[0, 0]) - 4.0).abs() <= 1e-10);
    }

    #[test]
    fn gram_rejects_insufficient_order() {
        let rule = QuadratureRule::gauss_legendre(2).unwrap();
        assert!(gram_matrix(2, 2, &rule).is_err());
    }
}
