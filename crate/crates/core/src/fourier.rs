//! The p-biased Fourier basis on edge indicators.
//!
//! For edge presence probability `p`, the character is
//!
//! ```text
//! χ(absent) = −√(p/(1−p)),    χ(present) = √((1−p)/p),
//! ```
//!
//! which is mean-zero and unit-variance. Products of characters over edge
//! sets (with multiplicities and optional presence indicators) are the matrix
//! entries everywhere in this crate, and the closed-form moments `E[χ^k]`
//! drive the linearization of multiedges. Coefficients produced by the
//! decomposition machinery are kept as exact products of named atoms instead
//! of accumulated floats so that each verification can compare a recorded
//! product against the formula it is supposed to equal.

use std::collections::BTreeMap;
use std::fmt;

use crate::graph::Graph;

/// χ of one edge: mean-zero, unit-variance under edge probability `p`.
pub fn chi(present: bool, p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "chi: p must lie in (0,1), got {p}");
    if present {
        ((1.0 - p) / p).sqrt()
    } else {
        -(p / (1.0 - p)).sqrt()
    }
}

/// `E[χ^k]` in closed form.
pub fn moment_chi(k: u32, p: f64) -> f64 {
    p * chi(true, p).powi(k as i32) + (1.0 - p) * chi(false, p).powi(k as i32)
}

/// Coefficients `(c0, c1)` with `χ^k = c0 + c1·χ` pointwise.
///
/// Exact because `{1, χ}` is an orthonormal basis for functions of one edge:
/// `c0 = E[χ^k]`, `c1 = E[χ^{k+1}]`.
pub fn linearize_power(k: u32, p: f64) -> (f64, f64) {
    (moment_chi(k, p), moment_chi(k + 1, p))
}

/// Factor `f` with `1_e·χ^k = f·1_e·χ` for `k ≥ 1`: on a present edge every
/// extra χ contributes `χ(present)`, so `f = χ(present)^{k−1}`.
pub fn indicator_power_factor(k: u32, p: f64) -> f64 {
    chi(true, p).powi(k as i32 - 1)
}

/// Product of characters over a multiset of pairs, gated by presence
/// indicators: `∏_{e∈yes} 1_{e∈G} · ∏_{e∈edges} χ(e∈G)`.
///
/// `edges` may repeat a pair (multiplicity = number of occurrences).
pub fn chi_product(
    g: &Graph,
    edges: &[(usize, usize)],
    yes: &[(usize, usize)],
    p: f64,
) -> f64 {
    for &(i, j) in yes {
        if !g.has(i, j) {
            return 0.0;
        }
    }
    edges.iter().map(|&(i, j)| chi(g.has(i, j), p)).product()
}

// ───────────────────────── coefficient atoms ─────────────────────────

/// A named scalar appearing in decomposition coefficients. Products of atoms
/// (with signed integer exponents) are recorded in an [`AtomLedger`] so that
/// a coefficient's provenance stays inspectable and its value reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Atom {
    /// −1 (sign flips from removed boundary edges).
    MinusOne,
    /// √(p/(1−p)); χ(absent) = −this.
    SqrtPOverOneMinusP,
    /// √((1−p)/p) = χ(present).
    SqrtOneMinusPOverP,
    /// 1−p.
    OneMinusP,
    /// q−p (planted edge bump).
    QMinusP,
    /// E[χ^k].
    MomentChi(u32),
    /// k/n (planted vertex factor, shifted into coefficients when an
    /// identification removes a vertex).
    KOverN,
}

impl Atom {
    /// Numeric value at edge densities `p`, `q` and vertex factor `vf = k/n`.
    pub fn value(self, p: f64, q: f64, vf: f64) -> f64 {
        match self {
            Atom::MinusOne => -1.0,
            Atom::SqrtPOverOneMinusP => (p / (1.0 - p)).sqrt(),
            Atom::SqrtOneMinusPOverP => ((1.0 - p) / p).sqrt(),
            Atom::OneMinusP => 1.0 - p,
            Atom::QMinusP => q - p,
            Atom::MomentChi(k) => moment_chi(k, p),
            Atom::KOverN => vf,
        }
    }

    /// Stable display name, also used by serialized coefficient ledgers.
    pub fn symbol(self) -> String {
        match self {
            Atom::MinusOne => "(-1)".into(),
            Atom::SqrtPOverOneMinusP => "sqrt(p/(1-p))".into(),
            Atom::SqrtOneMinusPOverP => "sqrt((1-p)/p)".into(),
            Atom::OneMinusP => "(1-p)".into(),
            Atom::QMinusP => "(q-p)".into(),
            Atom::MomentChi(k) => format!("E[chi^{k}]"),
            Atom::KOverN => "(k/n)".into(),
        }
    }
}

/// A product `∏ atom^exp` with signed exponents. The empty ledger is 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AtomLedger {
    exps: BTreeMap<Atom, i64>,
}

impl AtomLedger {
    pub fn one() -> Self {
        AtomLedger::default()
    }

    pub fn atom(a: Atom) -> Self {
        let mut l = AtomLedger::one();
        l.mul_atom(a, 1);
        l
    }

    pub fn mul_atom(&mut self, a: Atom, exp: i64) -> &mut Self {
        let e = self.exps.entry(a).or_insert(0);
        *e += exp;
        if *e == 0 {
            self.exps.remove(&a);
        }
        self
    }

    pub fn mul(&mut self, other: &AtomLedger) -> &mut Self {
        for (&a, &e) in &other.exps {
            self.mul_atom(a, e);
        }
        self
    }

    pub fn value(&self, p: f64, q: f64, vf: f64) -> f64 {
        self.exps
            .iter()
            .map(|(&a, &e)| a.value(p, q, vf).powi(e as i32))
            .product()
    }

    /// Iterates `(atom, exponent)` pairs in atom order.
    pub fn entries(&self) -> impl Iterator<Item = (Atom, i64)> + '_ {
        self.exps.iter().map(|(&a, &e)| (a, e))
    }

    pub fn exponent(&self, a: Atom) -> i64 {
        self.exps.get(&a).copied().unwrap_or(0)
    }

    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }
}

impl fmt::Display for AtomLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exps.is_empty() {
            return write!(f, "1");
        }
        let mut first = true;
        for (&a, &e) in &self.exps {
            if !first {
                write!(f, " * ")?;
            }
            first = false;
            if e == 1 {
                write!(f, "{}", a.symbol())?;
            } else {
                write!(f, "{}^{}", a.symbol(), e)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    const TOL: f64 = 1e-12;

    #[test]
    fn chi_is_plus_minus_one_at_half() {
        assert!((chi(true, 0.5) - 1.0).abs() < TOL);
        assert!((chi(false, 0.5) + 1.0).abs() < TOL);
    }

    #[test]
    fn chi_mean_zero_unit_variance() {
        for &p in &[0.1, 0.25, 0.3, 0.5, 0.7, 0.9] {
            let mean = p * chi(true, p) + (1.0 - p) * chi(false, p);
            let var = p * chi(true, p).powi(2) + (1.0 - p) * chi(false, p).powi(2);
            assert!(mean.abs() < TOL, "mean {mean} at p={p}");
            assert!((var - 1.0).abs() < TOL, "variance {var} at p={p}");
        }
    }

    #[test]
    fn single_present_edge_at_quarter() {
        // χ(present) = √(3/4 / 1/4) = √3
        let mut g = Graph::empty(2);
        g.set(0, 1, true);
        let v = chi_product(&g, &[(0, 1)], &[], 0.25);
        assert!((v - 3f64.sqrt()).abs() < TOL);
    }

    #[test]
    fn chi_squared_at_half_is_one() {
        let g = Graph::empty(2);
        let v = chi_product(&g, &[(0, 1), (0, 1)], &[], 0.5);
        assert!((v - 1.0).abs() < TOL);
    }

    #[test]
    fn yes_indicator_kills_absent_edges() {
        let g = Graph::empty(3);
        assert_eq!(chi_product(&g, &[(0, 1)], &[(1, 2)], 0.3), 0.0);
    }

    #[test]
    fn moments_match_direct_expectation_and_bound() {
        for &p in &[0.2, 0.5, 0.8] {
            for k in 0..8u32 {
                let direct =
                    p * chi(true, p).powi(k as i32) + (1.0 - p) * chi(false, p).powi(k as i32);
                assert!((moment_chi(k, p) - direct).abs() < TOL);
                if k >= 2 {
                    // |E[χ^k]| ≤ max(|χ|)^{k−2} since E[χ²] = 1
                    let cap = chi(true, p).abs().max(chi(false, p).abs());
                    assert!(moment_chi(k, p).abs() <= cap.powi(k as i32 - 2) + TOL);
                }
            }
        }
    }

    #[test]
    fn linearize_power_is_pointwise_exact() {
        for &p in &[0.2, 0.5, 0.7] {
            for k in 0..7u32 {
                let (c0, c1) = linearize_power(k, p);
                for &bit in &[false, true] {
                    let x = chi(bit, p);
                    assert!(
                        (x.powi(k as i32) - (c0 + c1 * x)).abs() < TOL,
                        "k={k} p={p} bit={bit}"
                    );
                }
            }
        }
    }

    #[test]
    fn indicator_power_reduction_is_pointwise_exact() {
        let mut g = Graph::empty(2);
        g.set(0, 1, true);
        for &p in &[0.2, 0.5] {
            for k in 1..6u32 {
                let lhs = chi(true, p).powi(k as i32);
                let rhs = indicator_power_factor(k, p) * chi(true, p);
                assert!((lhs - rhs).abs() < TOL);
            }
        }
    }

    #[test]
    fn indicator_expansion_identity() {
        // 1_{e∈G} = p + √(p(1−p))·χ_e, both values of the edge bit
        for &p in &[0.2f64, 0.5, 0.8] {
            for &bit in &[false, true] {
                let lhs = if bit { 1.0 } else { 0.0 };
                let rhs = p + (p * (1.0 - p)).sqrt() * chi(bit, p);
                assert!((lhs - rhs).abs() < TOL);
            }
        }
    }

    #[test]
    fn adding_indicator_identity() {
        // χ_e = (1/(1−p))·1_{e∈G}·χ_e − √(p/(1−p)), pointwise
        for &p in &[0.2, 0.5, 0.8] {
            for &bit in &[false, true] {
                let ind = if bit { 1.0 } else { 0.0 };
                let x = chi(bit, p);
                let rhs = ind * x / (1.0 - p) - (p / (1.0 - p)).sqrt();
                assert!((x - rhs).abs() < TOL);
            }
        }
    }

    #[test]
    fn ledger_products_evaluate_and_cancel() {
        let (p, q) = (0.2, 0.35);
        let mut l = AtomLedger::atom(Atom::QMinusP);
        l.mul_atom(Atom::OneMinusP, -1);
        // (q−p)/(1−p)
        assert!((l.value(p, q, 0.3) - (q - p) / (1.0 - p)).abs() < TOL);
        l.mul_atom(Atom::OneMinusP, 1);
        l.mul_atom(Atom::QMinusP, -1);
        assert!(l.is_one());
        assert_eq!(l.value(p, q, 0.3), 1.0);
    }

    #[test]
    fn edge_factor_in_atom_basis() {
        // (q−p)/√(p(1−p)) = (q−p)·√(p/(1−p))^{−1}·(1−p)^{−1}
        let (p, q) = (0.25f64, 0.4);
        let mut l = AtomLedger::atom(Atom::QMinusP);
        l.mul_atom(Atom::SqrtPOverOneMinusP, -1);
        l.mul_atom(Atom::OneMinusP, -1);
        let y = (q - p) / (p * (1.0 - p)).sqrt();
        assert!((l.value(p, q, 0.3) - y).abs() < TOL);
    }
}
