//! The candidate pseudo-expectation: planted-distribution coefficients, the
//! truncated moment matrix in both normalizations, the scalar and constraint
//! sums it induces, a PSD verdict on the compressed view, and the
//! well-conditionedness check for the aggregated left matrices.
//!
//! Entry convention. The moment matrix sums over proper ribbons: vertex sets
//! `W` with two ordered boundary tuples and a simple edge set in which every
//! vertex outside the boundaries touches an edge. A ribbon with vertex set
//! `W` and edge set `F` contributes `(k/n)^{|W|} · c^{|F|} · χ_F(G)` to the
//! entry at its boundary pair, where `c = (q−p)/√(p(1−p))` and `χ` is the
//! p-biased character. Truncation keeps `|W| ≤ D_V` and boundary tuples of
//! length at most `D_SoS/2`. Because the contribution depends only on the
//! union of the two boundary sets, each entry equals
//!
//! ```text
//! T(S) = Σ_{W ⊇ S, |W| ≤ D_V} (k/n)^{|W|} Σ_{F covers W∖S} ∏_{e∈F} c·χ_e(G)
//! ```
//!
//! at `S = set(I) ∪ set(J)`, and the edge sum collapses by inclusion–exclusion
//! to `Σ_{T ⊆ W∖S} (−1)^{|T|} ∏_{e ∈ pairs(W∖T)} (1 + c·χ_e(G))`. The builder
//! memoizes `T` per set, which also makes the SoS symmetry of the result exact
//! by construction. At `q = p` the products are exactly `1.0`, the alternating
//! sums cancel bitwise, and the matrix degenerates to its closed form with no
//! rounding at all.
//!
//! Views. `Moment` holds `M[I,J] = T(set(I) ∪ set(J))`; `Normalized` holds
//! `Λ = D⁻¹ M D⁻¹` with `D[I] = (k/n)^{|I|/2}`, so that the ribbon weights
//! factor across composition. Both carry the diagonal `D` and satisfy
//! `M = D Λ D` entrywise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::thread;

use nalgebra::{DMatrix, SymmetricEigen};
use num::One;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gmatrix::{
    beta_rational, realize_shape, spectral_norm, GmatrixError, TupleIndex,
};
use crate::graph::{unit, Graph};
use crate::params::{rat, rat_to_f64, Params, Rat};
use crate::separators::classify;
use crate::shapes::{
    automorphism_count, canonicalize, enumerate_shapes, glue, left_boundary_census,
    ShapeConstraints, ShapeData, ShapeError,
};

/// Ceiling on the modeled enumeration work of [`build_moment_matrix`].
pub const BUILD_BUDGET: f64 = 1.0e10;
/// Largest relevant-vertex support accepted by the Monte Carlo estimator.
pub const MC_SUPPORT_MAX: usize = 5;
/// Default relative eigenvalue tolerance for the PSD verdict.
pub const PSD_REL_TOL: f64 = 1.0e-8;
/// Relative cutoff under which an eigenvalue of a PSD aggregate counts as
/// zero when extracting the smallest nonzero eigenvalue.
const RANK_REL_TOL: f64 = 1.0e-9;
/// Worker threads for the entry table.
const WORKERS: usize = 8;
/// Iteration cap handed to the symmetric eigensolver.
const EIGEN_MAX_ITER: usize = 100_000;

/// Errors from moment-matrix construction and its checks.
#[derive(Debug, Error)]
pub enum PseudocalError {
    /// The modeled enumeration work exceeds [`BUILD_BUDGET`].
    #[error("moment-matrix enumeration needs ~{0:.3e} modeled steps (budget {BUILD_BUDGET:.1e})")]
    Budget(f64),
    /// An argument contract was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// The symmetric eigensolver did not converge.
    #[error("eigensolve did not converge at dimension {0}")]
    Eigensolve(usize),
    /// Shape-layer failure.
    #[error(transparent)]
    Shape(#[from] ShapeError),
    /// Matrix-layer failure.
    #[error(transparent)]
    Matrix(#[from] GmatrixError),
}

/// A coefficient as a float together with, when the parameters carry exact
/// exponents, the same quantity as an exact exponent of `n`.
#[derive(Debug, Clone)]
pub struct Coefficient {
    /// Value assembled from the float parameters.
    pub value: f64,
    /// Exact `e` with coefficient `= n^e`, when exact exponents exist.
    pub exponent: Option<Rat>,
    /// `n^exponent` evaluated as a float, for cross-checking `value`.
    pub exponent_value: Option<f64>,
}

fn coefficient(params: &Params, vertex_excess: f64, edges: u32, exact_vertex: Option<Rat>) -> Coefficient {
    let value = params.vertex_factor().powf(vertex_excess) * params.edge_factor().powi(edges as i32);
    let exponent = match (&params.exact, exact_vertex) {
        (Some(exact), Some(vx)) => {
            let e = (exact.alpha.clone() - Rat::one()) * vx
                + (exact.beta.clone() * rat(1, 2) - exact.gamma.clone()) * Rat::from_integer(edges.into());
            Some(e)
        }
        _ => None,
    };
    let exponent_value = exponent.as_ref().map(|e| (params.n as f64).powf(rat_to_f64(e)));
    Coefficient { value, exponent, exponent_value }
}

fn normalized_pairs(alpha: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for &(a, b) in alpha {
        assert_ne!(a, b, "edge endpoints must be distinct");
        set.insert(if a < b { (a, b) } else { (b, a) });
    }
    set.into_iter().collect()
}

/// Closed form of the planted-distribution coefficient
/// `E[∏_{i∈members} x_i · χ_{alpha}(G)]`: with `m` the number of vertices
/// touched by `members` or `alpha` and `e` the number of distinct edges, the
/// value is `(k/n)^m · c^e`. Duplicate edges and vertices are collapsed.
pub fn planted_coefficient(members: &[usize], alpha: &[(usize, usize)], params: &Params) -> Coefficient {
    let edges = normalized_pairs(alpha);
    let mut support: BTreeSet<usize> = members.iter().copied().collect();
    for &(a, b) in &edges {
        support.insert(a);
        support.insert(b);
    }
    let m = support.len();
    coefficient(params, m as f64, edges.len() as u32, Some(Rat::from_integer(m.into())))
}

/// Monte Carlo estimate of the planted coefficient by sampling the planted
/// distribution restricted to the relevant vertices: each is planted with
/// probability `k/n` independently, each `alpha` edge is present with
/// probability `q` if both endpoints are planted and `p` otherwise, and the
/// sample value is `∏_{i∈members} 1[i planted] · ∏_{e∈alpha} χ(present, p)`.
/// Returns `(mean, standard error)`.
pub fn planted_coefficient_mc(
    members: &[usize],
    alpha: &[(usize, usize)],
    params: &Params,
    samples: u64,
    seed: u64,
) -> Result<(f64, f64), PseudocalError> {
    let edges = normalized_pairs(alpha);
    let mut support: BTreeSet<usize> = members.iter().copied().collect();
    for &(a, b) in &edges {
        support.insert(a);
        support.insert(b);
    }
    if support.len() > MC_SUPPORT_MAX {
        return Err(PseudocalError::Precondition(format!(
            "Monte Carlo support has {} vertices (cap {MC_SUPPORT_MAX})",
            support.len()
        )));
    }
    if samples < 2 {
        return Err(PseudocalError::Precondition("need at least 2 samples".into()));
    }
    let support: Vec<usize> = support.into_iter().collect();
    let member_set: BTreeSet<usize> = members.iter().copied().collect();
    let vf = params.vertex_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
    let mut planted: HashMap<usize, bool> = HashMap::new();
    for _ in 0..samples {
        planted.clear();
        for &v in &support {
            planted.insert(v, unit(rng.next_u64()) < vf);
        }
        let mut x = 1.0f64;
        for &(a, b) in &edges {
            let threshold = if planted[&a] && planted[&b] { params.q } else { params.p };
            let present = unit(rng.next_u64()) < threshold;
            x *= crate::fourier::chi(present, params.p);
        }
        for &i in &member_set {
            if !planted[&i] {
                x = 0.0;
            }
        }
        sum += x;
        sumsq += x * x;
    }
    let nf = samples as f64;
    let mean = sum / nf;
    let var = ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

/// The shape coefficient `λ_α = (k/n)^{|V(α)| − (|U_α|+|V_α|)/2} · c^{|E(α)|}`,
/// edge multiplicities counted, in float and exact exponent form.
pub fn lambda_coeff(data: &ShapeData, params: &Params) -> Coefficient {
    let halves = data.u.len() + data.w.len();
    let excess = data.v as f64 - halves as f64 / 2.0;
    let exact = Rat::from_integer(data.v.into()) - rat(halves as i64, 2);
    coefficient(params, excess, data.edge_total(), Some(exact))
}

/// `|λ(R∘S) − λ(R)·λ(S)|` for composable shapes. The coefficient factors
/// across composition because the glued vertex count drops by the shared
/// boundary length while the boundary halves adjust to match.
pub fn lambda_factorization_gap(r: &ShapeData, s: &ShapeData, params: &Params) -> Result<f64, PseudocalError> {
    let (glued, _) = glue(&[r.clone(), s.clone()])?;
    let whole = lambda_coeff(&glued, params).value;
    let parts = lambda_coeff(r, params).value * lambda_coeff(s, params).value;
    Ok((whole - parts).abs())
}

/// Which normalization a moment matrix carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentView {
    /// Entries `pE[x_I x_J]`: every ribbon weighted by `(k/n)^{|W|} c^{|F|}`.
    Moment,
    /// Boundary halves divided out: `Λ = D⁻¹ M D⁻¹` with `D[I] = (k/n)^{|I|/2}`.
    Normalized,
}

/// A dense symmetric moment matrix over the ordered-tuple index.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub index: TupleIndex,
    pub view: MomentView,
    pub values: DMatrix<f64>,
    /// Diagonal rescaling `D[I] = (k/n)^{|I|/2}` linking the two views.
    pub d: Vec<f64>,
}

impl MomentMatrix {
    /// Entry addressed by boundary tuples, if both index.
    pub fn entry(&self, i: &[usize], j: &[usize]) -> Option<f64> {
        let a = self.index.position(i)?;
        let b = self.index.position(j)?;
        Some(self.values[(a, b)])
    }
}

/// Both views of one construction plus the modeled enumeration cost.
#[derive(Debug)]
pub struct MomentBuild {
    pub moment: MomentMatrix,
    pub normalized: MomentMatrix,
    pub cost: f64,
}

fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut out = 1.0f64;
    for i in 0..k {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Modeled enumeration work of a build: for every boundary-union size `s`,
/// extension size `x`, the choices of set, extension, and an edge subset on
/// the extended set. This models direct ribbon enumeration and upper-bounds
/// the work the memoized builder actually does.
pub fn build_cost(params: &Params) -> f64 {
    let smax = (2 * (params.d_sos / 2)).min(params.d_v);
    let mut total = 0.0f64;
    for s in 0..=smax {
        for x in 0..=params.d_v.saturating_sub(s) {
            let w = s + x;
            total += choose(params.n, s)
                * choose(params.n - s, x)
                * 2f64.powi((w * w.saturating_sub(1) / 2) as i32);
        }
    }
    total
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut set: BTreeSet<usize> = a.iter().copied().collect();
    set.extend(b.iter().copied());
    set.into_iter().collect()
}

/// All ascending subsets of `0..n` with the given size, lexicographically.
fn combinations(n: usize, size: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(n: usize, size: usize, from: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == size {
            f(cur);
            return;
        }
        let need = size - cur.len();
        for v in from..=(n - need) {
            cur.push(v);
            rec(n, size, v + 1, cur, f);
            cur.pop();
        }
    }
    if size > n {
        return;
    }
    rec(n, size, 0, &mut Vec::new(), f);
}

/// The ribbon sum for one boundary-union set: extensions in ascending size
/// and lexicographic order, edge coverage handled by inclusion–exclusion over
/// the subset of extension vertices allowed to stay uncovered.
fn entry_sum(set: &[usize], params: &Params, chi_tab: &[Vec<f64>]) -> f64 {
    let n = params.n;
    let c = params.edge_factor();
    let vf = params.vertex_factor();
    let mut total = 0.0f64;
    let free: Vec<usize> = (0..n).filter(|v| !set.contains(v)).collect();
    let max_extra = params.d_v.saturating_sub(set.len());
    let mut kept: Vec<usize> = Vec::with_capacity(set.len() + max_extra);
    for x in 0..=max_extra {
        let weight = vf.powi((set.len() + x) as i32);
        let mut layer = 0.0f64;
        combinations(free.len(), x, &mut |pick| {
            let ext: Vec<usize> = pick.iter().map(|&i| free[i]).collect();
            let mut alternating = 0.0f64;
            for mask in 0u32..(1u32 << x) {
                kept.clear();
                kept.extend_from_slice(set);
                for (i, &v) in ext.iter().enumerate() {
                    if mask & (1 << i) == 0 {
                        kept.push(v);
                    }
                }
                let mut prod = 1.0f64;
                for a in 0..kept.len() {
                    for b in (a + 1)..kept.len() {
                        prod *= 1.0 + c * chi_tab[kept[a]][kept[b]];
                    }
                }
                if mask.count_ones() % 2 == 0 {
                    alternating += prod;
                } else {
                    alternating -= prod;
                }
            }
            layer += alternating;
        });
        total += weight * layer;
    }
    total
}

/// Builds the truncated moment matrix on a sampled graph in both views.
///
/// Entries are assembled from a per-set table, so SoS symmetry (dependence on
/// the boundary union only) holds bitwise; the table is filled by a fixed
/// worker pool over an ordered set list, each set summed independently, so
/// the result is deterministic. Errors with [`PseudocalError::Budget`] when
/// the modeled enumeration cost exceeds [`BUILD_BUDGET`].
pub fn build_moment_matrix(g: &Graph, params: &Params) -> Result<MomentBuild, PseudocalError> {
    if g.n() != params.n {
        return Err(PseudocalError::Precondition(format!(
            "graph has {} vertices, parameters say {}",
            g.n(),
            params.n
        )));
    }
    let cost = build_cost(params);
    if cost > BUILD_BUDGET {
        return Err(PseudocalError::Budget(cost));
    }
    let index = TupleIndex::new(params.n, params.d_sos / 2)?;
    let n = params.n;
    let mut chi_tab = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                chi_tab[i][j] = crate::fourier::chi(g.has(i, j), params.p);
            }
        }
    }
    // Every boundary union has size at most 2·(D_SoS/2); sets larger than D_V
    // have no ribbons and are left out of the table (entries read as 0).
    let smax = (2 * (params.d_sos / 2)).min(params.d_v);
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for s in 0..=smax {
        combinations(n, s, &mut |c| sets.push(c.to_vec()));
    }
    let workers = WORKERS.min(sets.len()).max(1);
    let chunk = sets.len().div_ceil(workers);
    let mut table_values = vec![0.0f64; sets.len()];
    thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, slice) in sets.chunks(chunk).enumerate() {
            let chi_ref = &chi_tab;
            handles.push((
                w,
                scope.spawn(move || {
                    slice
                        .iter()
                        .map(|s| entry_sum(s, params, chi_ref))
                        .collect::<Vec<f64>>()
                }),
            ));
        }
        for (w, handle) in handles {
            let vals = handle.join().expect("entry worker panicked");
            table_values[w * chunk..w * chunk + vals.len()].copy_from_slice(&vals);
        }
    });
    let table: HashMap<Vec<usize>, f64> = sets.into_iter().zip(table_values).collect();

    let dim = index.dimension();
    let tuples: Vec<Vec<usize>> = (0..dim).map(|i| index.tuple_at(i)).collect();
    let vf = params.vertex_factor();
    let d: Vec<f64> = tuples.iter().map(|t| vf.powf(t.len() as f64 / 2.0)).collect();
    let mut m = DMatrix::zeros(dim, dim);
    let mut lam = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let u = sorted_union(&tuples[i], &tuples[j]);
            let val = table.get(&u).copied().unwrap_or(0.0);
            m[(i, j)] = val;
            m[(j, i)] = val;
            let lv = val / (d[i] * d[j]);
            lam[(i, j)] = lv;
            lam[(j, i)] = lv;
        }
    }

    assert_eq!(index.position(&[]), Some(0), "empty tuple must index the corner");
    // SoS symmetry: rows of tuples with equal vertex sets are bitwise equal.
    let mut rep: HashMap<Vec<usize>, usize> = HashMap::new();
    for i in 0..dim {
        let key: Vec<usize> = {
            let mut t = tuples[i].clone();
            t.sort_unstable();
            t
        };
        let r = *rep.entry(key).or_insert(i);
        if r != i {
            for jcol in 0..dim {
                assert_eq!(
                    m[(i, jcol)].to_bits(),
                    m[(r, jcol)].to_bits(),
                    "SoS symmetry must be exact"
                );
            }
        }
    }
    // The views are linked by the diagonal rescaling entrywise.
    for i in 0..dim {
        for j in 0..dim {
            let back = d[i] * lam[(i, j)] * d[j];
            let scale = m[(i, j)].abs().max(1.0);
            assert!(
                (back - m[(i, j)]).abs() <= 1e-12 * scale,
                "diagonal rescaling must reproduce the moment view"
            );
        }
    }

    Ok(MomentBuild {
        moment: MomentMatrix {
            index: TupleIndex::new(params.n, params.d_sos / 2)?,
            view: MomentView::Moment,
            values: m,
            d: d.clone(),
        },
        normalized: MomentMatrix { index, view: MomentView::Normalized, values: lam, d },
        cost,
    })
}

/// `pE[1]` with an independent cross-check that regroups the same ribbon sum
/// by shape class: the corner entry must equal
/// `Σ_α (1/|Aut(α)|) (k/n)^{|V(α)|} c^{|E(α)|} · Σ_{embeddings} χ(G)` over
/// boundaryless shapes with no isolated vertices.
#[derive(Debug, Clone)]
pub struct PeOneReport {
    pub value: f64,
    /// The shape-grouped recomputation.
    pub shape_total: f64,
    /// `|value − shape_total|`.
    pub agreement: f64,
    /// `|value − 1|`.
    pub deviation: f64,
}

pub fn pe_one(normalized: &MomentMatrix, g: &Graph, params: &Params) -> Result<PeOneReport, PseudocalError> {
    if normalized.view != MomentView::Normalized {
        return Err(PseudocalError::Precondition(
            "pe_one expects the normalized view".into(),
        ));
    }
    let corner = normalized
        .index
        .position(&[])
        .ok_or_else(|| PseudocalError::Precondition("empty tuple missing from index".into()))?;
    let value = normalized.values[(corner, corner)];
    let shapes = enumerate_shapes(&ShapeConstraints {
        v_max: params.d_v,
        e_max: params.d_v * params.d_v.saturating_sub(1) / 2,
        u_max: 0,
        w_max: 0,
        allow_isolated: false,
    })?;
    let mut scalar_params = params.clone();
    scalar_params.d_sos = 0;
    let mut shape_total = 0.0f64;
    for sh in &shapes {
        let lam = lambda_coeff(&sh.data, params).value;
        if lam == 0.0 {
            continue;
        }
        let aut = automorphism_count(&sh.data)? as f64;
        let scalar = realize_shape(&sh.data, g, &scalar_params, 0)?.values[(0, 0)];
        shape_total += lam / aut * scalar;
    }
    Ok(PeOneReport {
        value,
        shape_total,
        agreement: (value - shape_total).abs(),
        deviation: (value - 1.0).abs(),
    })
}

/// The two constraint sums read off the moment view: `S1 = Σ_i pE[x_i]`
/// against target `k`, and `S2 = Σ_{{i,j}∈E(G)} pE[x_i x_j]` against target
/// `k²q/2`.
#[derive(Debug, Clone)]
pub struct ConstraintReport {
    pub s1: f64,
    pub s2: f64,
    pub s1_target: f64,
    pub s2_target: f64,
    pub s1_rel: f64,
    pub s2_rel: f64,
}

pub fn constraint_sums(moment: &MomentMatrix, g: &Graph, params: &Params) -> Result<ConstraintReport, PseudocalError> {
    if moment.view != MomentView::Moment {
        return Err(PseudocalError::Precondition(
            "constraint_sums expects the moment view".into(),
        ));
    }
    if params.d_sos < 2 {
        return Err(PseudocalError::Precondition(
            "constraint sums need singleton rows (degree at least 2)".into(),
        ));
    }
    let empty = moment.index.position(&[]).expect("corner present");
    let mut s1 = 0.0f64;
    for i in 0..params.n {
        let pos = moment.index.position(&[i]).expect("singleton row present");
        s1 += moment.values[(pos, empty)];
    }
    let mut s2 = 0.0f64;
    for (i, j) in g.edges() {
        let a = moment.index.position(&[i]).expect("singleton row present");
        let b = moment.index.position(&[j]).expect("singleton row present");
        s2 += moment.values[(a, b)];
    }
    let s1_target = params.k;
    let s2_target = params.k * params.k * params.q / 2.0;
    let rel = |x: f64, t: f64| if t != 0.0 { (x - t).abs() / t.abs() } else { x.abs() };
    Ok(ConstraintReport {
        s1,
        s2,
        s1_target,
        s2_target,
        s1_rel: rel(s1, s1_target),
        s2_rel: rel(s2, s2_target),
    })
}

fn boundaryless_shapes(params: &Params) -> Result<Vec<ShapeData>, PseudocalError> {
    Ok(enumerate_shapes(&ShapeConstraints {
        v_max: params.d_v,
        e_max: params.d_v * params.d_v.saturating_sub(1) / 2,
        u_max: 0,
        w_max: 0,
        allow_isolated: false,
    })?
    .into_iter()
    .map(|s| s.data)
    .collect())
}

/// `S1` recomputed by shape grouping. For each boundaryless shape `α` with no
/// isolated vertices, the rooted ribbons summing to `S1` are: a root inside
/// the embedded shape (`|V(α)|` choices), or an isolated root outside it
/// (`n − |V(α)|` images, one more vertex factor, gated by the size cap).
pub fn s1_shape_accounting(g: &Graph, params: &Params) -> Result<f64, PseudocalError> {
    let mut scalar_params = params.clone();
    scalar_params.d_sos = 0;
    let vf = params.vertex_factor();
    let mut total = 0.0f64;
    for data in boundaryless_shapes(params)? {
        let v = data.v;
        let lam = lambda_coeff(&data, params).value;
        let mut roots = v as f64;
        if v < params.d_v {
            roots += (params.n - v) as f64 * vf;
        }
        if lam == 0.0 || roots == 0.0 {
            continue;
        }
        let aut = automorphism_count(&data)? as f64;
        let scalar = realize_shape(&data, g, &scalar_params, 0)?.values[(0, 0)];
        total += lam / aut * roots * scalar;
    }
    Ok(total)
}

/// `S2` recomputed by shape grouping. Each edge-indicator times a ribbon
/// character expands into characters again via
/// `1_e = p + √(p(1−p))·χ_e` and `1_e·χ_e = √(p(1−p)) + (1−p)·χ_e`, and the
/// resulting monomials regroup over boundaryless shapes `β` with coefficient
///
/// ```text
/// C(β) = |E(β)|·[(1−p)·c^{|E|} + √(p(1−p))·c^{|E|−1}]        roots on an edge of β
///      + (C(|V|,2) − |E(β)|)·q·c^{|E|}                        roots a non-edge pair in β
///      + 1[|V|<D_V]·|V|·(n−|V|)·(k/n)·q·c^{|E|}               one root outside β
///      + 1[|V|≤D_V−2]·C(n−|V|,2)·(k/n)²·q·c^{|E|}             both roots outside β
/// ```
///
/// using `√(p(1−p))·c = q − p` to fold the `p`- and `χ`-parts of each outside
/// pair into a single `q`.
pub fn s2_shape_accounting(g: &Graph, params: &Params) -> Result<f64, PseudocalError> {
    let mut scalar_params = params.clone();
    scalar_params.d_sos = 0;
    let n = params.n;
    let vf = params.vertex_factor();
    let c = params.edge_factor();
    let p = params.p;
    let sq = (p * (1.0 - p)).sqrt();
    let mut total = 0.0f64;
    for data in boundaryless_shapes(params)? {
        let v = data.v;
        let e = data.edges.len();
        let pairs = v * v.saturating_sub(1) / 2;
        let ce = c.powi(e as i32);
        let mut coeff = 0.0f64;
        if e > 0 {
            coeff += e as f64 * ((1.0 - p) * ce + sq * c.powi(e as i32 - 1));
        }
        coeff += (pairs - e) as f64 * params.q * ce;
        if v < params.d_v {
            coeff += (v * (n - v)) as f64 * vf * params.q * ce;
        }
        if v + 2 <= params.d_v {
            coeff += choose(n - v, 2) * vf * vf * params.q * ce;
        }
        if coeff == 0.0 {
            continue;
        }
        let aut = automorphism_count(&data)? as f64;
        let scalar = realize_shape(&data, g, &scalar_params, 0)?.values[(0, 0)];
        total += vf.powi(v as i32) / aut * coeff * scalar;
    }
    Ok(total)
}

/// PSD verdict for the normalized matrix, decided on the compressed view.
///
/// Rows of tuples with equal vertex sets are bitwise equal (checked here), so
/// `Λ = Jᵀ C J` for the 0/1 set-duplication map `J` and the compressed matrix
/// `C` over ascending tuples; `Λ` is PSD iff `C` is, since `C` is also a
/// principal submatrix of `Λ`. The verdict passes when
/// `λ_min(C) ≥ −tol·‖C‖` with `‖C‖` the largest eigenvalue magnitude of the
/// compressed view.
#[derive(Debug, Clone)]
pub struct PsdReport {
    pub dim: usize,
    pub compressed_dim: usize,
    pub min_eig: f64,
    pub norm: f64,
    pub tol: f64,
    pub psd: bool,
}

pub fn psd_check(normalized: &MomentMatrix, tol: Option<f64>) -> Result<PsdReport, PseudocalError> {
    if normalized.view != MomentView::Normalized {
        return Err(PseudocalError::Precondition(
            "psd_check expects the normalized view".into(),
        ));
    }
    let tol = tol.unwrap_or(PSD_REL_TOL);
    let dim = normalized.index.dimension();
    // Representative position per vertex set, in index order.
    let mut reps: Vec<usize> = Vec::new();
    let mut rep_of: Vec<usize> = vec![usize::MAX; dim];
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    for i in 0..dim {
        let mut key = normalized.index.tuple_at(i);
        key.sort_unstable();
        let r = *seen.entry(key).or_insert_with(|| {
            reps.push(i);
            i
        });
        rep_of[i] = r;
    }
    for i in 0..dim {
        let r = rep_of[i];
        if r != i {
            for j in 0..dim {
                if normalized.values[(i, j)].to_bits() != normalized.values[(r, j)].to_bits() {
                    return Err(PseudocalError::Precondition(
                        "rows of equal vertex sets differ; not an SoS-symmetric matrix".into(),
                    ));
                }
            }
        }
    }
    let cdim = reps.len();
    let mut comp = DMatrix::zeros(cdim, cdim);
    for (a, &i) in reps.iter().enumerate() {
        for (b, &j) in reps.iter().enumerate() {
            comp[(a, b)] = normalized.values[(i, j)];
        }
    }
    let eigen = SymmetricEigen::try_new(comp, 1.0e-13, EIGEN_MAX_ITER)
        .ok_or(PseudocalError::Eigensolve(cdim))?;
    let mut min_eig = f64::INFINITY;
    let mut norm = 0.0f64;
    for &e in eigen.eigenvalues.iter() {
        min_eig = min_eig.min(e);
        norm = norm.max(e.abs());
    }
    Ok(PsdReport {
        dim,
        compressed_dim: cdim,
        min_eig,
        norm,
        tol,
        psd: min_eig >= -tol * norm,
    })
}

/// One aggregated left matrix: the λ-weighted sum of realizations of every
/// left shape whose right boundary is the edgeless tuple of the given length.
#[derive(Debug)]
pub struct LMatrix {
    pub boundary_len: usize,
    /// Shapes in the family (realizations with zero coefficient included).
    pub shape_count: usize,
    pub values: DMatrix<f64>,
}

/// One weight-recursion inequality with both sides evaluated: for shape `σ`
/// grouped under its left-boundary diagonal `U`, the hypothesis requires
/// `w_V · 2c(σ)·λ_σ·‖M_σ‖ ≤ w_U / 2`.
#[derive(Debug, Clone)]
pub struct WeightRow {
    pub shape: String,
    pub u_len: usize,
    pub v_len: usize,
    /// Left and right boundaries cover the same vertex set, so the row
    /// constrains the parameters directly rather than relating two weights.
    pub same_set: bool,
    pub c_value: f64,
    pub lambda: f64,
    pub norm: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Conditioning report for `Σ_U (λ_U/|U|!) · L_U M_{U⁺} L_Uᵀ` over edgeless
/// boundary tuples.
#[derive(Debug)]
pub struct ConditionReport {
    pub l: Vec<LMatrix>,
    pub dim: usize,
    pub kernel_dim: usize,
    /// Most negative eigenvalue of the aggregate (diagnostic; should be zero
    /// up to rounding since the aggregate is a sum of Gram terms).
    pub min_eig: f64,
    pub min_nonzero_eig: f64,
    /// `n^{−D_SoS}`.
    pub threshold: f64,
    pub meets_threshold: bool,
    /// Recursion-built weights per boundary diagonal (description, weight).
    pub weights: Vec<(String, f64)>,
    pub rows: Vec<WeightRow>,
    /// Every row holds, so the weighted aggregate dominates half the
    /// symmetric identity and `implied_bound` is valid.
    pub recursion_satisfied: bool,
    /// `1/(2·max edgeless weight)`: the smallest nonzero eigenvalue the
    /// satisfied recursion guarantees for the unweighted aggregate.
    pub implied_bound: Option<f64>,
}

fn describe(data: &ShapeData) -> String {
    format!("v={} u={:?} w={:?} e={:?}", data.v, data.u, data.w, data.edges)
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|i| i as f64).product()
}

fn is_left(data: &ShapeData, beta: &Rat) -> Result<bool, ShapeError> {
    if data.v == 0 {
        return Ok(true);
    }
    Ok(classify(data, beta)?.left)
}

/// The diagonal shape induced by a boundary tuple: the tuple in forced
/// labeling together with the edges inside its vertex set.
fn boundary_diagonal(data: &ShapeData, tuple: &[usize]) -> ShapeData {
    let spot: HashMap<usize, usize> = tuple.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for &(a, b, _) in &data.edges {
        if let (Some(&x), Some(&y)) = (spot.get(&a), spot.get(&b)) {
            edges.push(if x < y { (x, y) } else { (y, x) });
        }
    }
    let forced: Vec<usize> = (0..tuple.len()).collect();
    ShapeData::simple(tuple.len(), forced.clone(), forced, &edges)
}

/// Builds the aggregated left matrices for edgeless boundary tuples, checks
/// the conditioning of their PSD aggregate against `n^{−D_SoS}`, and runs the
/// weight recursion over the enumerated left-shape families.
///
/// Family: for boundary length `m ≤ D_SoS/2`, every shape `σ` with at most
/// `D_V` vertices, boundary tuples of length at most `D_SoS/2`, right
/// boundary `(0..m)` carrying no internal edges, no isolated interior
/// vertices, and whose unique minimum-weight vertex separator is the right
/// boundary's vertex set. `L_m = Σ_σ (λ_σ/|Aut(σ)|) M_σ(G)` counts each
/// ribbon once, and the aggregate is `Σ_m (λ_m/m!) L_m M_m⁺ L_mᵀ` with
/// `M_m⁺` the diagonal middle block.
///
/// Weights: permuted-diagonal shapes (boundary sets equal, no interior, no
/// edges) aggregate to the symmetric identity and are the recursion's base,
/// so they are excluded from the rows. Rows whose boundaries cover the same
/// vertex set cannot relate two different weights; they pass exactly when
/// `2c(σ)·λ_σ·‖M_σ‖ ≤ 1/2` (or the shared weight is zero). The remaining
/// rows have a strictly larger left boundary and define the weights
/// bottom-up: `w` is 1 on edgeless diagonals, 0 on edged ones, raised to
/// `2·w_V·2c(σ)λ_σ‖M_σ‖` whenever a row demands it. The report records every
/// row with both sides evaluated after the weights settle.
pub fn build_l_and_condition(g: &Graph, params: &Params) -> Result<ConditionReport, PseudocalError> {
    if params.n > 14 || params.d_sos > 4 || params.d_v > 4 {
        return Err(PseudocalError::Precondition(format!(
            "conditioning check is desk-scale only: n ≤ 14, degree ≤ 4, size cap ≤ 4 (got {}, {}, {})",
            params.n, params.d_sos, params.d_v
        )));
    }
    if g.n() != params.n {
        return Err(PseudocalError::Precondition("graph/parameter vertex count mismatch".into()));
    }
    let beta = beta_rational(params);
    let max_b = params.d_sos / 2;
    let index = TupleIndex::new(params.n, max_b)?;
    let dim = index.dimension();

    // Enumerate candidates with boundaries swapped (the generator fixes the
    // left tuple, the families fix the right), then transpose.
    let pool = enumerate_shapes(&ShapeConstraints {
        v_max: params.d_v,
        e_max: params.d_v * params.d_v.saturating_sub(1) / 2,
        u_max: max_b,
        w_max: max_b,
        allow_isolated: false,
    })?;
    let mut families: Vec<Vec<ShapeData>> = vec![Vec::new(); max_b + 1];
    for sh in &pool {
        let m = sh.data.u.len();
        if sh.data.edges.iter().any(|&(a, b, _)| a < m && b < m) {
            continue; // right boundary of the transpose must be edgeless
        }
        let sigma = ShapeData {
            v: sh.data.v,
            u: sh.data.w.clone(),
            w: sh.data.u.clone(),
            edges: sh.data.edges.clone(),
            yes: sh.data.yes.clone(),
        };
        if is_left(&sigma, &beta)? {
            families[m].push(sigma);
        }
    }

    // Aggregate A = Σ_m (λ_m / m!) L_m M_m⁺ L_mᵀ.
    let mut l_matrices: Vec<LMatrix> = Vec::new();
    let mut aggregate: DMatrix<f64> = DMatrix::zeros(dim, dim);
    for (m, family) in families.iter().enumerate() {
        let mut l = DMatrix::zeros(dim, dim);
        for sigma in family {
            let lam = lambda_coeff(sigma, params).value;
            if lam == 0.0 {
                continue;
            }
            // Graph matrices sum over embeddings; the decomposition counts
            // each ribbon once, so weight by 1/|Aut(σ)|.
            let aut = automorphism_count(sigma)? as f64;
            let realized = realize_shape(sigma, g, params, 0)?;
            l += realized.values * (lam / aut);
        }
        for col in 0..dim {
            if index.tuple_at(col).len() != m {
                for row in 0..dim {
                    assert_eq!(
                        l[(row, col)],
                        0.0,
                        "left matrix columns must sit on tuples of the boundary length"
                    );
                }
            }
        }
        let forced: Vec<usize> = (0..m).collect();
        let diagonal = ShapeData::simple(m, forced.clone(), forced, &[]);
        let lam_u = lambda_coeff(&diagonal, params).value;
        let middle = realize_shape(&diagonal, g, params, 0)?.values;
        aggregate += (&l * middle * l.transpose()) * (lam_u / factorial(m));
        l_matrices.push(LMatrix { boundary_len: m, shape_count: family.len(), values: l });
    }
    let aggregate = (&aggregate + aggregate.transpose()) * 0.5;
    let eigen = SymmetricEigen::try_new(aggregate, 1.0e-13, EIGEN_MAX_ITER)
        .ok_or(PseudocalError::Eigensolve(dim))?;
    let mut min_eig = f64::INFINITY;
    let mut max_abs = 0.0f64;
    for &e in eigen.eigenvalues.iter() {
        min_eig = min_eig.min(e);
        max_abs = max_abs.max(e.abs());
    }
    let cut = RANK_REL_TOL * max_abs;
    let mut kernel_dim = 0usize;
    let mut min_nonzero = f64::INFINITY;
    for &e in eigen.eigenvalues.iter() {
        if e.abs() <= cut {
            kernel_dim += 1;
        } else if e > 0.0 {
            min_nonzero = min_nonzero.min(e);
        }
    }
    if !min_nonzero.is_finite() {
        min_nonzero = 0.0;
    }
    let threshold = (params.n as f64).powi(-(params.d_sos as i32));
    let meets_threshold = min_nonzero >= threshold && min_eig >= -cut;

    // Weight recursion over the same families, grouped by the left-boundary
    // diagonal of each shape.
    let mut census_memo: BTreeMap<Vec<u8>, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut census = |diag: &ShapeData| -> Result<BTreeMap<usize, u64>, PseudocalError> {
        let cert = canonicalize(diag)?.cert;
        if let Some(hit) = census_memo.get(&cert) {
            return Ok(hit.clone());
        }
        let counts = left_boundary_census(diag, params.d_v, max_b)?;
        census_memo.insert(cert, counts.clone());
        Ok(counts)
    };

    #[derive(Debug)]
    struct PendingRow {
        shape: String,
        u_key: Vec<u8>,
        v_key: Vec<u8>,
        u_len: usize,
        v_len: usize,
        same_set: bool,
        c_value: f64,
        lambda: f64,
        norm: f64,
    }
    let mut pending: Vec<PendingRow> = Vec::new();
    let mut weights: BTreeMap<Vec<u8>, (String, f64, bool)> = BTreeMap::new();
    for m in 0..=max_b {
        let forced: Vec<usize> = (0..m).collect();
        let diag = ShapeData::simple(m, forced.clone(), forced, &[]);
        let cert = canonicalize(&diag)?.cert;
        weights.insert(cert, (describe(&diag), 1.0, true));
    }
    for (m, family) in families.iter().enumerate() {
        let forced: Vec<usize> = (0..m).collect();
        let v_diag = ShapeData::simple(m, forced.clone(), forced, &[]);
        let v_key = canonicalize(&v_diag)?.cert;
        let v_counts = census(&v_diag)?;
        for sigma in family {
            let u_set: BTreeSet<usize> = sigma.u.iter().copied().collect();
            let w_set: BTreeSet<usize> = sigma.w.iter().copied().collect();
            let same_set = u_set == w_set;
            let trivial = sigma.v == m && same_set && sigma.edges.is_empty();
            if trivial {
                continue;
            }
            let u_diag = boundary_diagonal(sigma, &sigma.u);
            let u_edges = u_diag.edges.len();
            let u_key = canonicalize(&u_diag)?.cert;
            weights
                .entry(u_key.clone())
                .or_insert_with(|| (describe(&u_diag), if u_edges == 0 { 1.0 } else { 0.0 }, u_edges == 0));
            let u_counts = census(&u_diag)?;
            let e_total = sigma.edges.len();
            let n_u = *u_counts.get(&(e_total - u_edges)).unwrap_or(&0);
            let n_v = *v_counts.get(&e_total).unwrap_or(&0);
            assert!(n_u >= 1 && n_v >= 1, "census must count the shape itself");
            let inter: BTreeSet<usize> = u_set.intersection(&w_set).copied().collect();
            let inter_edges = sigma
                .edges
                .iter()
                .filter(|&&(a, b, _)| inter.contains(&a) && inter.contains(&b))
                .count();
            let c_value = 2f64.powi((e_total - inter_edges) as i32) * n_u.max(n_v) as f64
                / factorial(inter.len());
            let lambda = lambda_coeff(sigma, params).value;
            let norm = spectral_norm(&realize_shape(sigma, g, params, 0)?)?;
            pending.push(PendingRow {
                shape: describe(sigma),
                u_key,
                v_key: v_key.clone(),
                u_len: sigma.u.len(),
                v_len: m,
                same_set,
                c_value,
                lambda,
                norm,
            });
        }
    }
    // Raise weights bottom-up: rows are grouped by right-boundary length and
    // every non-same-set row has a strictly longer left boundary, so each
    // right-side weight is final when its rows are processed.
    for row in &pending {
        if row.same_set {
            continue;
        }
        assert!(row.u_len > row.v_len, "left boundary must outweigh an edgeless right boundary");
        let wv = weights[&row.v_key].1;
        let demand = 2.0 * wv * (2.0 * row.c_value * row.lambda * row.norm);
        let entry = weights.get_mut(&row.u_key).expect("weight seeded above");
        if demand > entry.1 {
            entry.1 = demand;
        }
    }
    let mut rows: Vec<WeightRow> = Vec::new();
    let mut recursion_satisfied = true;
    for row in pending {
        let wv = weights[&row.v_key].1;
        let wu = weights[&row.u_key].1;
        let lhs = wv * 2.0 * row.c_value * row.lambda * row.norm;
        let rhs = wu / 2.0;
        let pass = lhs <= rhs * (1.0 + 1e-12);
        recursion_satisfied &= pass;
        rows.push(WeightRow {
            shape: row.shape,
            u_len: row.u_len,
            v_len: row.v_len,
            same_set: row.same_set,
            c_value: row.c_value,
            lambda: row.lambda,
            norm: row.norm,
            lhs,
            rhs,
            pass,
        });
    }
    let max_edgeless = weights
        .values()
        .filter(|(_, _, edgeless)| *edgeless)
        .map(|(_, w, _)| *w)
        .fold(0.0f64, f64::max);
    let implied_bound = if recursion_satisfied && max_edgeless > 0.0 {
        Some(0.5 / max_edgeless)
    } else {
        None
    };
    Ok(ConditionReport {
        l: l_matrices,
        dim,
        kernel_dim,
        min_eig,
        min_nonzero_eig: min_nonzero,
        threshold,
        meets_threshold,
        weights: weights.into_values().map(|(d, w, _)| (d, w)).collect(),
        rows,
        recursion_satisfied,
        implied_bound,
    })
}
