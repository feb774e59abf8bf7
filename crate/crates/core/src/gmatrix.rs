//! Dense realization of ribbons and shapes as matrices over the ordered-tuple
//! index set, together with the numeric instruments that act on them:
//! spectral norms with certified residuals, the closed-form norm-bound
//! envelope, trace-method estimates, the product-vs-intersection-pattern
//! identity, the indicator (combinatorial) basis, a dense-subgraph audit, and
//! the conditioning expansion for characters of partially absent edge sets.
//!
//! Everything here works on explicit small instances: a sampled graph, a
//! shape with a handful of vertices, and a dense matrix indexed by ordered
//! tuples. Costs are guarded up front — the embedding count is estimated and
//! reported before a realization runs.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use num::FromPrimitive;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fourier::chi;
use crate::graph::{sample_gnp, Graph};
use crate::params::{rat_to_f64, Params, Rat};
use crate::separators::{self, is_separator, weight};
use crate::shapes::{
    apply_pattern, enumerate_intersection_patterns, Ribbon, ShapeData, ShapeError,
};

/// Hard budget on embedding steps per realized matrix (one step ≈ one
/// injective embedding weighted by its per-edge work).
pub const EMBED_BUDGET: u128 = 1_000_000_000;

/// Largest tuple-index dimension a realization will allocate densely.
pub const REALIZE_DIM_CAP: usize = 10_000;

/// Largest dimension accepted by the spectral-norm routines.
pub const NORM_DIM_CAP: usize = 50_000;

/// Largest trace power handled by the moment estimator.
pub const TRACE_Q_MAX: u32 = 4;

/// Largest subgraph size enumerated by the density audit.
pub const DENSITY_D_MAX: usize = 8;

/// Largest edge set accepted by the conditioning expansion.
pub const CONDITION_EDGE_MAX: usize = 6;

#[derive(Debug, Error)]
pub enum GmatrixError {
    #[error("embedding budget exceeded: estimated {0} steps (cap {cap})", cap = EMBED_BUDGET)]
    Budget(u128),
    #[error("matrix dimension {0} above cap {1}")]
    Dimension(usize, usize),
    #[error("power iteration did not converge: best relative residual {0:.3e}")]
    NonConvergence(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

// ───────────────────────── tuple index ─────────────────────────

/// The matrix index set: all ordered tuples of distinct vertices of `[n]`
/// with length at most `max_len`, ordered by length and then
/// lexicographically. Positions are computed combinatorially (no lookup
/// table), so the index stays cheap even at large `n`.
#[derive(Debug, Clone)]
pub struct TupleIndex {
    pub n: usize,
    pub max_len: usize,
    /// Starting position of each length block.
    offsets: Vec<usize>,
    dimension: usize,
}

/// Falling factorial `n·(n−1)···(n−k+1)` (the number of ordered k-tuples of
/// distinct elements from an n-set), as u128 to survive budget estimates.
fn falling(n: usize, k: usize) -> u128 {
    let mut out: u128 = 1;
    for i in 0..k {
        if i >= n {
            return 0;
        }
        out = out.saturating_mul((n - i) as u128);
    }
    out
}

impl TupleIndex {
    pub fn new(n: usize, max_len: usize) -> Result<Self, GmatrixError> {
        let mut offsets = Vec::with_capacity(max_len + 2);
        let mut total: u128 = 0;
        for d in 0..=max_len {
            offsets.push(total as usize);
            total += falling(n, d);
            if total > REALIZE_DIM_CAP as u128 {
                return Err(GmatrixError::Dimension(total as usize, REALIZE_DIM_CAP));
            }
        }
        offsets.push(total as usize);
        Ok(TupleIndex {
            n,
            max_len,
            offsets,
            dimension: total as usize,
        })
    }

    /// `Σ_{d=0}^{max_len} n!/(n−d)!`.
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Position of an ordered tuple of distinct vertices, or `None` if it is
    /// too long, repeats a vertex, or leaves `[n]`.
    pub fn position(&self, t: &[usize]) -> Option<usize> {
        let d = t.len();
        if d > self.max_len {
            return None;
        }
        let mut rank: usize = 0;
        for (i, &x) in t.iter().enumerate() {
            if x >= self.n || t[..i].contains(&x) {
                return None;
            }
            // vertices smaller than x still unused at slot i
            let smaller_used = t[..i].iter().filter(|&&y| y < x).count();
            rank += (x - smaller_used) * falling(self.n - 1 - i, d - 1 - i) as usize;
        }
        Some(self.offsets[d] + rank)
    }

    /// The tuple at a position (inverse of [`TupleIndex::position`]).
    pub fn tuple_at(&self, mut pos: usize) -> Vec<usize> {
        let d = (0..=self.max_len)
            .find(|&d| pos < self.offsets[d + 1])
            .expect("position out of range");
        pos -= self.offsets[d];
        let mut avail: Vec<usize> = (0..self.n).collect();
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let step = falling(self.n - 1 - i, d - 1 - i) as usize;
            let choose = pos / step;
            pos %= step;
            out.push(avail.remove(choose));
        }
        out
    }
}

// ───────────────────────── realized matrices ─────────────────────────

/// A shape or ribbon made concrete on one sampled graph: dense values over
/// the ordered-tuple index, with provenance for reports.
#[derive(Debug, Clone)]
pub struct RealizedMatrix {
    pub index: TupleIndex,
    pub values: DMatrix<f64>,
    /// Human-readable description of the source shape or ribbon.
    pub source: String,
    /// Which sampled graph this was realized on.
    pub trial: u64,
}

fn describe_shape(data: &ShapeData) -> String {
    format!(
        "shape v={} u={:?} w={:?} e={:?} yes={:?}",
        data.v, data.u, data.w, data.edges, data.yes
    )
}

/// Entry value of one embedded ribbon: indicator gates first, then the
/// character product with multiplicities as powers.
fn embedded_value(data: &ShapeData, images: &[usize], g: &Graph, p: f64) -> f64 {
    for &(x, y) in &data.yes {
        if !g.has(images[x], images[y]) {
            return 0.0;
        }
    }
    let mut val = 1.0;
    for &(x, y, m) in &data.edges {
        val *= chi(g.has(images[x], images[y]), p).powi(m as i32);
    }
    val
}

fn check_realize_pre(
    data: &ShapeData,
    g: &Graph,
    params: &Params,
    index: &TupleIndex,
) -> Result<u128, GmatrixError> {
    data.validate()?;
    if g.n() != params.n {
        return Err(GmatrixError::Precondition(format!(
            "graph has {} vertices but params give n = {}",
            g.n(),
            params.n
        )));
    }
    if data.u.len() > index.max_len || data.w.len() > index.max_len {
        return Err(GmatrixError::Precondition(format!(
            "boundary tuples ({}, {}) exceed index length cap {}",
            data.u.len(),
            data.w.len(),
            index.max_len
        )));
    }
    if params.n > 20 && data.v > 5 {
        return Err(GmatrixError::Precondition(format!(
            "{}-vertex shape at n = {} > 20 (cost n^|V|)",
            data.v, params.n
        )));
    }
    let steps =
        falling(params.n, data.v) * (data.edges.len() + data.yes.len() + 1) as u128;
    if steps > EMBED_BUDGET {
        return Err(GmatrixError::Budget(steps));
    }
    Ok(steps)
}

/// Sums `entry(images)` over all injective embeddings of `0..v` into `[n]`,
/// accumulating into the `[U-image, W-image]` positions. Splits the image of
/// vertex 0 across threads when the job is large.
fn embedding_sum<F>(
    data: &ShapeData,
    params: &Params,
    index: &TupleIndex,
    steps: u128,
    entry: F,
) -> DMatrix<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let dim = index.dimension();
    let n = params.n;
    if data.v == 0 {
        let mut out = DMatrix::zeros(dim, dim);
        let pos = index.position(&[]).expect("empty tuple indexes");
        out[(pos, pos)] = 1.0;
        return out;
    }
    // fixed split count keeps entry sums byte-identical across machines
    let threads = if steps > 8_000_000 { 8.min(n) } else { 1 };
    if threads <= 1 {
        let mut out = DMatrix::zeros(dim, dim);
        embedding_dfs(data, index, n, 0..n, &entry, &mut out);
        return out;
    }
    let chunk = n.div_ceil(threads);
    let mut partials: Vec<DMatrix<f64>> = Vec::with_capacity(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let range = (t * chunk)..(((t + 1) * chunk).min(n));
            let entry = &entry;
            handles.push(scope.spawn(move || {
                let mut out = DMatrix::zeros(dim, dim);
                embedding_dfs(data, index, n, range, entry, &mut out);
                out
            }));
        }
        for h in handles {
            partials.push(h.join().expect("embedding worker panicked"));
        }
    });
    let mut out = DMatrix::zeros(dim, dim);
    for part in partials {
        out += part;
    }
    out
}

fn embedding_dfs<F: Fn(&[usize]) -> f64>(
    data: &ShapeData,
    index: &TupleIndex,
    n: usize,
    first_range: Range<usize>,
    entry: &F,
    out: &mut DMatrix<f64>,
) {
    let mut images = vec![0usize; data.v];
    let mut used = vec![false; n];
    fn rec<F: Fn(&[usize]) -> f64>(
        depth: usize,
        data: &ShapeData,
        index: &TupleIndex,
        n: usize,
        first_range: &Range<usize>,
        entry: &F,
        images: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut DMatrix<f64>,
    ) {
        if depth == data.v {
            let val = entry(images);
            if val != 0.0 {
                let row: Vec<usize> = data.u.iter().map(|&x| images[x]).collect();
                let col: Vec<usize> = data.w.iter().map(|&x| images[x]).collect();
                let r = index.position(&row).expect("row tuple indexes");
                let c = index.position(&col).expect("column tuple indexes");
                out[(r, c)] += val;
            }
            return;
        }
        let range = if depth == 0 {
            first_range.clone()
        } else {
            0..n
        };
        for img in range {
            if !used[img] {
                used[img] = true;
                images[depth] = img;
                rec(
                    depth + 1,
                    data,
                    index,
                    n,
                    first_range,
                    entry,
                    images,
                    used,
                    out,
                );
                used[img] = false;
            }
        }
    }
    rec(
        0,
        data,
        index,
        n,
        &first_range,
        entry,
        &mut images,
        &mut used,
        out,
    );
}

/// Realizes a shape on a graph: the sum over all injective embeddings of the
/// embedded ribbon's matrix, multiplicities and indicator gates included.
pub fn realize_shape(
    data: &ShapeData,
    g: &Graph,
    params: &Params,
    trial: u64,
) -> Result<RealizedMatrix, GmatrixError> {
    let index = TupleIndex::new(params.n, params.d_sos / 2)?;
    let steps = check_realize_pre(data, g, params, &index)?;
    let p = params.p;
    let values = embedding_sum(data, params, &index, steps, |images| {
        embedded_value(data, images, g, p)
    });
    Ok(RealizedMatrix {
        index,
        values,
        source: describe_shape(data),
        trial,
    })
}

/// Realizes one ribbon: a single entry at its boundary position.
pub fn realize_ribbon(
    r: &Ribbon,
    g: &Graph,
    params: &Params,
    trial: u64,
) -> Result<RealizedMatrix, GmatrixError> {
    let index = TupleIndex::new(params.n, params.d_sos / 2)?;
    let row = index.position(&r.a).ok_or_else(|| {
        GmatrixError::Precondition(format!("ribbon row tuple {:?} does not index", r.a))
    })?;
    let col = index.position(&r.b).ok_or_else(|| {
        GmatrixError::Precondition(format!("ribbon column tuple {:?} does not index", r.b))
    })?;
    if let Some(&x) = r.v.iter().max() {
        if x >= params.n {
            return Err(GmatrixError::Precondition(format!(
                "ribbon vertex {x} outside [0, {})",
                params.n
            )));
        }
    }
    let mut val = 1.0;
    for &(a, b) in &r.yes {
        if !g.has(a, b) {
            val = 0.0;
        }
    }
    if val != 0.0 {
        for (&(a, b), &m) in &r.e {
            val *= chi(g.has(a, b), params.p).powi(m as i32);
        }
    }
    let mut values = DMatrix::zeros(index.dimension(), index.dimension());
    values[(row, col)] = val;
    Ok(RealizedMatrix {
        index,
        values,
        source: format!("ribbon a={:?} b={:?} v={:?} e={:?}", r.a, r.b, r.v, r.e),
        trial,
    })
}

/// Largest absolute entry difference between two equally sized matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "matrix shapes differ");
    (a - b).amax()
}

// ───────────────────────── spectral norms ─────────────────────────

fn unit01(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Power iteration on a PSD gram operator; returns the square root of its
/// top eigenvalue. Converges when the residual ‖Bv − λv‖ certifies the
/// eigenvalue to relative precision 1e−9 (so the returned singular value is
/// well within 1e−8 relative); three seeded restarts hedge against an
/// unlucky start vector.
fn power_norm<F>(dim: usize, gram: F) -> Result<f64, GmatrixError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    const MAX_ITERS: usize = 50_000;
    const REL_TOL: f64 = 1e-9;
    if dim == 0 {
        return Ok(0.0);
    }
    let mut best: f64 = 0.0;
    for restart in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x517c_c1b7_2722_0a95 ^ restart);
        let mut v = DVector::from_fn(dim, |_, _| unit01(rng.next_u64()) - 0.5);
        let start_norm = v.norm();
        if start_norm == 0.0 {
            continue;
        }
        v /= start_norm;
        let mut converged = false;
        let mut last_rel = f64::INFINITY;
        for _ in 0..MAX_ITERS {
            let bv = gram(&v);
            let lambda = v.dot(&bv);
            let resid = (&bv - &v * lambda).norm();
            let scale = lambda.abs().max(f64::MIN_POSITIVE);
            last_rel = resid / scale;
            let bn = bv.norm();
            if last_rel <= REL_TOL || bn == 0.0 {
                converged = true;
                best = best.max(lambda.max(0.0));
                break;
            }
            v = bv / bn;
        }
        if !converged {
            return Err(GmatrixError::NonConvergence(last_rel));
        }
    }
    Ok(best.sqrt())
}

/// Largest singular value of a dense matrix, iteratively with a certified
/// residual (relative tolerance 1e−8).
pub fn spectral_norm_of(a: &DMatrix<f64>) -> Result<f64, GmatrixError> {
    let (rows, cols) = a.shape();
    let dim = rows.max(cols);
    if dim > NORM_DIM_CAP {
        return Err(GmatrixError::Dimension(dim, NORM_DIM_CAP));
    }
    if a.amax() == 0.0 {
        return Ok(0.0);
    }
    power_norm(cols, |v| a.tr_mul(&(a * v)))
}

pub fn spectral_norm(m: &RealizedMatrix) -> Result<f64, GmatrixError> {
    spectral_norm_of(&m.values)
}

/// Spectral norm of a symmetric operator given only by its action; the gram
/// operator is the square. Lets callers bound norms of structured matrices
/// (adjacency blocks, products) without densifying anything larger than a
/// vector.
pub fn spectral_norm_sym_op<F>(dim: usize, apply: F) -> Result<f64, GmatrixError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if dim > NORM_DIM_CAP {
        return Err(GmatrixError::Dimension(dim, NORM_DIM_CAP));
    }
    power_norm(dim, |v| apply(&apply(v)))
}

// ───────────────────────── structured blocks ─────────────────────────

/// The n×n centered-adjacency block: entry `(a,b) = χ(G_ab)` off the
/// diagonal, zero on it. This is the single-edge shape's nonzero block.
pub fn edge_block(g: &Graph, p: f64) -> DMatrix<f64> {
    let n = g.n();
    DMatrix::from_fn(n, n, |a, b| if a == b { 0.0 } else { chi(g.has(a, b), p) })
}

/// The n×n block of the three-vertex path shape (both endpoints on the
/// boundary): `X²` with the diagonal zeroed, where `X` is the edge block.
/// The product identity for edge∘edge has exactly two intersection
/// patterns — the path itself and the merged-endpoint double edge, which is
/// the diagonal of `X²` — so removing the diagonal isolates the path.
pub fn two_path_block(g: &Graph, p: f64) -> DMatrix<f64> {
    let x = edge_block(g, p);
    let mut sq = &x * &x;
    sq.fill_diagonal(0.0);
    sq
}

// ───────────────────────── norm-bound envelope ─────────────────────────

/// The closed-form spectral envelope for one shape: the separator-weight
/// power of n, with and without the combinatorial prefactor.
#[derive(Debug, Clone)]
pub struct NormBound {
    /// `5·(60·D_V³)^{|V| − (|U|+|W|)/2}`.
    pub b_adjust: f64,
    /// `n^{(|V| − w(S_min) + |Iso|)/2}` alone.
    pub approximate: f64,
    /// `b_adjust · approximate`.
    pub adjusted: f64,
    /// The minimum separator weight at the parameters' β.
    pub separator_weight: f64,
}

/// β as an exact rational: taken from the exact exponents when present,
/// otherwise recovered from the float (finite β required).
pub(crate) fn beta_rational(params: &Params) -> Rat {
    match &params.exact {
        Some(exact) => exact.beta.clone(),
        None => Rat::from_f64(params.beta).expect("finite β"),
    }
}

/// Evaluates the norm-bound envelope for a proper shape.
pub fn norm_bound(data: &ShapeData, params: &Params) -> Result<NormBound, GmatrixError> {
    data.validate()?;
    if !data.is_proper() {
        return Err(GmatrixError::Precondition(
            "norm bound applies to proper shapes (no multiedges or indicators)".into(),
        ));
    }
    let beta = beta_rational(params);
    let report = separators::all_min_weight_separators(data, &beta)?;
    let w = rat_to_f64(&report.min_value);
    let nf = params.n as f64;
    let dv = params.d_v as f64;
    let boundary_half = (data.u.len() + data.w.len()) as f64 / 2.0;
    let b_adjust = 5.0 * (60.0 * dv.powi(3)).powf(data.v as f64 - boundary_half);
    let approximate = nf.powf((data.v as f64 - w + data.iso_count() as f64) / 2.0);
    Ok(NormBound {
        b_adjust,
        approximate,
        adjusted: b_adjust * approximate,
        separator_weight: w,
    })
}

// ───────────────────────── trace moments ─────────────────────────

/// Monte Carlo estimate of `E[tr((M_α M_αᵀ)^q)]` with its trace-method bound.
#[derive(Debug, Clone)]
pub struct TraceMoment {
    pub estimate: f64,
    pub std_error: f64,
    /// `(2q|V|)^{2q(|V|−(|U|+|W|)/2)} · n^{q|V|} ·
    /// (max_S n^{−|S|/2}((1−p)/p)^{|E(S)|/2})^{2q−2}`, max over separators.
    pub paper_bound: f64,
    pub trials: usize,
}

fn trace_bound(data: &ShapeData, q: u32, params: &Params) -> Result<f64, GmatrixError> {
    let v = data.v as f64;
    let nf = params.n as f64;
    let ratio = (1.0 - params.p) / params.p;
    let a: std::collections::BTreeSet<usize> = data.u.iter().copied().collect();
    let b: std::collections::BTreeSet<usize> = data.w.iter().copied().collect();
    if data.v > separators::SEPARATOR_VMAX {
        return Err(GmatrixError::Precondition(format!(
            "separator sweep capped at {} vertices",
            separators::SEPARATOR_VMAX
        )));
    }
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << data.v) {
        let s: std::collections::BTreeSet<usize> =
            (0..data.v).filter(|&i| mask & (1 << i) != 0).collect();
        if is_separator(data, &a, &b, &s) {
            let expr = weight(data, &s);
            let factor =
                nf.powf(-(expr.vertices as f64) / 2.0) * ratio.powf(expr.edges as f64 / 2.0);
            best = best.max(factor);
        }
    }
    let qf = q as f64;
    let boundary_half = (data.u.len() + data.w.len()) as f64 / 2.0;
    Ok((2.0 * qf * v).powf(2.0 * qf * (v - boundary_half))
        * nf.powf(qf * v)
        * best.powf(2.0 * qf - 2.0))
}

/// Samples graphs and averages `tr((M_α M_αᵀ)^q)`, alongside the closed-form
/// bound on its expectation. Trials run in parallel.
pub fn trace_moment_estimate(
    data: &ShapeData,
    q: u32,
    params: &Params,
    trials: usize,
) -> Result<TraceMoment, GmatrixError> {
    if q == 0 || q > TRACE_Q_MAX {
        return Err(GmatrixError::Precondition(format!(
            "trace power q = {q} outside 1..={TRACE_Q_MAX}"
        )));
    }
    if trials == 0 {
        return Err(GmatrixError::Precondition("trials = 0".into()));
    }
    if !data.is_proper() {
        return Err(GmatrixError::Precondition(
            "trace bound applies to proper shapes".into(),
        ));
    }
    let paper_bound = trace_bound(data, q, params)?;
    // fail fast on budget/shape problems before spawning workers
    check_realize_pre(
        data,
        &Graph::empty(params.n),
        params,
        &TupleIndex::new(params.n, params.d_sos / 2)?,
    )?;
    let one_trace = |t: u64| -> Result<f64, GmatrixError> {
        let g = sample_gnp(params, t);
        let m = realize_shape(data, &g, params, t)?;
        let mm = &m.values * m.values.transpose();
        let mut pw = mm.clone();
        for _ in 1..q {
            pw = &pw * &mm;
        }
        Ok(pw.trace())
    };
    // traces land in trial order so the mean never depends on worker count
    let workers = 8.min(trials);
    let mut traces: Vec<f64> = vec![0.0; trials];
    if workers <= 1 {
        for t in 0..trials {
            traces[t] = one_trace(t as u64)?;
        }
    } else {
        let mut results: Vec<Result<Vec<(usize, f64)>, GmatrixError>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let one_trace = &one_trace;
                handles.push(scope.spawn(move || {
                    (w..trials)
                        .step_by(workers)
                        .map(|t| one_trace(t as u64).map(|x| (t, x)))
                        .collect::<Result<Vec<(usize, f64)>, GmatrixError>>()
                }));
            }
            for h in handles {
                results.push(h.join().expect("trace worker panicked"));
            }
        });
        for r in results {
            for (t, x) in r? {
                traces[t] = x;
            }
        }
    }
    let mean = traces.iter().sum::<f64>() / trials as f64;
    let std_error = if trials > 1 {
        let var = traces.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceMoment {
        estimate: mean,
        std_error,
        paper_bound,
        trials,
    })
}

// ───────────────────────── product identities ─────────────────────────

/// Composition of ribbons sharing a boundary: `B_R = A_S` glues them, edges
/// union as a multiset and indicators as a set. `None` when not composable
/// (where the matrix product is exactly zero).
pub fn compose_ribbons(r: &Ribbon, s: &Ribbon) -> Option<Ribbon> {
    if r.b != s.a {
        return None;
    }
    let mut e = r.e.clone();
    for (&pair, &m) in &s.e {
        *e.entry(pair).or_insert(0) += m;
    }
    Some(Ribbon {
        a: r.a.clone(),
        b: s.b.clone(),
        v: r.v.union(&s.v).copied().collect(),
        e,
        yes: r.yes.union(&s.yes).copied().collect(),
    })
}

/// Checks `M_R · M_S = M_{R∘S}` (or `= 0` when not composable) on one graph;
/// returns the largest absolute entry deviation.
pub fn ribbon_product_fact(
    r: &Ribbon,
    s: &Ribbon,
    g: &Graph,
    params: &Params,
) -> Result<f64, GmatrixError> {
    let mr = realize_ribbon(r, g, params, 0)?;
    let ms = realize_ribbon(s, g, params, 0)?;
    let prod = &mr.values * &ms.values;
    match compose_ribbons(r, s) {
        Some(t) => {
            let mt = realize_ribbon(&t, g, params, 0)?;
            Ok(max_abs_diff(&prod, &mt.values))
        }
        None => Ok(prod.amax()),
    }
}

/// Result of checking the shape-product identity on one graph.
#[derive(Debug, Clone)]
pub struct ProductReport {
    pub dimension: usize,
    pub pattern_count: usize,
    pub max_abs_diff: f64,
}

/// Verifies `M_{α_1} ··· M_{α_k} = Σ_P M_{α_P}` on a concrete graph: the
/// left side by dense multiplication of independently realized factors, the
/// right by realizing every intersection pattern's contracted shape.
pub fn verify_product_identity(
    pieces: &[ShapeData],
    g: &Graph,
    params: &Params,
) -> Result<ProductReport, GmatrixError> {
    if pieces.is_empty() {
        return Err(GmatrixError::Precondition("empty shape list".into()));
    }
    let patterns = enumerate_intersection_patterns(pieces)?;
    let mut lhs = realize_shape(&pieces[0], g, params, 0)?.values;
    for piece in &pieces[1..] {
        lhs *= realize_shape(piece, g, params, 0)?.values;
    }
    let dim = lhs.nrows();
    let mut rhs = DMatrix::zeros(dim, dim);
    for pat in &patterns {
        rhs += realize_shape(&apply_pattern(pat), g, params, 0)?.values;
    }
    Ok(ProductReport {
        dimension: dim,
        pattern_count: patterns.len(),
        max_abs_diff: max_abs_diff(&lhs, &rhs),
    })
}

// ───────────────────────── indicator basis ─────────────────────────

/// Indicator-basis entry of one ribbon: `(1/p)^{|E|/2}` when every edge (and
/// indicator pair) of the ribbon is present, zero otherwise.
pub fn combi_entry(r: &Ribbon, g: &Graph, p: f64) -> f64 {
    let all_present = r
        .e
        .keys()
        .chain(r.yes.iter())
        .all(|&(a, b)| g.has(a, b));
    if !all_present {
        return 0.0;
    }
    let total: u32 = r.e.values().sum();
    (1.0 / p).powf(total as f64 / 2.0)
}

/// Realizes a shape in the indicator basis: the embedding sum of
/// [`combi_entry`] values.
pub fn realize_combi(
    data: &ShapeData,
    g: &Graph,
    params: &Params,
    trial: u64,
) -> Result<RealizedMatrix, GmatrixError> {
    let index = TupleIndex::new(params.n, params.d_sos / 2)?;
    let steps = check_realize_pre(data, g, params, &index)?;
    let scale = (1.0 / params.p).powf(data.edge_total() as f64 / 2.0);
    let values = embedding_sum(data, params, &index, steps, |images| {
        let all_present = data
            .edges
            .iter()
            .map(|&(x, y, _)| (x, y))
            .chain(data.yes.iter().copied())
            .all(|(x, y)| g.has(images[x], images[y]));
        if all_present {
            scale
        } else {
            0.0
        }
    });
    Ok(RealizedMatrix {
        index,
        values,
        source: format!("indicator-basis {}", describe_shape(data)),
        trial,
    })
}

/// Largest pointwise deviation of `(1/√p)·1_e = √p + √(1−p)·χ_e` over both
/// edge states. The identity holds with this plus sign: on a present edge
/// both sides are `1/√p`, on an absent edge both vanish.
pub fn basis_conversion_error(p: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for present in [false, true] {
        let lhs = if present { 1.0 / p.sqrt() } else { 0.0 };
        let rhs = p.sqrt() + (1.0 - p).sqrt() * chi(present, p);
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// Both sides of the indicator-basis trace identity on one graph:
/// `p^{q|E(α)|/2} · tr((M^{(combi)}_α)^q)` against a direct count of cyclic
/// chains of `q` injective embeddings whose edges all lie in `G`.
pub fn combi_trace_check(
    data: &ShapeData,
    q: u32,
    g: &Graph,
    params: &Params,
) -> Result<(f64, f64), GmatrixError> {
    if params.n > 10 {
        return Err(GmatrixError::Precondition(format!(
            "chain counting capped at n = 10, got {}",
            params.n
        )));
    }
    if q == 0 || q > TRACE_Q_MAX {
        return Err(GmatrixError::Precondition(format!(
            "trace power q = {q} outside 1..={TRACE_Q_MAX}"
        )));
    }
    let m = realize_combi(data, g, params, 0)?;
    let mut pw = m.values.clone();
    for _ in 1..q {
        pw = &pw * &m.values;
    }
    let lhs = params
        .p
        .powf(q as f64 * data.edge_total() as f64 / 2.0)
        * pw.trace();

    // Every injective embedding whose edges all lie in G, keyed by its
    // boundary images; chains follow column tuple → next row tuple.
    let mut maps: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut images = vec![0usize; data.v];
    let mut used = vec![false; params.n];
    collect_present_embeddings(data, g, 0, &mut images, &mut used, &mut maps);
    let mut by_row: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for (i, (a, _)) in maps.iter().enumerate() {
        by_row.entry(a.clone()).or_default().push(i);
    }
    let mut count: u64 = 0;
    for (start_a, start_b) in &maps {
        count += chains_from(start_b, start_a, q - 1, &maps, &by_row);
    }
    Ok((lhs, count as f64))
}

fn collect_present_embeddings(
    data: &ShapeData,
    g: &Graph,
    depth: usize,
    images: &mut Vec<usize>,
    used: &mut Vec<bool>,
    out: &mut Vec<(Vec<usize>, Vec<usize>)>,
) {
    if depth == data.v {
        let present = data
            .edges
            .iter()
            .map(|&(x, y, _)| (x, y))
            .chain(data.yes.iter().copied())
            .all(|(x, y)| g.has(images[x], images[y]));
        if present {
            let a = data.u.iter().map(|&x| images[x]).collect();
            let b = data.w.iter().map(|&x| images[x]).collect();
            out.push((a, b));
        }
        return;
    }
    for img in 0..used.len() {
        if !used[img] {
            used[img] = true;
            images[depth] = img;
            collect_present_embeddings(data, g, depth + 1, images, used, out);
            used[img] = false;
        }
    }
}

fn chains_from(
    current: &[usize],
    close_at: &[usize],
    remaining: u32,
    maps: &[(Vec<usize>, Vec<usize>)],
    by_row: &HashMap<Vec<usize>, Vec<usize>>,
) -> u64 {
    if remaining == 0 {
        return u64::from(current == close_at);
    }
    let Some(nexts) = by_row.get(current) else {
        return 0;
    };
    nexts
        .iter()
        .map(|&i| chains_from(&maps[i].1, close_at, remaining - 1, maps, by_row))
        .sum()
}

// ───────────────────────── density audit ─────────────────────────

/// Densest observed subgraph at one vertex count, with its allowance.
#[derive(Debug, Clone)]
pub struct SizeDensity {
    pub vertices: usize,
    pub max_edges: usize,
    /// Edge allowance `(|V(H)| + η) / (β − 2·log_n D)`.
    pub allowed: f64,
}

/// Report of the over-dense-subgraph sweep of one sampled graph.
#[derive(Debug, Clone)]
pub struct DensityReport {
    pub beta: f64,
    /// `β − 2·log_n D`.
    pub threshold_denominator: f64,
    pub per_size: Vec<SizeDensity>,
    /// Sizes whose densest subgraph exceeds its allowance.
    pub violations: Vec<SizeDensity>,
    /// `min_H (w(H) + η + 2|E(H)|·log_n D)` over connected `H` up to `D`
    /// vertices; negative exactly when a violation exists.
    pub min_margin: f64,
}

/// Enumerates connected induced subgraphs up to `d` vertices (each exactly
/// once, by rooted extension) and flags any vertex count whose densest
/// member exceeds `(|V(H)| + η)/(β − 2·log_n D)`. Induced subgraphs carry
/// the most edges on their vertex set, and restricting to connected ones
/// flags a sub-event of the full over-density event, so the failure
/// probability ceiling applies a fortiori.
pub fn density_audit(
    g: &Graph,
    d: usize,
    eta: f64,
    params: &Params,
) -> Result<DensityReport, GmatrixError> {
    if d < 1 || d > DENSITY_D_MAX {
        return Err(GmatrixError::Precondition(format!(
            "subgraph size cap d = {d} outside 1..={DENSITY_D_MAX}"
        )));
    }
    let n = g.n();
    let nf = params.n as f64;
    if n != params.n {
        return Err(GmatrixError::Precondition(format!(
            "graph has {n} vertices but params give n = {}",
            params.n
        )));
    }
    let logn_d = (d as f64).ln() / nf.ln();
    let beta = params.beta;
    if beta <= 4.0 * logn_d {
        return Err(GmatrixError::Precondition(format!(
            "requires β > 4·log_n(D): β = {beta:.4}, 4·log_n(D) = {:.4}",
            4.0 * logn_d
        )));
    }
    let theta = beta - 2.0 * logn_d;

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b) in g.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut max_edges = vec![0usize; d + 1];
    // rooted extension: each connected induced set of size ≤ d is reached
    // exactly once, from its minimum vertex, adding only larger vertices
    // whose first contact with the set is the vertex being extended
    let mut in_sub = vec![false; n];
    let mut seen = vec![false; n];
    for root in 0..n {
        let ext: Vec<usize> = adj[root].iter().copied().filter(|&u| u > root).collect();
        for &u in &ext {
            seen[u] = true;
        }
        in_sub[root] = true;
        extend_connected(
            &adj,
            root,
            d,
            ext,
            1,
            0,
            &mut in_sub,
            &mut seen,
            &mut max_edges,
        );
        in_sub[root] = false;
        for u in 0..n {
            seen[u] = false;
        }
    }

    let mut per_size = Vec::new();
    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    for a in 1..=d.min(n) {
        let e = max_edges[a];
        let allowed = (a as f64 + eta) / theta;
        let entry = SizeDensity {
            vertices: a,
            max_edges: e,
            allowed,
        };
        let margin = a as f64 - beta * e as f64 + eta + 2.0 * e as f64 * logn_d;
        min_margin = min_margin.min(margin);
        if (e as f64) > allowed {
            violations.push(entry.clone());
        }
        per_size.push(entry);
    }
    Ok(DensityReport {
        beta,
        threshold_denominator: theta,
        per_size,
        violations,
        min_margin,
    })
}

#[allow(clippy::too_many_arguments)]
fn extend_connected(
    adj: &[Vec<usize>],
    root: usize,
    d: usize,
    mut ext: Vec<usize>,
    size: usize,
    edges: usize,
    in_sub: &mut Vec<bool>,
    seen: &mut Vec<bool>,
    max_edges: &mut Vec<usize>,
) {
    max_edges[size] = max_edges[size].max(edges);
    if size == d {
        return;
    }
    while let Some(w) = ext.pop() {
        let added = adj[w].iter().filter(|&&u| in_sub[u]).count();
        let mut next_ext = ext.clone();
        let mut newly_seen = Vec::new();
        for &u in &adj[w] {
            if u > root && !seen[u] {
                seen[u] = true;
                newly_seen.push(u);
                next_ext.push(u);
            }
        }
        in_sub[w] = true;
        extend_connected(
            adj,
            root,
            d,
            next_ext,
            size + 1,
            edges + added,
            in_sub,
            seen,
            max_edges,
        );
        in_sub[w] = false;
        for u in newly_seen {
            seen[u] = false;
        }
    }
}

// ───────────────────────── conditioning expansion ─────────────────────────

/// Expansion of `χ_E` valid on the event that not all of `E` is present:
/// expanding `∏_{e∈E}(p + √(p(1−p))·χ_e) = 0` and solving for the top term
/// gives `χ_E = −Σ_{E'⊊E} (√(p/(1−p)))^{|E|−|E'|} χ_{E'}` — one global
/// minus sign, the same factor on every proper subset.
pub fn conditioning_expand(
    edges: &[(usize, usize)],
    p: f64,
) -> Result<Vec<(f64, Vec<(usize, usize)>)>, GmatrixError> {
    let mut set: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    set.sort_unstable();
    set.dedup();
    if set.iter().any(|&(a, b)| a == b) {
        return Err(GmatrixError::Precondition("self-loop in edge set".into()));
    }
    let m = set.len();
    if m == 0 || m > CONDITION_EDGE_MAX {
        return Err(GmatrixError::Precondition(format!(
            "edge set size {m} outside 1..={CONDITION_EDGE_MAX}"
        )));
    }
    let ratio = (p / (1.0 - p)).sqrt();
    let mut out = Vec::with_capacity((1 << m) - 1);
    for mask in 0u32..((1 << m) - 1) {
        let subset: Vec<(usize, usize)> = (0..m)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| set[i])
            .collect();
        let coeff = -ratio.powi((m - subset.len()) as i32);
        out.push((coeff, subset));
    }
    Ok(out)
}

/// Largest pointwise deviation of the conditioning expansion over every
/// qualifying assignment (at least one edge absent).
pub fn conditioning_residual(edges: &[(usize, usize)], p: f64) -> Result<f64, GmatrixError> {
    let terms = conditioning_expand(edges, p)?;
    let mut set: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    set.sort_unstable();
    set.dedup();
    let m = set.len();
    let state = |assign: u32, e: &(usize, usize)| -> bool {
        let i = set.iter().position(|x| x == e).expect("edge in set");
        assign & (1 << i) != 0
    };
    let mut worst: f64 = 0.0;
    for assign in 0u32..((1 << m) - 1) {
        let chi_full: f64 = set.iter().map(|e| chi(state(assign, e), p)).product();
        let expansion: f64 = terms
            .iter()
            .map(|(c, subset)| {
                c * subset
                    .iter()
                    .map(|e| chi(state(assign, e), p))
                    .product::<f64>()
            })
            .sum();
        worst = worst.max((chi_full - expansion).abs());
    }
    Ok(worst)
}
