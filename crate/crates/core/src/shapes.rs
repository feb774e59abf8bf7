//! Ribbons, shapes, canonical forms, automorphisms, composition,
//! intersection patterns, and multiedge linearization.
//!
//! A *ribbon* is a labeled object: two ordered boundary tuples inside a
//! vertex set, an edge multiset, and a set of presence indicators. A *shape*
//! is its relabeling class; equality of shapes is byte-equality of a
//! canonical certificate computed by exhaustive order-preserving relabeling
//! (boundary labels are forced, only interior vertices are permuted). All
//! suite objects stay small (≤ 12 vertices), so brute force is the whole
//! isomorphism story — no external engine.

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::{Atom, AtomLedger};

/// Hard cap for canonicalization and pattern enumeration.
pub const CANON_VMAX: usize = 12;
/// Largest edge multiplicity the linearization tables cover.
pub const MULT_CAP: u32 = 6;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("size cap exceeded: {0} = {1}")]
    SizeCap(&'static str, usize),
    #[error("pieces {0} and {1} are not composable (boundary tuples differ in length)")]
    NotComposable(usize, usize),
    #[error("bad shape labels: {0}")]
    BadLabels(String),
    #[error("edge multiplicity {0} exceeds the linearization table cap {MULT_CAP}")]
    MultiplicityCap(u32),
}

/// A labeled shape: vertices `0..v`, ordered boundary tuples `u` (left) and
/// `w` (right), an edge multiset, and a set of presence indicators.
///
/// Proper means: every multiplicity is 1, no indicators, and every interior
/// vertex touches an edge. Improper data arises from composition,
/// intersection patterns, and the separator recursion, and is first-class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeData {
    pub v: usize,
    pub u: Vec<usize>,
    pub w: Vec<usize>,
    /// Sorted `(a, b, multiplicity)` with `a < b`, multiplicities ≥ 1.
    pub edges: Vec<(usize, usize, u32)>,
    /// Sorted presence-indicator pairs (may overlap `edges`).
    pub yes: Vec<(usize, usize)>,
}

fn norm_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ShapeData {
    /// Normalizing constructor: merges duplicate edges, sorts everything.
    pub fn new(
        v: usize,
        u: Vec<usize>,
        w: Vec<usize>,
        edges: &[(usize, usize, u32)],
        yes: &[(usize, usize)],
    ) -> Self {
        let mut mult: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for &(a, b, m) in edges {
            if m > 0 {
                *mult.entry(norm_pair(a, b)).or_insert(0) += m;
            }
        }
        let yes: BTreeSet<(usize, usize)> = yes.iter().map(|&(a, b)| norm_pair(a, b)).collect();
        ShapeData {
            v,
            u,
            w,
            edges: mult.into_iter().map(|((a, b), m)| (a, b, m)).collect(),
            yes: yes.into_iter().collect(),
        }
    }

    /// Proper simple-graph shape (all multiplicities 1, no indicators).
    pub fn simple(v: usize, u: Vec<usize>, w: Vec<usize>, edges: &[(usize, usize)]) -> Self {
        let e: Vec<_> = edges.iter().map(|&(a, b)| (a, b, 1)).collect();
        ShapeData::new(v, u, w, &e, &[])
    }

    /// Total edge count with multiplicity.
    pub fn edge_total(&self) -> u32 {
        self.edges.iter().map(|&(_, _, m)| m).sum()
    }

    /// Number of distinct edge supports.
    pub fn edge_support(&self) -> usize {
        self.edges.len()
    }

    pub fn boundary(&self) -> BTreeSet<usize> {
        self.u.iter().chain(self.w.iter()).copied().collect()
    }

    /// Interior vertices touching neither an edge nor an indicator.
    pub fn iso_count(&self) -> usize {
        let boundary = self.boundary();
        let mut touched = vec![false; self.v];
        for &(a, b, _) in &self.edges {
            touched[a] = true;
            touched[b] = true;
        }
        for &(a, b) in &self.yes {
            touched[a] = true;
            touched[b] = true;
        }
        (0..self.v)
            .filter(|x| !boundary.contains(x) && !touched[*x])
            .count()
    }

    pub fn is_proper(&self) -> bool {
        self.yes.is_empty()
            && self.edges.iter().all(|&(_, _, m)| m == 1)
            && self.iso_count() == 0
    }

    /// No edges and no indicators.
    pub fn is_trivial(&self) -> bool {
        self.edges.is_empty() && self.yes.is_empty()
    }

    /// Every vertex lies in both boundary tuples (as sets).
    pub fn is_diagonal(&self) -> bool {
        let us: BTreeSet<_> = self.u.iter().copied().collect();
        let ws: BTreeSet<_> = self.w.iter().copied().collect();
        us == ws && us.len() == self.v
    }

    pub fn transpose(&self) -> ShapeData {
        ShapeData {
            v: self.v,
            u: self.w.clone(),
            w: self.u.clone(),
            edges: self.edges.clone(),
            yes: self.yes.clone(),
        }
    }

    /// Applies a label bijection `map[old] = new`.
    pub fn relabel(&self, map: &[usize]) -> ShapeData {
        let e: Vec<_> = self
            .edges
            .iter()
            .map(|&(a, b, m)| (map[a], map[b], m))
            .collect();
        let y: Vec<_> = self.yes.iter().map(|&(a, b)| (map[a], map[b])).collect();
        ShapeData::new(
            self.v,
            self.u.iter().map(|&x| map[x]).collect(),
            self.w.iter().map(|&x| map[x]).collect(),
            &e,
            &y,
        )
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let distinct = |t: &[usize]| t.iter().collect::<BTreeSet<_>>().len() == t.len();
        if !distinct(&self.u) || !distinct(&self.w) {
            return Err(ShapeError::BadLabels("boundary tuple repeats a vertex".into()));
        }
        let in_range = |x: usize| x < self.v;
        let ok = self.u.iter().chain(self.w.iter()).all(|&x| in_range(x))
            && self.edges.iter().all(|&(a, b, _)| a < b && in_range(b))
            && self.yes.iter().all(|&(a, b)| a < b && in_range(b));
        if !ok {
            return Err(ShapeError::BadLabels(format!(
                "labels must lie in 0..{}",
                self.v
            )));
        }
        Ok(())
    }

    fn certificate(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 3 * self.edges.len());
        let push = |out: &mut Vec<u8>, x: usize| out.push(u8::try_from(x).expect("label > 255"));
        push(&mut out, self.v);
        push(&mut out, self.u.len());
        for &x in &self.u {
            push(&mut out, x);
        }
        push(&mut out, self.w.len());
        for &x in &self.w {
            push(&mut out, x);
        }
        push(&mut out, self.edges.len());
        for &(a, b, m) in &self.edges {
            push(&mut out, a);
            push(&mut out, b);
            push(&mut out, m as usize);
        }
        push(&mut out, self.yes.len());
        for &(a, b) in &self.yes {
            push(&mut out, a);
            push(&mut out, b);
        }
        out
    }
}

/// A shape: canonical-form labeled data plus its identity certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Shape {
    pub data: ShapeData,
    pub cert: Vec<u8>,
}

impl PartialEq for Shape {
    fn eq(&self, other: &Self) -> bool {
        self.cert == other.cert
    }
}
impl Eq for Shape {}
impl PartialOrd for Shape {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Shape {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cert.cmp(&other.cert)
    }
}

/// The forced part of the canonical relabeling: `u` takes `0,1,…`, then
/// unseen `w` entries continue in `w`-order. Interior vertices are returned
/// for the permutation search.
fn forced_labels(data: &ShapeData) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut map = vec![None; data.v];
    let mut next = 0;
    for &x in &data.u {
        map[x] = Some(next);
        next += 1;
    }
    for &x in &data.w {
        if map[x].is_none() {
            map[x] = Some(next);
            next += 1;
        }
    }
    let interior: Vec<usize> = (0..data.v).filter(|&x| map[x].is_none()).collect();
    (map, interior)
}

/// Canonical form: lexicographically minimal certificate over all
/// relabelings that preserve the boundary tuple orders. Idempotent.
pub fn canonicalize(data: &ShapeData) -> Result<Shape, ShapeError> {
    if data.v > CANON_VMAX {
        return Err(ShapeError::SizeCap("vertices", data.v));
    }
    data.validate()?;
    let (forced, interior) = forced_labels(data);
    let base = forced.iter().filter(|x| x.is_some()).count();
    let mut best: Option<(Vec<u8>, ShapeData)> = None;
    for perm in interior.iter().permutations(interior.len()) {
        let mut map: Vec<usize> = forced.iter().map(|x| x.unwrap_or(usize::MAX)).collect();
        for (offset, &&x) in perm.iter().enumerate() {
            map[x] = base + offset;
        }
        let cand = data.relabel(&map);
        let cert = cand.certificate();
        if best.as_ref().is_none_or(|(b, _)| cert < *b) {
            best = Some((cert, cand));
        }
    }
    let (cert, canon) = best.expect("permutation enumeration yields at least one labeling");
    Ok(Shape { data: canon, cert })
}

/// `|Aut(α)|`: permutations of interior vertices (boundary fixed pointwise)
/// preserving the edge multiset and the indicator set.
pub fn automorphism_count(data: &ShapeData) -> Result<u64, ShapeError> {
    if data.v > 10 {
        return Err(ShapeError::SizeCap("vertices", data.v));
    }
    data.validate()?;
    let boundary = data.boundary();
    let interior: Vec<usize> = (0..data.v).filter(|x| !boundary.contains(x)).collect();
    let mut count = 0;
    for perm in interior.iter().permutations(interior.len()) {
        let mut map: Vec<usize> = (0..data.v).collect();
        for (slot, &&image) in interior.iter().zip(perm.iter()) {
            map[*slot] = image;
        }
        let moved = data.relabel(&map);
        if moved.edges == data.edges && moved.yes == data.yes {
            count += 1;
        }
    }
    Ok(count)
}

/// The injective embedding of a labeled shape given images for `0..v`.
/// Returns the embedded data over ambient labels (a ribbon).
pub fn embed(data: &ShapeData, images: &[usize]) -> Ribbon {
    Ribbon {
        a: data.u.iter().map(|&x| images[x]).collect(),
        b: data.w.iter().map(|&x| images[x]).collect(),
        v: images.iter().copied().collect(),
        e: data
            .edges
            .iter()
            .map(|&(x, y, m)| (norm_pair(images[x], images[y]), m))
            .collect(),
        yes: data
            .yes
            .iter()
            .map(|&(x, y)| norm_pair(images[x], images[y]))
            .collect(),
    }
}

/// A ribbon: a shape realized on ambient labels in `[n]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Ribbon {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub v: BTreeSet<usize>,
    pub e: BTreeMap<(usize, usize), u32>,
    pub yes: BTreeSet<(usize, usize)>,
}

impl Ribbon {
    /// Compresses ambient labels to `0..v` (sorted order) as labeled data.
    pub fn to_data(&self) -> ShapeData {
        let labels: Vec<usize> = self.v.iter().copied().collect();
        let index = |x: usize| labels.binary_search(&x).expect("label outside ribbon");
        let edges: Vec<_> = self
            .e
            .iter()
            .map(|(&(a, b), &m)| (index(a), index(b), m))
            .collect();
        let yes: Vec<_> = self.yes.iter().map(|&(a, b)| (index(a), index(b))).collect();
        ShapeData::new(
            labels.len(),
            self.a.iter().map(|&x| index(x)).collect(),
            self.b.iter().map(|&x| index(x)).collect(),
            &edges,
            &yes,
        )
    }

    pub fn shape(&self) -> Result<Shape, ShapeError> {
        canonicalize(&self.to_data())
    }
}

// ───────────────────────── composition ─────────────────────────

/// Glues consecutive pieces along `w_i = u_{i+1}` (entrywise), keeping
/// duplicated edges with multiplicity. Returns the glued labeled data and
/// the per-piece maps from piece labels to glued labels.
pub fn glue(pieces: &[ShapeData]) -> Result<(ShapeData, Vec<Vec<usize>>), ShapeError> {
    assert!(!pieces.is_empty(), "glue needs at least one piece");
    for p in pieces {
        p.validate()?;
    }
    let mut maps: Vec<Vec<usize>> = Vec::with_capacity(pieces.len());
    let mut total = 0usize;
    for (i, piece) in pieces.iter().enumerate() {
        let mut map = vec![usize::MAX; piece.v];
        if i > 0 {
            let prev = &pieces[i - 1];
            if prev.w.len() != piece.u.len() {
                return Err(ShapeError::NotComposable(i - 1, i));
            }
            for (j, &x) in piece.u.iter().enumerate() {
                map[x] = maps[i - 1][prev.w[j]];
            }
        }
        for x in 0..piece.v {
            if map[x] == usize::MAX {
                map[x] = total;
                total += 1;
            }
        }
        maps.push(map);
    }
    let mut edges: Vec<(usize, usize, u32)> = Vec::new();
    let mut yes: Vec<(usize, usize)> = Vec::new();
    for (piece, map) in pieces.iter().zip(&maps) {
        for &(a, b, m) in &piece.edges {
            edges.push((map[a], map[b], m));
        }
        for &(a, b) in &piece.yes {
            let (a, b) = norm_pair(map[a], map[b]);
            yes.push((a, b));
        }
    }
    let glued = ShapeData::new(
        total,
        pieces[0].u.iter().map(|&x| maps[0][x]).collect(),
        pieces[pieces.len() - 1]
            .w
            .iter()
            .map(|&x| maps[pieces.len() - 1][x])
            .collect(),
        &edges,
        &yes,
    );
    Ok((glued, maps))
}

/// Composition of shapes: glue, then canonicalize.
pub fn compose(pieces: &[ShapeData]) -> Result<Shape, ShapeError> {
    let (glued, _) = glue(pieces)?;
    canonicalize(&glued)
}

// ───────────────────────── intersection patterns ─────────────────────────

/// A way the embeddings of composed pieces can collide: a partition of the
/// glued vertex set in which no block holds two vertices of the same piece
/// (shared boundary vertices belong to both adjacent pieces).
#[derive(Debug, Clone)]
pub struct IntersectionPattern {
    pub pieces: Vec<ShapeData>,
    pub piece_maps: Vec<Vec<usize>>,
    pub glued: ShapeData,
    /// Blocks of glued labels, each sorted; blocks sorted by minimum.
    pub blocks: Vec<Vec<usize>>,
}

impl IntersectionPattern {
    pub fn is_trivial(&self) -> bool {
        self.blocks.iter().all(|b| b.len() == 1)
    }

    /// Glued label → block index.
    pub fn block_of(&self) -> Vec<usize> {
        let mut of = vec![0; self.glued.v];
        for (i, block) in self.blocks.iter().enumerate() {
            for &x in block {
                of[x] = i;
            }
        }
        of
    }

    /// Per piece: local vertices lying in blocks of size ≥ 2.
    pub fn v_intersected(&self) -> Vec<Vec<usize>> {
        let of = self.block_of();
        self.piece_maps
            .iter()
            .map(|map| {
                (0..map.len())
                    .filter(|&x| self.blocks[of[map[x]]].len() >= 2)
                    .collect()
            })
            .collect()
    }

    /// Number of vertices lost to identification: Σ (|block| − 1).
    pub fn intersections(&self) -> usize {
        self.glued.v - self.blocks.len()
    }
}

/// Piece-membership mask per glued vertex (shared boundaries → two bits).
fn membership(glued_v: usize, maps: &[Vec<usize>]) -> Vec<u32> {
    let mut mask = vec![0u32; glued_v];
    for (i, map) in maps.iter().enumerate() {
        for &g in map {
            mask[g] |= 1 << i;
        }
    }
    mask
}

/// All intersection patterns of a composable list, on labeled
/// representatives (no symmetry quotienting), so that the matrix identity
/// `M_{α_1}···M_{α_k} = Σ_P M_{α_P}` holds literally term by term.
pub fn enumerate_intersection_patterns(
    pieces: &[ShapeData],
) -> Result<Vec<IntersectionPattern>, ShapeError> {
    let (glued, maps) = glue(pieces)?;
    if glued.v > CANON_VMAX {
        return Err(ShapeError::SizeCap("glued vertices", glued.v));
    }
    let mask = membership(glued.v, &maps);
    let mut out = Vec::new();
    let mut blocks: Vec<(Vec<usize>, u32)> = Vec::new();
    grow_blocks(0, glued.v, &mask, &mut blocks, &mut |blocks| {
        out.push(IntersectionPattern {
            pieces: pieces.to_vec(),
            piece_maps: maps.clone(),
            glued: glued.clone(),
            blocks: blocks.iter().map(|(b, _)| b.clone()).collect(),
        });
    });
    Ok(out)
}

fn grow_blocks(
    x: usize,
    v: usize,
    mask: &[u32],
    blocks: &mut Vec<(Vec<usize>, u32)>,
    sink: &mut impl FnMut(&Vec<(Vec<usize>, u32)>),
) {
    if x == v {
        sink(blocks);
        return;
    }
    for i in 0..blocks.len() {
        if blocks[i].1 & mask[x] == 0 {
            blocks[i].0.push(x);
            blocks[i].1 |= mask[x];
            grow_blocks(x + 1, v, mask, blocks, sink);
            blocks[i].1 &= !mask[x];
            blocks[i].0.pop();
        }
    }
    blocks.push((vec![x], mask[x]));
    grow_blocks(x + 1, v, mask, blocks, sink);
    blocks.pop();
}

/// Contracts the blocks of a pattern: vertices in a block are identified,
/// all edges kept with multiplicity, boundary tuples inherited from the
/// outer pieces. The trivial pattern returns the plain composition.
pub fn apply_pattern(pat: &IntersectionPattern) -> ShapeData {
    let of = pat.block_of();
    let edges: Vec<_> = pat
        .glued
        .edges
        .iter()
        .map(|&(a, b, m)| (of[a], of[b], m))
        .collect();
    let yes: Vec<_> = pat.glued.yes.iter().map(|&(a, b)| (of[a], of[b])).collect();
    ShapeData::new(
        pat.blocks.len(),
        pat.glued.u.iter().map(|&x| of[x]).collect(),
        pat.glued.w.iter().map(|&x| of[x]).collect(),
        &edges,
        &yes,
    )
}

// ───────────────────────── linearization ─────────────────────────

/// What happened to one edge during linearization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeOutcome {
    pub pair: (usize, usize),
    pub mult: u32,
    pub indicator: bool,
    /// True when the constant branch was taken (edge disappears).
    pub vanished: bool,
}

/// One term of a linearization: coefficient ledger, resulting multilinear
/// data (same labels as the input), and the per-multiedge outcomes.
#[derive(Debug, Clone)]
pub struct LinearizedTerm {
    pub coeff: AtomLedger,
    pub data: ShapeData,
    pub outcomes: Vec<EdgeOutcome>,
}

/// Expands every multiedge of `data` exactly:
///
/// * plain `χ^m` (m ≥ 2) splits into `E[χ^m]·1 + E[χ^{m+1}]·χ`;
/// * indicated `1_e·χ^m` (m ≥ 1) collapses to `χ(present)^{m−1}·1_e·χ`
///   and never vanishes.
///
/// Resulting terms are multilinear (all multiplicities ≤ 1); indicators and
/// freshly isolated vertices are retained.
pub fn linearize(data: &ShapeData) -> Result<Vec<LinearizedTerm>, ShapeError> {
    let yes: BTreeSet<(usize, usize)> = data.yes.iter().copied().collect();
    // Edges needing work, in sorted order.
    let mut work: Vec<(usize, usize, u32, bool)> = Vec::new();
    for &(a, b, m) in &data.edges {
        if m > MULT_CAP {
            return Err(ShapeError::MultiplicityCap(m));
        }
        let ind = yes.contains(&(a, b));
        if m >= 2 || (ind && m >= 1) {
            work.push((a, b, m, ind));
        }
    }
    let mut terms = vec![LinearizedTerm {
        coeff: AtomLedger::one(),
        data: data.clone(),
        outcomes: Vec::new(),
    }];
    for &(a, b, m, ind) in &work {
        let mut next = Vec::with_capacity(terms.len() * 2);
        for t in &terms {
            if ind {
                // 1_e χ^m = χ(present)^{m−1} · 1_e χ
                let mut kept = t.clone();
                kept.coeff.mul_atom(Atom::SqrtOneMinusPOverP, m as i64 - 1);
                set_mult(&mut kept.data, (a, b), 1);
                kept.outcomes.push(EdgeOutcome {
                    pair: (a, b),
                    mult: m,
                    indicator: true,
                    vanished: false,
                });
                next.push(kept);
            } else {
                // χ^m = E[χ^m] + E[χ^{m+1}] χ
                let mut gone = t.clone();
                gone.coeff.mul_atom(Atom::MomentChi(m), 1);
                set_mult(&mut gone.data, (a, b), 0);
                gone.outcomes.push(EdgeOutcome {
                    pair: (a, b),
                    mult: m,
                    indicator: false,
                    vanished: true,
                });
                next.push(gone);
                let mut kept = t.clone();
                kept.coeff.mul_atom(Atom::MomentChi(m + 1), 1);
                set_mult(&mut kept.data, (a, b), 1);
                kept.outcomes.push(EdgeOutcome {
                    pair: (a, b),
                    mult: m,
                    indicator: false,
                    vanished: false,
                });
                next.push(kept);
            }
        }
        terms = next;
    }
    Ok(terms)
}

fn set_mult(data: &mut ShapeData, pair: (usize, usize), m: u32) {
    data.edges.retain(|&(a, b, _)| (a, b) != pair);
    if m > 0 {
        data.edges.push((pair.0, pair.1, m));
        data.edges.sort_unstable();
    }
}

// ───────────────────────── enumeration ─────────────────────────

/// Constraints for [`enumerate_shapes`].
#[derive(Debug, Clone, Copy)]
pub struct ShapeConstraints {
    pub v_max: usize,
    pub e_max: usize,
    pub u_max: usize,
    pub w_max: usize,
    /// Keep shapes with isolated interior vertices (improper but useful).
    pub allow_isolated: bool,
}

/// All proper-edged shapes (simple edges, no indicators) within the
/// constraints, one per canonical class, sorted by certificate.
///
/// Generation enumerates boundary overlap patterns in the forced canonical
/// labeling, then edge subsets, then dedups by certificate; interior-label
/// symmetry is collapsed by canonicalization.
pub fn enumerate_shapes(c: &ShapeConstraints) -> Result<Vec<Shape>, ShapeError> {
    if c.v_max > 8 {
        return Err(ShapeError::SizeCap("v_max", c.v_max));
    }
    let mut seen: BTreeMap<Vec<u8>, Shape> = BTreeMap::new();
    for v in 0..=c.v_max {
        for a in 0..=c.u_max.min(v) {
            let u: Vec<usize> = (0..a).collect();
            for w in boundary_patterns(a, v, c.w_max) {
                let pairs: Vec<(usize, usize)> =
                    (0..v).flat_map(|y| (0..y).map(move |x| (x, y))).collect();
                let mut chosen: Vec<(usize, usize)> = Vec::new();
                edge_subsets(&pairs, 0, c.e_max, &mut chosen, &mut |edges| {
                    let data = ShapeData::simple(v, u.clone(), w.clone(), edges);
                    if !c.allow_isolated && data.iso_count() > 0 {
                        return;
                    }
                    let shape = canonicalize(&data).expect("generated data is valid");
                    seen.entry(shape.cert.clone()).or_insert(shape);
                });
            }
        }
    }
    Ok(seen.into_values().collect())
}

/// Right-boundary tuples in forced labeling: entries are either existing
/// left-boundary labels `0..a` or fresh labels `a, a+1, …` in first-use
/// order; total labels used must not exceed `v`.
fn boundary_patterns(a: usize, v: usize, w_max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    fn rec(a: usize, v: usize, w_max: usize, fresh: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        if cur.len() == w_max {
            return;
        }
        for x in 0..a {
            if !cur.contains(&x) {
                cur.push(x);
                rec(a, v, w_max, fresh, cur, out);
                cur.pop();
            }
        }
        if a + fresh < v {
            cur.push(a + fresh);
            rec(a, v, w_max, fresh + 1, cur, out);
            cur.pop();
        }
    }
    rec(a, v, w_max, 0, &mut cur, &mut out);
    out
}

fn edge_subsets(
    pairs: &[(usize, usize)],
    from: usize,
    budget: usize,
    chosen: &mut Vec<(usize, usize)>,
    sink: &mut impl FnMut(&[(usize, usize)]),
) {
    sink(chosen);
    if budget == 0 {
        return;
    }
    for i in from..pairs.len() {
        chosen.push(pairs[i]);
        edge_subsets(pairs, i + 1, budget - 1, chosen, sink);
        chosen.pop();
    }
}

/// Counts canonical shape classes whose left boundary equals the given
/// diagonal exactly — same tuple and the same induced edge set inside it —
/// bucketed by the number of edges outside that induced set.
///
/// `dia` must be a diagonal shape in forced labeling: `u = w = (0, …, m−1)`
/// with `v = m`, simple edges, no indicators. The universe counted is every
/// proper-edged shape with at most `v_max` vertices, right boundary of length
/// at most `b_max`, no isolated interior vertex, left boundary tuple
/// `(0, …, m−1)`, and induced left-boundary edges exactly `E(dia)`; boundary
/// vertices may be isolated and the right boundary may carry edges. The map
/// sends each outside-edge count that occurs to its class count.
pub fn left_boundary_census(
    dia: &ShapeData,
    v_max: usize,
    b_max: usize,
) -> Result<BTreeMap<usize, u64>, ShapeError> {
    dia.validate()?;
    let m = dia.v;
    let forced: Vec<usize> = (0..m).collect();
    if dia.u != forced || dia.w != forced || !dia.is_proper() {
        return Err(ShapeError::BadLabels(
            "census boundary must be a proper diagonal in forced labeling".into(),
        ));
    }
    if v_max > 8 {
        return Err(ShapeError::SizeCap("v_max", v_max));
    }
    if m > v_max || m > b_max {
        return Err(ShapeError::SizeCap("boundary length", m));
    }
    let fixed: Vec<(usize, usize)> = dia.edges.iter().map(|&(x, y, _)| (x, y)).collect();
    let mut buckets: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for v in m..=v_max {
        for w in boundary_patterns(m, v, b_max) {
            let pairs: Vec<(usize, usize)> = (0..v)
                .flat_map(|y| (0..y).map(move |x| (x, y)))
                .filter(|&(_, y)| y >= m)
                .collect();
            let mut chosen: Vec<(usize, usize)> = Vec::new();
            edge_subsets(&pairs, 0, pairs.len(), &mut chosen, &mut |extra| {
                let mut all = fixed.clone();
                all.extend_from_slice(extra);
                let data = ShapeData::simple(v, forced.clone(), w.clone(), &all);
                if data.iso_count() > 0 {
                    return;
                }
                let outside = extra.len();
                let shape = canonicalize(&data).expect("generated data is valid");
                buckets.entry(shape.cert).or_insert(outside);
            });
        }
    }
    let mut out: BTreeMap<usize, u64> = BTreeMap::new();
    for (_, e) in buckets {
        *out.entry(e).or_insert(0) += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::chi;
    use std::collections::HashMap;

    fn path2(u_label: usize, mid: usize, w_label: usize) -> ShapeData {
        ShapeData::simple(
            3,
            vec![u_label],
            vec![w_label],
            &[(u_label, mid), (mid, w_label)],
        )
    }

    #[test]
    fn canonicalize_identifies_relabelings() {
        let a = canonicalize(&path2(0, 1, 2)).unwrap();
        let b = canonicalize(&path2(2, 0, 1)).unwrap();
        let c = canonicalize(&path2(1, 2, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let s = canonicalize(&path2(2, 0, 1)).unwrap();
        let again = canonicalize(&s.data).unwrap();
        assert_eq!(s.cert, again.cert);
        assert_eq!(s.data, again.data);
    }

    #[test]
    fn transpose_of_asymmetric_shape_differs() {
        // pendant edge hanging off the left boundary only
        let s = ShapeData::simple(2, vec![0], vec![], &[(0, 1)]);
        let a = canonicalize(&s).unwrap();
        let b = canonicalize(&s.transpose()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn interchangeable_interior_vertices_collapse() {
        // u–m1–w and u–m2–w with both interior orders
        let s1 = ShapeData::simple(4, vec![0], vec![1], &[(0, 2), (2, 1), (0, 3), (3, 1)]);
        let s2 = ShapeData::simple(4, vec![0], vec![1], &[(0, 3), (3, 1), (0, 2), (2, 1)]);
        assert_eq!(canonicalize(&s1).unwrap(), canonicalize(&s2).unwrap());
    }

    #[test]
    fn automorphisms_fix_boundary_pointwise() {
        let edge = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        assert_eq!(automorphism_count(&edge).unwrap(), 1);
        // twin interior vertices
        let twins = ShapeData::simple(4, vec![0], vec![1], &[(0, 2), (2, 1), (0, 3), (3, 1)]);
        assert_eq!(automorphism_count(&twins).unwrap(), 2);
    }

    /// Counts distinct ribbons of a shape at ambient size n by brute force.
    fn ribbons_at(data: &ShapeData, n: usize) -> (usize, usize) {
        let mut ribbons = BTreeSet::new();
        let mut embeddings = 0;
        for images in (0..n).permutations(data.v) {
            embeddings += 1;
            ribbons.insert(embed(data, &images));
        }
        (embeddings, ribbons.len())
    }

    #[test]
    fn embeddings_equal_aut_times_ribbons() {
        let p2 = path2(0, 1, 2);
        let (emb, rib) = ribbons_at(&p2, 6);
        assert_eq!(emb, 6 * 5 * 4);
        assert_eq!(automorphism_count(&p2).unwrap() as usize * rib, emb);

        let twins = ShapeData::simple(4, vec![0], vec![1], &[(0, 2), (2, 1), (0, 3), (3, 1)]);
        let (emb, rib) = ribbons_at(&twins, 6);
        assert_eq!(emb, 6 * 5 * 4 * 3);
        assert_eq!(automorphism_count(&twins).unwrap() as usize * rib, emb);
    }

    #[test]
    fn aut_consistency_for_all_small_shapes() {
        let shapes = enumerate_shapes(&ShapeConstraints {
            v_max: 3,
            e_max: 3,
            u_max: 2,
            w_max: 2,
            allow_isolated: true,
        })
        .unwrap();
        for s in &shapes {
            let (emb, rib) = ribbons_at(&s.data, 5);
            assert_eq!(
                automorphism_count(&s.data).unwrap() as usize * rib,
                emb,
                "shape {:?}",
                s.data
            );
        }
    }

    #[test]
    fn compose_glues_boundaries() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let composed = compose(&[e1.clone(), e1.clone()]).unwrap();
        let expect = canonicalize(&path2(0, 1, 2)).unwrap();
        assert_eq!(composed, expect);
    }

    #[test]
    fn compose_with_trivial_diagonal_is_identity() {
        let id = ShapeData::simple(1, vec![0], vec![0], &[]);
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        assert_eq!(compose(&[id.clone(), e1.clone()]).unwrap(), canonicalize(&e1).unwrap());
        assert_eq!(compose(&[e1.clone(), id]).unwrap(), canonicalize(&e1).unwrap());
    }

    #[test]
    fn compose_duplicates_boundary_edges_with_multiplicity() {
        // both pieces carry the edge inside the shared 2-vertex boundary
        let left = ShapeData::simple(2, vec![0], vec![0, 1], &[(0, 1)]);
        let right = ShapeData::simple(2, vec![0, 1], vec![1], &[(0, 1)]);
        let (glued, _) = glue(&[left, right]).unwrap();
        assert_eq!(glued.edges, vec![(0, 1, 2)]);
    }

    #[test]
    fn compose_rejects_mismatched_boundaries() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let wide = ShapeData::simple(3, vec![0, 1], vec![2], &[(0, 2), (1, 2)]);
        match compose(&[e1, wide]) {
            Err(ShapeError::NotComposable(0, 1)) => {}
            other => panic!("expected composition error, got {other:?}"),
        }
    }

    #[test]
    fn two_edges_have_two_patterns() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let pats = enumerate_intersection_patterns(&[e1.clone(), e1]).unwrap();
        assert_eq!(pats.len(), 2);
        let nontrivial: Vec<_> = pats.iter().filter(|p| !p.is_trivial()).collect();
        assert_eq!(nontrivial.len(), 1);
        // {u,w} merged: contracted shape has 2 vertices and a double edge
        let contracted = apply_pattern(nontrivial[0]);
        assert_eq!(contracted.v, 2);
        assert_eq!(contracted.edges, vec![(0, 1, 2)]);
        assert_eq!(contracted.u, contracted.w);
    }

    #[test]
    fn single_shape_has_one_pattern() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let pats = enumerate_intersection_patterns(&[e1]).unwrap();
        assert_eq!(pats.len(), 1);
        assert!(pats[0].is_trivial());
    }

    /// Independent partition counter used as an oracle: plain recursion on
    /// membership masks with no pattern construction.
    fn count_partitions(mask: &[u32]) -> usize {
        fn rec(x: usize, mask: &[u32], blocks: &mut Vec<u32>) -> usize {
            if x == mask.len() {
                return 1;
            }
            let mut total = 0;
            for i in 0..blocks.len() {
                if blocks[i] & mask[x] == 0 {
                    blocks[i] |= mask[x];
                    total += rec(x + 1, mask, blocks);
                    blocks[i] &= !mask[x];
                }
            }
            blocks.push(mask[x]);
            total += rec(x + 1, mask, blocks);
            blocks.pop();
            total
        }
        rec(0, mask, &mut Vec::new())
    }

    #[test]
    fn pattern_count_matches_oracle_for_three_edges() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let pieces = vec![e1.clone(), e1.clone(), e1];
        let pats = enumerate_intersection_patterns(&pieces).unwrap();
        let (glued, maps) = glue(&pieces).unwrap();
        let mask = membership(glued.v, &maps);
        assert_eq!(pats.len(), count_partitions(&mask));
    }

    #[test]
    fn pattern_count_matches_oracle_for_paths() {
        let p2 = path2(0, 1, 2);
        let pieces = vec![p2.clone(), p2];
        let pats = enumerate_intersection_patterns(&pieces).unwrap();
        let (glued, maps) = glue(&pieces).unwrap();
        let mask = membership(glued.v, &maps);
        assert_eq!(pats.len(), count_partitions(&mask));
        // every pattern respects the constraint
        for pat in &pats {
            for block in &pat.blocks {
                for (i, map) in pat.piece_maps.iter().enumerate() {
                    let inside = map.iter().filter(|g| block.contains(g)).count();
                    assert!(inside <= 1, "block {block:?} repeats piece {i}");
                }
            }
        }
    }

    #[test]
    fn merging_interior_into_boundary_keeps_boundary() {
        let p2 = path2(0, 1, 2);
        let pieces = vec![p2.clone(), p2];
        let pats = enumerate_intersection_patterns(&pieces).unwrap();
        // find the pattern merging the second path's interior into the first
        // path's left boundary vertex (glued labels: 0=u, 1=mid1, 2=shared, 3=mid2, 4=w)
        let pat = pats
            .iter()
            .find(|p| p.intersections() == 1 && p.blocks.iter().any(|b| b == &vec![0, 3]))
            .expect("pattern present");
        let contracted = apply_pattern(pat);
        assert_eq!(contracted.v, pat.glued.v - 1);
        assert_eq!(contracted.u.len(), 1);
        assert_eq!(contracted.w.len(), 1);
    }

    /// Evaluates labeled data on an explicit edge-bit assignment.
    fn eval_data(data: &ShapeData, bits: &HashMap<(usize, usize), bool>, p: f64) -> f64 {
        let mut v = 1.0;
        for &(a, b) in &data.yes {
            if !bits[&(a, b)] {
                return 0.0;
            }
        }
        for &(a, b, m) in &data.edges {
            v *= chi(bits[&(a, b)], p).powi(m as i32);
        }
        v
    }

    #[test]
    fn linearize_chi_squared_values() {
        let sq = ShapeData::new(2, vec![0], vec![1], &[(0, 1, 2)], &[]);
        let terms = linearize(&sq).unwrap();
        assert_eq!(terms.len(), 2);
        let constant = terms.iter().find(|t| t.data.edges.is_empty()).unwrap();
        let edge = terms.iter().find(|t| !t.data.edges.is_empty()).unwrap();
        // p = 1/2: E[χ²] = 1, E[χ³] = 0
        assert!((constant.coeff.value(0.5, 0.5, 0.3) - 1.0).abs() < 1e-12);
        assert!(edge.coeff.value(0.5, 0.5, 0.3).abs() < 1e-12);
        // p = 1/4: E[χ³] = (1−2p)/√(p(1−p)) = 2/√3
        let c = edge.coeff.value(0.25, 0.25, 0.3);
        assert!((c - 2.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn linearize_indicated_multiedge_never_vanishes() {
        let sq = ShapeData::new(2, vec![0], vec![1], &[(0, 1, 2)], &[(0, 1)]);
        let terms = linearize(&sq).unwrap();
        assert_eq!(terms.len(), 1);
        let t = &terms[0];
        assert_eq!(t.data.edges, vec![(0, 1, 1)]);
        assert_eq!(t.data.yes, vec![(0, 1)]);
        assert!(!t.outcomes[0].vanished);
        let p = 0.3;
        assert!((t.coeff.value(p, p, 0.3) - ((1.0 - p) / p).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn linearization_is_value_exact() {
        // every improper shape on ≤3 vertices from a small generator:
        // multiplicities 0..3 on each of the ≤3 pairs, optional indicator
        let pairs = [(0, 1), (0, 2), (1, 2)];
        for m0 in 0..4u32 {
            for m1 in 0..4u32 {
                for m2 in 0..4u32 {
                    for ind in 0..8usize {
                        let mults = [m0, m1, m2];
                        let edges: Vec<_> = pairs
                            .iter()
                            .zip(mults)
                            .filter(|(_, m)| *m > 0)
                            .map(|(&(a, b), m)| (a, b, m))
                            .collect();
                        let yes: Vec<_> = pairs
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| ind >> i & 1 == 1)
                            .map(|(_, &pr)| pr)
                            .collect();
                        let data = ShapeData::new(3, vec![0], vec![1], &edges, &yes);
                        let terms = linearize(&data).unwrap();
                        for t in &terms {
                            assert!(t.data.edges.iter().all(|&(_, _, m)| m <= 1));
                        }
                        for bits_code in 0..8usize {
                            let bits: HashMap<_, _> = pairs
                                .iter()
                                .enumerate()
                                .map(|(i, &pr)| (pr, bits_code >> i & 1 == 1))
                                .collect();
                            for &p in &[0.25f64, 0.5] {
                                let lhs = eval_data(&data, &bits, p);
                                let rhs: f64 = terms
                                    .iter()
                                    .map(|t| t.coeff.value(p, p, 0.3) * eval_data(&t.data, &bits, p))
                                    .sum();
                                assert!(
                                    (lhs - rhs).abs() < 1e-12,
                                    "mults {mults:?} ind {ind} bits {bits_code} p {p}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn moment_coefficient_bound_holds() {
        // |E[χ^k]| ≤ ((1−p)/p)^{(k−2)/2} for every k the tables cover
        for &p in &[0.1f64, 0.25, 0.5] {
            for k in 2..=MULT_CAP + 1 {
                let bound = ((1.0 - p) / p).powf((k as f64 - 2.0) / 2.0);
                assert!(crate::fourier::moment_chi(k, p).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn enumerate_single_vertex_shapes_matches_hand_list() {
        let shapes = enumerate_shapes(&ShapeConstraints {
            v_max: 1,
            e_max: 0,
            u_max: 1,
            w_max: 1,
            allow_isolated: true,
        })
        .unwrap();
        let hand = [
            ShapeData::simple(0, vec![], vec![], &[]),
            ShapeData::simple(1, vec![], vec![], &[]),
            ShapeData::simple(1, vec![0], vec![], &[]),
            ShapeData::simple(1, vec![], vec![0], &[]),
            ShapeData::simple(1, vec![0], vec![0], &[]),
        ];
        let expect: BTreeSet<Vec<u8>> = hand
            .iter()
            .map(|d| canonicalize(d).unwrap().cert)
            .collect();
        let got: BTreeSet<Vec<u8>> = shapes.iter().map(|s| s.cert.clone()).collect();
        assert_eq!(got, expect);
        assert_eq!(shapes.len(), 5);
    }

    #[test]
    fn enumeration_matches_naive_generator() {
        // independent oracle: all labeled graphs on ≤3 vertices with every
        // ordered boundary pair, canonicalized and deduped
        let mut naive: BTreeSet<Vec<u8>> = BTreeSet::new();
        for v in 0..=3usize {
            let pairs: Vec<(usize, usize)> =
                (0..v).flat_map(|y| (0..y).map(move |x| (x, y))).collect();
            for code in 0..1usize << pairs.len() {
                let edges: Vec<_> = pairs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| code >> i & 1 == 1)
                    .map(|(_, &pr)| pr)
                    .collect();
                for u in tuples(v) {
                    for w in tuples(v) {
                        let data = ShapeData::simple(v, u.clone(), w, &edges);
                        naive.insert(canonicalize(&data).unwrap().cert);
                    }
                }
            }
        }
        let fast = enumerate_shapes(&ShapeConstraints {
            v_max: 3,
            e_max: 3,
            u_max: 3,
            w_max: 3,
            allow_isolated: true,
        })
        .unwrap();
        let got: BTreeSet<Vec<u8>> = fast.iter().map(|s| s.cert.clone()).collect();
        assert_eq!(got, naive);
        // duplicate-free by construction of the set; also check pairwise on list
        assert_eq!(fast.len(), got.len());
    }

    /// All ordered tuples of distinct labels from 0..v (any length).
    fn tuples(v: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for len in 1..=v {
            for t in (0..v).permutations(len) {
                out.push(t);
            }
        }
        out
    }

    #[test]
    fn compose_is_associative() {
        let e1 = ShapeData::simple(2, vec![0], vec![1], &[(0, 1)]);
        let p2 = path2(0, 1, 2);
        let left = compose(&[compose(&[e1.clone(), p2.clone()]).unwrap().data, e1.clone()]).unwrap();
        let right = compose(&[e1.clone(), compose(&[p2, e1]).unwrap().data]).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn census_single_vertex_boundary_hand_count() {
        // Universe v ≤ 3, right boundary ≤ 1, left tuple (0). By hand:
        // 0 edges: lone boundary vertex with w ∈ {(), (0)}, plus the two-vertex
        //   shape with both vertices on the boundary → 3 classes.
        // 1 edge: three two-vertex shapes with the edge, one hanging edge per
        //   choice of w ∈ {(), (0)}, and two one-edge shapes over w = (1) → 7.
        // 2 edges: two classes each for w ∈ {(), (0)} and three for w = (1) → 7.
        // 3 edges: one triangle per w → 3.
        let dia = ShapeData::simple(1, vec![0], vec![0], &[]);
        let counts = left_boundary_census(&dia, 3, 1).unwrap();
        let want: BTreeMap<usize, u64> = [(0, 3), (1, 7), (2, 7), (3, 3)].into_iter().collect();
        assert_eq!(counts, want);
    }

    #[test]
    fn census_empty_boundary_hand_count() {
        // Universe v ≤ 2, right boundary ≤ 1: the empty shape and the lone
        // right-boundary vertex have no edges; one interior edge can hang with
        // w = () or w = (0).
        let dia = ShapeData::simple(0, vec![], vec![], &[]);
        let counts = left_boundary_census(&dia, 2, 1).unwrap();
        let want: BTreeMap<usize, u64> = [(0, 2), (1, 2)].into_iter().collect();
        assert_eq!(counts, want);
    }

    #[test]
    fn census_agrees_with_filtered_enumeration() {
        let dia = ShapeData::simple(1, vec![0], vec![0], &[]);
        let counts = left_boundary_census(&dia, 3, 1).unwrap();
        let pool = enumerate_shapes(&ShapeConstraints {
            v_max: 3,
            e_max: 3,
            u_max: 1,
            w_max: 1,
            allow_isolated: false,
        })
        .unwrap();
        let mut want: BTreeMap<usize, u64> = BTreeMap::new();
        for shape in pool {
            if shape.data.u == vec![0] {
                *want.entry(shape.data.edges.len()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts, want);
    }

    #[test]
    fn census_rejects_non_diagonal_boundary() {
        let not_diag = ShapeData::simple(1, vec![0], vec![], &[]);
        assert!(matches!(
            left_boundary_census(&not_diag, 3, 1),
            Err(ShapeError::BadLabels(_))
        ));
    }
}
