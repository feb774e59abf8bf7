//! Sparse-weight vertex separators: exhaustive minimum-weight enumeration,
//! the leftmost/rightmost structure family, left/middle/right classification,
//! the canonical three-piece ribbon decomposition, and the instance-dependent
//! densest weight.
//!
//! Separation convention: a path from `A` to `B` meets every vertex it
//! contains, endpoints included, and a zero-length path from a vertex to
//! itself meets that vertex. Consequently `A ∩ B` is forced inside every
//! separator, and a boundary set always separates itself from anything.
//! Connectivity runs over the union of edge supports and indicator pairs.

use std::collections::BTreeSet;
use std::fmt;

use num::BigInt;

use crate::graph::Graph;
use crate::params::Rat;
use crate::shapes::{Ribbon, ShapeData, ShapeError};

/// Hard cap on vertex count for exhaustive separator enumeration.
pub const SEPARATOR_VMAX: usize = 12;

/// A weight of the form `vertices − edges·β`, compared exactly at rational β.
///
/// For the plain weight, `edges` counts distinct pairs inside the set; for
/// the instance-dependent densest weight it is a net count (present minus
/// absent) and may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightExpr {
    pub vertices: i64,
    pub edges: i64,
}

impl WeightExpr {
    pub fn value_at(&self, beta: &Rat) -> Rat {
        Rat::from_integer(BigInt::from(self.vertices))
            - beta * Rat::from_integer(BigInt::from(self.edges))
    }
}

impl fmt::Display for WeightExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} - {}·β", self.vertices, self.edges)
    }
}

/// Every minimum-weight separator of a boundary pair, together with the
/// leftmost/rightmost members and the structural family they generate: the
/// separators left of every separator are exactly the unions of a common
/// core with disjoint blocks.
#[derive(Debug, Clone)]
pub struct SeparatorReport {
    /// Weight expression of the leftmost separator.
    pub min_weight: WeightExpr,
    /// Common minimal weight value of every listed separator.
    pub min_value: Rat,
    /// All minimum-weight separators, sorted by size then contents.
    pub all_smvs: Vec<BTreeSet<usize>>,
    pub leftmost: BTreeSet<usize>,
    pub rightmost: BTreeSet<usize>,
    /// Intersection of the left-of-everyone family (equals `leftmost`).
    pub core: BTreeSet<usize>,
    /// Minimal nonempty differences over the core within that family.
    pub blocks: Vec<BTreeSet<usize>>,
}

/// Left/middle/right status of a shape. The flags are not exclusive:
/// a trivial diagonal shape satisfies all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    /// The vertex set of the right boundary is the unique SMVS.
    pub left: bool,
    /// Left boundary is the leftmost SMVS and right boundary the rightmost.
    pub middle: bool,
    /// The vertex set of the left boundary is the unique SMVS.
    pub right: bool,
}

impl Classification {
    pub fn neither(&self) -> bool {
        !(self.left || self.middle || self.right)
    }
}

/// Minimizer of the instance-dependent densest weight over separators.
#[derive(Debug, Clone)]
pub struct DensestReport {
    /// Minimizing separator, in the ribbon's ambient labels.
    pub separator: BTreeSet<usize>,
    pub expr: WeightExpr,
    pub value: Rat,
}

// ───────────────────────── internal bit-mask engine ─────────────────────────

/// Precomputed connectivity for one shape: adjacency masks over the union of
/// edge supports and indicator pairs, plus the distinct pair list used by the
/// weight function.
struct SepSpace {
    adj: Vec<u32>,
    pairs: Vec<(usize, usize)>,
}

impl SepSpace {
    fn new(data: &ShapeData) -> Self {
        let mut pairs: BTreeSet<(usize, usize)> =
            data.edges.iter().map(|&(a, b, _)| (a, b)).collect();
        pairs.extend(data.yes.iter().copied());
        let mut adj = vec![0u32; data.v];
        for &(a, b) in &pairs {
            adj[a] |= 1 << b;
            adj[b] |= 1 << a;
        }
        SepSpace {
            adj,
            pairs: pairs.into_iter().collect(),
        }
    }

    /// Vertices reachable from `start ∖ blocked` without entering `blocked`.
    fn flood(&self, start: u32, blocked: u32) -> u32 {
        let mut reach = start & !blocked;
        loop {
            let mut next = reach;
            let mut rest = reach;
            while rest != 0 {
                let i = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                next |= self.adj[i] & !blocked;
            }
            if next == reach {
                return reach;
            }
            reach = next;
        }
    }

    /// Does `s` meet every path from `a` to `b`, zero-length paths included?
    fn separates(&self, a: u32, b: u32, s: u32) -> bool {
        if a & b & !s != 0 {
            return false;
        }
        self.flood(a, s) & b & !s == 0
    }

    fn weight_of(&self, s: u32) -> WeightExpr {
        let inside = self
            .pairs
            .iter()
            .filter(|&&(a, b)| s & (1 << a) != 0 && s & (1 << b) != 0)
            .count();
        WeightExpr {
            vertices: i64::from(s.count_ones()),
            edges: inside as i64,
        }
    }
}

fn mask_of(set: &BTreeSet<usize>) -> u32 {
    set.iter().fold(0u32, |m, &x| m | (1 << x))
}

fn set_of(mask: u32) -> BTreeSet<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

fn check_size(data: &ShapeData) -> Result<(), ShapeError> {
    data.validate()?;
    if data.v > SEPARATOR_VMAX {
        return Err(ShapeError::SizeCap("separator vertices", data.v));
    }
    Ok(())
}

/// Raw mask-level report; structural violations surface as `Err` strings so
/// the verifier can report them, while the public constructors treat them as
/// broken invariants.
struct RawReport {
    smvs: Vec<u32>,
    left_family: Vec<u32>,
    right_family: Vec<u32>,
    leftmost: u32,
    rightmost: u32,
    core: u32,
    blocks: Vec<u32>,
    min_value: Rat,
    space: SepSpace,
}

fn raw_between(
    data: &ShapeData,
    a_mask: u32,
    b_mask: u32,
    beta: &Rat,
) -> Result<RawReport, String> {
    let space = SepSpace::new(data);
    let mut best: Option<Rat> = None;
    let mut smvs: Vec<u32> = Vec::new();
    for s in 0..(1u32 << data.v) {
        if !space.separates(a_mask, b_mask, s) {
            continue;
        }
        let value = space.weight_of(s).value_at(beta);
        match &best {
            Some(b) if value > *b => {}
            Some(b) if value == *b => smvs.push(s),
            _ => {
                best = Some(value);
                smvs = vec![s];
            }
        }
    }
    let min_value = best.expect("the left boundary always separates itself from anything");
    smvs.sort_by_key(|&s| (s.count_ones(), s));

    let left_family: Vec<u32> = smvs
        .iter()
        .copied()
        .filter(|&m| smvs.iter().all(|&t| space.separates(a_mask, t, m)))
        .collect();
    if left_family.is_empty() {
        return Err("no separator is left of every minimum-weight separator".into());
    }
    let min_size = left_family.iter().map(|m| m.count_ones()).min().unwrap();
    let smallest: Vec<u32> = left_family
        .iter()
        .copied()
        .filter(|m| m.count_ones() == min_size)
        .collect();
    if smallest.len() != 1 {
        return Err(format!(
            "{} minimum-size members in the left-of-everyone family",
            smallest.len()
        ));
    }
    let leftmost = smallest[0];
    let core = left_family.iter().fold(!0u32, |acc, &m| acc & m);

    let diffs: BTreeSet<u32> = left_family
        .iter()
        .map(|&m| m & !core)
        .filter(|&d| d != 0)
        .collect();
    let blocks: Vec<u32> = diffs
        .iter()
        .copied()
        .filter(|&d| !diffs.iter().any(|&o| o != d && o & d == o))
        .collect();

    let right_family: Vec<u32> = smvs
        .iter()
        .copied()
        .filter(|&m| smvs.iter().all(|&t| space.separates(t, b_mask, m)))
        .collect();
    if right_family.is_empty() {
        return Err("no separator is right of every minimum-weight separator".into());
    }
    let min_size = right_family.iter().map(|m| m.count_ones()).min().unwrap();
    let smallest: Vec<u32> = right_family
        .iter()
        .copied()
        .filter(|m| m.count_ones() == min_size)
        .collect();
    if smallest.len() != 1 {
        return Err(format!(
            "{} minimum-size members in the right-of-everyone family",
            smallest.len()
        ));
    }
    let rightmost = smallest[0];

    Ok(RawReport {
        smvs,
        left_family,
        right_family,
        leftmost,
        rightmost,
        core,
        blocks,
        min_value,
        space,
    })
}

impl RawReport {
    fn into_report(self, beta: &Rat) -> SeparatorReport {
        SeparatorReport {
            min_weight: self.space.weight_of(self.leftmost),
            min_value: self.min_value.clone(),
            all_smvs: self.smvs.iter().map(|&s| set_of(s)).collect(),
            leftmost: set_of(self.leftmost),
            rightmost: set_of(self.rightmost),
            core: set_of(self.core),
            blocks: self.blocks.iter().map(|&b| set_of(b)).collect(),
        }
        .tap_check(beta)
    }
}

impl SeparatorReport {
    fn tap_check(self, beta: &Rat) -> SeparatorReport {
        debug_assert_eq!(self.min_weight.value_at(beta), self.min_value);
        self
    }
}

// ───────────────────────── public operations ─────────────────────────

/// `(|S|, edges inside S)` where a pair counts once regardless of
/// multiplicity, indicators included.
pub fn weight(data: &ShapeData, s: &BTreeSet<usize>) -> WeightExpr {
    SepSpace::new(data).weight_of(mask_of(s))
}

/// Does `s` separate `a` from `b` in the shape's connectivity graph?
pub fn is_separator(
    data: &ShapeData,
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    s: &BTreeSet<usize>,
) -> bool {
    SepSpace::new(data).separates(mask_of(a), mask_of(b), mask_of(s))
}

/// Minimum-weight separators between arbitrary vertex sets, with the
/// leftmost/rightmost structure relative to `(a, b)`.
pub fn smvs_between(
    data: &ShapeData,
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    beta: &Rat,
) -> Result<SeparatorReport, ShapeError> {
    check_size(data)?;
    for &x in a.iter().chain(b.iter()) {
        if x >= data.v {
            return Err(ShapeError::BadLabels(format!(
                "boundary vertex {x} outside 0..{}",
                data.v
            )));
        }
    }
    let raw = raw_between(data, mask_of(a), mask_of(b), beta)
        .expect("separator structure invariant violated");
    Ok(raw.into_report(beta))
}

/// Minimum-weight separators between the shape's own boundaries.
pub fn all_min_weight_separators(
    data: &ShapeData,
    beta: &Rat,
) -> Result<SeparatorReport, ShapeError> {
    let a: BTreeSet<usize> = data.u.iter().copied().collect();
    let b: BTreeSet<usize> = data.w.iter().copied().collect();
    smvs_between(data, &a, &b, beta)
}

/// Left/middle/right classification from the separator report.
pub fn classify(data: &ShapeData, beta: &Rat) -> Result<Classification, ShapeError> {
    let report = all_min_weight_separators(data, beta)?;
    let u_set: BTreeSet<usize> = data.u.iter().copied().collect();
    let v_set: BTreeSet<usize> = data.w.iter().copied().collect();
    Ok(Classification {
        left: report.all_smvs.len() == 1 && report.all_smvs[0] == v_set,
        middle: report.leftmost == u_set && report.rightmost == v_set,
        right: report.all_smvs.len() == 1 && report.all_smvs[0] == u_set,
    })
}

/// Checks the structure of the left-of-everyone family. In general the
/// family is a ring of sets — closed under union and intersection — whose
/// least element is the leftmost separator; every member is the core plus an
/// increment of unchanged weight. When the minimal increments are pairwise
/// disjoint and generate the whole family (the generic case), the family is
/// the Boolean lattice of block unions and no edge runs between two blocks.
/// Non-Boolean families exist: with boundaries {0,1} on both sides and edges
/// {02, 03, 12, 23} at β = 1/2 the family is a three-element chain, which no
/// disjoint blocks generate. Violations come back as `Err` descriptions.
pub fn verify_family_structure(
    data: &ShapeData,
    beta: &Rat,
) -> Result<SeparatorReport, String> {
    check_size(data).map_err(|e| e.to_string())?;
    let a_mask = mask_of(&data.u.iter().copied().collect());
    let b_mask = mask_of(&data.w.iter().copied().collect());
    let raw = raw_between(data, a_mask, b_mask, beta)?;

    for &m in &raw.left_family {
        for &t in &raw.left_family {
            if !raw.left_family.contains(&(m & t)) {
                return Err("left family is not closed under intersection".into());
            }
            if !raw.left_family.contains(&(m | t)) {
                return Err("left family is not closed under union".into());
            }
        }
    }
    if !raw.left_family.contains(&raw.core) {
        return Err("core is not itself in the left family".into());
    }
    if raw.leftmost != raw.core {
        return Err("leftmost member differs from the family intersection".into());
    }
    for &m in &raw.left_family {
        let value = raw.space.weight_of(m).value_at(beta);
        if value != raw.min_value {
            return Err("family member weight differs from the minimum".into());
        }
    }

    let k = raw.blocks.len();
    let disjoint = raw
        .blocks
        .iter()
        .enumerate()
        .all(|(i, &x)| raw.blocks.iter().skip(i + 1).all(|&y| x & y == 0));
    if disjoint && k <= 20 && raw.left_family.len() == (1usize << k) {
        for &b in &raw.blocks {
            if !raw.left_family.contains(&(raw.core | b)) {
                return Err("core plus a single block is missing from the family".into());
            }
            let with = raw.space.weight_of(raw.core | b).value_at(beta);
            if with != raw.min_value {
                return Err("adding a block to the core changes the weight".into());
            }
        }
        for &(a, b) in &raw.space.pairs {
            let block_a = raw.blocks.iter().position(|&x| x & (1 << a) != 0);
            let block_b = raw.blocks.iter().position(|&x| x & (1 << b) != 0);
            if let (Some(x), Some(y)) = (block_a, block_b) {
                if x != y {
                    return Err(format!("edge ({a}, {b}) runs between two blocks"));
                }
            }
        }
    }

    let right_core = raw.right_family.iter().fold(!0u32, |acc, &m| acc & m);
    if raw.rightmost != right_core {
        return Err("rightmost member differs from the right-family intersection".into());
    }
    if raw.space.weight_of(raw.rightmost).value_at(beta) != raw.min_value {
        return Err("rightmost weight differs from the minimum".into());
    }
    Ok(raw.into_report(beta))
}

// ───────────────────────── ribbon decomposition ─────────────────────────

/// Splits a ribbon across its leftmost and rightmost SMVS into left, middle,
/// and right ribbons. The cut edges (and indicators) inside each SMVS appear
/// in both pieces sharing that boundary; [`recompose`] strips the outer
/// copies, so floating components and cut edges are contributed by the
/// middle. Boundary tuples of the cuts are ordered by ascending label.
pub fn decompose_ribbon(
    r: &Ribbon,
    beta: &Rat,
) -> Result<(Ribbon, Ribbon, Ribbon), ShapeError> {
    let data = r.to_data();
    check_size(&data)?;
    let labels: Vec<usize> = r.v.iter().copied().collect();
    let report = all_min_weight_separators(&data, beta)?;

    let space = SepSpace::new(&data);
    let a_mask = mask_of(&data.u.iter().copied().collect());
    let b_mask = mask_of(&data.w.iter().copied().collect());
    let sl = mask_of(&report.leftmost);
    let sr = mask_of(&report.rightmost);
    let left_reach = space.flood(a_mask, sl);
    let right_reach = space.flood(b_mask, sr);
    assert_eq!(
        left_reach & right_reach,
        0,
        "strictly-left and strictly-right regions overlap"
    );
    assert_eq!(sl & (left_reach | right_reach), 0);
    assert_eq!(sr & (left_reach | right_reach), 0);
    let full = if data.v == 32 { !0 } else { (1u32 << data.v) - 1 };
    let middle = full & !left_reach & !right_reach;

    let pick =
        |m: u32| -> BTreeSet<usize> { set_of(m).iter().map(|&i| labels[i]).collect() };
    let boundary_tuple =
        |m: u32| -> Vec<usize> { set_of(m).iter().map(|&i| labels[i]).collect() };

    let mut e1: Vec<((usize, usize), u32)> = Vec::new();
    let mut e2: Vec<((usize, usize), u32)> = Vec::new();
    let mut e3: Vec<((usize, usize), u32)> = Vec::new();
    for (&(x, y), &m) in &r.e {
        let xm = 1u32 << labels.binary_search(&x).unwrap();
        let ym = 1u32 << labels.binary_search(&y).unwrap();
        let both = xm | ym;
        if both & left_reach != 0 {
            e1.push(((x, y), m));
        } else if both & right_reach != 0 {
            e3.push(((x, y), m));
        } else {
            e2.push(((x, y), m));
            if both & !sl == 0 {
                e1.push(((x, y), m));
            }
            if both & !sr == 0 {
                e3.push(((x, y), m));
            }
        }
    }
    let mut y1: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut y2: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut y3: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(x, y) in &r.yes {
        let xm = 1u32 << labels.binary_search(&x).unwrap();
        let ym = 1u32 << labels.binary_search(&y).unwrap();
        let both = xm | ym;
        if both & left_reach != 0 {
            y1.insert((x, y));
        } else if both & right_reach != 0 {
            y3.insert((x, y));
        } else {
            y2.insert((x, y));
            if both & !sl == 0 {
                y1.insert((x, y));
            }
            if both & !sr == 0 {
                y3.insert((x, y));
            }
        }
    }

    let left = Ribbon {
        a: r.a.clone(),
        b: boundary_tuple(sl),
        v: pick(left_reach | sl),
        e: e1.into_iter().collect(),
        yes: y1,
    };
    let mid = Ribbon {
        a: boundary_tuple(sl),
        b: boundary_tuple(sr),
        v: pick(middle),
        e: e2.into_iter().collect(),
        yes: y2,
    };
    let right = Ribbon {
        a: boundary_tuple(sr),
        b: r.b.clone(),
        v: pick(right_reach | sr),
        e: e3.into_iter().collect(),
        yes: y3,
    };
    Ok((left, mid, right))
}

/// Removes edges and indicators with both endpoints in `cut`.
fn strip(r: &Ribbon, cut: &BTreeSet<usize>) -> Ribbon {
    let inside = |x: usize, y: usize| cut.contains(&x) && cut.contains(&y);
    Ribbon {
        a: r.a.clone(),
        b: r.b.clone(),
        v: r.v.clone(),
        e: r
            .e
            .iter()
            .filter(|(&(x, y), _)| !inside(x, y))
            .map(|(&p, &m)| (p, m))
            .collect(),
        yes: r.yes.iter().filter(|&&(x, y)| !inside(x, y)).copied().collect(),
    }
}

/// Composes the three pieces of [`decompose_ribbon`] back into one ribbon,
/// after stripping the left piece's copy of its right-boundary edges and the
/// right piece's copy of its left-boundary edges.
pub fn recompose(l: &Ribbon, m: &Ribbon, r: &Ribbon) -> Result<Ribbon, ShapeError> {
    if l.b != m.a {
        return Err(ShapeError::NotComposable(0, 1));
    }
    if m.b != r.a {
        return Err(ShapeError::NotComposable(1, 2));
    }
    let l = strip(l, &l.b.iter().copied().collect());
    let r = strip(r, &r.a.iter().copied().collect());
    let mut e = l.e.clone();
    for (&p, &mult) in m.e.iter().chain(r.e.iter()) {
        *e.entry(p).or_insert(0) += mult;
    }
    Ok(Ribbon {
        a: l.a.clone(),
        b: r.b.clone(),
        v: l.v.iter().chain(m.v.iter()).chain(r.v.iter()).copied().collect(),
        e,
        yes: l
            .yes
            .iter()
            .chain(m.yes.iter())
            .chain(r.yes.iter())
            .copied()
            .collect(),
    })
}

// ───────────────────────── densest weight ─────────────────────────

/// Minimizes `|S| − β·(present pairs in S) + β·(absent pairs in S)` over
/// separators of the ribbon's boundaries, where presence is judged in `g`.
/// Ties break toward the lexicographically smallest vertex set. Also checks
/// the stability property: deleting an absent pair inside the minimizer from
/// the ribbon leaves it a minimizer.
pub fn densest_weight(r: &Ribbon, g: &Graph, beta: &Rat) -> Result<DensestReport, ShapeError> {
    let report = densest_inner(r, g, beta)?;
    let sep = &report.separator;
    let data = r.to_data();
    let labels: Vec<usize> = r.v.iter().copied().collect();
    let pairs = SepSpace::new(&data).pairs;
    for &(i, j) in &pairs {
        let (x, y) = (labels[i], labels[j]);
        if !(sep.contains(&x) && sep.contains(&y)) || g.has(x, y) {
            continue;
        }
        let mut reduced = r.clone();
        reduced.e.remove(&(x, y));
        reduced.yes.remove(&(x, y));
        let again = densest_inner(&reduced, g, beta)?;
        let still = densest_value_of(&reduced, g, beta, sep);
        assert_eq!(
            still, again.value,
            "minimizer over ({x}, {y})-reduced ribbon moved away from {sep:?}"
        );
    }
    Ok(report)
}

fn densest_value_of(r: &Ribbon, g: &Graph, beta: &Rat, sep: &BTreeSet<usize>) -> Rat {
    let data = r.to_data();
    let labels: Vec<usize> = r.v.iter().copied().collect();
    let space = SepSpace::new(&data);
    let mask = sep
        .iter()
        .map(|x| labels.binary_search(x).expect("separator outside ribbon"))
        .fold(0u32, |m, i| m | (1 << i));
    densest_expr(&space, mask, &labels, g).value_at(beta)
}

fn densest_expr(space: &SepSpace, s: u32, labels: &[usize], g: &Graph) -> WeightExpr {
    let mut net = 0i64;
    for &(i, j) in &space.pairs {
        if s & (1 << i) != 0 && s & (1 << j) != 0 {
            net += if g.has(labels[i], labels[j]) { 1 } else { -1 };
        }
    }
    WeightExpr {
        vertices: i64::from(s.count_ones()),
        edges: net,
    }
}

fn densest_inner(r: &Ribbon, g: &Graph, beta: &Rat) -> Result<DensestReport, ShapeError> {
    let data = r.to_data();
    check_size(&data)?;
    let labels: Vec<usize> = r.v.iter().copied().collect();
    let space = SepSpace::new(&data);
    let a_mask = mask_of(&data.u.iter().copied().collect());
    let b_mask = mask_of(&data.w.iter().copied().collect());
    let mut best: Option<(Rat, BTreeSet<usize>, WeightExpr)> = None;
    for s in 0..(1u32 << data.v) {
        if !space.separates(a_mask, b_mask, s) {
            continue;
        }
        let expr = densest_expr(&space, s, &labels, g);
        let value = expr.value_at(beta);
        let ambient: BTreeSet<usize> = set_of(s).iter().map(|&i| labels[i]).collect();
        let better = match &best {
            None => true,
            Some((v, sep, _)) => value < *v || (value == *v && ambient < *sep),
        };
        if better {
            best = Some((value, ambient, expr));
        }
    }
    let (value, separator, expr) =
        best.expect("the left boundary always separates itself from anything");
    Ok(DensestReport {
        separator,
        expr,
        value,
    })
}
