//! Exact entropies and mutual information of discrete joints, and the
//! information-gap experiment comparing the best cross-entropy achievable
//! from perfectly aligned features against the best from raw inputs.
//!
//! Aligned features mean every modality is mapped to the same value:
//! `g_1(x_1) = ... = g_M(x_M)` on the support. Such a common encoding is a
//! function of the connected component of the tuple in the graph linking
//! values that co-occur, so the search runs over groupings of components.
//! Only deterministic encodings are searched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::synthgen::DiscreteJoint;

/// Default cap on the number of support tuples the gap experiment accepts.
pub const DEFAULT_TUPLE_LIMIT: usize = 16;

/// Above this many components the grouping search is skipped and the finest
/// grouping (always optimal) is used directly.
const SEARCH_COMPONENT_LIMIT: usize = 10;

fn check(joint: &DiscreteJoint) -> Result<()> {
    if !joint.is_normalized() {
        return Err(Error::Contract("joint distribution is not normalized".into()));
    }
    Ok(())
}

fn check_vars(joint: &DiscreteJoint, vars: &[usize]) -> Result<()> {
    let w = joint.target_index() + 1;
    if let Some(v) = vars.iter().find(|&&v| v >= w) {
        return Err(Error::Index(format!("variable {v} out of range for {w} coordinates")));
    }
    Ok(())
}

fn marginal(joint: &DiscreteJoint, vars: &[usize]) -> BTreeMap<Vec<usize>, f64> {
    let mut m = BTreeMap::new();
    for (t, &p) in joint.support.iter().zip(&joint.probs) {
        let key: Vec<usize> = vars.iter().map(|&v| t[v]).collect();
        *m.entry(key).or_insert(0.0) += p;
    }
    m
}

fn entropy_of(m: &BTreeMap<Vec<usize>, f64>) -> f64 {
    m.values().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Joint entropy of the listed coordinates, in nats.
pub fn entropy(joint: &DiscreteJoint, vars: &[usize]) -> Result<f64> {
    check(joint)?;
    check_vars(joint, vars)?;
    Ok(entropy_of(&marginal(joint, vars)))
}

/// `H(a | b)` in nats.
pub fn conditional_entropy(joint: &DiscreteJoint, a: &[usize], b: &[usize]) -> Result<f64> {
    let ab: Vec<usize> = a.iter().chain(b).copied().collect();
    Ok((entropy(joint, &ab)? - entropy(joint, b)?).max(0.0))
}

/// `I(a; b)` in nats, by direct enumeration of `sum p log(p / (p_a p_b))`.
pub fn mutual_information(joint: &DiscreteJoint, a: &[usize], b: &[usize]) -> Result<f64> {
    check(joint)?;
    check_vars(joint, a)?;
    check_vars(joint, b)?;
    let ab: Vec<usize> = a.iter().chain(b).copied().collect();
    let pab = marginal(joint, &ab);
    let pa = marginal(joint, a);
    let pb = marginal(joint, b);
    let mut mi = 0.0;
    for (key, &p) in &pab {
        if p > 0.0 {
            let (ka, kb) = key.split_at(a.len());
            mi += p * (p / (pa[ka] * pb[kb])).ln();
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoGapReport {
    /// `I(x_i; y)` per modality, nats.
    pub mi_per_modality: Vec<f64>,
    pub delta_p: f64,
    pub aligned_optimal_ce: f64,
    pub unconstrained_optimal_ce: f64,
    pub gap: f64,
    /// Connected components of the co-occurrence graph.
    pub components: usize,
    /// Common encodings scored by the search (0 when it was skipped).
    pub encodings_searched: usize,
}

impl InfoGapReport {
    pub fn satisfies_bound(&self, tol: f64) -> bool {
        self.gap >= self.delta_p - tol
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = i;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Component index of every positive-mass tuple; tuples sharing any modality
/// value are in one component. Components are numbered by first appearance.
pub fn common_components(joint: &DiscreteJoint) -> Vec<Option<usize>> {
    let m = joint.num_modalities();
    let live: Vec<usize> = (0..joint.probs.len()).filter(|&i| joint.probs[i] > 0.0).collect();
    let mut uf = UnionFind((0..joint.probs.len()).collect());
    for k in 0..m {
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &live {
            let v = joint.support[i][k];
            match first.get(&v) {
                Some(&j) => uf.union(i, j),
                None => {
                    first.insert(v, i);
                }
            }
        }
    }
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = vec![None; joint.probs.len()];
    for &i in &live {
        let root = uf.find(i);
        let next = ids.len();
        out[i] = Some(*ids.entry(root).or_insert(next));
    }
    out
}

/// `H(y | E)` where `E = group[component]`.
fn ce_of_grouping(joint: &DiscreteJoint, comp: &[Option<usize>], group: &[usize]) -> f64 {
    let y = joint.target_index();
    let mut pe: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pey: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, c) in comp.iter().enumerate() {
        if let Some(c) = c {
            let e = group[*c];
            let p = joint.probs[i];
            *pe.entry(e).or_insert(0.0) += p;
            *pey.entry((e, joint.support[i][y])).or_insert(0.0) += p;
        }
    }
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let hey: f64 = pey.values().map(|&p| h(p)).sum();
    let he: f64 = pe.values().map(|&p| h(p)).sum();
    (hey - he).max(0.0)
}

/// Visit every set partition of `0..n` as a restricted growth string.
fn for_each_partition(n: usize, mut f: impl FnMut(&[usize])) {
    if n == 0 {
        f(&[]);
        return;
    }
    let mut a = vec![0usize; n];
    let mut max = vec![0usize; n];
    loop {
        f(&a);
        let mut i = n - 1;
        loop {
            if i == 0 {
                return;
            }
            if a[i] <= max[i - 1] {
                a[i] += 1;
                let m = max[i - 1].max(a[i]);
                max[i] = m;
                for j in i + 1..n {
                    a[j] = 0;
                    max[j] = m;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Best cross-entropy from perfectly aligned features: the minimum of
/// `H(y | E)` over deterministic common encodings `E`. Returns the value and
/// the number of encodings scored.
pub fn aligned_optimal_ce(joint: &DiscreteJoint) -> Result<(f64, usize)> {
    check(joint)?;
    let comp = common_components(joint);
    let n = comp.iter().flatten().max().map_or(0, |c| c + 1);
    let finest: Vec<usize> = (0..n).collect();
    if n > SEARCH_COMPONENT_LIMIT {
        log::warn!("{n} components: using the finest common encoding without search");
        return Ok((ce_of_grouping(joint, &comp, &finest), 0));
    }
    let mut best = f64::INFINITY;
    let mut count = 0;
    for_each_partition(n, |group| {
        count += 1;
        best = best.min(ce_of_grouping(joint, &comp, group));
    });
    Ok((best, count))
}

pub fn alignment_gap_experiment(joint: &DiscreteJoint) -> Result<InfoGapReport> {
    alignment_gap_experiment_with_limit(joint, DEFAULT_TUPLE_LIMIT)
}

pub fn alignment_gap_experiment_with_limit(joint: &DiscreteJoint, limit: usize) -> Result<InfoGapReport> {
    check(joint)?;
    if joint.support.len() > limit {
        return Err(Error::Size(format!(
            "joint has {} tuples; the exact search accepts at most {limit}",
            joint.support.len()
        )));
    }
    let m = joint.num_modalities();
    let y = [joint.target_index()];
    let mi = (0..m)
        .map(|k| mutual_information(joint, &[k], &y))
        .collect::<Result<Vec<_>>>()?;
    let max = mi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = mi.iter().cloned().fold(f64::INFINITY, f64::min);
    let xs: Vec<usize> = (0..m).collect();
    let unconstrained = conditional_entropy(joint, &y, &xs)?;
    let (aligned, searched) = aligned_optimal_ce(joint)?;
    let components = common_components(joint).iter().flatten().max().map_or(0, |c| c + 1);
    Ok(InfoGapReport {
        mi_per_modality: mi,
        delta_p: max - min,
        aligned_optimal_ce: aligned,
        unconstrained_optimal_ce: unconstrained,
        gap: aligned - unconstrained,
        components,
        encodings_searched: searched,
    })
}

/// Text record with values in nats and bits.
pub fn format_info_gap(r: &InfoGapReport) -> String {
    let bits = |x: f64| x / std::f64::consts::LN_2;
    let mut s = String::new();
    for (k, v) in r.mi_per_modality.iter().enumerate() {
        s += &format!("mi.x{} = {v:.12} nats ({:.6} bits)\n", k + 1, bits(*v));
    }
    s += &format!("delta_p = {:.12} nats ({:.6} bits)\n", r.delta_p, bits(r.delta_p));
    s += &format!("aligned_optimal_ce = {:.12}\n", r.aligned_optimal_ce);
    s += &format!("unconstrained_optimal_ce = {:.12}\n", r.unconstrained_optimal_ce);
    s += &format!("gap = {:.12} nats ({:.6} bits)\n", r.gap, bits(r.gap));
    s += &format!("components = {}\nencodings_searched = {}\n", r.components, r.encodings_searched);
    s
}
