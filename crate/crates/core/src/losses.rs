//! Training objectives: supervised contrastive alignment of shared features,
//! the shared/specific distance term, cross-modal translation, classification
//! cross-entropy and their weighted total.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::diffcalc::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{row, Bound, ModelState};

/// Module switches: contrastive learning, feature splitting, distance loss,
/// cross-modal translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub contrastive: bool,
    pub feature_split: bool,
    pub distance: bool,
    pub translation: bool,
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            contrastive: true,
            feature_split: true,
            distance: true,
            translation: true,
        }
    }

    /// Classification loss only.
    pub const fn none() -> Self {
        Self {
            contrastive: false,
            feature_split: false,
            distance: false,
            translation: false,
        }
    }

    pub const fn new(cl: bool, fs: bool, dl: bool, ct: bool) -> Self {
        Self {
            contrastive: cl,
            feature_split: fs,
            distance: dl,
            translation: ct,
        }
    }

    /// The seven module combinations of the ablation grid, baseline first.
    pub fn ablation_rows() -> [Toggles; 7] {
        [
            Toggles::new(false, false, false, false),
            Toggles::new(true, false, false, false),
            Toggles::new(true, false, false, true),
            Toggles::new(true, true, false, false),
            Toggles::new(true, true, true, false),
            Toggles::new(false, true, true, true),
            Toggles::new(true, true, true, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.distance && !self.feature_split {
            return Err(Error::Config(
                "toggle contradiction: distance loss (DL) requires feature splitting (FS)".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.contrastive, "CL"),
            (self.feature_split, "FS"),
            (self.distance, "DL"),
            (self.translation, "CT"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", names.join("+"))
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Accepts `none`/`deepall`, `all`, or a `+`/`,`-separated subset of `CL FS DL CT`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "deepall" | "" => return Ok(Toggles::none()),
            "all" => return Ok(Toggles::all()),
            _ => {}
        }
        let mut t = Toggles::none();
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "CL" => t.contrastive = true,
                "FS" => t.feature_split = true,
                "DL" => t.distance = true,
                "CT" => t.translation = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown toggle `{other}`; valid toggles are CL, FS, DL, CT"
                    )))
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_con: f64,
    pub alpha_dis: f64,
    pub alpha_trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_con: 3.0,
            alpha_dis: 0.7,
            alpha_trans: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("alpha_con", self.alpha_con),
            ("alpha_dis", self.alpha_dis),
            ("alpha_trans", self.alpha_trans),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{n} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the distance term compares specific and shared halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    NegSqL2,
    NegL1,
    Cosine,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::NegSqL2 => "neg-sq-l2",
            DistanceKind::NegL1 => "neg-l1",
            DistanceKind::Cosine => "cosine",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "neg-sq-l2" | "l2" => Ok(DistanceKind::NegSqL2),
            "neg-l1" | "l1" => Ok(DistanceKind::NegL1),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::Config(format!(
                "unknown distance kind `{other}`; valid: neg-sq-l2, neg-l1, cosine"
            ))),
        }
    }
}

pub const COSINE_EPS: f64 = 1e-8;
const NORMALIZE_EPS: f64 = 1e-12;

/// Projected vectors of one step's `M x N` unimodal entries, sample-major:
/// entry `j * M + k` is modality `k` of sample `j`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: NodeId,
    pub labels: Vec<usize>,
    pub tau: f64,
}

/// Project each modality's features and interleave them sample-major.
///
/// `features[k]` is `N x width` for modality `k` (the shared halves with
/// feature splitting, the full embeddings without).
pub fn build_contrastive_batch(
    g: &mut Graph,
    bound: &Bound,
    state: &ModelState,
    features: &[NodeId],
    labels: &[usize],
    tau: f64,
) -> Result<ContrastiveBatch> {
    let m = features.len();
    let n = labels.len();
    if m == 0 || n == 0 {
        return Err(Error::Dimension("contrastive batch needs N >= 1 samples and M >= 1 modalities".into()));
    }
    if let Some(f) = features.iter().find(|f| g.shape(**f).0 != n) {
        return Err(Error::Dimension(format!(
            "contrastive batch: {n} labels but a modality has {} rows",
            g.shape(*f).0
        )));
    }
    let index: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..m).map(move |k| (k, j))).collect();
    let stacked = g.gather_rows(features, &index)?;
    let z = state.project(g, bound, stacked)?;
    let labels = (0..n).flat_map(|j| std::iter::repeat_n(labels[j], m)).collect();
    Ok(ContrastiveBatch { z, labels, tau })
}

/// Supervised contrastive loss summed over anchors:
///
/// `sum_i -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau) )`
///
/// with every `z` scaled to unit norm first. Anchors without a positive are
/// skipped with a warning.
pub fn supervised_contrastive_loss(g: &mut Graph, batch: &ContrastiveBatch) -> Result<NodeId> {
    if !(batch.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", batch.tau)));
    }
    let k = batch.labels.len();
    if g.shape(batch.z).0 != k {
        return Err(Error::Dimension(format!(
            "contrastive loss: {} rows but {k} labels",
            g.shape(batch.z).0
        )));
    }
    let positives: Vec<usize> = (0..k)
        .map(|i| (0..k).filter(|&p| p != i && batch.labels[p] == batch.labels[i]).count())
        .collect();
    let skipped = positives.iter().filter(|&&c| c == 0).count();
    if skipped > 0 {
        log::warn!("contrastive loss: {skipped} of {k} anchors have no positive and are skipped");
    }
    if skipped == k {
        return Ok(g.constant(Array2::zeros((1, 1))));
    }

    let zn = g.normalize_rows(batch.z, NORMALIZE_EPS);
    let znt = g.transpose(zn);
    let sim = g.matmul(zn, znt)?;
    let sim = g.scale(sim, 1.0 / batch.tau);

    let others = Array2::from_shape_fn((k, k), |(i, j)| i != j);
    let lse = g.logsumexp_rows(sim, Some(others))?;
    let active = Tensor::from_shape_fn((k, 1), |(i, _)| if positives[i] > 0 { 1.0 } else { 0.0 });
    let active = g.constant(active);
    let lse = g.mul(lse, active)?;
    let lse_total = g.sum(lse);

    let pos_weight = Tensor::from_shape_fn((k, k), |(i, p)| {
        if i != p && batch.labels[i] == batch.labels[p] {
            1.0 / positives[i] as f64
        } else {
            0.0
        }
    });
    let pos_weight = g.constant(pos_weight);
    let pos = g.mul(sim, pos_weight)?;
    let pos_total = g.sum(pos);
    g.sub(lse_total, pos_total)
}

/// Distance term over `(shared, specific)` pairs, one per modality, each
/// `N x D_E`. Averaged over modalities and samples; minimized in every variant.
pub fn distance_loss(g: &mut Graph, halves: &[(NodeId, NodeId)], kind: DistanceKind) -> Result<NodeId> {
    let m = halves.len();
    if m == 0 {
        return Err(Error::Contract("distance loss needs at least one modality".into()));
    }
    let n = g.shape(halves[0].0).0;
    let mut terms = Vec::with_capacity(m);
    for &(shared, specific) in halves {
        let t = match kind {
            DistanceKind::NegSqL2 => {
                let d = g.sq_l2(specific, shared)?;
                g.scale(d, -1.0)
            }
            DistanceKind::NegL1 => {
                let d = g.sub(specific, shared)?;
                let a = g.abs(d);
                let s = g.sum(a);
                g.scale(s, -1.0)
            }
            DistanceKind::Cosine => {
                let dot = g.mul(specific, shared)?;
                let dot = g.sum_cols(dot);
                let ss = g.mul(specific, specific)?;
                let ss = g.sum_cols(ss);
                let ns = g.sqrt(ss)?;
                let cc = g.mul(shared, shared)?;
                let cc = g.sum_cols(cc);
                let nc = g.sqrt(cc)?;
                let denom = g.mul(ns, nc)?;
                let denom = g.add_scalar(denom, COSINE_EPS);
                let cos = g.div(dot, denom)?;
                g.sum(cos)
            }
        };
        terms.push(t);
    }
    let total = sum_nodes(g, &terms)?;
    Ok(g.scale(total, 1.0 / (m * n) as f64))
}

/// Mean squared translation error over all ordered pairs `i != j` and samples.
/// Targets are not detached, so gradients reach the encoders too.
pub fn translation_loss(g: &mut Graph, bound: &Bound, state: &ModelState, embeddings: &[NodeId]) -> Result<NodeId> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::Contract(format!(
            "translation loss needs at least 2 modalities, got {m}"
        )));
    }
    let n = g.shape(embeddings[0]).0;
    let mut terms = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let t = state.translate(g, bound, i, j, embeddings[i])?;
            terms.push(g.sq_l2(t, embeddings[j])?);
        }
    }
    let total = sum_nodes(g, &terms)?;
    Ok(g.scale(total, 1.0 / (m * (m - 1) * n) as f64))
}

/// Mean cross-entropy of `N x C` logits against labels.
pub fn classification_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = g.shape(logits);
    if n != labels.len() {
        return Err(Error::Dimension(format!(
            "classification loss: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index(format!("label {y} out of range for {c} classes")));
    }
    let lse = g.logsumexp_rows(logits, None)?;
    let onehot = Tensor::from_shape_fn((n, c), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    let onehot = g.constant(onehot);
    let picked = g.mul(logits, onehot)?;
    let picked = g.sum_cols(picked);
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll))
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = *nodes
        .first()
        .ok_or_else(|| Error::Contract("empty sum".into()))?;
    for &t in &nodes[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Component nodes of one step's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: NodeId,
    pub con: Option<NodeId>,
    pub dis: Option<NodeId>,
    pub trans: Option<NodeId>,
}

/// `cls + a_con*con + a_dis*dis + a_trans*trans`, skipping disabled modules.
/// An enabled module must have its component present.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights, toggles: &Toggles) -> Result<NodeId> {
    let mut acc = parts.cls;
    for (on, part, alpha, name) in [
        (toggles.contrastive, parts.con, w.alpha_con, "contrastive"),
        (toggles.distance, parts.dis, w.alpha_dis, "distance"),
        (toggles.translation, parts.trans, w.alpha_trans, "translation"),
    ] {
        if !on {
            continue;
        }
        let node = part.ok_or_else(|| {
            Error::Contract(format!("{name} module enabled but its loss was not built"))
        })?;
        let weighted = g.scale(node, alpha);
        acc = g.add(acc, weighted)?;
    }
    Ok(acc)
}

/// Settings that shape one step's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub toggles: Toggles,
    pub weights: LossWeights,
    pub tau: f64,
    pub distance_kind: DistanceKind,
}

/// Scalar values of one evaluated objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub con: f64,
    pub dis: f64,
    pub trans: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: NodeId,
    pub parts: LossParts,
}

impl Objective {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |n: Option<NodeId>| n.map(|n| g.scalar(n)).unwrap_or(0.0);
        LossValues {
            total: g.scalar(self.total),
            cls: g.scalar(self.parts.cls),
            con: v(self.parts.con),
            dis: v(self.parts.dis),
            trans: v(self.parts.trans),
        }
    }
}

/// Build the full training objective for one batch. `inputs[k]` is the
/// `N x d_k` input matrix of modality `k`. Only enabled modules add nodes.
pub fn build_objective(
    g: &mut Graph,
    bound: &Bound,
    state: &ModelState,
    inputs: &[NodeId],
    labels: &[usize],
    spec: &ObjectiveSpec,
) -> Result<Objective> {
    let t = spec.toggles;
    t.validate()?;
    if t.feature_split != state.toggles.feature_split {
        return Err(Error::Config(
            "objective and model disagree on feature splitting".into(),
        ));
    }
    let mut full = Vec::with_capacity(inputs.len());
    for (k, &x) in inputs.iter().enumerate() {
        full.push(state.encode(g, bound, k, x)?);
    }
    let halves = if t.feature_split {
        full.iter()
            .map(|&e| state.split(g, e))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let logits = state.classify(g, bound, &full)?;
    let cls = classification_loss(g, logits, labels)?;
    let con = if t.contrastive {
        let feats: Vec<NodeId> = if t.feature_split {
            halves.iter().map(|h| h.0).collect()
        } else {
            full.clone()
        };
        let batch = build_contrastive_batch(g, bound, state, &feats, labels, spec.tau)?;
        Some(supervised_contrastive_loss(g, &batch)?)
    } else {
        None
    };
    let dis = if t.distance {
        Some(distance_loss(g, &halves, spec.distance_kind)?)
    } else {
        None
    };
    let trans = if t.translation {
        Some(translation_loss(g, bound, state, &full)?)
    } else {
        None
    };
    let parts = LossParts { cls, con, dis, trans };
    let total = total_loss(g, &parts, &spec.weights, &t)?;
    Ok(Objective { total, parts })
}

/// Contrastive loss of explicit vectors, for callers outside a graph.
pub fn contrastive_loss_of(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let rows: Vec<NodeId> = z.iter().map(|v| g.constant(row(v))).collect();
    let index: Vec<(usize, usize)> = (0..rows.len()).map(|r| (r, 0)).collect();
    let z = g.gather_rows(&rows, &index)?;
    let batch = ContrastiveBatch {
        z,
        labels: labels.to_vec(),
        tau,
    };
    let l = supervised_contrastive_loss(&mut g, &batch)?;
    Ok(g.scalar(l))
}
