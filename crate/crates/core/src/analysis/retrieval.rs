//! Cross-modal retrieval over banks of shared or specific embedding halves.

use std::fmt;

use crate::error::{Error, Result};
use crate::inference::modality_matrix;
use crate::diffcalc::Graph;
use crate::model::ModelState;
use crate::synthgen::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankPart {
    Shared,
    Specific,
}

impl fmt::Display for BankPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BankPart::Shared => "shared",
            BankPart::Specific => "specific",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub modality: usize,
    pub part: BankPart,
}

impl FeatureBank {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, modality: usize, part: BankPart) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "bank has {} features but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(Error::Dimension("bank features have mixed widths".into()));
            }
        }
        Ok(Self {
            features,
            labels,
            modality,
            part,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gallery indices ordered by descending cosine similarity; ties keep the
/// lower index first.
fn ranking(query: &[f64], gallery: &FeatureBank) -> Vec<usize> {
    let sims: Vec<f64> = gallery.features.iter().map(|g| cosine(query, g)).collect();
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of queries with at least one same-label item among their `k`
/// nearest gallery entries.
pub fn retrieval_recall_at_k(query: &FeatureBank, gallery: &FeatureBank, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if gallery.is_empty() || query.is_empty() {
        return Err(Error::Contract("retrieval needs non-empty query and gallery banks".into()));
    }
    if let (Some(q), Some(g)) = (query.features.first(), gallery.features.first()) {
        if q.len() != g.len() {
            return Err(Error::Dimension(format!(
                "query width {} vs gallery width {}",
                q.len(),
                g.len()
            )));
        }
    }
    let k = if k > gallery.len() {
        log::warn!("k={k} exceeds gallery size {}; clamping", gallery.len());
        gallery.len()
    } else {
        k
    };
    let hits = query
        .features
        .iter()
        .zip(&query.labels)
        .filter(|(q, &label)| ranking(q, gallery)[..k].iter().any(|&i| gallery.labels[i] == label))
        .count();
    Ok(hits as f64 / query.len() as f64)
}

/// Shared and specific banks of one modality over `data`.
pub fn feature_banks(state: &ModelState, data: &[Sample], modality: usize) -> Result<(FeatureBank, FeatureBank)> {
    if modality >= state.num_modalities() {
        return Err(Error::Index(format!("modality {modality} out of range")));
    }
    let (mut shared, mut specific) = (Vec::new(), Vec::new());
    for chunk in data.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = state.bind(&mut g, |_| false);
        let x = g.constant(modality_matrix(&refs, modality)?);
        let e = state.encode(&mut g, &b, modality, x)?;
        let h = state.dims.embed_half;
        for row in g.value(e).rows() {
            let v = row.to_vec();
            shared.push(v[..h].to_vec());
            specific.push(v[h..].to_vec());
        }
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    Ok((
        FeatureBank::new(shared, labels.clone(), modality, BankPart::Shared)?,
        FeatureBank::new(specific, labels, modality, BankPart::Specific)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRow {
    pub query_modality: usize,
    pub gallery_modality: usize,
    pub part: BankPart,
    pub k: usize,
    pub recall: f64,
}

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// R@1/5/10 for shared and specific banks, in both directions between
/// modalities `a` and `b`.
pub fn retrieval_report(state: &ModelState, data: &[Sample], a: usize, b: usize) -> Result<Vec<RetrievalRow>> {
    let (sa, pa) = feature_banks(state, data, a)?;
    let (sb, pb) = feature_banks(state, data, b)?;
    let mut rows = Vec::new();
    for (q, g) in [(&sa, &sb), (&pa, &pb), (&sb, &sa), (&pb, &pa)] {
        for k in REPORT_KS {
            rows.push(RetrievalRow {
                query_modality: q.modality,
                gallery_modality: g.modality,
                part: q.part,
                k,
                recall: retrieval_recall_at_k(q, g, k)?,
            });
        }
    }
    Ok(rows)
}

/// Table-style text: one line per (direction, part) with R@1, R@5, R@10.
pub fn format_retrieval(rows: &[RetrievalRow], names: &[String]) -> String {
    let mut s = String::from("query -> gallery  part      R@1     R@5     R@10\n");
    for group in rows.chunks(REPORT_KS.len()) {
        let r = &group[0];
        let name = |k: usize| names.get(k).cloned().unwrap_or_else(|| k.to_string());
        s += &format!(
            "{} -> {}  {:<8}",
            name(r.query_modality),
            name(r.gallery_modality),
            r.part.to_string()
        );
        for x in group {
            s += &format!("  {:.4}", x.recall);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(f: Vec<Vec<f64>>, l: Vec<usize>) -> FeatureBank {
        FeatureBank::new(f, l, 0, BankPart::Shared).unwrap()
    }

    #[test]
    fn self_match_is_perfect() {
        let f = vec![vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, -0.5]];
        let b = bank(f, vec![0, 1, 2]);
        assert_eq!(retrieval_recall_at_k(&b, &b, 1).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_perfect() {
        let q = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![3, 3]);
        let g = bank(vec![vec![-1.0, 0.0], vec![0.3, 0.3], vec![0.0, -2.0]], vec![3, 3, 3]);
        for k in 1..=3 {
            assert_eq!(retrieval_recall_at_k(&q, &g, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn orthogonal_prototypes() {
        let q = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let g = bank(vec![vec![2.0, 0.0], vec![0.0, 3.0]], vec![0, 1]);
        assert_eq!(retrieval_recall_at_k(&q, &g, 1).unwrap(), 1.0);
        let swapped = bank(vec![vec![2.0, 0.0], vec![0.0, 3.0]], vec![1, 0]);
        assert_eq!(retrieval_recall_at_k(&q, &swapped, 1).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_the_lower_gallery_index() {
        let q = bank(vec![vec![1.0, 0.0]], vec![1]);
        let g = bank(vec![vec![1.0, 0.0], vec![2.0, 0.0]], vec![0, 1]);
        assert_eq!(retrieval_recall_at_k(&q, &g, 1).unwrap(), 0.0);
        assert_eq!(retrieval_recall_at_k(&q, &g, 2).unwrap(), 1.0);
    }

    #[test]
    fn k_is_clamped_and_zero_rejected() {
        let q = bank(vec![vec![1.0, 0.0]], vec![1]);
        let g = bank(vec![vec![0.0, 1.0], vec![1.0, 1.0]], vec![0, 1]);
        assert_eq!(retrieval_recall_at_k(&q, &g, 50).unwrap(), 1.0);
        assert!(matches!(retrieval_recall_at_k(&q, &g, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn bank_invariants() {
        assert!(FeatureBank::new(vec![vec![1.0]], vec![], 0, BankPart::Specific).is_err());
        assert!(FeatureBank::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 0], 0, BankPart::Specific).is_err());
    }
}
