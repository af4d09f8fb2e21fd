//! Test-time prediction with all modalities, with missing modalities replaced
//! by zeros, or with missing modalities imputed by the cross-modal translators.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::diffcalc::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::harness::optim::{adam_step, AdamConfig, AdamState};
use crate::losses::translation_loss;
use crate::model::{ModelState, ParamGroup};
use crate::synthgen::Sample;

/// Modalities absent at test time. Always leaves at least one available.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MissingMask {
    missing: BTreeSet<usize>,
}

impl MissingMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(missing: impl IntoIterator<Item = usize>, num_modalities: usize) -> Result<Self> {
        let missing: BTreeSet<usize> = missing.into_iter().collect();
        if let Some(&k) = missing.iter().find(|&&k| k >= num_modalities) {
            return Err(Error::Index(format!(
                "missing modality {k} out of range for {num_modalities} modalities"
            )));
        }
        if missing.len() >= num_modalities {
            return Err(Error::Contract("every modality is masked; nothing left to predict from".into()));
        }
        Ok(Self { missing })
    }

    /// Parse a comma-separated list of modality names, e.g. `video,flow`.
    pub fn parse(list: &str, names: &[String]) -> Result<Self> {
        let mut idx = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let k = names.iter().position(|n| n == part).ok_or_else(|| {
                Error::Config(format!("unknown modality `{part}`; known: {}", names.join(", ")))
            })?;
            idx.push(k);
        }
        Self::new(idx, names.len())
    }

    pub fn is_missing(&self, k: usize) -> bool {
        self.missing.contains(&k)
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing.iter().copied()
    }

    pub fn available(&self, num_modalities: usize) -> Vec<usize> {
        (0..num_modalities).filter(|k| !self.is_missing(*k)).collect()
    }

    pub fn names(&self, names: &[String]) -> String {
        let v: Vec<&str> = self.missing.iter().map(|&k| names[k].as_str()).collect();
        v.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalMode {
    Full,
    ZeroFill(MissingMask),
    Translated(MissingMask),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Full => write!(f, "full"),
            EvalMode::ZeroFill(_) => write!(f, "zero-fill"),
            EvalMode::Translated(_) => write!(f, "translate"),
        }
    }
}

/// `N x d_k` input matrix of modality `k`.
pub fn modality_matrix(samples: &[&Sample], k: usize) -> Result<Tensor> {
    let d = samples
        .first()
        .map(|s| s.modalities.get(k).map_or(0, Vec::len))
        .unwrap_or(0);
    let mut out = Tensor::zeros((samples.len(), d));
    for (r, s) in samples.iter().enumerate() {
        let x = s.modalities.get(k).filter(|x| x.len() == d).ok_or_else(|| {
            Error::Dimension(format!("sample {r}: modality {k} missing or not {d} wide"))
        })?;
        out.row_mut(r).assign(&ndarray::ArrayView1::from(x.as_slice()));
    }
    Ok(out)
}

/// Classifier logits (`N x C`) for a batch under `mode`. Inputs of masked
/// modalities are never read.
pub fn batch_logits(state: &ModelState, samples: &[&Sample], mode: &EvalMode) -> Result<Tensor> {
    let m = state.num_modalities();
    let mask = match mode {
        EvalMode::Full => MissingMask::none(),
        EvalMode::ZeroFill(mask) | EvalMode::Translated(mask) => mask.clone(),
    };
    if mask.missing().any(|k| k >= m) || mask.missing().count() >= m {
        return Err(Error::Contract("mask must leave at least one valid modality".into()));
    }
    let n = samples.len();
    let mut g = Graph::new();
    let b = state.bind(&mut g, |_| false);
    let mut slots: Vec<Option<NodeId>> = vec![None; m];
    for k in mask.available(m) {
        let x = g.constant(modality_matrix(samples, k)?);
        slots[k] = Some(state.encode(&mut g, &b, k, x)?);
    }
    let e = state.dims.embed_dim();
    let filled: Vec<NodeId> = match mode {
        EvalMode::Translated(_) => {
            let avail = mask.available(m);
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let node = match slots[i] {
                    Some(node) => node,
                    None => {
                        let mut acc: Option<NodeId> = None;
                        for &j in &avail {
                            let src = slots[j].expect("available slot encoded");
                            let t = state.translate(&mut g, &b, j, i, src)?;
                            acc = Some(match acc {
                                Some(a) => g.add(a, t)?,
                                None => t,
                            });
                        }
                        let sum = acc.expect("at least one available modality");
                        g.scale(sum, 1.0 / avail.len() as f64)
                    }
                };
                out.push(node);
            }
            out
        }
        _ => slots
            .iter()
            .map(|s| s.unwrap_or_else(|| g.constant(Tensor::zeros((n, e)))))
            .collect(),
    };
    let logits = state.classify(&mut g, &b, &filled)?;
    Ok(g.value(logits).clone())
}

fn single(state: &ModelState, sample: &Sample, mode: &EvalMode) -> Result<Vec<f64>> {
    Ok(batch_logits(state, &[sample], mode)?.iter().copied().collect())
}

pub fn predict_full(state: &ModelState, sample: &Sample) -> Result<Vec<f64>> {
    single(state, sample, &EvalMode::Full)
}

pub fn predict_zero_fill(state: &ModelState, sample: &Sample, mask: &MissingMask) -> Result<Vec<f64>> {
    single(state, sample, &EvalMode::ZeroFill(mask.clone()))
}

pub fn predict_translated(state: &ModelState, sample: &Sample, mask: &MissingMask) -> Result<Vec<f64>> {
    single(state, sample, &EvalMode::Translated(mask.clone()))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn predictions(state: &ModelState, samples: &[Sample], mode: &EvalMode) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = batch_logits(state, &refs, mode)?;
        out.extend(logits.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())));
    }
    Ok(out)
}

/// Mean translation loss over `data`, evaluated in chunks without gradients.
pub fn mean_translation_loss(state: &ModelState, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("translation loss over empty data".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = state.bind(&mut g, |_| false);
        let mut full = Vec::new();
        for k in 0..state.num_modalities() {
            let x = g.constant(modality_matrix(&refs, k)?);
            full.push(state.encode(&mut g, &b, k, x)?);
        }
        let l = translation_loss(&mut g, &b, state, &full)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

/// Retrain only the translators on the translation loss; every other
/// parameter is bound as a constant and left bit-identical. Returns the new
/// state and the full-pass mean translation loss before training and after
/// each epoch.
pub fn finetune_translators(
    state: &ModelState,
    train: &[Sample],
    settings: &FinetuneSettings,
) -> Result<(ModelState, Vec<f64>)> {
    let mut state = state.clone();
    if settings.epochs == 0 {
        return Ok((state, Vec::new()));
    }
    if train.is_empty() || settings.batch_size == 0 {
        return Err(Error::Config("fine-tuning needs data and a positive batch size".into()));
    }
    settings.optimizer.validate()?;
    let trainable: Vec<usize> = state
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| ParamGroup::of(&p.name) == ParamGroup::Translator)
        .map(|(i, _)| i)
        .collect();
    let mut opt = AdamState::new(trainable.iter().map(|&i| state.params[i].value.dim()));
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
    rng.set_stream(300);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = vec![mean_translation_loss(&state, train)?];
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let b = state.bind(&mut g, |grp| grp == ParamGroup::Translator);
            let mut full = Vec::new();
            for k in 0..state.num_modalities() {
                let x = g.constant(modality_matrix(&refs, k)?);
                full.push(state.encode(&mut g, &b, k, x)?);
            }
            let loss = translation_loss(&mut g, &b, &state, &full)?;
            g.backward(loss)?;
            let grads: Vec<Tensor> = trainable.iter().map(|&i| g.grad_or_zeros(b.nodes[i])).collect();
            let mut params: Vec<&mut Tensor> = state
                .params
                .iter_mut()
                .enumerate()
                .filter(|(_, p)| ParamGroup::of(&p.name) == ParamGroup::Translator)
                .map(|(_, p)| &mut p.value)
                .collect();
            adam_step(&mut params, &grads, &mut opt, &settings.optimizer)?;
        }
        curve.push(mean_translation_loss(&state, train)?);
    }
    Ok((state, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Toggles;
    use crate::model::ModelDims;

    fn dims() -> ModelDims {
        ModelDims {
            input_dims: vec![4, 3, 5],
            embed_half: 1,
            encoder_hidden: 6,
            proj_hidden: 4,
            proj_out: 3,
            trans_hidden: 4,
            num_classes: 3,
        }
    }

    fn sample() -> Sample {
        Sample {
            modalities: vec![vec![0.2, -0.4, 0.6, 0.1], vec![0.5, 0.5, -0.3], vec![0.1, 0.0, 0.9, -0.7, 0.3]],
            label: 1,
            domain: 0,
        }
    }

    #[test]
    fn masks_validate() {
        assert!(MissingMask::new([0, 1], 3).is_ok());
        assert!(matches!(MissingMask::new([0, 1, 2], 3), Err(Error::Contract(_))));
        assert!(matches!(MissingMask::new([3], 3), Err(Error::Index(_))));
        let names: Vec<String> = ["video", "flow", "audio"].iter().map(|s| s.to_string()).collect();
        let m = MissingMask::parse("video,flow", &names).unwrap();
        assert_eq!(m.available(3), vec![2]);
        assert_eq!(m.names(&names), "video,flow");
        assert!(matches!(MissingMask::parse("lidar", &names), Err(Error::Config(_))));
    }

    #[test]
    fn full_prediction_is_classify_of_encode() {
        let s = ModelState::init(dims(), Toggles::all(), 2).unwrap();
        let x = sample();
        let emb = s.encode_sample(&x.modalities).unwrap();
        let full: Vec<Vec<f64>> = emb.iter().map(|e| e.full()).collect();
        assert_eq!(predict_full(&s, &x).unwrap(), s.classify_vecs(&full).unwrap());
        let none = MissingMask::none();
        assert_eq!(predict_full(&s, &x).unwrap(), predict_zero_fill(&s, &x, &none).unwrap());
        assert_eq!(predict_full(&s, &x).unwrap(), predict_translated(&s, &x, &none).unwrap());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax([2.0, 2.0]), 0);
        let l = [0.3, 1.2, -0.5];
        assert_eq!(argmax(l), argmax(l.iter().map(|v| v + 100.0)));
    }

    #[test]
    fn zero_fill_removes_the_masked_block_of_a_linear_head() {
        let s = ModelState::init(dims(), Toggles::all(), 4).unwrap();
        let x = sample();
        let emb = s.encode_sample(&x.modalities).unwrap();
        let mask = MissingMask::new([1], 3).unwrap();
        let got = predict_zero_fill(&s, &x, &mask).unwrap();
        let w = s.param("classifier.l0.weight").unwrap();
        let full = predict_full(&s, &x).unwrap();
        let e = emb[1].full();
        for c in 0..3 {
            let contrib: f64 = (0..2).map(|r| e[r] * w[[2 + r, c]]).sum();
            assert!((full[c] - contrib - got[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn translated_fill_averages_available_sources() {
        let mut s = ModelState::init(dims(), Toggles::all(), 6).unwrap();
        // Make translators 1->0 and 2->0 constant maps [1,0] and [0,1] via their last bias.
        for (src, out) in [(1usize, [1.0, 0.0]), (2, [0.0, 1.0])] {
            let p = format!("translator.{src}-0");
            s.param_mut(&format!("{p}.l2.weight")).unwrap().fill(0.0);
            *s.param_mut(&format!("{p}.l2.bias")).unwrap() = ndarray::array![[out[0], out[1]]];
        }
        let x = sample();
        let emb = s.encode_sample(&x.modalities).unwrap();
        let mask = MissingMask::new([0], 3).unwrap();
        let got = predict_translated(&s, &x, &mask).unwrap();
        let want = s
            .classify_vecs(&[vec![0.5, 0.5], emb[1].full(), emb[2].full()])
            .unwrap();
        assert_eq!(got, want);

        // Two missing: each slot comes from the single remaining source.
        let mask = MissingMask::new([0, 1], 3).unwrap();
        let got = predict_translated(&s, &x, &mask).unwrap();
        let e2 = emb[2].full();
        let want = s
            .classify_vecs(&[s.translate_vec(2, 0, &e2).unwrap(), s.translate_vec(2, 1, &e2).unwrap(), e2])
            .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn masked_inputs_are_never_read() {
        let s = ModelState::init(dims(), Toggles::all(), 8).unwrap();
        let mut x = sample();
        x.modalities[0] = vec![f64::NAN; 4];
        x.modalities[2] = vec![f64::NAN; 5];
        let mask = MissingMask::new([0, 2], 3).unwrap();
        assert!(predict_translated(&s, &x, &mask).unwrap().iter().all(|v| v.is_finite()));
        assert!(predict_zero_fill(&s, &x, &mask).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_translators_match_zero_fill() {
        let mut s = ModelState::init(dims(), Toggles::all(), 10).unwrap();
        for p in &mut s.params {
            if ParamGroup::of(&p.name) == ParamGroup::Translator {
                p.value.fill(0.0);
            }
        }
        let x = sample();
        let mask = MissingMask::new([1], 3).unwrap();
        assert_eq!(
            predict_translated(&s, &x, &mask).unwrap(),
            predict_zero_fill(&s, &x, &mask).unwrap()
        );
    }
}
