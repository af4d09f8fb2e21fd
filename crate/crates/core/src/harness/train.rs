//! Source-data preparation, the minibatch training loop with validation-based
//! checkpoint selection, and top-1 evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::diffcalc::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::optim::{adam_step, AdamState};
use crate::inference::{modality_matrix, predictions, EvalMode};
use crate::losses::{build_objective, LossValues};
use crate::model::ModelState;
use crate::synthgen::{Generator, Sample, StreamKind};

const VAL_STREAM: u64 = 100;
const SHUFFLE_STREAM: u64 = 200;

/// Pooled source samples with a stratified validation hold-out.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Hold out `round(fraction * count)` samples of every (domain, class) cell,
/// chosen by a seeded shuffle. Cell order and within-cell order are stable.
pub fn stratified_split(samples: Vec<Sample>, fraction: f64, seed: u64) -> SourceData {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        cells.entry((s.domain, s.label)).or_default().push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(VAL_STREAM);
    let mut is_val = vec![false; samples.len()];
    for idx in cells.values_mut() {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        for &i in &idx[..k.min(idx.len())] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    SourceData { train, val }
}

/// Training-stream samples of every source domain, split for validation.
pub fn source_data(cfg: &ExperimentConfig, gen: &Generator, sources: &[usize]) -> Result<SourceData> {
    if sources.is_empty() {
        return Err(Error::Config("no source domains".into()));
    }
    let mut pooled = Vec::new();
    for &d in sources {
        pooled.extend(gen.sample_stream(d, cfg.train_per_domain, StreamKind::Train)?);
    }
    Ok(stratified_split(pooled, cfg.val_fraction, cfg.seed))
}

/// Test-stream samples of one target domain.
pub fn target_data(cfg: &ExperimentConfig, gen: &Generator, target: usize) -> Result<Vec<Sample>> {
    gen.sample_stream(target, cfg.test_per_domain, StreamKind::Test)
}

/// Fraction of `data` whose argmax logit equals the label.
pub fn evaluate(state: &ModelState, data: &[Sample], mode: &EvalMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on empty data".into()));
    }
    let pred = predictions(state, data, mode)?;
    let hits = pred.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss components; `None` for the untrained epoch 0.
    pub loss: Option<LossValues>,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    /// Epoch 0 (initial state) through the last epoch.
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// `(target domain, top-1)` after training.
    pub target_top1: Vec<(usize, f64)>,
}

impl Metrics {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_top1).collect()
    }

    pub fn mean_target_top1(&self) -> Option<f64> {
        if self.target_top1.is_empty() {
            return None;
        }
        Some(self.target_top1.iter().map(|t| t.1).sum::<f64>() / self.target_top1.len() as f64)
    }
}

/// Train on the configured sources. Returns the best-validation state.
pub fn train(cfg: &ExperimentConfig) -> Result<(ModelState, Metrics)> {
    cfg.validate()?;
    let gen = Generator::new(cfg.generator.clone())?;
    let data = source_data(cfg, &gen, &cfg.sources)?;
    train_on(cfg, &data)
}

/// Train on explicit source data. Validation falls back to the training set
/// when the hold-out is empty.
pub fn train_on(cfg: &ExperimentConfig, data: &SourceData) -> Result<(ModelState, Metrics)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("empty source training data".into()));
    }
    let val: &[Sample] = if data.val.is_empty() { &data.train } else { &data.val };
    let spec = cfg.objective();
    let mut state = ModelState::init(cfg.model_dims(), cfg.toggles, cfg.seed)?;
    let mut opt = AdamState::new(state.params.iter().map(|p| p.value.dim()));
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut metrics = Metrics::default();
    let v0 = evaluate(&state, val, &EvalMode::Full)?;
    metrics.epochs.push(EpochRecord { epoch: 0, loss: None, val_top1: v0 });
    let mut best = (v0, state.clone());

    let m = state.num_modalities();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let b = state.bind(&mut g, |_| true);
            let inputs = (0..m)
                .map(|k| Ok(g.constant(modality_matrix(&refs, k)?)))
                .collect::<Result<Vec<_>>>()?;
            let obj = build_objective(&mut g, &b, &state, &inputs, &labels, &spec)?;
            let v = obj.values(&g);
            if !v.total.is_finite() {
                return Err(Error::NonFinite {
                    step: opt.step as usize + 1,
                    detail: format!(
                        "loss total={} cls={} con={} dis={} trans={}",
                        v.total, v.cls, v.con, v.dis, v.trans
                    ),
                });
            }
            g.backward(obj.total)?;
            let grads: Vec<Tensor> = b.nodes.iter().map(|&n| g.grad_or_zeros(n)).collect();
            let mut params: Vec<&mut Tensor> = state.params.iter_mut().map(|p| &mut p.value).collect();
            adam_step(&mut params, &grads, &mut opt, &cfg.optimizer)?;
            sum.total += v.total;
            sum.cls += v.cls;
            sum.con += v.con;
            sum.dis += v.dis;
            sum.trans += v.trans;
            batches += 1;
        }
        let k = batches as f64;
        let mean = LossValues {
            total: sum.total / k,
            cls: sum.cls / k,
            con: sum.con / k,
            dis: sum.dis / k,
            trans: sum.trans / k,
        };
        let acc = evaluate(&state, val, &EvalMode::Full)?;
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", mean.total, acc);
        metrics.epochs.push(EpochRecord { epoch, loss: Some(mean), val_top1: acc });
        if acc > best.0 {
            best = (acc, state.clone());
            metrics.selected_epoch = epoch;
        }
    }
    Ok((best.1, metrics))
}
