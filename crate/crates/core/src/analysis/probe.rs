//! Linear classifier trained on concatenated shared halves only, with the
//! encoders frozen.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::diffcalc::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::harness::optim::{adam_step, AdamConfig, AdamState};
use crate::inference::{argmax, modality_matrix};
use crate::losses::classification_loss;
use crate::model::ModelState;
use crate::synthgen::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// `N x (M * D_E)` matrix of concatenated shared halves.
pub fn shared_features(state: &ModelState, data: &[Sample]) -> Result<Tensor> {
    let h = state.dims.embed_half;
    let m = state.num_modalities();
    let mut out = Tensor::zeros((data.len(), m * h));
    for (c, chunk) in data.chunks(256).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = state.bind(&mut g, |_| false);
        for k in 0..m {
            let x = g.constant(modality_matrix(&refs, k)?);
            let e = state.encode(&mut g, &b, k, x)?;
            let shared = g.value(e).slice(ndarray::s![.., ..h]).to_owned();
            out.slice_mut(ndarray::s![c * 256..c * 256 + chunk.len(), k * h..(k + 1) * h])
                .assign(&shared);
        }
    }
    Ok(out)
}

/// Fit a fresh zero-initialized linear head on `train` and return its top-1
/// on `test`.
pub fn shared_only_probe(state: &ModelState, train: &[Sample], test: &[Sample], settings: &ProbeSettings) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("probe needs non-empty train and test data".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("probe batch size must be positive".into()));
    }
    settings.optimizer.validate()?;
    let c = state.dims.num_classes;
    let x = shared_features(state, train)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut head = [Tensor::zeros((x.ncols(), c)), Tensor::zeros((1, c))];
    let mut opt = AdamState::new(head.iter().map(|t| t.dim()));
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_size) {
            let mut g = Graph::new();
            let xb = g.constant(x.select(Axis(0), batch));
            let w = g.param(head[0].clone());
            let bias = g.param(head[1].clone());
            let z = g.matmul(xb, w)?;
            let logits = g.add_row(z, bias)?;
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = classification_loss(&mut g, logits, &yb)?;
            g.backward(loss)?;
            let grads = [g.grad_or_zeros(w), g.grad_or_zeros(bias)];
            let mut params: Vec<&mut Tensor> = head.iter_mut().collect();
            adam_step(&mut params, &grads, &mut opt, &settings.optimizer)?;
        }
    }
    let xt = shared_features(state, test)?;
    let logits = xt.dot(&head[0]) + &head[1];
    let hits = logits
        .axis_iter(Axis(0))
        .zip(test)
        .filter(|(row, s)| argmax(row.iter().copied()) == s.label)
        .count();
    Ok(hits as f64 / test.len() as f64)
}
