//! Trainable components: per-modality encoders, the projection head used by
//! the contrastive loss, one translator per ordered modality pair, and the
//! fused linear classifier.
//!
//! Parameters live in a flat, named list ([`ModelState::params`]). Forward
//! passes bind that list onto a [`Graph`] (see [`ModelState::bind`]) and then
//! run batched: every activation is `n x width`.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::diffcalc::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::losses::Toggles;

/// Layer widths of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub input_dims: Vec<usize>,
    /// Width of each half of an embedding; a full embedding is `2 * embed_half`.
    pub embed_half: usize,
    pub encoder_hidden: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub trans_hidden: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn desk(input_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dims,
            embed_half: 16,
            encoder_hidden: 64,
            proj_hidden: 64,
            proj_out: 16,
            trans_hidden: 64,
            num_classes,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.embed_half
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.embed_half,
            self.encoder_hidden,
            self.proj_hidden,
            self.proj_out,
            self.trans_hidden,
            self.num_classes,
        ];
        if self.input_dims.is_empty() || self.input_dims.iter().chain(&widths).any(|&d| d == 0) {
            return Err(Error::Config(format!("model dims must all be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Which component a parameter belongs to. Sets are disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Translator,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("encoder") => ParamGroup::Encoder,
            Some("projection") => ParamGroup::Projection,
            Some("translator") => ParamGroup::Translator,
            _ => ParamGroup::Classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

/// Relu MLP over parameter indices; no activation after the last layer.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Embedding of one modality with its shared (first) and specific (second) halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbedding {
    pub modality: usize,
    pub shared: Vec<f64>,
    pub specific: Vec<f64>,
}

impl SplitEmbedding {
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.shared.clone();
        v.extend_from_slice(&self.specific);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub toggles: Toggles,
    pub params: Vec<Param>,
    encoders: Vec<Mlp>,
    projection: Mlp,
    translators: BTreeMap<(usize, usize), Mlp>,
    classifier: Mlp,
}

/// Parameter handles of one [`ModelState`] on one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub nodes: Vec<NodeId>,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha20Rng,
}

impl Builder<'_> {
    fn mlp(&mut self, prefix: &str, widths: &[usize]) -> Mlp {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    self.rng.random_range(-bound..bound)
                });
                self.params.push(Param {
                    name: format!("{prefix}.l{l}.weight"),
                    value: weight,
                });
                self.params.push(Param {
                    name: format!("{prefix}.l{l}.bias"),
                    value: Array2::zeros((1, fan_out)),
                });
                Layer {
                    weight: self.params.len() - 2,
                    bias: self.params.len() - 1,
                }
            })
            .collect();
        Mlp { layers }
    }
}

/// Ordered pairs `(i, j)`, `i != j`, in lexicographic order.
pub fn translator_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

impl ModelState {
    /// Fan-in scaled uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`),
    /// zero biases, deterministic in `seed`.
    pub fn init(dims: ModelDims, toggles: Toggles, seed: u64) -> Result<Self> {
        dims.validate()?;
        toggles.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let e = dims.embed_dim();
        let encoders = dims
            .input_dims
            .iter()
            .enumerate()
            .map(|(k, &d)| b.mlp(&format!("encoder.{k}"), &[d, dims.encoder_hidden, e]))
            .collect();
        let proj_in = if toggles.feature_split { dims.embed_half } else { e };
        let projection = b.mlp(
            "projection",
            &[proj_in, dims.proj_hidden, dims.proj_hidden, dims.proj_out],
        );
        let translators = translator_pairs(dims.num_modalities())
            .into_iter()
            .map(|(i, j)| {
                let mlp = b.mlp(
                    &format!("translator.{i}-{j}"),
                    &[e, dims.trans_hidden, dims.trans_hidden, e],
                );
                ((i, j), mlp)
            })
            .collect();
        let classifier = b.mlp("classifier", &[dims.num_modalities() * e, dims.num_classes]);
        let params = b.params;
        Ok(Self {
            dims,
            toggles,
            params,
            encoders,
            projection,
            translators,
            classifier,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.dims.num_modalities()
    }

    pub fn translator_count(&self) -> usize {
        self.translators.len()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on `g`; groups for which `trainable` is false
    /// become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|p| {
                if trainable(ParamGroup::of(&p.name)) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { nodes }
    }

    fn run_mlp(&self, g: &mut Graph, b: &Bound, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (l, layer) in mlp.layers.iter().enumerate() {
            h = g.matmul(h, b.nodes[layer.weight])?;
            h = g.add_row(h, b.nodes[layer.bias])?;
            if l + 1 < mlp.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Full embedding `n x 2*D_E` of modality `k`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, k: usize, x: NodeId) -> Result<NodeId> {
        let enc = self.encoders.get(k).ok_or_else(|| {
            Error::Index(format!("modality {k} out of range for {}", self.num_modalities()))
        })?;
        let width = g.shape(x).1;
        if width != self.dims.input_dims[k] {
            return Err(Error::Dimension(format!(
                "encode: modality {k} expects width {}, got {width}",
                self.dims.input_dims[k]
            )));
        }
        self.run_mlp(g, b, enc, x)
    }

    /// `(shared, specific)` halves. The only place the shared-first convention lives.
    pub fn split(&self, g: &mut Graph, e: NodeId) -> Result<(NodeId, NodeId)> {
        g.slice_halves(e)
    }

    /// Projection head; input is `D_E` wide with feature splitting, else `2*D_E`.
    pub fn project(&self, g: &mut Graph, b: &Bound, v: NodeId) -> Result<NodeId> {
        let want = self.param_shape(self.projection.layers[0].weight).0;
        let width = g.shape(v).1;
        if width != want {
            return Err(Error::Dimension(format!(
                "project: expects width {want}, got {width}"
            )));
        }
        self.run_mlp(g, b, &self.projection, v)
    }

    pub fn translate(&self, g: &mut Graph, b: &Bound, i: usize, j: usize, e: NodeId) -> Result<NodeId> {
        if i == j {
            return Err(Error::Contract(format!("no translator from modality {i} to itself")));
        }
        let mlp = self
            .translators
            .get(&(i, j))
            .ok_or_else(|| Error::Index(format!("no translator {i}->{j}")))?;
        let width = g.shape(e).1;
        if width != self.dims.embed_dim() {
            return Err(Error::Dimension(format!(
                "translate: expects width {}, got {width}",
                self.dims.embed_dim()
            )));
        }
        self.run_mlp(g, b, mlp, e)
    }

    /// Logits from the concatenation of all `M` full embeddings.
    pub fn classify(&self, g: &mut Graph, b: &Bound, embeddings: &[NodeId]) -> Result<NodeId> {
        if embeddings.len() != self.num_modalities() {
            return Err(Error::Dimension(format!(
                "classify: expects {} embeddings, got {}",
                self.num_modalities(),
                embeddings.len()
            )));
        }
        for e in embeddings {
            if g.shape(*e).1 != self.dims.embed_dim() {
                return Err(Error::Dimension(format!(
                    "classify: embedding width {} != {}",
                    g.shape(*e).1,
                    self.dims.embed_dim()
                )));
            }
        }
        let joined = g.concat(embeddings)?;
        self.run_mlp(g, b, &self.classifier, joined)
    }

    fn param_shape(&self, idx: usize) -> (usize, usize) {
        self.params[idx].value.dim()
    }

    /// Per-sample convenience: encode every modality of one instance.
    pub fn encode_sample(&self, modalities: &[Vec<f64>]) -> Result<Vec<SplitEmbedding>> {
        if modalities.len() != self.num_modalities() {
            return Err(Error::Dimension(format!(
                "encode: expects {} modalities, got {}",
                self.num_modalities(),
                modalities.len()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        modalities
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let xn = g.constant(row(x));
                let e = self.encode(&mut g, &b, k, xn)?;
                let (c, s) = self.split(&mut g, e)?;
                Ok(SplitEmbedding {
                    modality: k,
                    shared: g.value(c).iter().copied().collect(),
                    specific: g.value(s).iter().copied().collect(),
                })
            })
            .collect()
    }

    pub fn project_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(row(v));
        let z = self.project(&mut g, &b, x)?;
        Ok(g.value(z).iter().copied().collect())
    }

    pub fn translate_vec(&self, i: usize, j: usize, e: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(row(e));
        let t = self.translate(&mut g, &b, i, j, x)?;
        Ok(g.value(t).iter().copied().collect())
    }

    pub fn classify_vecs(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let nodes: Vec<_> = embeddings.iter().map(|e| g.constant(row(e))).collect();
        let l = self.classify(&mut g, &b, &nodes)?;
        Ok(g.value(l).iter().copied().collect())
    }

    /// Text describing every shape-relevant setting; hashed into checkpoints.
    pub fn fingerprint_text(&self) -> String {
        fingerprint_text(&self.dims, &self.toggles)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize(self)
    }
}

pub fn init_model(dims: ModelDims, toggles: Toggles, seed: u64) -> Result<ModelState> {
    ModelState::init(dims, toggles, seed)
}

pub fn row(v: &[f64]) -> Tensor {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl fmt::Display for ModelDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inputs: Vec<String> = self.input_dims.iter().map(|d| d.to_string()).collect();
        write!(
            f,
            "inputs={};embed_half={};encoder_hidden={};proj_hidden={};proj_out={};trans_hidden={};classes={}",
            inputs.join(","),
            self.embed_half,
            self.encoder_hidden,
            self.proj_hidden,
            self.proj_out,
            self.trans_hidden,
            self.num_classes
        )
    }
}

pub fn fingerprint_text(dims: &ModelDims, toggles: &Toggles) -> String {
    format!("{dims};toggles={toggles}")
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMMDGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Layout (little-endian): magic, version `u32`, fingerprint text
/// (`u32` length + UTF-8), SHA-256 of that text, parameter count `u32`, then
/// per parameter: name (`u32` length + UTF-8), rows `u32`, cols `u32`,
/// `rows * cols` `f64` values in row-major order.
pub fn serialize(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let fp = state.fingerprint_text();
    put_u32(&mut out, fp.len() as u32);
    out.extend_from_slice(fp.as_bytes());
    out.extend_from_slice(&Sha256::digest(fp.as_bytes()));
    put_u32(&mut out, state.params.len() as u32);
    for p in &state.params {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        let (r, c) = p.value.dim();
        put_u32(&mut out, r as u32);
        put_u32(&mut out, c as u32);
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Load("checkpoint string is not UTF-8".into()))
    }
}

/// Load a checkpoint written for `dims` and `toggles`. The stored fingerprint
/// must match exactly, and every parameter must match the freshly-initialized
/// layout by name and shape.
pub fn deserialize(bytes: &[u8], dims: &ModelDims, toggles: &Toggles) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Load("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let fp = r.string()?;
    let digest = r.take(32)?;
    if digest != Sha256::digest(fp.as_bytes()).as_slice() {
        return Err(Error::Load("checkpoint fingerprint digest mismatch".into()));
    }
    let want = fingerprint_text(dims, toggles);
    if fp != want {
        return Err(Error::Load(format!(
            "checkpoint fingerprint mismatch: file has `{fp}`, config gives `{want}`"
        )));
    }
    let mut state = ModelState::init(dims.clone(), *toggles, 0)
        .map_err(|e| Error::Load(format!("checkpoint config invalid: {e}")))?;
    let count = r.u32()? as usize;
    if count != state.params.len() {
        return Err(Error::Load(format!(
            "checkpoint has {count} tensors, model has {}",
            state.params.len()
        )));
    }
    for p in &mut state.params {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if name != p.name || (rows, cols) != p.value.dim() {
            return Err(Error::Load(format!(
                "checkpoint tensor `{name}` {rows}x{cols} does not match `{}` {:?}",
                p.name,
                p.value.dim()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        p.value = Array2::from_shape_vec((rows, cols), vals).expect("checked shape");
    }
    if r.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after checkpoint".into()));
    }
    Ok(state)
}
