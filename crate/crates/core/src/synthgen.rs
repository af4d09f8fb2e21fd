//! Synthetic multi-modal, multi-domain classification data.
//!
//! Each sample draws one shared latent (common to all modalities of the
//! sample) and one specific latent per modality. Class information is split
//! between the two by a per-modality fraction `f`: the shared latent mean is
//! `sqrt(f) * mu_c[y]` and the specific mean is `sqrt(1 - f) * mu_s[k][y]`,
//! with every class prototype unit-norm. Modality `k` then observes
//!
//! ```text
//! x_k = R[d][k] * (W[k] * [shared; specific_k]) + b[d][k] + noise
//! ```
//!
//! where `W[k]` is a fixed mixing map and `(R, b)` is the domain's
//! rotation-plus-offset for that modality, scaled by `domain_shift_scale`.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`). The generator seeds it with
//! the config seed and separates independent purposes by ChaCha stream id:
//! stream 0 builds parameters, stream `1 + 2 * domain` samples training data
//! and stream `2 + 2 * domain` samples held-out data. Streams never overlap.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const RNG_ALGORITHM: &str = "chacha20/rand_chacha-0.9 stream-split";

pub type SynthRng = ChaCha20Rng;

/// Purpose tag for a per-domain RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Train,
    Test,
}

/// Seeded ChaCha20 stream for the given purpose and domain.
pub fn domain_stream(seed: u64, domain: usize, kind: StreamKind) -> SynthRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id = 1 + 2 * domain as u64 + matches!(kind, StreamKind::Test) as u64;
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub num_domains: usize,
    pub shared_latent_dim: usize,
    pub specific_latent_dims: Vec<usize>,
    pub obs_dims: Vec<usize>,
    /// Per modality, fraction of the class signal carried by the shared latent.
    pub shared_fraction: Vec<f64>,
    /// Within-class standard deviation of every latent coordinate.
    pub latent_sigma: f64,
    pub domain_shift_scale: f64,
    /// How far each domain moves the class means of the specific latents:
    /// 0 keeps them fixed, 1 redraws them independently per domain.
    pub specific_drift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            num_domains: 3,
            shared_latent_dim: 8,
            specific_latent_dims: vec![4, 4, 4],
            obs_dims: vec![32, 16, 24],
            shared_fraction: vec![0.6, 0.6, 0.6],
            latent_sigma: 0.35,
            domain_shift_scale: 0.3,
            specific_drift: 0.7,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn num_modalities(&self) -> usize {
        self.obs_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.obs_dims.len();
        if self.num_classes == 0 || self.num_domains == 0 || m == 0 {
            return Err(Error::Config(
                "generator: classes, domains and modalities must be positive".into(),
            ));
        }
        if self.shared_latent_dim == 0 {
            return Err(Error::Config("generator: shared_latent_dim must be positive".into()));
        }
        if self.specific_latent_dims.len() != m || self.shared_fraction.len() != m {
            return Err(Error::Config(format!(
                "generator: {m} modalities but {} specific dims and {} shared fractions",
                self.specific_latent_dims.len(),
                self.shared_fraction.len()
            )));
        }
        if self.obs_dims.iter().chain(&self.specific_latent_dims).any(|&d| d == 0) {
            return Err(Error::Config("generator: all dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.specific_drift) {
            return Err(Error::Config("generator: specific_drift must lie in [0, 1]".into()));
        }
        if self.shared_fraction.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("generator: shared fractions must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("latent_sigma", self.latent_sigma),
            ("domain_shift_scale", self.domain_shift_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("generator: {name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// One multi-modal instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub modalities: Vec<Vec<f64>>,
    pub label: usize,
    pub domain: usize,
}

/// Latent draw behind one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub label: usize,
    pub shared: Vec<f64>,
    pub specific: Vec<Vec<f64>>,
}

/// Row-major dense matrix used for the generator's fixed maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.offset[r]
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && self.offset.iter().all(|&b| b == 0.0)
            && (0..self.rows).all(|r| {
                (0..self.cols).all(|c| self.weights[r * self.cols + c] == if r == c { 1.0 } else { 0.0 })
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    shared_means: Vec<Vec<f64>>,
    /// Indexed `[domain][modality][class]`.
    specific_means: Vec<Vec<Vec<Vec<f64>>>>,
    mixing: Vec<Affine>,
    /// Indexed `[domain][modality]`.
    domain_maps: Vec<Vec<Affine>>,
}

fn gaussian(rng: &mut SynthRng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut SynthRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Product of `d` random Givens rotations whose angles scale with `scale`,
/// followed by a Gaussian offset of expected norm `scale`. Exactly the
/// identity when `scale == 0`.
fn domain_affine(rng: &mut SynthRng, d: usize, scale: f64) -> Affine {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    if d >= 2 {
        for _ in 0..d {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let theta = scale * rng.random_range(-1.0..1.0) * std::f64::consts::FRAC_PI_4;
            let (s, c) = theta.sin_cos();
            // Left-multiply by the rotation in the (i, j) plane.
            for col in 0..d {
                let a = w[i * d + col];
                let b = w[j * d + col];
                w[i * d + col] = c * a - s * b;
                w[j * d + col] = s * a + c * b;
            }
        }
    }
    let offset = (0..d)
        .map(|_| scale * gaussian(rng) / (d as f64).sqrt())
        .collect();
    Affine {
        rows: d,
        cols: d,
        weights: w,
        offset,
    }
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let m = cfg.num_modalities();
        let shared_means = (0..cfg.num_classes)
            .map(|_| unit_vector(&mut rng, cfg.shared_latent_dim))
            .collect();
        let base_specific: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|k| {
                (0..cfg.num_classes)
                    .map(|_| unit_vector(&mut rng, cfg.specific_latent_dims[k]))
                    .collect()
            })
            .collect();
        let mixing = (0..m)
            .map(|k| {
                let cols = cfg.shared_latent_dim + cfg.specific_latent_dims[k];
                let rows = cfg.obs_dims[k];
                let scale = 1.0 / (cols as f64).sqrt();
                Affine {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| scale * gaussian(&mut rng)).collect(),
                    offset: vec![0.0; rows],
                }
            })
            .collect();
        let domain_maps = (0..cfg.num_domains)
            .map(|_| {
                (0..m)
                    .map(|k| domain_affine(&mut rng, cfg.obs_dims[k], cfg.domain_shift_scale))
                    .collect()
            })
            .collect();
        let rho = cfg.specific_drift;
        let specific_means = (0..cfg.num_domains)
            .map(|_| {
                base_specific
                    .iter()
                    .map(|per_class| {
                        per_class
                            .iter()
                            .map(|mu| {
                                if rho == 0.0 {
                                    return mu.clone();
                                }
                                let xi = unit_vector(&mut rng, mu.len());
                                let v: Vec<f64> = mu
                                    .iter()
                                    .zip(&xi)
                                    .map(|(a, b)| (1.0 - rho).sqrt() * a + rho.sqrt() * b)
                                    .collect();
                                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                                if n > 1e-12 {
                                    v.into_iter().map(|x| x / n).collect()
                                } else {
                                    xi
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            shared_means,
            specific_means,
            mixing,
            domain_maps,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn domain_map(&self, domain: usize, modality: usize) -> &Affine {
        &self.domain_maps[domain][modality]
    }

    pub fn shared_mean(&self, class: usize) -> &[f64] {
        &self.shared_means[class]
    }

    /// Draw a label uniformly and the latents for it in `domain`.
    pub fn draw_latents(&self, domain: usize, rng: &mut SynthRng) -> Latents {
        let label = rng.random_range(0..self.cfg.num_classes);
        let sigma = self.cfg.latent_sigma;
        let shared = self.shared_means[label]
            .iter()
            .map(|&mu| mu + sigma * gaussian(rng))
            .collect();
        let specific = self.specific_means[domain]
            .iter()
            .map(|means| means[label].iter().map(|&mu| mu + sigma * gaussian(rng)).collect())
            .collect();
        Latents {
            label,
            shared,
            specific,
        }
    }

    /// Map latents to observations in `domain`. With `noise_sigma == 0` this is
    /// a pure function of `(domain, latents)`.
    pub fn observe(&self, domain: usize, latents: &Latents, rng: &mut SynthRng) -> Result<Sample> {
        if domain >= self.cfg.num_domains {
            return Err(Error::Index(format!(
                "domain {domain} out of range for {} domains",
                self.cfg.num_domains
            )));
        }
        let mut modalities = Vec::with_capacity(self.cfg.num_modalities());
        for k in 0..self.cfg.num_modalities() {
            let f = self.cfg.shared_fraction[k];
            let (ws, wp) = (f.sqrt(), (1.0 - f).sqrt());
            let mut u: Vec<f64> = latents.shared.iter().map(|v| ws * v).collect();
            u.extend(latents.specific[k].iter().map(|v| wp * v));
            let mixed = self.mixing[k].apply(&u);
            let mut x = self.domain_maps[domain][k].apply(&mixed);
            if self.cfg.noise_sigma > 0.0 {
                for v in &mut x {
                    *v += self.cfg.noise_sigma * gaussian(rng);
                }
            }
            modalities.push(x);
        }
        Ok(Sample {
            modalities,
            label: latents.label,
            domain,
        })
    }

    pub fn sample(&self, domain: usize, n: usize, rng: &mut SynthRng) -> Result<Vec<Sample>> {
        if domain >= self.cfg.num_domains {
            return Err(Error::Index(format!(
                "domain {domain} out of range for {} domains",
                self.cfg.num_domains
            )));
        }
        (0..n)
            .map(|_| {
                let latents = self.draw_latents(domain, rng);
                self.observe(domain, &latents, rng)
            })
            .collect()
    }

    /// Samples from the domain's dedicated stream for `kind`.
    pub fn sample_stream(&self, domain: usize, n: usize, kind: StreamKind) -> Result<Vec<Sample>> {
        let mut rng = domain_stream(self.cfg.seed, domain, kind);
        self.sample(domain, n, &mut rng)
    }
}

pub fn build_generator(cfg: GeneratorConfig) -> Result<Generator> {
    Generator::new(cfg)
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Write samples as text: `#` header lines echo the generator config, then
/// one row per sample `domain label | m0 values | m1 values | ...` with every
/// value in 9 significant digits.
pub fn write_dump<W: Write>(out: &mut W, cfg: &GeneratorConfig, samples: &[Sample]) -> Result<()> {
    writeln!(out, "# simmmdg dataset v1")?;
    writeln!(out, "# rng = {RNG_ALGORITHM}")?;
    writeln!(out, "# seed = {}", cfg.seed)?;
    writeln!(out, "# num_classes = {}", cfg.num_classes)?;
    writeln!(out, "# num_domains = {}", cfg.num_domains)?;
    writeln!(out, "# shared_latent_dim = {}", cfg.shared_latent_dim)?;
    writeln!(out, "# specific_latent_dims = {}", fmt_list(&cfg.specific_latent_dims))?;
    writeln!(out, "# obs_dims = {}", fmt_list(&cfg.obs_dims))?;
    writeln!(out, "# shared_fraction = {}", fmt_list(&cfg.shared_fraction))?;
    writeln!(out, "# latent_sigma = {}", cfg.latent_sigma)?;
    writeln!(out, "# domain_shift_scale = {}", cfg.domain_shift_scale)?;
    writeln!(out, "# specific_drift = {}", cfg.specific_drift)?;
    writeln!(out, "# noise_sigma = {}", cfg.noise_sigma)?;
    writeln!(out, "# rows = {}", samples.len())?;
    for s in samples {
        let mut line = format!("{} {}", s.domain, s.label);
        for m in &s.modalities {
            line.push_str(" |");
            for v in m {
                write!(line, " {v:.8e}").expect("string write");
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parse the rows of a dump written by [`write_dump`]; header lines are skipped.
pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Load(format!("dump line {}: {what}", lineno + 1));
        let mut groups = line.split('|');
        let head = groups.next().ok_or_else(|| bad("empty row"))?;
        let mut head = head.split_whitespace();
        let domain = head
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing domain"))?;
        let label = head
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing label"))?;
        let modalities = groups
            .map(|g| {
                g.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad value")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            modalities,
            label,
            domain,
        });
    }
    Ok(samples)
}

/// Finite joint distribution over tuples `(x_1, ..., x_M, y)`; the target is
/// always the last coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub support: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    /// Build and renormalize. Rejects negative or non-finite masses and
    /// ragged tuples.
    pub fn new(support: Vec<Vec<usize>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::Construction(format!(
                "joint: {} tuples but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        let width = support[0].len();
        if width < 2 || support.iter().any(|t| t.len() != width) {
            return Err(Error::Construction("joint: tuples must share a width of at least 2".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Construction("joint: probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::Construction("joint: total mass is zero".into()));
        }
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { support, probs })
    }

    pub fn num_modalities(&self) -> usize {
        self.support[0].len() - 1
    }

    pub fn target_index(&self) -> usize {
        self.support[0].len() - 1
    }

    pub fn is_normalized(&self) -> bool {
        let total: f64 = self.probs.iter().sum();
        (total - 1.0).abs() <= 1e-12 && self.probs.iter().all(|&p| p >= 0.0)
    }
}

fn binary_entropy_bits(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Crossover probability `e` in `[0, 1/2]` of a binary symmetric channel from
/// a uniform bit with `I = bits * ln 2` nats, i.e. `H_b(e) = 1 - bits`.
fn crossover_for_bits(bits: f64) -> f64 {
    let target = 1.0 - bits;
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy_bits(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if bits >= 1.0 {
        0.0
    } else if bits <= 0.0 {
        0.5
    } else {
        0.5 * (lo + hi)
    }
}

/// Joint over binary `(x_1, x_2, y)` with uniform `y`, each `x_i` a noisy copy
/// of `y` through an independent binary symmetric channel, tuned so that
/// `I(x_1; y) = high_bits * ln 2` and `I(x_2; y) = low_bits * ln 2` nats.
pub fn build_info_gap_joint(high_bits: f64, low_bits: f64) -> Result<DiscreteJoint> {
    if !(0.0..=1.0).contains(&low_bits) || !(0.0..=1.0).contains(&high_bits) || low_bits > high_bits {
        return Err(Error::Construction(format!(
            "infeasible information targets high={high_bits} bits, low={low_bits} bits; \
             need 0 <= low <= high <= 1"
        )));
    }
    let e1 = crossover_for_bits(high_bits);
    let e2 = crossover_for_bits(low_bits);
    let channel = |x: usize, y: usize, e: f64| if x == y { 1.0 - e } else { e };
    let mut support = Vec::with_capacity(8);
    let mut probs = Vec::with_capacity(8);
    for x1 in 0..2 {
        for x2 in 0..2 {
            for y in 0..2 {
                support.push(vec![x1, x2, y]);
                probs.push(0.5 * channel(x1, y, e1) * channel(x2, y, e2));
            }
        }
    }
    DiscreteJoint::new(support, probs)
}

/// Random joint over the full product of the given modality alphabets and
/// `classes` target values, with Dirichlet(1)-style masses; the tuple count
/// is `prod(alphabets) * classes`.
pub fn random_joint(rng: &mut SynthRng, alphabets: &[usize], classes: usize) -> Result<DiscreteJoint> {
    let mut support: Vec<Vec<usize>> = vec![vec![]];
    for &a in alphabets.iter().chain(std::iter::once(&classes)) {
        support = support
            .into_iter()
            .flat_map(|t| {
                (0..a).map(move |v| {
                    let mut t = t.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    loop {
        let probs: Vec<f64> = support
            .iter()
            .map(|_| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                // Exp(1) masses; occasionally zero out a tuple to exercise sparse supports.
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    -u.ln()
                }
            })
            .collect();
        if probs.iter().any(|&p| p > 0.0) {
            return DiscreteJoint::new(support, probs);
        }
    }
}
