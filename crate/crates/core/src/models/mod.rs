//! Scoring models: TransE, DistMult, ComplEx and ConvE.
//!
//! Every model scores a query `(s, r, ?)` against a set of candidate objects
//! in one pass ([`ModelParams::forward`]) and higher scores always mean more
//! plausible, so TransE returns negated distances.

mod checkpoint;
mod conve;
mod shallow;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use shallow::{score_complex, score_distmult, score_transe};

use crate::config::ConfigMap;
use crate::data::Triple;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, ComplexTensor, Mode, Tensor};
use crate::Rng;

/// Side length of the square convolution filters.
pub const FILTER_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    TransE,
    DistMult,
    ComplEx,
    ConvE,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(Self::TransE),
            "distmult" => Ok(Self::DistMult),
            "complex" => Ok(Self::ComplEx),
            "conve" => Ok(Self::ConvE),
            other => Err(Error::config(format!("unknown model `{other}`"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TransE => "transe",
            Self::DistMult => "distmult",
            Self::ComplEx => "complex",
            Self::ConvE => "conve",
        })
    }
}

/// How the reshaped subject and relation embeddings are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stacking {
    /// Subject rows on top of relation rows.
    Vertical,
    /// Subject and relation rows interleaved.
    Alternating,
}

impl FromStr for Stacking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertical" => Ok(Self::Vertical),
            "alternating" => Ok(Self::Alternating),
            other => Err(Error::config(format!("unknown stacking `{other}`"))),
        }
    }
}

impl fmt::Display for Stacking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vertical => "vertical",
            Self::Alternating => "alternating",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding size `k`, shared by entities and relations.
    pub dim: usize,
    pub k_w: usize,
    pub k_h: usize,
    /// Number of convolution filters `c`.
    pub channels: usize,
    pub input_dropout: f64,
    pub feature_dropout: f64,
    pub hidden_dropout: f64,
    /// Norm of the TransE distance, 1 or 2.
    pub transe_norm: u32,
    /// Adds a learnable scalar per candidate entity to its score.
    pub entity_bias: bool,
    pub bn_input: bool,
    pub bn_conv: bool,
    pub bn_hidden: bool,
    pub stacking: Stacking,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::ConvE,
            dim: 200,
            k_w: 10,
            k_h: 20,
            channels: 32,
            input_dropout: 0.2,
            feature_dropout: 0.2,
            hidden_dropout: 0.3,
            transe_norm: 2,
            entity_bias: false,
            bn_input: true,
            bn_conv: true,
            bn_hidden: true,
            stacking: Stacking::Vertical,
        }
    }
}

/// Most square factorisation `k = k_w · k_h` with `k_w ≤ k_h`.
pub fn default_reshape(dim: usize) -> (usize, usize) {
    let mut k_w = (dim as f64).sqrt() as usize;
    while k_w > 1 && dim % k_w != 0 {
        k_w -= 1;
    }
    let k_w = k_w.max(1);
    (k_w, dim / k_w)
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "dim",
        "k_w",
        "k_h",
        "channels",
        "input_dropout",
        "feature_dropout",
        "hidden_dropout",
        "transe_norm",
        "entity_bias",
        "bn_input",
        "bn_conv",
        "bn_hidden",
        "stacking",
    ];

    pub fn new(kind: ModelKind, dim: usize) -> Self {
        let (k_w, k_h) = default_reshape(dim);
        Self {
            kind,
            dim,
            k_w,
            k_h,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("embedding size must be positive"));
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("feature_dropout", self.feature_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.kind == ModelKind::TransE && !matches!(self.transe_norm, 1 | 2) {
            return Err(Error::config(format!("TransE norm must be 1 or 2, got {}", self.transe_norm)));
        }
        if self.kind == ModelKind::ConvE {
            if self.k_w * self.k_h != self.dim {
                return Err(Error::config(format!(
                    "k_w * k_h = {} * {} does not equal dim {}",
                    self.k_w, self.k_h, self.dim
                )));
            }
            if 2 * self.k_w < FILTER_SIZE || self.k_h < FILTER_SIZE {
                return Err(Error::config(format!(
                    "stacked input {}x{} is smaller than the {FILTER_SIZE}x{FILTER_SIZE} filter",
                    2 * self.k_w,
                    self.k_h
                )));
            }
            if self.channels == 0 {
                return Err(Error::config("ConvE needs at least one filter"));
            }
        }
        Ok(())
    }

    /// Feature map height and width `(m, n)` after the valid convolution.
    pub fn feature_map_dims(&self) -> (usize, usize) {
        (2 * self.k_w + 1 - FILTER_SIZE, self.k_h + 1 - FILTER_SIZE)
    }

    /// Length `c·m·n` of the flattened feature maps.
    pub fn flat_dim(&self) -> usize {
        let (m, n) = self.feature_map_dims();
        self.channels * m * n
    }

    pub fn to_config_map(&self) -> ConfigMap {
        let mut c = ConfigMap::new();
        c.set("model", self.kind);
        c.set("dim", self.dim);
        c.set("k_w", self.k_w);
        c.set("k_h", self.k_h);
        c.set("channels", self.channels);
        c.set("input_dropout", self.input_dropout);
        c.set("feature_dropout", self.feature_dropout);
        c.set("hidden_dropout", self.hidden_dropout);
        c.set("transe_norm", self.transe_norm);
        c.set("entity_bias", self.entity_bias);
        c.set("bn_input", self.bn_input);
        c.set("bn_conv", self.bn_conv);
        c.set("bn_hidden", self.bn_hidden);
        c.set("stacking", self.stacking);
        c
    }

    /// Reads the model keys of `c`; absent keys keep their defaults. When only
    /// `dim` is given the reshape follows [`default_reshape`].
    pub fn from_config_map(c: &ConfigMap) -> Result<Self> {
        let kind = c.get_or("model", ModelKind::ConvE)?;
        let dim = c.get_or("dim", 200)?;
        let mut cfg = Self::new(kind, dim);
        cfg.k_w = c.get_or("k_w", cfg.k_w)?;
        cfg.k_h = c.get_or("k_h", cfg.k_h)?;
        if c.contains("k_w") != c.contains("k_h") {
            // one side given: derive the other
            if c.contains("k_w") && cfg.k_w > 0 {
                cfg.k_h = dim / cfg.k_w;
            } else if cfg.k_h > 0 {
                cfg.k_w = dim / cfg.k_h;
            }
        }
        cfg.channels = c.get_or("channels", cfg.channels)?;
        cfg.input_dropout = c.get_or("input_dropout", cfg.input_dropout)?;
        cfg.feature_dropout = c.get_or("feature_dropout", cfg.feature_dropout)?;
        cfg.hidden_dropout = c.get_or("hidden_dropout", cfg.hidden_dropout)?;
        cfg.transe_norm = c.get_or("transe_norm", cfg.transe_norm)?;
        cfg.entity_bias = c.get_or("entity_bias", cfg.entity_bias)?;
        cfg.bn_input = c.get_or("bn_input", cfg.bn_input)?;
        cfg.bn_conv = c.get_or("bn_conv", cfg.bn_conv)?;
        cfg.bn_hidden = c.get_or("bn_hidden", cfg.bn_hidden)?;
        cfg.stacking = c.get_or("stacking", cfg.stacking)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact number of trainable scalars for `config` on a vocabulary of
/// `n_e` entities and `n_r` relations (running statistics excluded).
pub fn count_parameters(config: &ModelConfig, n_e: usize, n_r: usize) -> Result<usize> {
    config.validate()?;
    let k = config.dim;
    let parts = if config.kind == ModelKind::ComplEx { 2 } else { 1 };
    let mut total = parts * (n_e + n_r) * k;
    if config.entity_bias {
        total += n_e;
    }
    if config.kind == ModelKind::ConvE {
        let c = config.channels;
        total += c * FILTER_SIZE * FILTER_SIZE + c;
        total += config.flat_dim() * k + k;
        if config.bn_input {
            total += 2;
        }
        if config.bn_conv {
            total += 2 * c;
        }
        if config.bn_hidden {
            total += 2 * k;
        }
    }
    Ok(total)
}

/// Real or complex embedding table.
#[derive(Clone, Debug, PartialEq)]
pub enum Table {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Table {
    /// The real table, or the real part of a complex one.
    pub fn re(&self) -> &Tensor {
        match self {
            Table::Real(t) => t,
            Table::Complex(c) => &c.re,
        }
    }

    pub fn im(&self) -> Option<&Tensor> {
        match self {
            Table::Real(_) => None,
            Table::Complex(c) => Some(&c.im),
        }
    }

    pub fn re_mut(&mut self) -> &mut Tensor {
        match self {
            Table::Real(t) => t,
            Table::Complex(c) => &mut c.re,
        }
    }

    pub fn rows(&self) -> usize {
        self.re().rows()
    }
}

/// Convolution, projection and normalisation layers of ConvE.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayers {
    /// `c×1×3×3`.
    pub filters: Tensor,
    pub filter_bias: Tensor,
    /// `(c·m·n)×k`.
    pub proj: Tensor,
    pub proj_bias: Tensor,
    pub bn_input: Option<BatchNorm>,
    pub bn_conv: Option<BatchNorm>,
    pub bn_hidden: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub entity: Table,
    pub relation: Table,
    pub entity_bias: Option<Tensor>,
    pub conv: Option<ConvLayers>,
}

fn uniform(shape: [usize; 2], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)).with_grad()
}

/// Xavier/Glorot uniform bound for a `fan_in × fan_out` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelParams {
    /// Seeded initialisation: Xavier-uniform tables and projection,
    /// He-uniform filters, zero biases, identity batch norms.
    pub fn init(config: &ModelConfig, n_e: usize, n_r: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_from_seed(seed);
        let k = config.dim;
        let table = |n: usize, rng: &mut Rng| {
            let bound = xavier_bound(n, k);
            if config.kind == ModelKind::ComplEx {
                let re = uniform([n, k], bound, rng);
                let im = uniform([n, k], bound, rng);
                Table::Complex(ComplexTensor::new(re, im).expect("same shape"))
            } else {
                Table::Real(uniform([n, k], bound, rng))
            }
        };
        let entity = table(n_e, &mut rng);
        let relation = table(n_r, &mut rng);
        let conv = (config.kind == ModelKind::ConvE).then(|| {
            let c = config.channels;
            let fan_in = FILTER_SIZE * FILTER_SIZE;
            let he = (6.0 / fan_in as f64).sqrt();
            let filters = Tensor::from_fn([c, 1, FILTER_SIZE, FILTER_SIZE], |_| rng.gen_range(-he..=he))
                .with_grad();
            let flat = config.flat_dim();
            ConvLayers {
                filters,
                filter_bias: Tensor::zeros([c]).with_grad(),
                proj: uniform([flat, k], xavier_bound(flat, k), &mut rng),
                proj_bias: Tensor::zeros([k]).with_grad(),
                bn_input: config.bn_input.then(|| BatchNorm::new(1)),
                bn_conv: config.bn_conv.then(|| BatchNorm::new(c)),
                bn_hidden: config.bn_hidden.then(|| BatchNorm::new(k)),
            }
        });
        Ok(Self {
            config: config.clone(),
            entity,
            relation,
            entity_bias: config.entity_bias.then(|| Tensor::zeros([n_e]).with_grad()),
            conv,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation.rows()
    }

    /// All trainable tensors with stable names.
    pub fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        match &self.entity {
            Table::Real(t) => out.push(("entity", t)),
            Table::Complex(c) => out.extend([("entity.re", &c.re), ("entity.im", &c.im)]),
        }
        match &self.relation {
            Table::Real(t) => out.push(("relation", t)),
            Table::Complex(c) => out.extend([("relation.re", &c.re), ("relation.im", &c.im)]),
        }
        if let Some(b) = &self.entity_bias {
            out.push(("entity.bias", b));
        }
        if let Some(c) = &self.conv {
            out.extend([
                ("conv.weight", &c.filters),
                ("conv.bias", &c.filter_bias),
                ("proj.weight", &c.proj),
                ("proj.bias", &c.proj_bias),
            ]);
            for (g, b, bn) in [
                ("bn0.gamma", "bn0.beta", &c.bn_input),
                ("bn1.gamma", "bn1.beta", &c.bn_conv),
                ("bn2.gamma", "bn2.beta", &c.bn_hidden),
            ] {
                if let Some(bn) = bn {
                    out.extend([(g, &bn.gamma), (b, &bn.beta)]);
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = Vec::new();
        match &mut self.entity {
            Table::Real(t) => out.push(("entity", t)),
            Table::Complex(c) => out.extend([("entity.re", &mut c.re), ("entity.im", &mut c.im)]),
        }
        match &mut self.relation {
            Table::Real(t) => out.push(("relation", t)),
            Table::Complex(c) => out.extend([("relation.re", &mut c.re), ("relation.im", &mut c.im)]),
        }
        if let Some(b) = &mut self.entity_bias {
            out.push(("entity.bias", b));
        }
        if let Some(c) = &mut self.conv {
            out.push(("conv.weight", &mut c.filters));
            out.push(("conv.bias", &mut c.filter_bias));
            out.push(("proj.weight", &mut c.proj));
            out.push(("proj.bias", &mut c.proj_bias));
            for (g, b, bn) in [
                ("bn0.gamma", "bn0.beta", &mut c.bn_input),
                ("bn1.gamma", "bn1.beta", &mut c.bn_conv),
                ("bn2.gamma", "bn2.beta", &mut c.bn_hidden),
            ] {
                if let Some(bn) = bn {
                    out.push((g, &mut bn.gamma));
                    out.push((b, &mut bn.beta));
                }
            }
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.parameters_mut() {
            t.zero_grad();
        }
    }

    fn check_ids(&self, s: &[usize], r: &[usize]) -> Result<()> {
        if s.len() != r.len() {
            return Err(Error::Dimension {
                op: "query batch",
                lhs: vec![s.len()],
                rhs: vec![r.len()],
            });
        }
        for (ids, what, len) in [(s, "entity", self.n_entities()), (r, "relation", self.n_relations())] {
            if let Some(&bad) = ids.iter().find(|&&i| i >= len) {
                return Err(Error::Index { what, index: bad, len });
            }
        }
        Ok(())
    }

    /// Scores each query `(s[i], r[i], ?)` against `columns` (all entities
    /// when `None`); returns a `batch × columns` tensor of pre-sigmoid
    /// scores and the cache needed by [`ModelParams::backward`].
    pub fn forward(
        &self,
        s: &[usize],
        r: &[usize],
        columns: Option<&[usize]>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_ids(s, r)?;
        if let Some(cols) = columns {
            if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_entities()) {
                return Err(Error::Index {
                    what: "entity",
                    index: bad,
                    len: self.n_entities(),
                });
            }
        }
        let (logits, inner) = match self.config.kind {
            ModelKind::ConvE => conve::forward(self, s, r, columns, mode, rng)?,
            _ => shallow::forward(self, s, r, columns)?,
        };
        let logits = self.add_entity_bias(logits, columns);
        Ok((
            logits,
            ForwardCache {
                s: s.to_vec(),
                r: r.to_vec(),
                columns: columns.map(<[usize]>::to_vec),
                inner,
            },
        ))
    }

    fn add_entity_bias(&self, mut logits: Tensor, columns: Option<&[usize]>) -> Tensor {
        if let Some(b) = &self.entity_bias {
            let n = logits.cols();
            let bias: Vec<f64> = match columns {
                Some(c) => c.iter().map(|&i| b.data()[i]).collect(),
                None => b.data().to_vec(),
            };
            for row in logits.data_mut().chunks_mut(n.max(1)) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
        }
        logits
    }

    /// Accumulates parameter gradients given `d loss / d logits` (row-major,
    /// same shape as the forward output).
    pub fn backward(&mut self, cache: ForwardCache, grad_logits: Vec<f64>) -> Result<()> {
        if let Some(b) = &mut self.entity_bias {
            let n = match &cache.columns {
                Some(c) => c.len(),
                None => b.len(),
            };
            let gb = b.grad_mut();
            for row in grad_logits.chunks(n.max(1)) {
                for (j, g) in row.iter().enumerate() {
                    let col = cache.columns.as_ref().map_or(j, |c| c[j]);
                    gb[col] += g;
                }
            }
        }
        let ForwardCache { s, r, columns, inner } = cache;
        match inner {
            Inner::Conv(c) => conve::backward(self, &s, &r, columns.as_deref(), *c, grad_logits),
            Inner::Shallow(c) => shallow::backward(self, &s, &r, columns.as_deref(), c, grad_logits),
        }
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if let (Some(layers), Inner::Conv(c)) = (&mut self.conv, &cache.inner) {
            for (bn, bc) in [
                (&mut layers.bn_input, &c.bn_input),
                (&mut layers.bn_conv, &c.bn_conv),
                (&mut layers.bn_hidden, &c.bn_hidden),
            ] {
                if let (Some(bn), Some(bc)) = (bn, bc) {
                    bn.update_running_stats(bc);
                }
            }
        }
    }

    /// Eval-mode scores of `(s[i], r[i], o)` for every entity `o`,
    /// row-major `batch × n_e`.
    pub fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Tensor> {
        let mut rng = crate::rng_from_seed(0);
        Ok(self.forward(s, r, None, Mode::Eval, &mut rng)?.0)
    }

    /// Eval-mode scores of `(e, r[i], o[i])` for every entity `e`. Only the
    /// translational and factorisation models can corrupt subjects directly;
    /// ConvE answers subject queries through reciprocal relations.
    pub fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Tensor> {
        self.check_ids(o, r)?;
        match self.config.kind {
            ModelKind::ConvE => Err(Error::config(
                "ConvE scores subjects through reciprocal relations only",
            )),
            _ => shallow::score_subjects(self, r, o),
        }
    }

    /// Eval-mode score of each triple on its own.
    pub fn score_triples(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        let s: Vec<usize> = triples.iter().map(|t| t.s).collect();
        let r: Vec<usize> = triples.iter().map(|t| t.r).collect();
        self.check_ids(&s, &r)?;
        let mut scores = match self.config.kind {
            ModelKind::ConvE => {
                let h = self.hidden(&s, &r)?;
                let e = self.entity.re();
                triples
                    .iter()
                    .enumerate()
                    .map(|(i, t)| dot(h.row(i), e.row(t.o)))
                    .collect()
            }
            _ => triples.iter().map(|t| shallow::score_one(self, t)).collect::<Vec<f64>>(),
        };
        if let Some(b) = &self.entity_bias {
            for (v, t) in scores.iter_mut().zip(triples) {
                *v += b.data()[t.o];
            }
        }
        Ok(scores)
    }

    /// ConvE hidden vectors (after the last non-linearity) in eval mode.
    pub fn hidden(&self, s: &[usize], r: &[usize]) -> Result<Tensor> {
        self.check_ids(s, r)?;
        if self.config.kind != ModelKind::ConvE {
            return Err(Error::config("hidden vectors exist for ConvE only"));
        }
        let mut rng = crate::rng_from_seed(0);
        conve::hidden(self, s, r, Mode::Eval, &mut rng).map(|(h, _)| h)
    }

    /// Per-triple scores with gradients for 1-1 training of the shallow
    /// models.
    pub fn triple_scores(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        if self.config.kind == ModelKind::ConvE {
            return Err(Error::config("ConvE is trained with 1-N scoring only"));
        }
        Ok(triples.iter().map(|t| shallow::score_one(self, t)).collect())
    }

    /// Accumulates `grad[i] · ∂score(triples[i])` into the embedding tables.
    pub fn triple_backward(&mut self, triples: &[Triple], grad: &[f64]) -> Result<()> {
        if self.config.kind == ModelKind::ConvE {
            return Err(Error::config("ConvE is trained with 1-N scoring only"));
        }
        shallow::triple_backward(self, triples, grad);
        if let Some(b) = &mut self.entity_bias {
            let gb = b.grad_mut();
            for (t, g) in triples.iter().zip(grad) {
                gb[t.o] += g;
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values of a forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    s: Vec<usize>,
    r: Vec<usize>,
    columns: Option<Vec<usize>>,
    inner: Inner,
}

#[derive(Debug)]
enum Inner {
    Conv(Box<conve::ConvCache>),
    Shallow(shallow::ShallowCache),
}
