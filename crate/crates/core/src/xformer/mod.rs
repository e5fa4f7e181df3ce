//! Transformer encoder with adapters and two classification heads.
//!
//! Everything runs in `f64` with hand-written backward passes. The CLS
//! vector is a model parameter; word embeddings are inputs and stay frozen.

mod checkpoint;
mod forward;
pub mod layers;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use forward::{multi_head_attention, Classification, ForwardTrace};
pub use layers::{adapter_apply, positional_encoding, scaled_dot_attention, Adapter};
pub use train::{gradient_check, train, GradCheck, TrainExample, TrainTrace};

/// How [`train`] uses the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// All parameters train together from the start.
    #[default]
    Full,
    /// Pretrain everything but the adapters on the suggestion task alone,
    /// then freeze the base and tune adapters, heads and CLS on the joint task.
    AdapterTransfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub adapter_dim: usize,
    pub use_adapters: bool,
    pub max_len: usize,
    pub base_lr: f64,
    pub adapter_lr_multiplier: f64,
    pub accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            adapter_dim: 32,
            use_adapters: true,
            max_len: 64,
            base_lr: 0.05,
            adapter_lr_multiplier: 10.0,
            accum_steps: 2,
            batch_size: 16,
            epochs: 10,
            pretrain_epochs: 5,
            mode: TrainMode::Full,
            seed: 42,
            dropout: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("adapter_dim", self.adapter_dim),
            ("max_len", self.max_len),
            ("accum_steps", self.accum_steps),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.adapter_dim >= self.d_model {
            return bad(format!("adapter_dim {} must be smaller than d_model {}", self.adapter_dim, self.d_model));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.adapter_lr_multiplier > 0.0 && self.adapter_lr_multiplier.is_finite()) {
            return bad(format!("adapter_lr_multiplier must be positive, got {}", self.adapter_lr_multiplier));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.mode == TrainMode::AdapterTransfer && !self.use_adapters {
            return bad("adapter_transfer mode needs use_adapters = true".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Affine map `x·w + b`, with `b` stored as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: xavier(fan_in, fan_out, rng),
            b: Matrix::zeros(1, fan_out),
        }
    }

    /// Row vector times the map.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.data().to_vec();
        for (xi, wrow) in x.iter().zip(self.w.data().chunks_exact(self.w.cols())) {
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xi * w;
            }
        }
        out
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub adapter_attn: Option<Adapter>,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub adapter_ff: Option<Adapter>,
}

impl EncoderLayer {
    fn zeros(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        let adapter = || cfg.use_adapters.then(|| Adapter::zeros(d, cfg.adapter_dim));
        EncoderLayer {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln1_gamma: Matrix::zeros(1, d),
            ln1_beta: Matrix::zeros(1, d),
            adapter_attn: adapter(),
            ff1: Linear::zeros(d, cfg.d_ff),
            ff2: Linear::zeros(cfg.d_ff, d),
            ln2_gamma: Matrix::zeros(1, d),
            ln2_beta: Matrix::zeros(1, d),
            adapter_ff: adapter(),
        }
    }

    fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let ones = Matrix::from_vec(1, d, vec![1.0; d]);
        let adapter = |rng: &mut dyn rand::RngCore| {
            cfg.use_adapters.then(|| {
                let mut a = Adapter::zeros(d, cfg.adapter_dim);
                let s = 1e-2;
                a.down = Matrix::from_fn(d, cfg.adapter_dim, |_, _| rng.random_range(-s..s));
                a
            })
        };
        EncoderLayer {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
            ln1_gamma: ones.clone(),
            ln1_beta: Matrix::zeros(1, d),
            adapter_attn: adapter(rng),
            ff1: Linear::xavier(d, cfg.d_ff, rng),
            ff2: Linear::xavier(cfg.d_ff, d, rng),
            ln2_gamma: ones,
            ln2_beta: Matrix::zeros(1, d),
            adapter_ff: adapter(rng),
        }
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Input,
    Cls,
    Encoder,
    Adapter,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub d_emb: usize,
    pub input: Linear,
    /// Learned input vector for position 0.
    pub cls: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub suggestion_head: Linear,
    pub domain_head: Linear,
    pos: Matrix,
}

macro_rules! collect_params {
    ($m:expr, $iter:ident, $($r:tt)+) => {{
        let mut v = Vec::new();
        v.push((String::from("input.w"), ParamGroup::Input, $($r)+ $m.input.w));
        v.push((String::from("input.b"), ParamGroup::Input, $($r)+ $m.input.b));
        v.push((String::from("cls"), ParamGroup::Cls, $($r)+ $m.cls));
        for (i, l) in $m.layers.$iter().enumerate() {
            v.push((format!("layer{i}.wq"), ParamGroup::Encoder, $($r)+ l.wq));
            v.push((format!("layer{i}.wk"), ParamGroup::Encoder, $($r)+ l.wk));
            v.push((format!("layer{i}.wv"), ParamGroup::Encoder, $($r)+ l.wv));
            v.push((format!("layer{i}.wo"), ParamGroup::Encoder, $($r)+ l.wo));
            v.push((format!("layer{i}.ln1.gamma"), ParamGroup::Encoder, $($r)+ l.ln1_gamma));
            v.push((format!("layer{i}.ln1.beta"), ParamGroup::Encoder, $($r)+ l.ln1_beta));
            if let Some(a) = $($r)+ l.adapter_attn {
                v.push((format!("layer{i}.adapter_attn.down"), ParamGroup::Adapter, $($r)+ a.down));
                v.push((format!("layer{i}.adapter_attn.down_b"), ParamGroup::Adapter, $($r)+ a.down_b));
                v.push((format!("layer{i}.adapter_attn.up"), ParamGroup::Adapter, $($r)+ a.up));
                v.push((format!("layer{i}.adapter_attn.up_b"), ParamGroup::Adapter, $($r)+ a.up_b));
            }
            v.push((format!("layer{i}.ff1.w"), ParamGroup::Encoder, $($r)+ l.ff1.w));
            v.push((format!("layer{i}.ff1.b"), ParamGroup::Encoder, $($r)+ l.ff1.b));
            v.push((format!("layer{i}.ff2.w"), ParamGroup::Encoder, $($r)+ l.ff2.w));
            v.push((format!("layer{i}.ff2.b"), ParamGroup::Encoder, $($r)+ l.ff2.b));
            v.push((format!("layer{i}.ln2.gamma"), ParamGroup::Encoder, $($r)+ l.ln2_gamma));
            v.push((format!("layer{i}.ln2.beta"), ParamGroup::Encoder, $($r)+ l.ln2_beta));
            if let Some(a) = $($r)+ l.adapter_ff {
                v.push((format!("layer{i}.adapter_ff.down"), ParamGroup::Adapter, $($r)+ a.down));
                v.push((format!("layer{i}.adapter_ff.down_b"), ParamGroup::Adapter, $($r)+ a.down_b));
                v.push((format!("layer{i}.adapter_ff.up"), ParamGroup::Adapter, $($r)+ a.up));
                v.push((format!("layer{i}.adapter_ff.up_b"), ParamGroup::Adapter, $($r)+ a.up_b));
            }
        }
        v.push((String::from("suggestion_head.w"), ParamGroup::Head, $($r)+ $m.suggestion_head.w));
        v.push((String::from("suggestion_head.b"), ParamGroup::Head, $($r)+ $m.suggestion_head.b));
        v.push((String::from("domain_head.w"), ParamGroup::Head, $($r)+ $m.domain_head.w));
        v.push((String::from("domain_head.b"), ParamGroup::Head, $($r)+ $m.domain_head.b));
        v
    }};
}

impl TransformerModel {
    /// Randomly initialized model seeded from `config.seed`. The CLS vector
    /// starts small and random; use [`TransformerModel::set_cls`] to seed it
    /// from an embedding table.
    pub fn new(config: TransformerConfig, d_emb: usize) -> Result<Self> {
        config.validate()?;
        if d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let input = Linear::xavier(d_emb, d, &mut rng);
        let s = 0.5 / (d_emb as f64).sqrt();
        let cls = Matrix::from_fn(1, d_emb, |_, _| rng.random_range(-s..s));
        let layers = (0..config.n_layers).map(|_| EncoderLayer::init(&config, &mut rng)).collect();
        let suggestion_head = Linear::xavier(d, 2, &mut rng);
        let domain_head = Linear::xavier(d, Domain::ALL.len(), &mut rng);
        let pos = positional_encoding(config.max_len, d);
        Ok(TransformerModel {
            config,
            d_emb,
            input,
            cls,
            layers,
            suggestion_head,
            domain_head,
            pos,
        })
    }

    /// Same shapes as `self`, every entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_with_positions(self.config.clone(), self.d_emb, self.pos.clone())
    }

    pub(crate) fn zeros(config: TransformerConfig, d_emb: usize) -> Self {
        let pos = positional_encoding(config.max_len, config.d_model);
        Self::zeros_with_positions(config, d_emb, pos)
    }

    fn zeros_with_positions(config: TransformerConfig, d_emb: usize, pos: Matrix) -> Self {
        let d = config.d_model;
        TransformerModel {
            input: Linear::zeros(d_emb, d),
            cls: Matrix::zeros(1, d_emb),
            layers: (0..config.n_layers).map(|_| EncoderLayer::zeros(&config)).collect(),
            suggestion_head: Linear::zeros(d, 2),
            domain_head: Linear::zeros(d, Domain::ALL.len()),
            pos,
            d_emb,
            config,
        }
    }

    pub fn set_cls(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.d_emb {
            return Err(Error::Shape(format!("cls vector has length {}, expected {}", v.len(), self.d_emb)));
        }
        self.cls.data_mut().copy_from_slice(v);
        Ok(())
    }

    /// Copy with every adapter removed. The config is updated to match.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        m.config.use_adapters = false;
        for l in &mut m.layers {
            l.adapter_attn = None;
            l.adapter_ff = None;
        }
        m
    }

    /// Named parameter tensors in a fixed order shared by the optimizer,
    /// the checkpoint format and gradient checks.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        collect_params!(self, iter, &)
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Matrix)> {
        collect_params!(self, iter_mut, &mut)
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn parameter_count_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for (_, g, m) in self.params() {
            *out.entry(g).or_insert(0) += m.len();
        }
        out
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.layers
            .iter()
            .flat_map(|l| l.adapter_attn.iter().chain(l.adapter_ff.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, _, m)| m.is_finite())
    }

    pub(crate) fn positions(&self) -> &Matrix {
        &self.pos
    }
}

/// Attention weights of one forward pass, indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Token at each position; position 0 is the CLS marker. Empty when
    /// the input came in as raw vectors.
    pub tokens: Vec<String>,
    pub weights: Vec<Vec<Matrix>>,
}

impl AttentionMap {
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .flat_map(|m| (0..m.rows()).map(move |i| (m.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn all_in_unit_interval(&self) -> bool {
        self.weights
            .iter()
            .flatten()
            .all(|m| m.data().iter().all(|w| (0.0..=1.0).contains(w)))
    }

    /// Mean over layers and heads of the attention row of `query`.
    pub fn mean_row(&self, query: usize) -> Vec<f64> {
        let mut count = 0usize;
        let mut out: Vec<f64> = Vec::new();
        for m in self.weights.iter().flatten() {
            if out.is_empty() {
                out = vec![0.0; m.cols()];
            }
            for (o, w) in out.iter_mut().zip(m.row(query)) {
                *o += w;
            }
            count += 1;
        }
        if count > 0 {
            out.iter_mut().for_each(|v| *v /= count as f64);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            adapter_dim: 2,
            max_len: 10,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.adapter_dim = 8;
        assert!(c.validate().is_err());
        let mut c = small();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adapters_start_as_identity() {
        let m = TransformerModel::new(small(), 5).unwrap();
        assert_eq!(m.adapters().count(), 2 * m.config.n_layers);
        for a in m.adapters() {
            assert!(a.up.data().iter().all(|&v| v == 0.0));
            assert!(a.up_b.data().iter().all(|&v| v == 0.0));
            assert!(a.down.data().iter().any(|&v| v != 0.0));
            assert_eq!(a.parameter_count(), 2 * 2 * 8 + 8 + 2);
        }
    }

    #[test]
    fn params_are_unique_and_consistent() {
        let mut m = TransformerModel::new(small(), 5).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|p| p.0).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let mut_names: Vec<String> = m.params_mut().into_iter().map(|p| p.0).collect();
        assert_eq!(names, mut_names);
        let no_adapters = m.without_adapters();
        let by_group = m.parameter_count_by_group();
        assert_eq!(
            m.parameter_count() - no_adapters.parameter_count(),
            by_group[&ParamGroup::Adapter]
        );
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = TransformerModel::new(small(), 5).unwrap();
        let b = TransformerModel::new(small(), 5).unwrap();
        assert_eq!(a, b);
        let c = TransformerModel::new(TransformerConfig { seed: 7, ..small() }, 5).unwrap();
        assert_ne!(a, c);
    }
}
