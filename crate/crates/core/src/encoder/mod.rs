//! A small post-layer-norm transformer encoder with a tied masked-LM head.
//!
//! Weight layout follows the `X·W` convention: every projection matrix is
//! `[in × out]`, and head `h` owns columns `[h·d_h, (h+1)·d_h)` of `W^Q`,
//! `W^K` and `W^V`. The query, key and value projections carry no bias, so
//! a fully masked `W^Q` or `W^K` yields exactly uniform attention and a fully
//! masked `W^V` slice silences its head.

mod corpus;
mod pretrain;
mod tokenizer;

pub use corpus::{generate_corpus, CorpusSpec};
pub use pretrain::{mask_tokens, mlm_loss, pretrain, PretrainConfig, PretrainReport};
pub use tokenizer::{Tokenizer, CLS, MASK, PAD, SEP, UNK};

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_size: 64,
            ffn_size: 128,
            vocab_size: 0,
            max_seq_len: 16,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    /// BERT-base extents, for reference. Not used by default.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_size: 768,
            ffn_size: 3072,
            vocab_size,
            max_seq_len: 512,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("encoder.{field}"), "must be at least 1"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "encoder.num_heads",
                format!("{} does not divide hidden_size {}", self.num_heads, self.hidden_size),
            ));
        }
        if self.ffn_size < self.hidden_size {
            return Err(Error::config("encoder.ffn_size", "must be at least hidden_size"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("encoder.layer_norm_eps", "must be positive"));
        }
        Ok(())
    }
}

/// The four per-head attention matrices of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 4] = [MatrixKind::Query, MatrixKind::Key, MatrixKind::Value, MatrixKind::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::Query => "query",
            MatrixKind::Key => "key",
            MatrixKind::Value => "value",
            MatrixKind::Output => "output",
        }
    }
}

/// A prunable matrix: `layer` is zero-based over transformer layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatrixSite {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl MatrixSite {
    pub fn new(layer: usize, kind: MatrixKind) -> Self {
        Self { layer, kind }
    }
}

/// Substitutes the effective weight used in the forward pass.
pub trait WeightGate {
    fn gate(&self, site: MatrixSite, weight: &Tensor) -> Result<Tensor>;
}

/// Uses every weight as is.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoGate;

impl WeightGate for NoGate {
    fn gate(&self, _site: MatrixSite, weight: &Tensor) -> Result<Tensor> {
        Ok(weight.clone())
    }
}

/// Fixed binary (or arbitrary) multiplicative masks per matrix.
#[derive(Debug, Clone, Default)]
pub struct FixedMasks {
    pub masks: BTreeMap<MatrixSite, Tensor>,
}

impl FixedMasks {
    pub fn insert(&mut self, site: MatrixSite, mask: Tensor) {
        self.masks.insert(site, mask);
    }

    /// Zeroes columns `[h·d_h, (h+1)·d_h)` of one matrix, keeping earlier masks.
    pub fn mask_head(&mut self, config: &EncoderConfig, site: MatrixSite, head: usize) {
        let d = config.hidden_size;
        let dh = config.head_size();
        let mut values = self.masks.get(&site).map_or_else(|| vec![1.0; d * d], Tensor::to_vec);
        for r in 0..d {
            for c in head * dh..(head + 1) * dh {
                values[r * d + c] = 0.0;
            }
        }
        let mask = Tensor::new(values, &[d, d]).expect("square mask");
        self.masks.insert(site, mask);
    }
}

impl WeightGate for FixedMasks {
    fn gate(&self, site: MatrixSite, weight: &Tensor) -> Result<Tensor> {
        match self.masks.get(&site) {
            Some(mask) => Ok(weight.mul(mask)?),
            None => Ok(weight.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub output_bias: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

impl LayerWeights {
    pub fn matrix(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::Query => &self.query,
            MatrixKind::Key => &self.key,
            MatrixKind::Value => &self.value,
            MatrixKind::Output => &self.output,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Tensor {
        match kind {
            MatrixKind::Query => &mut self.query,
            MatrixKind::Key => &mut self.key,
            MatrixKind::Value => &mut self.value,
            MatrixKind::Output => &mut self.output,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 13] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
            ("output_bias", &self.output_bias),
            ("attn_norm_gain", &self.attn_norm_gain),
            ("attn_norm_bias", &self.attn_norm_bias),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
            ("ffn_norm_gain", &self.ffn_norm_gain),
            ("ffn_norm_bias", &self.ffn_norm_bias),
        ]
    }

    fn slots(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.output_bias,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }
}

/// Output of one attention block.
#[derive(Debug, Clone)]
pub struct Attention {
    /// `[N × d]`, after the output projection.
    pub output: Tensor,
    /// Per-head `[N × N]` attention probabilities.
    pub probs: Vec<Tensor>,
    /// Per-head `[N × d_h]` outputs before concatenation.
    pub head_outputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_norm_gain: Tensor,
    pub embed_norm_bias: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lm_dense: Tensor,
    pub lm_dense_bias: Tensor,
    pub lm_norm_gain: Tensor,
    pub lm_norm_bias: Tensor,
    pub lm_output_bias: Tensor,
}

impl EncoderModel {
    /// Normal(0, 0.02) matrices, zero biases, unit norm gains.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut matrix = |rows: usize, cols: usize| -> Result<Tensor> {
            let values = (0..rows * cols).map(|_| normal.sample(&mut *rng)).collect();
            Ok(Tensor::param(values, &[rows, cols])?)
        };
        let d = config.hidden_size;
        let zeros = |n: usize| Tensor::param(vec![0.0; n], &[n]);
        let ones = |n: usize| Tensor::param(vec![1.0; n], &[n]);
        let token_embedding = matrix(config.vocab_size, d)?;
        let position_embedding = matrix(config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                query: matrix(d, d)?,
                key: matrix(d, d)?,
                value: matrix(d, d)?,
                output: matrix(d, d)?,
                output_bias: zeros(d)?,
                attn_norm_gain: ones(d)?,
                attn_norm_bias: zeros(d)?,
                ffn_in: matrix(d, config.ffn_size)?,
                ffn_in_bias: zeros(config.ffn_size)?,
                ffn_out: matrix(config.ffn_size, d)?,
                ffn_out_bias: zeros(d)?,
                ffn_norm_gain: ones(d)?,
                ffn_norm_bias: zeros(d)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            embed_norm_gain: ones(d)?,
            embed_norm_bias: zeros(d)?,
            layers,
            lm_dense: matrix(d, d)?,
            lm_dense_bias: zeros(d)?,
            lm_norm_gain: ones(d)?,
            lm_norm_bias: zeros(d)?,
            lm_output_bias: zeros(config.vocab_size)?,
        })
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("embed_norm_gain".into(), &self.embed_norm_gain),
            ("embed_norm_bias".into(), &self.embed_norm_bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.extend([
            ("lm_dense".into(), &self.lm_dense),
            ("lm_dense_bias".into(), &self.lm_dense_bias),
            ("lm_norm_gain".into(), &self.lm_norm_gain),
            ("lm_norm_bias".into(), &self.lm_norm_bias),
            ("lm_output_bias".into(), &self.lm_output_bias),
        ]);
        out
    }

    /// Mutable parameter slots in the order of [`EncoderModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_norm_gain,
            &mut self.embed_norm_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.slots());
        }
        out.extend([
            &mut self.lm_dense,
            &mut self.lm_dense_bias,
            &mut self.lm_norm_gain,
            &mut self.lm_norm_bias,
            &mut self.lm_output_bias,
        ]);
        out
    }

    /// Copy whose parameters are fresh leaves with the given flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        let mut out = self.clone();
        for slot in out.params_mut() {
            *slot = slot.with_requires_grad(requires_grad);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over all parameter values, in `named_params` order.
    pub fn weights_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "unknown token id {bad} (vocab size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embedding, layer-normalized.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let x = self
            .token_embedding
            .select_rows(tokens)?
            .add(&self.position_embedding.select_rows(&positions)?)?;
        Ok(x.layer_norm(&self.embed_norm_gain, &self.embed_norm_bias, self.config.layer_norm_eps)?)
    }

    /// Multi-head self-attention of layer `layer` (zero-based) on `x`.
    pub fn self_attention(&self, x: &Tensor, layer: usize, gate: &dyn WeightGate) -> Result<Attention> {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let (n, width) = match x.shape() {
            [n, w] => (*n, *w),
            other => return Err(Error::Data(format!("self_attention expects [N × d], got {other:?}"))),
        };
        if width != d || n > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "self_attention input {:?} incompatible with hidden size {d} / max length {}",
                x.shape(),
                cfg.max_seq_len
            )));
        }
        let weights = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Data(format!("layer {layer} out of range")))?;
        let effective = |kind: MatrixKind| -> Result<Tensor> {
            let w = gate.gate(MatrixSite::new(layer, kind), weights.matrix(kind))?;
            if w.shape() != [d, d] {
                return Err(Error::Data(format!("{} gate returned shape {:?}", kind.as_str(), w.shape())));
            }
            Ok(w)
        };
        let q = x.matmul(&effective(MatrixKind::Query)?)?;
        let k = x.matmul(&effective(MatrixKind::Key)?)?;
        let v = x.matmul(&effective(MatrixKind::Value)?)?;
        let dh = cfg.head_size();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = Vec::with_capacity(cfg.num_heads);
        let mut head_outputs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let p = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
            head_outputs.push(p.matmul(&vh)?);
            probs.push(p);
        }
        let concat = Tensor::concat_cols(&head_outputs)?;
        let output = concat
            .matmul(&effective(MatrixKind::Output)?)?
            .add_row(&weights.output_bias)?;
        Ok(Attention {
            output,
            probs,
            head_outputs,
        })
    }

    fn layer_forward(&self, x: &Tensor, layer: usize, gate: &dyn WeightGate) -> Result<Tensor> {
        let w = &self.layers[layer];
        let eps = self.config.layer_norm_eps;
        let attn = self.self_attention(x, layer, gate)?;
        let x = x.add(&attn.output)?.layer_norm(&w.attn_norm_gain, &w.attn_norm_bias, eps)?;
        let ff = x
            .matmul(&w.ffn_in)?
            .add_row(&w.ffn_in_bias)?
            .gelu()
            .matmul(&w.ffn_out)?
            .add_row(&w.ffn_out_bias)?;
        Ok(x.add(&ff)?.layer_norm(&w.ffn_norm_gain, &w.ffn_norm_bias, eps)?)
    }

    /// Hidden states of the embedding layer (index 0) and of every
    /// transformer layer (indices `1..=L`).
    pub fn forward(&self, tokens: &[usize], gate: &dyn WeightGate) -> Result<Vec<Tensor>> {
        let mut states = Vec::with_capacity(self.config.num_layers + 1);
        let mut x = self.embed(tokens)?;
        states.push(x.clone());
        for layer in 0..self.config.num_layers {
            x = self.layer_forward(&x, layer, gate)?;
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Vocabulary logits `[P × V]` for the given rows of a final hidden state.
    pub fn lm_logits(&self, last_state: &Tensor, positions: &[usize]) -> Result<Tensor> {
        let h = last_state.select_rows(positions)?;
        let t = h
            .matmul(&self.lm_dense)?
            .add_row(&self.lm_dense_bias)?
            .gelu()
            .layer_norm(&self.lm_norm_gain, &self.lm_norm_bias, self.config.layer_norm_eps)?;
        Ok(t.matmul(&self.token_embedding.transpose()?)?.add_row(&self.lm_output_bias)?)
    }
}

/// The `[CLS]` vector (row 0) of hidden state `layer`.
pub fn sentence_embedding(hidden_states: &[Tensor], layer: usize) -> Result<Tensor> {
    let state = hidden_states.get(layer).ok_or_else(|| {
        Error::Data(format!(
            "layer {layer} out of range for {} hidden states",
            hidden_states.len()
        ))
    })?;
    Ok(state.row(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng, Stream};

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 16,
            vocab_size: 12,
            max_seq_len: 6,
            layer_norm_eps: 1e-12,
        }
    }

    fn model() -> EncoderModel {
        EncoderModel::init(&small_config(), &mut rng(7, Stream::Init)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        assert!(cfg.validate().is_ok());
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "encoder.num_heads"));
        let mut cfg = small_config();
        cfg.ffn_size = 4;
        assert!(cfg.validate().is_err());
        assert_eq!(EncoderConfig::bert_base(30522).head_size(), 64);
    }

    #[test]
    fn forward_returns_l_plus_one_states() {
        let m = model();
        let states = m.forward(&[2, 5, 6, 3], &NoGate).unwrap();
        assert_eq!(states.len(), 3);
        assert!(states.iter().all(|s| s.shape() == [4, 8]));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let a = m.forward(&[2, 5, 6, 3], &NoGate).unwrap();
        let b = m.forward(&[2, 5, 6, 3], &NoGate).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn all_ones_masks_match_unmasked_exactly() {
        let m = model();
        let mut masks = FixedMasks::default();
        for layer in 0..2 {
            for kind in MatrixKind::ALL {
                masks.insert(MatrixSite::new(layer, kind), Tensor::ones(&[8, 8]));
            }
        }
        let a = m.forward(&[2, 5, 6, 3], &NoGate).unwrap();
        let b = m.forward(&[2, 5, 6, 3], &masks).unwrap();
        assert_eq!(a.last().unwrap().data(), b.last().unwrap().data());
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = model();
        assert!(matches!(m.forward(&[2, 99], &NoGate), Err(Error::Data(_))));
        assert!(m.forward(&[], &NoGate).is_err());
        assert!(m.forward(&[1; 7], &NoGate).is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = model();
        let x = m.embed(&[4]).unwrap();
        let attn = m.self_attention(&x, 0, &NoGate).unwrap();
        for p in &attn.probs {
            assert_eq!(p.data(), &[1.0]);
        }
        // output = v projected
        let v = x.matmul(&m.layers[0].value).unwrap();
        let expected = v.matmul(&m.layers[0].output).unwrap().add_row(&m.layers[0].output_bias).unwrap();
        for (a, b) in attn.output.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_query_gives_uniform_attention_and_mean_values() {
        let m = model();
        let cfg = small_config();
        let mut masks = FixedMasks::default();
        masks.mask_head(&cfg, MatrixSite::new(0, MatrixKind::Query), 1);
        let x = m.embed(&[2, 7]).unwrap();
        let attn = m.self_attention(&x, 0, &masks).unwrap();
        assert!(attn.probs[1].data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let v = x.matmul(&m.layers[0].value).unwrap().slice_cols(4, 8).unwrap();
        let out = &attn.head_outputs[1];
        for c in 0..4 {
            let mean = 0.5 * (v.data()[c] + v.data()[4 + c]);
            assert!((out.data()[c] - mean).abs() < 1e-15);
            assert!((out.data()[4 + c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_value_silences_head() {
        let m = model();
        let mut masks = FixedMasks::default();
        masks.mask_head(&small_config(), MatrixSite::new(1, MatrixKind::Value), 0);
        let x = m.embed(&[2, 7, 8]).unwrap();
        let attn = m.self_attention(&x, 1, &masks).unwrap();
        assert!(attn.head_outputs[0].data().iter().all(|&v| v == 0.0));
        assert!(attn.head_outputs[1].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cls_embedding_is_first_row_of_requested_layer() {
        let m = model();
        let states = m.forward(&[2, 5, 3], &NoGate).unwrap();
        let cls = sentence_embedding(&states, 2).unwrap();
        assert_eq!(cls.data(), &states[2].data()[..8]);
        assert!(sentence_embedding(&states, 3).is_err());
        // position 0 at the embedding layer only sees its own token
        let other = m.forward(&[2, 5, 3, 9, 10], &NoGate).unwrap();
        assert_eq!(sentence_embedding(&other, 0).unwrap().data(), sentence_embedding(&states, 0).unwrap().data());
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut m = model();
        m.position_embedding = Tensor::zeros(&[6, 8]);
        let tokens = [2, 5, 6, 9];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
        let a = m.forward(&tokens, &NoGate).unwrap();
        let b = m.forward(&permuted, &NoGate).unwrap();
        let (la, lb) = (a.last().unwrap(), b.last().unwrap());
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((lb.data()[row * 8 + c] - la.data()[src * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let m = model();
        let mut other = m.clone();
        assert_eq!(m.weights_checksum(), other.weights_checksum());
        let mut v = other.layers[0].value.to_vec();
        v[0] += 1e-9;
        other.layers[0].value = Tensor::param(v, &[8, 8]).unwrap();
        assert_ne!(m.weights_checksum(), other.weights_checksum());
    }
}
