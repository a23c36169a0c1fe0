//! Block movement pruning over frozen weights.
//!
//! Each prunable matrix `W ∈ ℝ^{M×N}` gets a score matrix
//! `S ∈ ℝ^{(M/M′)×(N/N′)}`. The forward pass uses `W ⊙ M(S)` where
//! `M_ij = 1(σ(S_block(i,j)) > τ)`. The indicator has no useful derivative,
//! so the backward pass treats it as the identity on `σ(S)`:
//!
//! ```text
//! ∂L/∂S_b = Σ_{(i,j) ∈ b} ∂L/∂W′_ij · W_ij · σ′(S_b)
//! ```

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, StoredTensor};
use crate::debias::{debias_loss, DebiasExample, DebiasSpec, Snapshot};
use crate::encoder::{EncoderConfig, EncoderModel, MatrixKind, MatrixSite, WeightGate};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{self, Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryMode {
    Square,
    /// One block per head slice of `W^V`.
    ValueHead,
}

/// Block shape in the `[in × out]` weight orientation used by the encoder.
///
/// In `value_head` mode a block spans all `d` input rows and the `d_h`
/// output columns of one head, so `W^V` carries exactly one score per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub block_rows: usize,
    pub block_cols: usize,
    pub mode: GeometryMode,
}

impl BlockGeometry {
    pub fn square(block: usize) -> Self {
        Self {
            block_rows: block,
            block_cols: block,
            mode: GeometryMode::Square,
        }
    }

    pub fn value_head(config: &EncoderConfig) -> Self {
        Self {
            block_rows: config.hidden_size,
            block_cols: config.head_size(),
            mode: GeometryMode::ValueHead,
        }
    }

    /// Parses `square-<B>` or `value-head`.
    pub fn parse(label: &str, config: &EncoderConfig) -> Result<Self> {
        if label == "value-head" {
            return Ok(Self::value_head(config));
        }
        let block = label
            .strip_prefix("square-")
            .and_then(|b| b.parse::<usize>().ok())
            .filter(|&b| b > 0)
            .ok_or_else(|| Error::config("pruning.geometry", format!("`{label}` is not square-<B> or value-head")))?;
        Ok(Self::square(block))
    }

    pub fn label(&self) -> String {
        match self.mode {
            GeometryMode::Square => format!("square-{}", self.block_rows),
            GeometryMode::ValueHead => "value-head".into(),
        }
    }

    /// Score-matrix shape for a `rows × cols` weight.
    pub fn score_shape(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        if self.block_rows == 0 || self.block_cols == 0 || !rows.is_multiple_of(self.block_rows) || !cols.is_multiple_of(self.block_cols) {
            return Err(Error::Geometry(format!(
                "blocks of {}×{} do not tile a {rows}×{cols} matrix",
                self.block_rows, self.block_cols
            )));
        }
        Ok((rows / self.block_rows, cols / self.block_cols))
    }

    pub fn default_targets(&self) -> &'static [MatrixKind] {
        match self.mode {
            GeometryMode::Square => &MatrixKind::ALL,
            GeometryMode::ValueHead => &[MatrixKind::Value],
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config("tau", format!("threshold {tau} outside [0, 1)")));
    }
    Ok(())
}

/// Expands block decisions `1(σ(S) > τ)` to a full-resolution `rows × cols` mask.
pub fn make_mask(scores: &Tensor, geometry: &BlockGeometry, rows: usize, cols: usize, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (sr, sc) = geometry.score_shape(rows, cols)?;
    if scores.shape() != [sr, sc] {
        return Err(Error::Geometry(format!(
            "score shape {:?} does not match {sr}×{sc} blocks",
            scores.shape()
        )));
    }
    if scores.data().iter().any(|s| !s.is_finite()) {
        return Err(Error::Training {
            step: 0,
            message: "non-finite pruning score".into(),
        });
    }
    Ok(Tensor::new(expand_blocks(&block_keep(scores.data(), tau), geometry, rows, cols), &[rows, cols])?)
}

fn block_keep(scores: &[f64], tau: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if tensor::sigmoid(s) > tau { 1.0 } else { 0.0 })
        .collect()
}

fn expand_blocks(blocks: &[f64], geometry: &BlockGeometry, rows: usize, cols: usize) -> Vec<f64> {
    let sc = cols / geometry.block_cols;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let bi = i / geometry.block_rows;
        for j in 0..cols {
            out[i * cols + j] = blocks[bi * sc + j / geometry.block_cols];
        }
    }
    out
}

struct StraightThroughMask {
    geometry: BlockGeometry,
    rows: usize,
    cols: usize,
    mask: Vec<f64>,
    sigmoid_slope: Vec<f64>,
}

impl Backward for StraightThroughMask {
    fn name(&self) -> &'static str {
        "block_mask"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (weight, scores) = (&inputs[0], &inputs[1]);
        let gw = weight
            .requires_grad()
            .then(|| grad.iter().zip(&self.mask).map(|(g, m)| g * m).collect());
        let gs = scores.requires_grad().then(|| {
            let sc = self.cols / self.geometry.block_cols;
            let mut out = vec![0.0; scores.numel()];
            let w = weight.data();
            for i in 0..self.rows {
                let bi = i / self.geometry.block_rows;
                for j in 0..self.cols {
                    out[bi * sc + j / self.geometry.block_cols] += grad[i * self.cols + j] * w[i * self.cols + j];
                }
            }
            out.iter_mut().zip(&self.sigmoid_slope).for_each(|(o, s)| *o *= s);
            out
        });
        vec![gw, gs]
    }
}

/// `W ⊙ M(S)` with the straight-through score gradient.
pub fn masked_weight(weight: &Tensor, scores: &Tensor, geometry: &BlockGeometry, tau: f64) -> Result<Tensor> {
    let (rows, cols) = match weight.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::Geometry(format!("expected a matrix, got {other:?}"))),
    };
    let mask = make_mask(scores, geometry, rows, cols, tau)?.to_vec();
    let out = weight.data().iter().zip(&mask).map(|(w, m)| w * m).collect();
    let sigmoid_slope = scores
        .data()
        .iter()
        .map(|&s| {
            let p = tensor::sigmoid(s);
            p * (1.0 - p)
        })
        .collect();
    let node = StraightThroughMask {
        geometry: *geometry,
        rows,
        cols,
        mask,
        sigmoid_slope,
    };
    Ok(Tensor::from_op(out, vec![rows, cols], node, vec![weight.clone(), scores.clone()]))
}

/// `X · (W ⊙ M(S))`
pub fn masked_linear_forward(
    x: &Tensor,
    weight: &Tensor,
    scores: &Tensor,
    geometry: &BlockGeometry,
    tau: f64,
) -> Result<Tensor> {
    Ok(x.matmul(&masked_weight(weight, scores, geometry, tau)?)?)
}

/// Threshold rising linearly from 0 to `tau_final` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub tau_final: f64,
    pub total_steps: usize,
}

impl ThresholdSchedule {
    pub fn new(tau_final: f64, total_steps: usize) -> Result<Self> {
        check_tau(tau_final)?;
        if total_steps == 0 {
            return Err(Error::config("pruning.total_steps", "must be at least 1"));
        }
        Ok(Self { tau_final, total_steps })
    }

    /// `tau_final · step / T`; steps past `T` clamp to `tau_final`.
    pub fn tau_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return self.tau_final;
        }
        self.tau_final * step as f64 / self.total_steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct ScoreEntry {
    pub site: MatrixSite,
    pub rows: usize,
    pub cols: usize,
    pub scores: Tensor,
}

impl ScoreEntry {
    pub fn mask(&self, geometry: &BlockGeometry, tau: f64) -> Result<Tensor> {
        make_mask(&self.scores, geometry, self.rows, self.cols, tau)
    }

    /// Number of unmasked weight entries.
    fn kept(&self, geometry: &BlockGeometry, tau: f64) -> usize {
        let block = geometry.block_rows * geometry.block_cols;
        block_keep(self.scores.data(), tau).iter().filter(|&&k| k > 0.0).count() * block
    }
}

/// Scores attached to a model's attention matrices.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub geometry: BlockGeometry,
    pub frozen_weights: bool,
    pub entries: Vec<ScoreEntry>,
}

/// Attaches scores initialized to `init` to every targeted matrix of every
/// layer. `targets = None` selects the geometry's defaults: all four head
/// matrices for square blocks, `W^V` alone for whole-head blocks.
pub fn attach_scores(
    config: &EncoderConfig,
    geometry: BlockGeometry,
    init: f64,
    targets: Option<&[MatrixKind]>,
    frozen_weights: bool,
) -> Result<ScoreSet> {
    let targets = targets.unwrap_or(geometry.default_targets());
    if geometry.mode == GeometryMode::ValueHead && targets != [MatrixKind::Value] {
        return Err(Error::Geometry("value-head blocks apply to the value matrices only".into()));
    }
    let d = config.hidden_size;
    let (sr, sc) = geometry.score_shape(d, d)?;
    let mut entries = Vec::new();
    for layer in 0..config.num_layers {
        for &kind in targets {
            entries.push(ScoreEntry {
                site: MatrixSite::new(layer, kind),
                rows: d,
                cols: d,
                scores: Tensor::param(vec![init; sr * sc], &[sr, sc])?,
            });
        }
    }
    entries.sort_by_key(|e| e.site);
    Ok(ScoreSet {
        geometry,
        frozen_weights,
        entries,
    })
}

/// Head survival per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMap {
    pub count: usize,
    /// `pruned[layer][head]`
    pub pruned: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct ScoreMeta {
    geometry: BlockGeometry,
    frozen_weights: bool,
    sites: Vec<(MatrixSite, usize, usize)>,
}

pub const SCORES_KIND: &str = "scores";

impl ScoreSet {
    pub fn get(&self, site: MatrixSite) -> Option<&ScoreEntry> {
        self.entries
            .binary_search_by_key(&site, |e| e.site)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn gate(&self, tau: f64) -> ScoreGate<'_> {
        ScoreGate { scores: self, tau }
    }

    pub fn score_tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.scores).collect()
    }

    pub fn score_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.scores).collect()
    }

    pub fn num_scores(&self) -> usize {
        self.entries.iter().map(|e| e.scores.numel()).sum()
    }

    /// Fraction of unmasked entries among the layer's prunable entries.
    /// Layers without scores are fully dense.
    pub fn layer_density(&self, tau: f64, layer: usize) -> f64 {
        let (kept, total) = self
            .entries
            .iter()
            .filter(|e| e.site.layer == layer)
            .fold((0, 0), |(k, t), e| (k + e.kept(&self.geometry, tau), t + e.rows * e.cols));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    /// Density over every prunable entry.
    pub fn overall_density(&self, tau: f64) -> f64 {
        let (kept, total) = self
            .entries
            .iter()
            .fold((0, 0), |(k, t), e| (k + e.kept(&self.geometry, tau), t + e.rows * e.cols));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    /// A head counts as pruned when its whole `W^V` column slice is masked,
    /// which forces its attention output to zero.
    pub fn count_pruned_heads(&self, tau: f64, config: &EncoderConfig) -> Result<HeadMap> {
        let dh = config.head_size();
        let mut pruned = vec![vec![false; config.num_heads]; config.num_layers];
        for (layer, row) in pruned.iter_mut().enumerate() {
            let Some(entry) = self.get(MatrixSite::new(layer, MatrixKind::Value)) else {
                continue;
            };
            let mask = entry.mask(&self.geometry, tau)?;
            let m = mask.data();
            for (h, flag) in row.iter_mut().enumerate() {
                *flag = (0..entry.rows).all(|r| m[r * entry.cols + h * dh..r * entry.cols + (h + 1) * dh].iter().all(|&v| v == 0.0));
            }
        }
        let count = pruned.iter().flatten().filter(|&&p| p).count();
        Ok(HeadMap { count, pruned })
    }

    /// `Some` when every block is kept or every block is pruned.
    pub fn degenerate(&self, tau: f64) -> Option<&'static str> {
        let density = self.overall_density(tau);
        if density == 1.0 {
            Some("every block kept")
        } else if density == 0.0 {
            Some("every block pruned")
        } else {
            None
        }
    }

    pub fn to_archive(&self) -> Archive {
        let meta = ScoreMeta {
            geometry: self.geometry,
            frozen_weights: self.frozen_weights,
            sites: self.entries.iter().map(|e| (e.site, e.rows, e.cols)).collect(),
        };
        Archive {
            kind: SCORES_KIND.into(),
            metadata: serde_json::to_string(&meta).expect("serializable"),
            tensors: self
                .entries
                .iter()
                .map(|e| StoredTensor {
                    name: format!("layers.{}.{}", e.site.layer, e.site.kind.as_str()),
                    shape: e.scores.shape().to_vec(),
                    values: e.scores.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        archive.expect_kind(SCORES_KIND)?;
        let meta: ScoreMeta = archive.metadata()?;
        if meta.sites.len() != archive.tensors.len() {
            return Err(Error::Checkpoint("score site count disagrees with tensors".into()));
        }
        let mut entries = Vec::with_capacity(meta.sites.len());
        for ((site, rows, cols), stored) in meta.sites.into_iter().zip(&archive.tensors) {
            let (sr, sc) = meta
                .geometry
                .score_shape(rows, cols)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if stored.shape != [sr, sc] {
                return Err(Error::Checkpoint(format!("score tensor `{}` has shape {:?}", stored.name, stored.shape)));
            }
            entries.push(ScoreEntry {
                site,
                rows,
                cols,
                scores: Tensor::param(stored.values.clone(), &stored.shape)?,
            });
        }
        Ok(Self {
            geometry: meta.geometry,
            frozen_weights: meta.frozen_weights,
            entries,
        })
    }

    /// Errors unless the scores fit the model's matrices.
    pub fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        for e in &self.entries {
            if e.site.layer >= config.num_layers || e.rows != config.hidden_size || e.cols != config.hidden_size {
                return Err(Error::Checkpoint(format!(
                    "scores for layer {} ({}×{}) do not fit the model",
                    e.site.layer, e.rows, e.cols
                )));
            }
        }
        Ok(())
    }
}

/// Applies the score masks at a fixed threshold during the forward pass.
pub struct ScoreGate<'a> {
    scores: &'a ScoreSet,
    tau: f64,
}

impl WeightGate for ScoreGate<'_> {
    fn gate(&self, site: MatrixSite, weight: &Tensor) -> Result<Tensor> {
        match self.scores.get(site) {
            Some(entry) => masked_weight(weight, &entry.scores, &self.scores.geometry, self.tau),
            None => Ok(weight.clone()),
        }
    }
}

/// Optimizer state of a fine-pruning run: Adam on scores, and on the
/// weights too when they are not frozen.
pub struct PruneOptimizer {
    pub scores: Adam,
    pub weights: Option<Adam>,
}

impl PruneOptimizer {
    pub fn new(scores: &ScoreSet, model: &EncoderModel, score_lr: f64, weight_lr: f64) -> Self {
        let weights = (!scores.frozen_weights).then(|| {
            let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
            Adam::for_params(weight_lr, &params)
        });
        Self {
            scores: Adam::for_params(score_lr, &scores.score_tensors()),
            weights,
        }
    }
}

/// One fine-pruning update at threshold `τ(step)`.
///
/// With frozen weights the model's parameters enter the graph as constants
/// and only the scores move; otherwise the weights are updated as well.
#[allow(clippy::too_many_arguments)]
pub fn fineprune_step(
    model: &mut EncoderModel,
    scores: &mut ScoreSet,
    snapshot: &Snapshot,
    batch: &[DebiasExample],
    spec: &DebiasSpec,
    optimizer: &mut PruneOptimizer,
    schedule: &ThresholdSchedule,
    step: usize,
) -> Result<f64> {
    if step >= schedule.total_steps {
        return Err(Error::Training {
            step,
            message: format!("schedule has only {} steps", schedule.total_steps),
        });
    }
    let trainable_weights = !scores.frozen_weights;
    if model.named_params().iter().any(|(_, t)| t.requires_grad() != trainable_weights) {
        *model = model.with_requires_grad(trainable_weights);
    }
    let tau = schedule.tau_at(step);
    let loss = debias_loss(model, snapshot, batch, spec, &scores.gate(tau))?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("debias loss is {value}"),
        });
    }
    loss.backward()?;
    optimizer.scores.step(&mut scores.score_tensors_mut())?;
    if let Some(opt) = optimizer.weights.as_mut() {
        opt.step(&mut model.params_mut())?;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{grad_check, grad_check_split};
    use crate::rng::{rng, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            hidden_size: 8,
            ffn_size: 8,
            vocab_size: 10,
            max_seq_len: 4,
            layer_norm_eps: 1e-12,
        }
    }

    fn scores(values: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::new(values.to_vec(), &[r, c]).unwrap()
    }

    #[test]
    fn saturated_scores() {
        let g = BlockGeometry::square(2);
        let on = make_mask(&scores(&[10.0], 1, 1), &g, 2, 2, 0.1).unwrap();
        assert_eq!(on.data(), &[1.0; 4]);
        let off = make_mask(&scores(&[-10.0], 1, 1), &g, 2, 2, 0.1).unwrap();
        assert_eq!(off.data(), &[0.0; 4]);
    }

    #[test]
    fn threshold_is_strict() {
        let g = BlockGeometry::square(1);
        let m = make_mask(&scores(&[0.0, 1e-12, -1e-12], 1, 3), &g, 1, 3, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_errors() {
        let g = BlockGeometry::square(3);
        assert!(matches!(make_mask(&scores(&[0.0], 1, 1), &g, 4, 4, 0.1), Err(Error::Geometry(_))));
        let g = BlockGeometry::square(2);
        assert!(make_mask(&scores(&[0.0], 1, 1), &g, 2, 2, 1.0).is_err());
        assert!(make_mask(&scores(&[0.0, 0.0], 1, 2), &g, 2, 2, 0.1).is_err());
    }

    #[test]
    fn geometry_labels() {
        let c = cfg();
        assert_eq!(BlockGeometry::parse("square-4", &c).unwrap(), BlockGeometry::square(4));
        let vh = BlockGeometry::parse("value-head", &c).unwrap();
        assert_eq!((vh.block_rows, vh.block_cols), (8, 2));
        assert_eq!(vh.label(), "value-head");
        assert!(BlockGeometry::parse("square-0", &c).is_err());
        assert!(BlockGeometry::parse("round-4", &c).is_err());
    }

    #[test]
    fn extreme_scores_give_identity_or_zero_map() {
        let mut r = rng(1, Stream::GradCheck);
        let x = Tensor::new((0..12).map(|_| r.random_range(-2.0..2.0)).collect(), &[3, 4]).unwrap();
        let w = Tensor::new((0..16).map(|_| r.random_range(-2.0..2.0)).collect(), &[4, 4]).unwrap();
        let g = BlockGeometry::square(2);
        let dense = masked_linear_forward(&x, &w, &scores(&[50.0; 4], 2, 2), &g, 0.1).unwrap();
        assert_eq!(dense.data(), x.matmul(&w).unwrap().data());
        let empty = masked_linear_forward(&x, &w, &scores(&[-50.0; 4], 2, 2), &g, 0.1).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    /// σ(S) in place of the indicator: the smooth surrogate the
    /// straight-through gradient is derived from.
    fn soft_weight(w: &Tensor, s: &Tensor, g: &BlockGeometry) -> Tensor {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let sc = cols / g.block_cols;
        let idx: Vec<usize> = (0..rows * cols)
            .map(|k| (k / cols / g.block_rows) * sc + (k % cols) / g.block_cols)
            .collect();
        let flat = s.reshape(&[s.numel(), 1]).unwrap().sigmoid();
        let expanded = flat.select_rows(&idx).unwrap().reshape(&[rows, cols]).unwrap();
        w.mul(&expanded).unwrap()
    }

    #[test]
    fn straight_through_matches_linearized_relaxation() {
        let mut r = rng(2, Stream::GradCheck);
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-2.0..2.0)).collect() };
        let g = BlockGeometry::square(2);
        let x = Tensor::new(sample(12), &[3, 4]).unwrap();
        let w = Tensor::new(sample(16), &[4, 4]).unwrap();
        let y = Tensor::new(sample(12), &[3, 4]).unwrap();
        let s0 = Tensor::new(vec![1.3, -0.4, 0.7, -1.9], &[2, 2]).unwrap();
        let tau = 0.3;
        let hard = make_mask(&s0, &g, 4, 4, tau).unwrap();
        let soft0 = soft_weight(&Tensor::ones(&[4, 4]), &s0, &g).detach();
        let loss_of = |out: Tensor| out.sub(&y).unwrap().square().sum();
        // straight-through on the hard mask
        let grad_f = |p: &[Tensor]| Ok(loss_of(masked_linear_forward(&x, &w, &p[0], &g, tau).unwrap()));
        // W ⊙ (M(S₀) + σ(S) − σ(S₀)): equal to the hard forward at S₀, smooth in S
        let value_f = |p: &[Tensor]| {
            let relaxed = hard.add(&soft_weight(&Tensor::ones(&[4, 4]), &p[0], &g)).unwrap().sub(&soft0).unwrap();
            Ok(loss_of(x.matmul(&w.mul(&relaxed).unwrap()).unwrap()).item())
        };
        let coords: Vec<(usize, usize)> = (0..4).map(|i| (0, i)).collect();
        let report = grad_check_split(grad_f, value_f, std::slice::from_ref(&s0), &coords, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // and the fully soft version is an ordinary differentiable function
        let soft = grad_check(|p| Ok(loss_of(x.matmul(&soft_weight(&w, &p[0], &g))?)), &[s0], 1e-5).unwrap();
        assert!(soft.max_rel_error < 1e-6, "{soft:?}");
    }

    #[test]
    fn frozen_weight_gets_no_gradient_but_trainable_one_does() {
        let g = BlockGeometry::square(1);
        let w = Tensor::new(vec![2.0], &[1, 1]).unwrap();
        let s = Tensor::param(vec![0.0], &[1, 1]).unwrap();
        masked_weight(&w, &s, &g, 0.1).unwrap().sum().backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(s.grad().unwrap(), vec![2.0 * 0.25]);

        let w = Tensor::param(vec![2.0], &[1, 1]).unwrap();
        let s = Tensor::param(vec![-5.0], &[1, 1]).unwrap();
        masked_weight(&w, &s, &g, 0.1).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = ThresholdSchedule::new(0.1, 200).unwrap();
        assert_eq!(s.tau_at(0), 0.0);
        assert_eq!(s.tau_at(200), 0.1);
        assert_eq!(s.tau_at(100), 0.05);
        assert_eq!(s.tau_at(10_000), 0.1);
        assert!(ThresholdSchedule::new(0.1, 0).is_err());
    }

    #[test]
    fn attach_shapes() {
        let c = EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            hidden_size: 64,
            ffn_size: 128,
            vocab_size: 10,
            max_seq_len: 4,
            layer_norm_eps: 1e-12,
        };
        let sq = attach_scores(&c, BlockGeometry::square(16), 0.0, None, true).unwrap();
        assert_eq!(sq.entries.len(), 16);
        assert!(sq.entries.iter().all(|e| e.scores.shape() == [4, 4]));
        let vh = attach_scores(&c, BlockGeometry::value_head(&c), 0.0, None, true).unwrap();
        assert_eq!(vh.entries.len(), 4);
        assert!(vh.entries.iter().all(|e| e.scores.shape() == [1, 4] && e.site.kind == MatrixKind::Value));
        // nothing pruned at the start of a run
        assert_eq!(vh.overall_density(0.0), 1.0);
        assert_eq!(vh.count_pruned_heads(0.0, &c).unwrap().count, 0);
        assert!(attach_scores(&c, BlockGeometry::square(24), 0.0, None, true).is_err());
        assert!(attach_scores(&c, BlockGeometry::value_head(&c), 0.0, Some(&MatrixKind::ALL), true).is_err());
    }

    fn set_scores(set: &mut ScoreSet, site: MatrixSite, values: Vec<f64>) {
        let e = set.entries.iter_mut().find(|e| e.site == site).unwrap();
        e.scores = Tensor::param(values, e.scores.shape()).unwrap();
    }

    #[test]
    fn densities_and_head_counts() {
        let c = cfg();
        let mut set = attach_scores(&c, BlockGeometry::square(4), 1.0, None, true).unwrap();
        assert_eq!(set.layer_density(0.5 - 1e-9, 0), 1.0);
        // half of the layer-0 blocks below threshold
        for kind in [MatrixKind::Query, MatrixKind::Key] {
            set_scores(&mut set, MatrixSite::new(0, kind), vec![-1.0; 4]);
        }
        assert_eq!(set.layer_density(0.5, 0), 0.5);
        assert_eq!(set.layer_density(0.5, 1), 1.0);
        assert_eq!(set.count_pruned_heads(0.5, &c).unwrap().count, 0);
        // value blocks: columns 0..4 cover heads 0 and 1 (d_h = 2)
        set_scores(&mut set, MatrixSite::new(1, MatrixKind::Value), vec![-1.0, 1.0, -1.0, 1.0]);
        let map = set.count_pruned_heads(0.5, &c).unwrap();
        assert_eq!(map.count, 2);
        assert_eq!(map.pruned[1], vec![true, true, false, false]);
        assert_eq!(set.degenerate(0.5), None);
    }

    #[test]
    fn hand_built_head_map() {
        let c = cfg();
        let mut set = attach_scores(&c, BlockGeometry::value_head(&c), 3.0, None, true).unwrap();
        set_scores(&mut set, MatrixSite::new(0, MatrixKind::Value), vec![3.0, -3.0, 3.0, -3.0]);
        set_scores(&mut set, MatrixSite::new(1, MatrixKind::Value), vec![-3.0, 3.0, 3.0, 3.0]);
        let map = set.count_pruned_heads(0.1, &c).unwrap();
        assert_eq!(map.count, 3);
        assert_eq!(map.pruned, vec![vec![false, true, false, true], vec![true, false, false, false]]);
        // σ(S) ≤ τ counts, σ(S) > τ does not
        let boundary = (0.1f64 / 0.9).ln();
        set_scores(&mut set, MatrixSite::new(1, MatrixKind::Value), vec![boundary - 1e-9, boundary + 1e-9, 3.0, 3.0]);
        assert_eq!(set.count_pruned_heads(0.1, &c).unwrap().pruned[1], vec![true, false, false, false]);
    }

    #[test]
    fn score_archive_round_trip() {
        let c = cfg();
        let mut set = attach_scores(&c, BlockGeometry::square(4), 0.0, None, false).unwrap();
        set_scores(&mut set, MatrixSite::new(1, MatrixKind::Output), vec![0.5, -1.5, 2.0, 0.25]);
        let back = ScoreSet::from_archive(&Archive::from_bytes(&set.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.geometry, set.geometry);
        assert!(!back.frozen_weights);
        for (a, b) in set.entries.iter().zip(&back.entries) {
            assert_eq!(a.site, b.site);
            assert_eq!(a.scores.data(), b.scores.data());
        }
        back.check_compatible(&c).unwrap();
        let mut other = c.clone();
        other.num_layers = 1;
        assert!(back.check_compatible(&other).is_err());
    }

    /// Per-entry evaluation of 1(σ(S_{⌊i/M′⌋,⌊j/N′⌋}) > τ).
    fn brute_force(s: &[f64], sc: usize, br: usize, bc: usize, rows: usize, cols: usize, tau: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = s[(i / br) * sc + j / bc];
                out.push(if 1.0 / (1.0 + (-v).exp()) > tau { 1.0 } else { 0.0 });
            }
        }
        out
    }

    proptest! {
        #[test]
        fn mask_matches_brute_force(
            br in prop::sample::select(vec![1usize, 2, 4]),
            bc in prop::sample::select(vec![1usize, 2, 4]),
            sr in 1usize..=4,
            sc in 1usize..=4,
            tau in 0.0f64..0.99,
            seed in any::<u64>(),
        ) {
            let rows = sr * br;
            let cols = sc * bc;
            prop_assume!(rows <= 8 && cols <= 8);
            let mut r = rng(seed, Stream::GradCheck);
            let s: Vec<f64> = (0..sr * sc).map(|_| r.random_range(-4.0..4.0)).collect();
            let g = BlockGeometry { block_rows: br, block_cols: bc, mode: GeometryMode::Square };
            let mask = make_mask(&Tensor::new(s.clone(), &[sr, sc]).unwrap(), &g, rows, cols, tau).unwrap();
            prop_assert_eq!(mask.to_vec(), brute_force(&s, sc, br, bc, rows, cols, tau));
        }

        #[test]
        fn mask_is_monotone_in_tau(seed in any::<u64>(), t1 in 0.0f64..0.99, t2 in 0.0f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut r = rng(seed, Stream::GradCheck);
            let s = Tensor::new((0..16).map(|_| r.random_range(-4.0..4.0)).collect(), &[4, 4]).unwrap();
            let g = BlockGeometry::square(2);
            let a = make_mask(&s, &g, 8, 8, lo).unwrap();
            let b = make_mask(&s, &g, 8, 8, hi).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y <= x));
        }
    }
}
