//! Orthogonality debiasing objective.
//!
//! Attribute-word embeddings (two groups, e.g. male and female terms) are
//! pushed orthogonal to embeddings of stereotyped target words, while a
//! regularizer keeps every hidden state close to a frozen copy of the
//! original model.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{CorpusSpec, EncoderModel, NoGate, Tokenizer, WeightGate};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which hidden-state layers feed the loss. Index 0 is the embedding output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    All,
    Last,
    Intermediate,
    Custom(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Only the target word's own vector.
    Token,
    /// Every token vector of a sentence containing a target word.
    Sentence,
}

/// Model that produces the attribute embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    /// The frozen original model; attribute vectors are constants.
    Original,
    /// The model being trained.
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributePooling {
    /// One vector per occurrence.
    PerOccurrence,
    /// Occurrences of the same word in a batch are averaged.
    PerType,
}

/// Layer selection and scope, written `<layers>-<scope>` on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebiasMode {
    pub layers: LayerMode,
    pub scope: Scope,
}

impl DebiasMode {
    /// The six standard combinations of {all, last, intermediate} × {token, sentence}.
    pub fn standard() -> Vec<DebiasMode> {
        let mut out = Vec::new();
        for layers in [LayerMode::All, LayerMode::Last, LayerMode::Intermediate] {
            for scope in [Scope::Token, Scope::Sentence] {
                out.push(DebiasMode {
                    layers: layers.clone(),
                    scope,
                });
            }
        }
        out
    }

    /// Parses `all-token`, `intermediate-sentence`, `custom:1,2-token`, …
    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::config("debias.mode", format!("`{label}` is not <all|last|intermediate|custom:i,j>-<token|sentence>"));
        let (layers, scope) = label.rsplit_once('-').ok_or_else(bad)?;
        let scope = match scope {
            "token" => Scope::Token,
            "sentence" => Scope::Sentence,
            _ => return Err(bad()),
        };
        let layers = match layers {
            "all" => LayerMode::All,
            "last" => LayerMode::Last,
            "intermediate" => LayerMode::Intermediate,
            other => {
                let list = other.strip_prefix("custom:").ok_or_else(bad)?;
                let idx = list
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                LayerMode::Custom(idx)
            }
        };
        Ok(Self { layers, scope })
    }

    pub fn label(&self) -> String {
        let layers = match &self.layers {
            LayerMode::All => "all".to_string(),
            LayerMode::Last => "last".to_string(),
            LayerMode::Intermediate => "intermediate".to_string(),
            LayerMode::Custom(v) => format!("custom:{}", v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
        };
        let scope = match self.scope {
            Scope::Token => "token",
            Scope::Sentence => "sentence",
        };
        format!("{layers}-{scope}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasSpec {
    pub attributes_a: Vec<String>,
    pub attributes_b: Vec<String>,
    pub targets: Vec<String>,
    pub layers: LayerMode,
    pub scope: Scope,
    /// λ, the weight of the drift regularizer.
    pub reg_weight: f64,
    pub attribute_source: AttributeSource,
    pub attribute_pooling: AttributePooling,
}

impl DebiasSpec {
    /// Word lists taken from a corpus specification, all-token mode, λ = 1.
    pub fn from_corpus(corpus: &CorpusSpec) -> Self {
        Self {
            attributes_a: corpus.attributes_a.clone(),
            attributes_b: corpus.attributes_b.clone(),
            targets: corpus.targets().cloned().collect(),
            layers: LayerMode::All,
            scope: Scope::Token,
            reg_weight: 1.0,
            attribute_source: AttributeSource::Original,
            attribute_pooling: AttributePooling::PerOccurrence,
        }
    }

    pub fn with_mode(mut self, mode: &DebiasMode) -> Self {
        self.layers = mode.layers.clone();
        self.scope = mode.scope;
        self
    }

    pub fn mode(&self) -> DebiasMode {
        DebiasMode {
            layers: self.layers.clone(),
            scope: self.scope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("debias.attributes_a", &self.attributes_a),
            ("debias.attributes_b", &self.attributes_b),
            ("debias.targets", &self.targets),
        ];
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, words) in lists {
            if words.is_empty() {
                return Err(Error::config(name, "word list is empty"));
            }
            for w in words {
                if let Some(prev) = owner.insert(w.as_str(), name) {
                    if prev != name {
                        return Err(Error::config(name, format!("`{w}` also appears in {prev}")));
                    }
                }
            }
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config("debias.reg_weight", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Reads one word per line; blank lines and `#` comments are skipped.
pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    if words.is_empty() {
        return Err(Error::Data(format!("word list {} is empty", path.display())));
    }
    Ok(words)
}

/// Hidden-state indices used by the loss, for a model with `num_layers` blocks.
pub fn select_layers(mode: &LayerMode, num_layers: usize) -> Result<Vec<usize>> {
    if num_layers == 0 {
        return Err(Error::config("encoder.num_layers", "must be at least 1"));
    }
    Ok(match mode {
        LayerMode::All => (1..=num_layers).collect(),
        LayerMode::Last => vec![num_layers],
        LayerMode::Intermediate => {
            let mut out: Vec<usize> = (1..=4)
                .map(|k| ((num_layers * k) as f64 / 12.0).round().max(1.0) as usize)
                .collect();
            out.dedup();
            out
        }
        LayerMode::Custom(list) => {
            if list.is_empty() {
                return Err(Error::config("debias.layers", "custom layer list is empty"));
            }
            if let Some(bad) = list.iter().find(|&&l| l > num_layers) {
                return Err(Error::config("debias.layers", format!("layer {bad} exceeds depth {num_layers}")));
            }
            let mut out = list.clone();
            out.sort_unstable();
            out.dedup();
            out
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    AttributeA,
    AttributeB,
    Target,
}

/// A tokenized sentence with the positions of one kind of marked word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebiasExample {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub kind: ExampleKind,
}

impl DebiasExample {
    pub fn new(tokens: Vec<usize>, positions: Vec<usize>, kind: ExampleKind) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Data("example has no marked position".into()));
        }
        if let Some(p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Data(format!("position {p} out of range for {} tokens", tokens.len())));
        }
        Ok(Self { tokens, positions, kind })
    }
}

fn gather(states: &[Tensor], example: &DebiasExample, scope: Scope, layer: usize) -> Result<Tensor> {
    let state = states
        .get(layer)
        .ok_or_else(|| Error::config("debias.layers", format!("layer {layer} not among {} states", states.len())))?;
    let rows = state.shape()[0];
    if let Some(p) = example.positions.iter().find(|&&p| p >= rows) {
        return Err(Error::Data(format!("position {p} out of range for {rows} tokens")));
    }
    Ok(match scope {
        Scope::Token => state.select_rows(&example.positions)?,
        Scope::Sentence => state.clone(),
    })
}

/// Embedding vectors of `example` at each of `layers`, layer-major.
pub fn extract_embeddings(
    hidden_states: &[Tensor],
    example: &DebiasExample,
    scope: Scope,
    layers: &[usize],
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for &layer in layers {
        let m = gather(hidden_states, example, scope, layer)?;
        for r in 0..m.shape()[0] {
            out.push(m.row(r)?);
        }
    }
    Ok(out)
}

fn stack(vectors: &[Tensor]) -> Result<Tensor> {
    let rows = vectors
        .iter()
        .map(|v| match v.shape() {
            [d] => Ok(v.reshape(&[1, *d])?),
            other => Err(Error::Data(format!("expected a vector, got shape {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_rows(&rows)?)
}

/// Σ ⟨a, t⟩² over every row pair of two matrices.
fn pair_sq_sum(attrs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(attrs.matmul(&targets.transpose()?)?.square().sum())
}

/// Mean of ⟨e_a, e_t⟩² over all attribute–target pairs.
pub fn orthogonality_loss(attribute_embs: &[Tensor], target_embs: &[Tensor]) -> Result<Tensor> {
    if attribute_embs.is_empty() || target_embs.is_empty() {
        return Err(Error::Data("orthogonality loss needs attribute and target embeddings".into()));
    }
    let a = stack(attribute_embs)?;
    let t = stack(target_embs)?;
    if a.shape()[1] != t.shape()[1] {
        return Err(Error::Data(format!(
            "attribute dimension {} differs from target dimension {}",
            a.shape()[1],
            t.shape()[1]
        )));
    }
    let pairs = (a.shape()[0] * t.shape()[0]) as f64;
    Ok(pair_sq_sum(&a, &t)?.scale(1.0 / pairs))
}

/// Mean squared Euclidean distance between corresponding rows. The second
/// argument is treated as a constant.
pub fn regularizer_loss(debiased_states: &[Tensor], original_states: &[Tensor]) -> Result<Tensor> {
    if debiased_states.len() != original_states.len() || debiased_states.is_empty() {
        return Err(Error::Data(format!(
            "{} debiased states against {} original states",
            debiased_states.len(),
            original_states.len()
        )));
    }
    let mut terms = Vec::with_capacity(debiased_states.len());
    let mut rows = 0usize;
    for (d, o) in debiased_states.iter().zip(original_states) {
        if d.shape() != o.shape() {
            return Err(Error::Data(format!("state shapes {:?} and {:?} differ", d.shape(), o.shape())));
        }
        rows += d.shape().first().copied().unwrap_or(1);
        terms.push(d.sub(&o.detach())?.square().sum());
    }
    Ok(Tensor::sum_all(&terms)?.scale(1.0 / rows as f64))
}

/// Frozen copy of the model taken before debiasing, with memoized states.
pub struct Snapshot {
    model: EncoderModel,
    cache: RefCell<HashMap<Vec<usize>, Rc<Vec<Tensor>>>>,
}

impl Snapshot {
    pub fn new(model: &EncoderModel) -> Self {
        Self {
            model: model.with_requires_grad(false),
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    /// Hidden states of the unmasked original model.
    pub fn states(&self, tokens: &[usize]) -> Result<Rc<Vec<Tensor>>> {
        if let Some(hit) = self.cache.borrow().get(tokens) {
            return Ok(hit.clone());
        }
        let states = Rc::new(self.model.forward(tokens, &NoGate)?);
        self.cache.borrow_mut().insert(tokens.to_vec(), states.clone());
        Ok(states)
    }
}

/// Orthogonality term averaged over every (layer, attribute, target)
/// triple, plus λ times the drift of all hidden states (layers 0..=L) of
/// every batch sentence from the snapshot.
pub fn debias_loss(
    model: &EncoderModel,
    snapshot: &Snapshot,
    batch: &[DebiasExample],
    spec: &DebiasSpec,
    gate: &dyn WeightGate,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Data("empty debias batch".into()));
    }
    let layers = select_layers(&spec.layers, model.config.num_layers)?;

    let mut sentences: BTreeMap<&[usize], (Vec<Tensor>, Rc<Vec<Tensor>>)> = BTreeMap::new();
    for ex in batch {
        if !sentences.contains_key(ex.tokens.as_slice()) {
            let trained = model.forward(&ex.tokens, gate)?;
            let original = snapshot.states(&ex.tokens)?;
            sentences.insert(&ex.tokens, (trained, original));
        }
    }

    let mut ortho_terms = Vec::new();
    let mut pairs = 0usize;
    for &layer in &layers {
        let mut attrs: Vec<Tensor> = Vec::new();
        let mut by_type: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
        let mut targets: Vec<Tensor> = Vec::new();
        for ex in batch {
            let (trained, original) = &sentences[ex.tokens.as_slice()];
            match ex.kind {
                ExampleKind::Target => targets.push(gather(trained, ex, spec.scope, layer)?),
                ExampleKind::AttributeA | ExampleKind::AttributeB => {
                    let source: &[Tensor] = match spec.attribute_source {
                        AttributeSource::Original => original,
                        AttributeSource::Trainable => trained,
                    };
                    let rows = gather(source, ex, Scope::Token, layer)?;
                    match spec.attribute_pooling {
                        AttributePooling::PerOccurrence => attrs.push(rows),
                        AttributePooling::PerType => {
                            for (i, &p) in ex.positions.iter().enumerate() {
                                by_type.entry(ex.tokens[p]).or_default().push(rows.select_rows(&[i])?);
                            }
                        }
                    }
                }
            }
        }
        for occurrences in by_type.into_values() {
            let n = occurrences.len();
            let weights = Tensor::new(vec![1.0 / n as f64; n], &[1, n])?;
            attrs.push(weights.matmul(&Tensor::concat_rows(&occurrences)?)?);
        }
        if attrs.is_empty() || targets.is_empty() {
            continue;
        }
        let a = Tensor::concat_rows(&attrs)?;
        let t = Tensor::concat_rows(&targets)?;
        pairs += a.shape()[0] * t.shape()[0];
        ortho_terms.push(pair_sq_sum(&a, &t)?);
    }

    let mut loss = if pairs == 0 {
        Tensor::scalar(0.0)
    } else {
        Tensor::sum_all(&ortho_terms)?.scale(1.0 / pairs as f64)
    };
    if spec.reg_weight > 0.0 {
        let mut trained_all = Vec::new();
        let mut original_all = Vec::new();
        for (trained, original) in sentences.values() {
            trained_all.extend(trained.iter().cloned());
            original_all.extend(original.iter().cloned());
        }
        let reg = regularizer_loss(&trained_all, &original_all)?;
        loss = loss.add(&reg.scale(spec.reg_weight))?;
    }
    Ok(loss)
}

fn marked(tokens: &[usize], words: &HashSet<usize>) -> Vec<usize> {
    (0..tokens.len()).filter(|&i| words.contains(&tokens[i])).collect()
}

/// Tokenizes sentences, marks attribute and target occurrences, shuffles
/// sentence order with `rng` and groups `batch_size` sentences per batch.
/// Sentences without any marked word are dropped.
pub fn build_debias_batches(
    corpus: &[String],
    spec: &DebiasSpec,
    tokenizer: &Tokenizer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<DebiasExample>>> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::config("debias.batch_size", "must be at least 1"));
    }
    let ids = |words: &[String]| -> HashSet<usize> { words.iter().filter_map(|w| tokenizer.id(w)).collect() };
    let groups = [
        (ExampleKind::AttributeA, ids(&spec.attributes_a), "attributes_a"),
        (ExampleKind::AttributeB, ids(&spec.attributes_b), "attributes_b"),
        (ExampleKind::Target, ids(&spec.targets), "targets"),
    ];
    let mut seen = [false; 3];
    let mut per_sentence = Vec::new();
    for sentence in corpus {
        let tokens = tokenizer.encode(sentence)?;
        let mut examples = Vec::new();
        for (g, (kind, words, _)) in groups.iter().enumerate() {
            let positions = marked(&tokens, words);
            if !positions.is_empty() {
                seen[g] = true;
                examples.push(DebiasExample::new(tokens.clone(), positions, *kind)?);
            }
        }
        if !examples.is_empty() {
            per_sentence.push(examples);
        }
    }
    if let Some(g) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("no occurrences of any word from {} in the corpus", groups[g].2)));
    }
    per_sentence.shuffle(rng);
    Ok(per_sentence.chunks(batch_size).map(|c| c.concat()).collect())
}

/// One plain fine-tuning update of all model weights on the debias loss.
pub fn debias_step(
    model: &mut EncoderModel,
    snapshot: &Snapshot,
    batch: &[DebiasExample],
    spec: &DebiasSpec,
    optimizer: &mut Adam,
    step: usize,
) -> Result<f64> {
    if model.named_params().iter().any(|(_, t)| !t.requires_grad()) {
        *model = model.with_requires_grad(true);
    }
    let loss = debias_loss(model, snapshot, batch, spec, &NoGate)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("debias loss is {value}"),
        });
    }
    loss.backward()?;
    optimizer.step(&mut model.params_mut())?;
    Ok(value)
}
