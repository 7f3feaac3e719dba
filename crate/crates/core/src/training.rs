//! Training regimes for long inputs and the validation protocols used for
//! early stopping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chunker::{encode_long, encode_long_backward, encode_long_cached, EncodedInput};
use crate::error::{Error, Result};
use crate::evalbench::needle_recall;
use crate::knn_index::Datastore;
use crate::model::{
    encode_window_backward, encode_window_cached, greedy_generate, teacher_forced_loss, Adam, CrossAttentionProvider,
    HeadProjection, ModelConfig, ModelWeights, Selection, TokenId, BOS, EOS,
};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::retrieval::{KnnCrossAttention, RetrievalLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StandardTruncated,
    TrainChunked,
    RandomEncoded,
    Retrieval,
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    Truncated,
    Unlimiformer,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::StandardTruncated => "standard_truncated",
            Variant::TrainChunked => "train_chunked",
            Variant::RandomEncoded => "random_encoded",
            Variant::Retrieval => "retrieval",
            Variant::Alternating => "alternating",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown training variant {s:?}")))
    }
}

impl fmt::Display for ValidationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValidationMode::Truncated => "truncated",
            ValidationMode::Unlimiformer => "unlimiformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingRegime {
    pub variant: Variant,
    pub validation_mode: ValidationMode,
    /// Longest input any step encodes; `None` means 16 windows.
    pub train_truncation_limit: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for TrainingRegime {
    fn default() -> Self {
        Self {
            variant: Variant::Retrieval,
            validation_mode: ValidationMode::Unlimiformer,
            train_truncation_limit: None,
            max_epochs: 30,
            patience: 3,
            learning_rate: Adam::<f32>::DEFAULT_LR,
        }
    }
}

impl TrainingRegime {
    pub fn truncation_limit(&self, window: usize) -> usize {
        self.train_truncation_limit.unwrap_or(16 * window)
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.truncation_limit(window) < window {
            return Err(Error::Config(format!(
                "train_truncation_limit must be at least the window ({window})"
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Step kind used for the `batch`-th batch (0-based).
    pub fn step_kind(&self, batch: u64) -> Variant {
        match self.variant {
            Variant::Alternating if batch % 2 == 0 => Variant::RandomEncoded,
            Variant::Alternating => Variant::Retrieval,
            Variant::TrainChunked => Variant::StandardTruncated,
            v => v,
        }
    }
}

/// One `(input, target)` pair. Targets carry BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    /// Target tokens without BOS/EOS.
    pub fn answer(&self) -> &[TokenId] {
        let t = self.target.strip_prefix(&[BOS]).unwrap_or(&self.target);
        t.strip_suffix(&[EOS]).unwrap_or(t)
    }
}

fn parse_tokens(field: &str, line: usize) -> Result<Vec<TokenId>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse::<TokenId>().map_err(|_| Error::Data {
                line,
                msg: format!("bad token {t:?}"),
            })
        })
        .collect()
}

/// Parses `input tokens <TAB> target tokens` lines. BOS/EOS are added to
/// targets that lack them; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (input, target) = raw.split_once('\t').ok_or_else(|| Error::Data {
            line,
            msg: "expected input and target separated by a tab".into(),
        })?;
        let input = parse_tokens(input, line)?;
        let mut target = parse_tokens(target, line)?;
        if input.is_empty() {
            return Err(Error::Data {
                line,
                msg: "empty input".into(),
            });
        }
        if target.first() != Some(&BOS) {
            target.insert(0, BOS);
        }
        if target.len() == 1 || target.last() != Some(&EOS) {
            target.push(EOS);
        }
        out.push(Example { input, target });
    }
    if out.is_empty() {
        return Err(Error::Data {
            line: 0,
            msg: "corpus has no examples".into(),
        });
    }
    Ok(out)
}

pub fn format_corpus(examples: &[Example]) -> String {
    let join = |t: &[TokenId]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", join(&e.input), join(&e.target)))
        .collect()
}

/// Splits every input into consecutive non-overlapping `window`-token
/// pieces, each paired with the full target.
pub fn augment_chunked(corpus: &[Example], window: usize) -> Vec<Example> {
    corpus
        .iter()
        .flat_map(|e| {
            e.input.chunks(window).map(|c| Example {
                input: c.to_vec(),
                target: e.target.clone(),
            })
        })
        .collect()
}

/// Attention over every memory row.
pub struct FullMemory<T: Scalar = f32>(pub Matrix<T>);

impl<T: Scalar> CrossAttentionProvider<T> for FullMemory<T> {
    fn memory(&self) -> &Matrix<T> {
        &self.0
    }

    fn select(&mut self, _: usize, _: &HeadProjection<T>, _: &[T]) -> Result<Selection> {
        Ok(Selection::All)
    }
}

/// `k` memory rows drawn uniformly without replacement, one draw per decoder
/// layer shared by all of that layer's heads and positions.
pub struct RandomEncoded<T: Scalar = f32> {
    memory: Matrix<T>,
    k: usize,
    rng: Rng,
    samples: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> RandomEncoded<T> {
    pub fn new(memory: Matrix<T>, k: usize, n_layers: usize, rng: Rng) -> Self {
        Self {
            memory,
            k,
            rng,
            samples: vec![None; n_layers],
        }
    }

    pub fn samples(&self) -> &[Option<Vec<usize>>] {
        &self.samples
    }
}

impl<T: Scalar> CrossAttentionProvider<T> for RandomEncoded<T> {
    fn memory(&self) -> &Matrix<T> {
        &self.memory
    }

    fn select(&mut self, _: usize, hp: &HeadProjection<T>, _: &[T]) -> Result<Selection> {
        let n = self.memory.rows();
        let k = self.k;
        let rng = &mut self.rng;
        let slot = self
            .samples
            .get_mut(hp.layer)
            .ok_or_else(|| Error::arg(format!("layer {} out of range", hp.layer)))?;
        Ok(Selection::Rows(slot.get_or_insert_with(|| rng.sample_without_replacement(n, k)).clone()))
    }
}

/// Replays recorded selections, `[layer][head][position]`.
pub struct FixedSelections<T: Scalar = f32> {
    pub memory: Matrix<T>,
    pub selections: Vec<Vec<Vec<Selection>>>,
}

impl<T: Scalar> CrossAttentionProvider<T> for FixedSelections<T> {
    fn memory(&self) -> &Matrix<T> {
        &self.memory
    }

    fn select(&mut self, step: usize, hp: &HeadProjection<T>, _: &[T]) -> Result<Selection> {
        self.selections
            .get(hp.layer)
            .and_then(|l| l.get(hp.head))
            .and_then(|h| h.get(step))
            .cloned()
            .ok_or_else(|| Error::State(format!("no recorded selection for step {step}")))
    }
}

/// Loss and gradients of one batch-size-1 step.
pub struct StepOutput<T: Scalar = f32> {
    pub loss: T,
    pub grads: ModelWeights<T>,
    /// Number of input tokens the encoder saw.
    pub encoded_len: usize,
    pub selections: Vec<Vec<Vec<Selection>>>,
    pub log: RetrievalLog,
}

/// Input truncated to one window, full attention over it.
pub fn make_step_standard<T: Scalar>(weights: &ModelWeights<T>, example: &Example) -> Result<StepOutput<T>> {
    let w = weights.config.window;
    let input = &example.input[..example.input.len().min(w)];
    let (hidden, cache) = encode_window_cached(weights, input)?;
    let mut cross = FullMemory(hidden);
    let mut out = teacher_forced_loss(weights, &mut cross, &example.target)?;
    encode_window_backward(weights, &cache, &out.d_memory, &mut out.grads)?;
    Ok(StepOutput {
        loss: out.loss,
        grads: out.grads,
        encoded_len: input.len(),
        selections: out.selections,
        log: RetrievalLog::default(),
    })
}

/// Whole input (up to `limit` tokens) chunk-encoded; every decoder layer
/// attends to `k` randomly drawn rows.
pub fn make_step_random_encoded<T: Scalar>(
    weights: &ModelWeights<T>,
    example: &Example,
    k: usize,
    limit: usize,
    rng: Rng,
) -> Result<StepOutput<T>> {
    let input = &example.input[..example.input.len().min(limit)];
    let (encoded, chunks) = encode_long_cached(weights, input)?;
    let mut cross = RandomEncoded::new(encoded.hidden, k, weights.config.n_dec_layers, rng);
    let mut out = teacher_forced_loss(weights, &mut cross, &example.target)?;
    encode_long_backward(weights, &chunks, &out.d_memory, &mut out.grads)?;
    Ok(StepOutput {
        loss: out.loss,
        grads: out.grads,
        encoded_len: input.len(),
        selections: out.selections,
        log: RetrievalLog::default(),
    })
}

/// Whole input (up to `limit` tokens) chunk-encoded and indexed; every head
/// attends to its own top-`k` rows, exactly as at inference.
pub fn make_step_retrieval<T: Scalar>(
    weights: &ModelWeights<T>,
    example: &Example,
    k: usize,
    limit: usize,
) -> Result<StepOutput<T>> {
    let input = &example.input[..example.input.len().min(limit)];
    let (encoded, chunks) = encode_long_cached(weights, input)?;
    let mut cross = KnnCrossAttention::retrieval(Datastore::build(encoded)?, k)?;
    let mut out = teacher_forced_loss(weights, &mut cross, &example.target)?;
    encode_long_backward(weights, &chunks, &out.d_memory, &mut out.grads)?;
    Ok(StepOutput {
        loss: out.loss,
        grads: out.grads,
        encoded_len: input.len(),
        selections: out.selections,
        log: cross.take_log(),
    })
}

/// Loss of `example` with the cross-attention row sets held fixed; the
/// function a finite-difference check perturbs.
pub fn loss_with_fixed_selections<T: Scalar>(
    weights: &ModelWeights<T>,
    example: &Example,
    limit: usize,
    selections: &[Vec<Vec<Selection>>],
) -> Result<T> {
    let input = &example.input[..example.input.len().min(limit)];
    let encoded = encode_long(weights, input)?;
    let mut cross = FixedSelections {
        memory: encoded.hidden,
        selections: selections.to_vec(),
    };
    Ok(teacher_forced_loss(weights, &mut cross, &example.target)?.loss)
}

fn mean_recall(generations: &[Vec<TokenId>], corpus: &[Example]) -> f64 {
    let total: f64 = generations
        .iter()
        .zip(corpus)
        .map(|(g, e)| needle_recall(g, e.answer()))
        .sum();
    total / corpus.len() as f64
}

/// Greedy generations with retrieval over the full inputs.
pub fn generate_unlimiformer(weights: &ModelWeights, corpus: &[Example], k: usize) -> Result<Vec<Vec<TokenId>>> {
    corpus
        .iter()
        .map(|e| {
            let ds = Datastore::build(encode_long(weights, &e.input)?)?;
            let mut cross = KnnCrossAttention::retrieval(ds, k)?;
            greedy_generate(weights, &mut cross, weights.config.window - 1)
        })
        .collect()
}

/// Greedy generations from the first window of each input.
pub fn generate_truncated(weights: &ModelWeights, corpus: &[Example]) -> Result<Vec<Vec<TokenId>>> {
    let w = weights.config.window;
    corpus
        .iter()
        .map(|e| {
            let input = &e.input[..e.input.len().min(w)];
            let hidden = crate::model::encode_window(weights, input)?;
            greedy_generate(weights, &mut FullMemory(hidden), w - 1)
        })
        .collect()
}

pub fn validate_unlimiformer(weights: &ModelWeights, corpus: &[Example], k: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::arg("validation corpus is empty"));
    }
    Ok(mean_recall(&generate_unlimiformer(weights, corpus, k)?, corpus))
}

pub fn validate_truncated(weights: &ModelWeights, corpus: &[Example]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::arg("validation corpus is empty"));
    }
    Ok(mean_recall(&generate_truncated(weights, corpus)?, corpus))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
    pub regime: Variant,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_score,regime";

pub fn format_train_log(records: &[EpochRecord]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.epoch, r.train_loss, r.val_score, r.regime));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Weights from the epoch with the best validation score.
    pub weights: ModelWeights,
    pub optimizer: Adam,
    /// Epochs run.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub batches_seen: u64,
    pub log: Vec<EpochRecord>,
    /// Most tokens encoded by any single step.
    pub max_encoded_len: usize,
}

/// Batch-size-1 training with early stopping on validation needle recall.
pub fn train(
    config: &ModelConfig,
    regime: &TrainingRegime,
    k: usize,
    corpus: &[Example],
    validation: &[Example],
) -> Result<TrainState> {
    config.validate()?;
    regime.validate(config.window)?;
    if corpus.is_empty() {
        return Err(Error::arg("training corpus is empty"));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let data = match regime.variant {
        Variant::TrainChunked => augment_chunked(corpus, config.window),
        _ => corpus.to_vec(),
    };
    let limit = regime.truncation_limit(config.window);
    let root = Rng::new(config.seed).split(0x7472_6169_6e);
    let mut weights = ModelWeights::init(config)?;
    let mut optimizer = Adam::new(&weights, regime.learning_rate);
    let mut state = TrainState {
        weights: weights.clone(),
        optimizer: optimizer.clone(),
        epoch: 0,
        best_epoch: 0,
        best_val_score: f64::NEG_INFINITY,
        batches_seen: 0,
        log: Vec::new(),
        max_encoded_len: 0,
    };
    let mut stale = 0;
    for epoch in 1..=regime.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.split(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let example = &data[i];
            let batch = state.batches_seen;
            let step = match regime.step_kind(batch) {
                Variant::RandomEncoded => {
                    let rng = root.split(1 << 40 | batch);
                    make_step_random_encoded(&weights, example, k, limit, rng)?
                }
                Variant::Retrieval => make_step_retrieval(&weights, example, k, limit)?,
                _ => make_step_standard(&weights, example)?,
            };
            if !step.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at batch {batch}")));
            }
            total += step.loss as f64;
            state.max_encoded_len = state.max_encoded_len.max(step.encoded_len);
            optimizer.update(&mut weights, &step.grads);
            state.batches_seen += 1;
        }
        let val_score = match regime.validation_mode {
            ValidationMode::Unlimiformer => validate_unlimiformer(&weights, validation, k)?,
            ValidationMode::Truncated => validate_truncated(&weights, validation)?,
        };
        state.epoch = epoch;
        state.log.push(EpochRecord {
            epoch,
            train_loss: total / data.len() as f64,
            val_score,
            regime: regime.variant,
        });
        if val_score > state.best_val_score {
            state.best_val_score = val_score;
            state.best_epoch = epoch;
            state.weights = weights.clone();
            state.optimizer = optimizer.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > regime.patience {
                break;
            }
        }
    }
    Ok(state)
}

/// Encoded memory for inference under the given validation mode.
pub fn encode_for_mode(weights: &ModelWeights, input: &[TokenId], mode: ValidationMode) -> Result<EncodedInput> {
    match mode {
        ValidationMode::Unlimiformer => encode_long(weights, input),
        ValidationMode::Truncated => {
            let input = &input[..input.len().min(weights.config.window)];
            Ok(EncodedInput {
                hidden: crate::model::encode_window(weights, input)?,
                positions: (0..input.len()).collect(),
            })
        }
    }
}
