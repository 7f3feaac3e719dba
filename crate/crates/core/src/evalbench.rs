//! Recall metrics, the synthetic needle task, the inference scaling
//! benchmark and retrieval-location histograms.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::chunker::encode_long;
use crate::error::{Error, Result};
use crate::knn_index::Datastore;
use crate::model::{DecodeSession, ModelWeights, TokenId, BOS};
use crate::numerics::Rng;
use crate::retrieval::{KnnCrossAttention, RetrievalLog};
use crate::training::Example;

fn contains_run(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of distinct gold entities that occur contiguously in
/// `candidate`. Empty gold counts as full recall.
pub fn entity_mention_recall(candidate: &[TokenId], gold: &[Vec<TokenId>]) -> f64 {
    let unique: BTreeSet<&[TokenId]> = gold.iter().map(Vec::as_slice).collect();
    if unique.is_empty() {
        return 1.0;
    }
    let hits = unique.iter().filter(|e| contains_run(candidate, e)).count();
    hits as f64 / unique.len() as f64
}

pub fn needle_recall(generated: &[TokenId], gold_needles: &[TokenId]) -> f64 {
    let gold: Vec<Vec<TokenId>> = gold_needles.iter().map(|&t| vec![t]).collect();
    entity_mention_recall(generated, &gold)
}

/// Needle-copy task: filler input with `needles` distinct marker tokens at
/// uniform random positions; the target lists them in order of appearance.
///
/// Token ids `[4, 4 + filler_vocab)` are filler and
/// `[4 + filler_vocab, vocab_size)` are needles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub input_length: usize,
    pub window: usize,
    pub needles: usize,
    pub vocab_size: usize,
    pub filler_vocab: usize,
    pub examples: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            input_length: 128,
            window: 16,
            needles: 8,
            vocab_size: 128,
            filler_vocab: 8,
            examples: 200,
            seed: 0,
        }
    }
}

pub const FIRST_FILLER: TokenId = 4;

impl SyntheticTask {
    pub fn needle_ids(&self) -> std::ops::Range<TokenId> {
        (FIRST_FILLER as usize + self.filler_vocab) as TokenId..self.vocab_size as TokenId
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_length < self.window {
            return Err(Error::arg(format!(
                "input length {} is shorter than the window {}",
                self.input_length, self.window
            )));
        }
        if self.needles == 0 || self.needles > self.input_length / 4 {
            return Err(Error::arg(format!(
                "needle count {} must be in 1..={}",
                self.needles,
                self.input_length / 4
            )));
        }
        if self.filler_vocab == 0 {
            return Err(Error::arg("filler vocabulary is empty"));
        }
        if self.needle_ids().len() < self.needles {
            return Err(Error::arg(format!(
                "vocabulary of {} leaves fewer than {} needle ids",
                self.vocab_size, self.needles
            )));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Example>> {
        generate_needle_task(self)
    }
}

pub fn generate_needle_task(task: &SyntheticTask) -> Result<Vec<Example>> {
    task.validate()?;
    let root = Rng::new(task.seed).split(0x6e65_6564_6c65);
    let ids = task.needle_ids();
    let n = task.input_length;
    Ok((0..task.examples)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let mut input: Vec<TokenId> = (0..n)
                .map(|_| FIRST_FILLER + rng.below(task.filler_vocab) as TokenId)
                .collect();
            let mut positions = rng.sample_without_replacement(n, task.needles);
            let tokens = rng.sample_without_replacement(ids.len(), task.needles);
            for (&p, &t) in positions.iter().zip(&tokens) {
                input[p] = ids.start + t as TokenId;
            }
            positions.sort_unstable();
            let mut target = vec![BOS];
            target.extend(positions.iter().map(|&p| input[p]));
            target.push(crate::model::EOS);
            Example { input, target }
        })
        .collect())
}

/// Positions of the needles of `example` under `task`'s vocabulary layout.
pub fn needle_positions(task: &SyntheticTask, example: &Example) -> Vec<usize> {
    let ids = task.needle_ids();
    example
        .input
        .iter()
        .enumerate()
        .filter(|(_, t)| ids.contains(t))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub input_length: usize,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
    pub total_seconds: f64,
    pub relative_to_baseline: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>12}  {:>12}  {:>12}  {:>12}  {:>9}\n",
            "input_length", "encode_s", "decode_s", "total_s", "relative"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>12}  {:>12.6}  {:>12.6}  {:>12.6}  {:>9.3}",
                r.input_length, r.encode_seconds, r.decode_seconds, r.total_seconds, r.relative_to_baseline
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("input_length,encode_seconds,decode_seconds,total_seconds,relative_to_baseline\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.input_length, r.encode_seconds, r.decode_seconds, r.total_seconds, r.relative_to_baseline
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub repetitions: usize,
    /// Decoder steps per repetition; generation never stops early.
    pub output_tokens: usize,
    pub k: usize,
    pub seed: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn time<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, Duration)> {
    let start = Instant::now();
    let r = f()?;
    Ok((r, start.elapsed()))
}

/// Runs `output_tokens` greedy steps from BOS, feeding back the argmax.
fn decode_fixed(weights: &ModelWeights, cross: &mut KnnCrossAttention, steps: usize) -> Result<()> {
    let mut session = DecodeSession::new(weights);
    let mut token = BOS;
    for _ in 0..steps {
        let logits = session.step(token, cross)?;
        token = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0 as TokenId;
    }
    Ok(())
}

/// Median encode (chunked encoding plus index build) and decode wall-clock
/// per input length, after one discarded warm-up repetition.
pub fn bench_scaling(weights: &ModelWeights, lengths: &[usize], opts: &BenchOptions) -> Result<ScalingReport> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("lengths must be non-empty and strictly increasing"));
    }
    if opts.repetitions < 3 {
        return Err(Error::arg("at least 3 repetitions are required"));
    }
    if opts.output_tokens == 0 || opts.output_tokens >= weights.config.window {
        return Err(Error::arg(format!(
            "output budget must be in 1..{}",
            weights.config.window
        )));
    }
    let vocab = weights.config.vocab_size;
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &n in lengths {
        let mut rng = Rng::new(opts.seed).split(n as u64);
        let input: Vec<TokenId> = (0..n).map(|_| FIRST_FILLER + rng.below(vocab - 4) as TokenId).collect();
        let mut enc = Vec::with_capacity(opts.repetitions);
        let mut dec = Vec::with_capacity(opts.repetitions);
        for rep in 0..=opts.repetitions {
            let (ds, te) = time(|| Datastore::build(encode_long(weights, &input)?))?;
            let mut cross = KnnCrossAttention::retrieval(ds, opts.k)?;
            let ((), td) = time(|| decode_fixed(weights, &mut cross, opts.output_tokens))?;
            if rep > 0 {
                enc.push(te.as_secs_f64());
                dec.push(td.as_secs_f64());
            }
        }
        let (e, d) = (median(enc), median(dec));
        if e <= 0.0 || d <= 0.0 {
            return Err(Error::Bench(format!("timer did not resolve the run at length {n}")));
        }
        let base = rows.first().map_or(e + d, |r| r.total_seconds);
        rows.push(ScalingRow {
            input_length: n,
            encode_seconds: e,
            decode_seconds: d,
            total_seconds: e + d,
            relative_to_baseline: (e + d) / base,
        });
    }
    Ok(ScalingReport { rows })
}

/// Distribution of retrieved positions, normalised by input length.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub mass: Vec<f64>,
    pub median: f64,
    /// Share of datastore rows retrieved at least once.
    pub fraction_retrieved: f64,
    pub retrievals: usize,
}

impl Histogram {
    pub fn to_text(&self) -> String {
        let bins = self.mass.len() as f64;
        let mut s = String::from("bin_start,bin_end,mass\n");
        for (i, m) in self.mass.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i as f64 / bins, (i + 1) as f64 / bins, m);
        }
        s
    }
}

pub fn retrieval_histogram(log: &RetrievalLog, input_length: usize, n_bins: usize) -> Result<Histogram> {
    if log.is_empty() {
        return Err(Error::arg("retrieval log is empty"));
    }
    if n_bins == 0 || input_length == 0 {
        return Err(Error::arg("need at least one bin and a nonempty input"));
    }
    let mut mass = vec![0.0; n_bins];
    let mut positions = Vec::with_capacity(log.records.len());
    let mut seen = BTreeSet::new();
    for r in &log.records {
        if r.position >= input_length {
            return Err(Error::Range(format!(
                "retrieved position {} outside input of {input_length}",
                r.position
            )));
        }
        let x = r.position as f64 / input_length as f64;
        mass[((x * n_bins as f64) as usize).min(n_bins - 1)] += 1.0;
        positions.push(x);
        seen.insert(r.position);
    }
    let total = positions.len() as f64;
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(Histogram {
        mass,
        median: median(positions),
        fraction_retrieved: seen.len() as f64 / input_length as f64,
        retrievals: log.records.len(),
    })
}
