//! Command-line runner: configuration, commands and exit codes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_spans, encode_long, EncodedInput};
use crate::error::{Error, Result};
use crate::evalbench::{bench_scaling, needle_recall, retrieval_histogram, BenchOptions, SyntheticTask};
use crate::knn_index::{memory_bytes, Datastore};
use crate::model::{
    greedy_generate, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CrossAttentionProvider,
    HeadProjection, ModelConfig, ModelWeights, Selection, TokenId,
};
use crate::numerics::{grad_check, seeded_normal, Matrix, Rng};
use crate::retrieval::{
    attend_retrieved, attention_mass_coverage, full_attention_oracle, KnnCrossAttention, RetrievalLog,
};
use crate::training::{
    format_corpus, format_train_log, loss_with_fixed_selections, make_step_retrieval, parse_corpus, train, Example,
    TrainingRegime,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SELFTEST: i32 = 5;

/// Which cross-attention source generation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderSpec {
    Full,
    Retrieval,
    /// Retrieval in one decoder layer only.
    MemTrans(usize),
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Full => f.write_str("full"),
            ProviderSpec::Retrieval => f.write_str("retrieval"),
            ProviderSpec::MemTrans(l) => write!(f, "memtrans:{l}"),
        }
    }
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ProviderSpec::Full),
            "retrieval" => Ok(ProviderSpec::Retrieval),
            _ => s
                .strip_prefix("memtrans:")
                .and_then(|l| l.parse().ok())
                .map(ProviderSpec::MemTrans)
                .ok_or_else(|| Error::Config(format!("unknown provider {s:?}; expected full, retrieval or memtrans:LAYER"))),
        }
    }
}

impl Serialize for ProviderSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProviderSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training corpus for `train`, inputs for `generate`. Generated from
    /// the task block when absent.
    pub corpus: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            validation: None,
            checkpoint: PathBuf::from("model.ulmf"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub regime: TrainingRegime,
    pub task: SyntheticTask,
    pub paths: Paths,
    /// Retrieved rows per head; the window when absent.
    pub k: Option<usize>,
    pub provider: ProviderSpec,
    /// Held-out examples generated alongside the task for validation and
    /// for `generate`.
    pub eval_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            regime: TrainingRegime::default(),
            task: SyntheticTask::default(),
            paths: Paths::default(),
            k: None,
            provider: ProviderSpec::Retrieval,
            eval_examples: 50,
        }
    }
}

impl RunConfig {
    pub fn k(&self) -> usize {
        self.k.unwrap_or(self.model.window)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| match e {
            Error::Config(m) | Error::Argument(m) => Error::Validation(m),
            e => e,
        };
        self.model.validate().map_err(invalid)?;
        self.regime.validate(self.model.window).map_err(invalid)?;
        self.task.validate().map_err(invalid)?;
        if self.task.window != self.model.window {
            return Err(Error::Validation(format!(
                "task window {} differs from model window {}",
                self.task.window, self.model.window
            )));
        }
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Error::Validation(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.k == Some(0) {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if let ProviderSpec::MemTrans(l) = self.provider {
            if l >= self.model.n_dec_layers {
                return Err(Error::Validation(format!(
                    "memtrans layer {l} out of range for {} decoder layers",
                    self.model.n_dec_layers
                )));
            }
        }
        if self.eval_examples == 0 {
            return Err(Error::Validation("eval_examples must be at least 1".into()));
        }
        Ok(())
    }

    fn split(&self, offset: u64, examples: usize) -> Result<Vec<Example>> {
        SyntheticTask {
            seed: self.task.seed.wrapping_add(offset),
            examples,
            ..self.task.clone()
        }
        .generate()
    }

    pub fn train_corpus(&self) -> Result<Vec<Example>> {
        match &self.paths.corpus {
            Some(p) => parse_corpus(&fs::read_to_string(p)?),
            None => self.split(0, self.task.examples),
        }
    }

    pub fn validation_corpus(&self) -> Result<Vec<Example>> {
        match &self.paths.validation {
            Some(p) => parse_corpus(&fs::read_to_string(p)?),
            None => self.split(1, self.eval_examples),
        }
    }

    /// Inputs for `generate`: the corpus file when given, else a held-out
    /// split of the task.
    pub fn generation_corpus(&self) -> Result<Vec<Example>> {
        match &self.paths.corpus {
            Some(p) => parse_corpus(&fs::read_to_string(p)?),
            None => self.split(2, self.eval_examples),
        }
    }
}

fn json_error(e: serde_json::Error) -> Error {
    match e.classify() {
        serde_json::error::Category::Syntax | serde_json::error::Category::Eof => Error::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        },
        _ => Error::Config(e.to_string()),
    }
}

/// Strict JSON parsing: absent fields take defaults, unknown keys are
/// rejected, and the result is validated.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(json_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Generate,
    Bench,
    Analyze,
    Selftest,
}

#[derive(Debug, Parser)]
#[command(name = "longctx", version, about = "Long-input encoder-decoder with retrieval cross-attention")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// full, retrieval or memtrans:LAYER
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

/// Config file plus command-line overrides.
pub fn resolve_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(json_error)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.task.seed = seed;
    }
    if let Some(k) = args.k {
        cfg.k = Some(k);
    }
    if let Some(p) = &args.provider {
        cfg.provider = p.parse()?;
    }
    if let Some(dir) = &args.report_dir {
        cfg.paths.report_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Provider { source, .. } => exit_code(source),
        Error::Config(_) | Error::Parse { .. } | Error::Validation(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) | Error::Data { .. } => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

/// `error: <category>: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    format!("error: {}: {}", e.category(), e.to_string().replace('\n', " "))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", p.display()),
        )));
    }
    Ok(())
}

fn write_report(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn provider_for(weights: &ModelWeights, spec: ProviderSpec, input: &[TokenId], k: usize) -> Result<KnnCrossAttention> {
    let ds = Datastore::build(encode_long(weights, input)?)?;
    match spec {
        ProviderSpec::Full => Ok(KnnCrossAttention::full(ds)),
        ProviderSpec::Retrieval => KnnCrossAttention::retrieval(ds, k),
        ProviderSpec::MemTrans(layer) => KnnCrossAttention::memorizing_transformers(
            ds,
            k,
            layer,
            weights.config.n_dec_layers,
            weights.config.window,
        ),
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<i32> {
    match command {
        Command::Train => cmd_train(cfg),
        Command::Generate => cmd_generate(cfg),
        Command::Bench => cmd_bench(cfg),
        Command::Analyze => cmd_analyze(cfg),
        Command::Selftest => {
            let results = selftest(cfg.model.seed);
            for r in &results {
                println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
            }
            Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_SELFTEST })
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    for p in cfg.paths.corpus.iter().chain(&cfg.paths.validation) {
        require_file(p)?;
    }
    let corpus = cfg.train_corpus()?;
    let validation = cfg.validation_corpus()?;
    let state = train(&cfg.model, &cfg.regime, cfg.k(), &corpus, &validation)?;
    if let Some(dir) = cfg.paths.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&state.weights, &cfg.paths.checkpoint)?;
    let log = write_report(&cfg.paths.report_dir, "train_log.csv", &format_train_log(&state.log))?;
    println!(
        "trained {} epochs, best validation recall {:.4} at epoch {}; checkpoint {}; log {}",
        state.epoch,
        state.best_val_score,
        state.best_epoch,
        cfg.paths.checkpoint.display(),
        log.display()
    );
    Ok(EXIT_OK)
}

fn cmd_generate(cfg: &RunConfig) -> Result<i32> {
    require_file(&cfg.paths.checkpoint)?;
    if let Some(p) = &cfg.paths.corpus {
        require_file(p)?;
    }
    let weights = load_checkpoint(&cfg.paths.checkpoint)?;
    let corpus = cfg.generation_corpus()?;
    let k = cfg.k();
    let mut lines = String::new();
    let mut log = RetrievalLog::default();
    let mut recall = 0.0;
    for (i, e) in corpus.iter().enumerate() {
        let mut cross = provider_for(&weights, cfg.provider, &e.input, k)?;
        let out = greedy_generate(&weights, &mut cross, weights.config.window - 1)?;
        recall += needle_recall(&out, e.answer());
        lines.push_str(&out.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
        lines.push('\n');
        let part = cross.take_log();
        log.calls += part.calls;
        log.records.extend(part.records);
        if i == 0 {
            fs::create_dir_all(&cfg.paths.report_dir)?;
            cross.datastore().save_dump(&cfg.paths.report_dir.join("datastore.ulds"))?;
        }
    }
    let dir = &cfg.paths.report_dir;
    write_report(dir, "generations.txt", &lines)?;
    write_report(dir, "retrieval_log.csv", &log.to_text())?;
    write_report(dir, "inputs.tsv", &format_corpus(&corpus))?;
    let recall = recall / corpus.len() as f64;
    write_report(
        dir,
        "generate_summary.txt",
        &format!("provider {}\nk {}\nexamples {}\nneedle_recall {:.6}\n", cfg.provider, k, corpus.len(), recall),
    )?;
    println!("generated {} outputs, needle recall {:.4}", corpus.len(), recall);
    Ok(EXIT_OK)
}

fn cmd_bench(cfg: &RunConfig) -> Result<i32> {
    let weights = if cfg.paths.checkpoint.is_file() {
        load_checkpoint(&cfg.paths.checkpoint)?
    } else {
        ModelWeights::init(&cfg.model)?
    };
    let w = weights.config.window;
    let lengths: Vec<usize> = [1, 2, 4, 8, 16].iter().map(|m| m * w).collect();
    let opts = BenchOptions {
        repetitions: 5,
        output_tokens: 32.min(w - 1),
        k: cfg.k(),
        seed: cfg.model.seed,
    };
    let report = bench_scaling(&weights, &lengths, &opts)?;
    write_report(&cfg.paths.report_dir, "scaling.txt", &report.to_text())?;
    write_report(&cfg.paths.report_dir, "scaling.csv", &report.to_csv())?;
    print!("{}", report.to_text());
    Ok(EXIT_OK)
}

/// Replays generation on the dumped datastore and measures, for every
/// retrieval, how much of the full attention mass the top-k rows hold.
fn coverage_report(weights: &ModelWeights, ds: &Datastore, k: usize) -> Result<String> {
    struct Probe<'a> {
        inner: KnnCrossAttention,
        k: usize,
        coverage: &'a mut Vec<f64>,
    }
    impl CrossAttentionProvider for Probe<'_> {
        fn memory(&self) -> &Matrix {
            self.inner.memory()
        }

        fn select(&mut self, step: usize, hp: &HeadProjection, h_d: &[f32]) -> Result<Selection> {
            let c = attention_mass_coverage(h_d, hp, self.inner.datastore(), self.k)?;
            self.coverage.push(c as f64);
            self.inner.select(step, hp, h_d)
        }
    }
    let mut coverage = Vec::new();
    let mut probe = Probe {
        inner: KnnCrossAttention::retrieval(ds.clone(), k)?,
        k,
        coverage: &mut coverage,
    };
    greedy_generate(weights, &mut probe, weights.config.window - 1)?;
    let n = coverage.len() as f64;
    let mean = coverage.iter().sum::<f64>() / n;
    let min = coverage.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "k {k}\ndatastore_rows {}\nretrievals {}\nmean_coverage {mean:.6}\nmin_coverage {min:.6}\n",
        ds.len(),
        coverage.len()
    ))
}

fn cmd_analyze(cfg: &RunConfig) -> Result<i32> {
    let dir = &cfg.paths.report_dir;
    let log_path = dir.join("retrieval_log.csv");
    let dump_path = dir.join("datastore.ulds");
    for p in [&log_path, &dump_path, &cfg.paths.checkpoint] {
        require_file(p)?;
    }
    let log = RetrievalLog::read(std::io::BufReader::new(fs::File::open(&log_path)?))?;
    let ds = Datastore::load_dump(&dump_path)?;
    let weights = load_checkpoint(&cfg.paths.checkpoint)?;
    let hist = retrieval_histogram(&log, ds.len(), 10)?;
    write_report(dir, "histogram.csv", &hist.to_text())?;
    let mut summary = format!(
        "retrievals {}\nmedian_position {:.6}\nfraction_retrieved {:.6}\n",
        hist.retrievals, hist.median, hist.fraction_retrieved
    );
    summary.push_str(&coverage_report(&weights, &ds, cfg.k())?);
    write_report(dir, "analysis.txt", &summary)?;
    print!("{summary}");
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
}

fn random_head(rng: &mut Rng, layer: usize, head: usize, d: usize, dh: usize) -> Result<HeadProjection> {
    Ok(HeadProjection {
        layer,
        head,
        w_q: seeded_normal(rng, d, dh, 0.5)?,
        w_k: seeded_normal(rng, d, dh, 0.5)?,
        w_v: seeded_normal(rng, d, dh, 0.5)?,
        b_q: seeded_normal(rng, 1, dh, 0.5)?,
        b_k: seeded_normal(rng, 1, dh, 0.5)?,
        b_v: seeded_normal(rng, 1, dh, 0.5)?,
        w_o: seeded_normal(rng, dh, d, 0.5)?,
    })
}

fn check_reformulation(seed: u64) -> Result<bool> {
    let root = Rng::new(seed).split(1);
    for case in 0..50u64 {
        let mut rng = root.split(case);
        let d = [8, 16, 32][case as usize % 3];
        let n = 4 + rng.below(200);
        let hp = random_head(&mut rng, 0, 0, d, d / 2)?;
        let h = seeded_normal(&mut rng, n, d, 1.0)?;
        let ds = Datastore::build(EncodedInput {
            hidden: h,
            positions: (0..n).collect(),
        })?;
        let h_d = seeded_normal::<f32>(&mut rng, 1, d, 1.0)?;
        let k = 1 + rng.below(n);
        let cfg = ModelConfig {
            d_model: d,
            n_heads: 2,
            n_dec_layers: 1,
            ..ModelConfig::default()
        };
        let mut w = ModelWeights::<f32>::init(&cfg)?;
        w.dec_layers[0].cross_attn.heads = vec![hp.clone()];
        let mut shared = KnnCrossAttention::retrieval(ds.clone(), k)?;
        let mut naive = KnnCrossAttention::naive_per_head(ds, &w, k)?;
        let a = shared.retrieve_for_head(0, h_d.row(0), &hp)?;
        let b = naive.retrieve_for_head(0, h_d.row(0), &hp)?;
        // Scores differ by the dropped per-query constant q·b_k.
        let q: Vec<f32> = hp.w_q.vec_mul(h_d.row(0))?.iter().zip(hp.b_q.data()).map(|(x, b)| x + b).collect();
        let offset = crate::numerics::dot(&q, hp.b_k.data());
        let tol = 1e-4 * a.scores.iter().fold(1.0f32, |m, s| m.max(s.abs()));
        if a.indices != b.indices || a.scores.iter().zip(&b.scores).any(|(x, y)| (x + offset - y).abs() > tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn check_subsumption(seed: u64) -> Result<bool> {
    let root = Rng::new(seed).split(2);
    for case in 0..20u64 {
        let mut rng = root.split(case);
        let n = 1 + rng.below(64);
        let hp = random_head(&mut rng, 0, 0, 16, 8)?;
        let h = seeded_normal::<f32>(&mut rng, n, 16, 1.0)?;
        let h_d = seeded_normal::<f32>(&mut rng, 1, 16, 1.0)?;
        let a = attend_retrieved(h_d.row(0), &h, &hp)?;
        let b = full_attention_oracle(h_d.row(0), &h, &hp)?;
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-5) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn check_chunks() -> Result<bool> {
    for w in [4, 8, 16, 32] {
        for n in 1..=10 * w {
            let plan = chunk_spans(n, w)?;
            let mut next = 0;
            for s in &plan.spans {
                if s.keep_start != next || s.keep_end <= s.keep_start {
                    return Ok(false);
                }
                next = s.keep_end;
            }
            if next != n {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn check_memory() -> Result<bool> {
    let ds = Datastore::build(EncodedInput {
        hidden: Matrix::<f32>::zeros(1000, 64),
        positions: (0..1000).collect(),
    })?;
    Ok(memory_bytes(1_000_000, 1024, 2)? == 1_000_000 * 1024 * 2 && ds.payload_bytes() == 1000 * 64 * 4)
}

fn check_coverage(seed: u64) -> Result<bool> {
    let mut rng = Rng::new(seed).split(3);
    let hp = random_head(&mut rng, 0, 0, 16, 8)?;
    let n = 40;
    let ds = Datastore::build(EncodedInput {
        hidden: seeded_normal::<f32>(&mut rng, n, 16, 1.0)?,
        positions: (0..n).collect(),
    })?;
    let h_d = seeded_normal::<f32>(&mut rng, 1, 16, 1.0)?;
    let mut prev = 0.0;
    for k in 0..=n {
        let c = attention_mass_coverage(h_d.row(0), &hp, &ds, k)?;
        if c + 1e-6 < prev {
            return Ok(false);
        }
        prev = c;
    }
    Ok((prev - 1.0).abs() <= 1e-6)
}

fn check_gradients(seed: u64) -> Result<bool> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        vocab_size: 16,
        window: 8,
        seed,
    };
    let w = ModelWeights::<f32>::init(&cfg)?.cast::<f64>();
    let mut rng = Rng::new(seed).split(4);
    let example = Example {
        input: (0..20).map(|_| 4 + rng.below(12) as TokenId).collect(),
        target: vec![1, 7, 9, 2],
    };
    let step = make_step_retrieval(&w, &example, 3, 64)?;
    for name in ["dec.0.cross.h0.w_q", "enc.0.ffn.w1", "tok_emb"] {
        let x = w.tensor(name).expect("tensor exists").clone();
        let analytic = step.grads.tensor(name).expect("tensor exists");
        let err = grad_check(
            |m| {
                let mut p = w.clone();
                p.with_tensor_mut(name, |t| *t = m.clone());
                loss_with_fixed_selections(&p, &example, 64, &step.selections).unwrap_or(f64::NAN)
            },
            analytic,
            &x,
            1e-5,
        )?;
        if err >= 1e-3 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn check_checkpoint(seed: u64) -> Result<bool> {
    let w = ModelWeights::init(&ModelConfig {
        seed,
        ..ModelConfig::default()
    })?;
    let mut buf = Vec::new();
    write_checkpoint(&w, &mut buf)?;
    Ok(read_checkpoint(&mut buf.as_slice())? == w)
}

/// Fast invariant suite.
pub fn selftest(seed: u64) -> Vec<SelfTestResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<bool>>)> = vec![
        ("reformulation_matches_per_head_index", Box::new(move || check_reformulation(seed))),
        ("full_retrieval_equals_full_attention", Box::new(move || check_subsumption(seed))),
        ("chunk_keep_ranges_partition", Box::new(check_chunks)),
        ("memory_accounting", Box::new(check_memory)),
        ("coverage_monotone", Box::new(move || check_coverage(seed))),
        ("gradients_match_finite_differences", Box::new(move || check_gradients(seed))),
        ("checkpoint_round_trip", Box::new(move || check_checkpoint(seed))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| SelfTestResult {
            name,
            passed: f().unwrap_or(false),
        })
        .collect()
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match resolve_config(&args).and_then(|cfg| run(args.command, &cfg)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.window, 16);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.k(), 16);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(parse_config(r#"{"model":{"window":10}}"#), Err(Error::Validation(_))));
        match parse_config(r#"{"model":{"windw":16}}"#) {
            Err(Error::Config(m)) => assert!(m.contains("windw")),
            other => panic!("{other:?}"),
        }
        match parse_config("{\n  \"k\": 3,\n  oops\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config(r#"{"provider":"memtrans:5"}"#), Err(Error::Validation(_))));
        assert!(matches!(parse_config(r#"{"provider":"bogus"}"#), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trip() {
        let cfg = parse_config(r#"{"k":4,"provider":"memtrans:1","regime":{"variant":"alternating"},"paths":{"corpus":"c.tsv"}}"#)
            .unwrap();
        assert_eq!(parse_config(&serialize_config(&cfg)).unwrap(), cfg);
        assert_eq!(cfg.provider, ProviderSpec::MemTrans(1));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["longctx", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["longctx", "train", "--provider", "nope"]), EXIT_CONFIG);
        let err = Error::Io(std::io::Error::other("x"));
        assert_eq!(exit_code(&err), EXIT_IO);
        assert_eq!(error_line(&err), "error: io: x");
    }
}
