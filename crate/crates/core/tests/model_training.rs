use longctx::chunker::encode_long;
use longctx::evalbench::needle_recall;
use longctx::knn_index::Datastore;
use longctx::model::{
    decode_step, encode_window, forward_logits, greedy_generate, teacher_forced_loss, CrossAttentionProvider,
    DecodeSession, ModelConfig, ModelWeights, Selection, TokenId, BOS, EOS,
};
use longctx::numerics::{Matrix, Rng};
use longctx::retrieval::KnnCrossAttention;
use longctx::training::{
    generate_unlimiformer, make_step_random_encoded, make_step_retrieval, make_step_standard, train, validate_unlimiformer,
    Example, FullMemory, RandomEncoded, TrainingRegime, ValidationMode, Variant,
};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        d_ff: 32,
        vocab_size: 32,
        window: 8,
        seed: 5,
    }
}

fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| 4 + rng.below(vocab - 4) as TokenId).collect()
}

fn example(rng: &mut Rng, n: usize, cfg: &ModelConfig) -> Example {
    let mut target = vec![BOS];
    target.extend(tokens(rng, 3, cfg.vocab_size));
    target.push(EOS);
    Example {
        input: tokens(rng, n, cfg.vocab_size),
        target,
    }
}

/// Cross-entropy computed directly from batched logits.
fn reference_loss(logits: &Matrix, labels: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += z.ln() + m - row[y as usize];
    }
    total / labels.len() as f64
}

#[test]
fn incremental_decoding_matches_batched_pass() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(1);
    let memory = encode_window(&w, &tokens(&mut rng, 8, cfg.vocab_size)).unwrap();
    let prefix = [BOS, 7, 9, 11, 4, 20];
    let batched = forward_logits(&w, &prefix, &mut FullMemory(memory.clone())).unwrap();
    let mut session = DecodeSession::new(&w);
    let mut cross = FullMemory(memory.clone());
    for (t, &tok) in prefix.iter().enumerate() {
        let step = session.step(tok, &mut cross).unwrap();
        for (a, b) in step.iter().zip(batched.row(t)) {
            assert!((a - b).abs() < 1e-5, "position {t}: {a} vs {b}");
        }
    }
    let last = decode_step(&w, &prefix, &mut FullMemory(memory)).unwrap();
    assert_eq!(last.as_slice(), batched.row(prefix.len() - 1));
}

#[test]
fn rigged_output_bias_controls_generation() {
    let cfg = small();
    let mut w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let memory = encode_window(&w, &[5, 6, 7]).unwrap();
    w.out_bias.set(0, EOS as usize, 1e4);
    assert!(greedy_generate(&w, &mut FullMemory(memory.clone()), 10).unwrap().is_empty());
    w.out_bias.set(0, EOS as usize, 0.0);
    w.out_bias.set(0, 5, 1e4);
    let out = greedy_generate(&w, &mut FullMemory(memory), 100).unwrap();
    assert_eq!(out, vec![5; cfg.window - 1]);
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let cfg = small();
    let mut w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    w.tok_emb.fill(0.0);
    let memory = Matrix::zeros(3, cfg.d_model);
    let out = teacher_forced_loss(&w, &mut FullMemory(memory), &[BOS, 9, 10, EOS]).unwrap();
    assert!((out.loss as f64 - (cfg.vocab_size as f64).ln()).abs() < 1e-5);
}

#[test]
fn standard_step_truncates_and_matches_monolithic_loss() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(2);
    let long = example(&mut rng, 3 * cfg.window, &cfg);
    let step = make_step_standard(&w, &long).unwrap();
    assert_eq!(step.encoded_len, cfg.window);
    let memory = encode_window(&w, &long.input[..cfg.window]).unwrap();
    let logits = forward_logits(&w, &long.target[..long.target.len() - 1], &mut FullMemory(memory)).unwrap();
    let expected = reference_loss(&logits, &long.target[1..]);
    assert!((step.loss as f64 - expected).abs() < 1e-6, "{} vs {expected}", step.loss);

    let short = example(&mut rng, 5, &cfg);
    assert_eq!(make_step_standard(&w, &short).unwrap().encoded_len, 5);
}

#[test]
fn retrieval_step_on_short_input_equals_standard_step() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(3);
    let ex = example(&mut rng, cfg.window, &cfg);
    let a = make_step_standard(&w, &ex).unwrap();
    let b = make_step_retrieval(&w, &ex, cfg.window, 16 * cfg.window).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-5);
    let mut worst = 0.0f32;
    a.grads.visit(&mut |name, g| {
        let h = b.grads.tensor(name).unwrap();
        worst = worst.max(g.max_abs_diff(h).unwrap());
    });
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn training_retrievals_match_inference_retrievals() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(4);
    let ex = example(&mut rng, 5 * cfg.window, &cfg);
    let k = 4;
    let step = make_step_retrieval(&w, &ex, k, 16 * cfg.window).unwrap();

    let ds = Datastore::build(encode_long(&w, &ex.input).unwrap()).unwrap();
    let mut cross = KnnCrossAttention::retrieval(ds, k).unwrap();
    let mut session = DecodeSession::new(&w);
    for &tok in &ex.target[..ex.target.len() - 1] {
        session.step(tok, &mut cross).unwrap();
    }
    let train_log = step.log.canonical();
    let infer_log = cross.log().canonical();
    assert_eq!(train_log.len(), infer_log.len());
    for (a, b) in train_log.iter().zip(&infer_log) {
        assert_eq!((a.step, a.layer, a.head, a.rank, a.position), (b.step, b.layer, b.head, b.rank, b.position));
        assert!((a.score - b.score).abs() < 1e-4);
    }
}

#[test]
fn truncation_cap_is_respected() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(5);
    let ex = example(&mut rng, 20 * cfg.window, &cfg);
    let limit = 16 * cfg.window;
    assert_eq!(make_step_retrieval(&w, &ex, 4, limit).unwrap().encoded_len, limit);
    assert_eq!(
        make_step_random_encoded(&w, &ex, 4, limit, Rng::new(1)).unwrap().encoded_len,
        limit
    );
    let corpus: Vec<Example> = (0..4).map(|_| example(&mut rng, 20 * cfg.window, &cfg)).collect();
    let regime = TrainingRegime {
        variant: Variant::Alternating,
        max_epochs: 1,
        ..TrainingRegime::default()
    };
    let state = train(&cfg, &regime, 4, &corpus, &corpus[..1]).unwrap();
    assert_eq!(state.max_encoded_len, regime.truncation_limit(cfg.window));
}

#[test]
fn random_encoded_clamps_to_everything() {
    let cfg = small();
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(6);
    let ex = example(&mut rng, 12, &cfg);
    let step = make_step_random_encoded(&w, &ex, 50, 1000, Rng::new(2)).unwrap();
    let memory = encode_long(&w, &ex.input).unwrap().hidden;
    let full = teacher_forced_loss(&w, &mut FullMemory(memory), &ex.target).unwrap();
    assert!((step.loss - full.loss).abs() < 1e-5);
    for layer in &step.selections {
        for head in layer {
            for sel in head {
                let Selection::Rows(rows) = sel else { panic!("expected explicit rows") };
                assert_eq!(rows.len(), 12);
            }
        }
    }
    let again = make_step_random_encoded(&w, &ex, 5, 1000, Rng::new(2)).unwrap();
    let third = make_step_random_encoded(&w, &ex, 5, 1000, Rng::new(2)).unwrap();
    assert_eq!(again.selections, third.selections);
}

#[test]
fn random_encoded_positions_are_uniform() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg).unwrap();
    let hp = &w.dec_layers[0].cross_attn.heads[0];
    let n = 100;
    let draws = 10_000;
    let root = Rng::new(7);
    let mut deciles = [0usize; 10];
    for i in 0..draws / 10 {
        let mut p = RandomEncoded::new(Matrix::<f32>::zeros(n, cfg.d_model), 10, 1, root.split(i as u64));
        let Selection::Rows(rows) = p.select(0, hp, &[]).unwrap() else { panic!() };
        for r in rows {
            deciles[r * 10 / n] += 1;
        }
    }
    let expected = draws as f64 / 10.0;
    // Without replacement within a draw the count variance is below the
    // binomial one, so the binomial sigma is conservative.
    let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
    for c in deciles {
        assert!((c as f64 - expected).abs() < 3.0 * sigma, "{deciles:?}");
    }
}

#[test]
fn one_epoch_with_zero_patience() {
    let cfg = small();
    let mut rng = Rng::new(8);
    let corpus: Vec<Example> = (0..3).map(|_| example(&mut rng, 20, &cfg)).collect();
    let regime = TrainingRegime {
        variant: Variant::Retrieval,
        max_epochs: 1,
        patience: 0,
        ..TrainingRegime::default()
    };
    let state = train(&cfg, &regime, 4, &corpus, &corpus).unwrap();
    assert_eq!(state.epoch, 1);
    assert_eq!(state.log.len(), 1);
    assert_eq!(state.batches_seen, 3);
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let mut rng = Rng::new(9);
    let corpus: Vec<Example> = (0..6).map(|_| example(&mut rng, 24, &cfg)).collect();
    for variant in [Variant::RandomEncoded, Variant::Alternating, Variant::TrainChunked] {
        let regime = TrainingRegime {
            variant,
            max_epochs: 2,
            patience: 5,
            ..TrainingRegime::default()
        };
        let a = train(&cfg, &regime, 4, &corpus, &corpus[..2]).unwrap();
        let b = train(&cfg, &regime, 4, &corpus, &corpus[..2]).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn copy_task_converges() {
    // 50 copy examples, W = 16, d_model = 32: loss after 30 epochs must be
    // under a fifth of the first epoch's.
    let cfg = ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(10);
    let corpus: Vec<Example> = (0..50)
        .map(|_| {
            let input = tokens(&mut rng, 6, cfg.vocab_size);
            let mut target = vec![BOS];
            target.extend(&input);
            target.push(EOS);
            Example { input, target }
        })
        .collect();
    let regime = TrainingRegime {
        variant: Variant::StandardTruncated,
        validation_mode: ValidationMode::Truncated,
        max_epochs: 30,
        patience: 30,
        learning_rate: 1e-3,
        ..TrainingRegime::default()
    };
    let state = train(&cfg, &regime, 16, &corpus, &corpus[..5]).unwrap();
    let first = state.log[0].train_loss;
    let last = state.log.last().unwrap().train_loss;
    assert_eq!(state.log.len(), 30);
    assert!(last < 0.2 * first, "first {first}, last {last}");
}

#[test]
fn validation_scores() {
    let cfg = small();
    let mut rng = Rng::new(11);
    let corpus: Vec<Example> = (0..4).map(|_| example(&mut rng, 20, &cfg)).collect();

    let mut silent: ModelWeights = ModelWeights::init(&cfg).unwrap();
    silent.out_bias.set(0, EOS as usize, 1e4);
    assert_eq!(validate_unlimiformer(&silent, &corpus, 4).unwrap(), 0.0);

    // Memorise two examples, then validate on them.
    let memorised = &corpus[..2];
    let regime = TrainingRegime {
        variant: Variant::Retrieval,
        max_epochs: 300,
        patience: 300,
        learning_rate: 3e-3,
        ..TrainingRegime::default()
    };
    let state = train(&cfg, &regime, 8, memorised, memorised).unwrap();
    assert_eq!(state.best_val_score, 1.0);
    assert_eq!(validate_unlimiformer(&state.weights, memorised, 8).unwrap(), 1.0);

    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let gens = generate_unlimiformer(&w, &corpus, 4).unwrap();
    let offline = gens
        .iter()
        .zip(&corpus)
        .map(|(g, e)| needle_recall(g, e.answer()))
        .sum::<f64>()
        / corpus.len() as f64;
    assert_eq!(validate_unlimiformer(&w, &corpus, 4).unwrap(), offline);
}
