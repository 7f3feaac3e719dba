use longctx::chunker::{chunk_spans, encode_long};
use longctx::model::{encode_window, ModelConfig, ModelWeights, TokenId};
use longctx::numerics::Rng;

/// Window starts and kept ranges computed directly from the chunking rule.
fn oracle(n: usize, w: usize) -> Vec<(usize, usize, usize)> {
    if n <= w {
        return vec![(0, 0, n)];
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + w < n {
        starts.push(s);
        s += w / 2;
    }
    starts.push(n - w);
    let mut out = Vec::new();
    let mut keep_start = 0;
    for i in 0..starts.len() {
        let keep_end = if i + 1 < starts.len() { (starts[i] + starts[i + 1] + w) / 2 } else { n };
        out.push((starts[i], keep_start, keep_end));
        keep_start = keep_end;
    }
    out
}

#[test]
fn plan_matches_rule() {
    for w in [4, 8, 12, 16, 64] {
        for n in 1..12 * w {
            let plan = chunk_spans(n, w).unwrap();
            let got: Vec<_> = plan.spans.iter().map(|s| (s.start, s.keep_start, s.keep_end)).collect();
            assert_eq!(got, oracle(n, w), "n={n} w={w}");
            for s in &plan.spans {
                assert_eq!(s.end, (s.start + w).min(n));
            }
        }
    }
}

#[test]
fn long_encoding_is_per_chunk_encoding() {
    let cfg = ModelConfig {
        window: 8,
        seed: 9,
        ..ModelConfig::default()
    };
    let w: ModelWeights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Rng::new(3);
    for n in [1, 5, 8, 9, 13, 40, 61] {
        let tokens: Vec<TokenId> = (0..n).map(|_| 4 + rng.below(100) as TokenId).collect();
        let enc = encode_long(&w, &tokens).unwrap();
        assert_eq!(enc.positions, (0..n).collect::<Vec<_>>());
        for (start, keep_start, keep_end) in oracle(n, cfg.window) {
            let end = (start + cfg.window).min(n);
            let chunk = encode_window(&w, &tokens[start..end]).unwrap();
            for p in keep_start..keep_end {
                assert_eq!(enc.hidden.row(p), chunk.row(p - start), "n={n} position {p}");
            }
        }
    }
}
