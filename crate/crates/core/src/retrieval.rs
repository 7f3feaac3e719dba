//! Retrieval-based cross-attention over the shared datastore.
//!
//! Query-side reformulation: for one head, the attention logit between a
//! decoder state `h_d` and an encoder state `h_e` is
//!
//! ```text
//! (h_d W_q + b_q) · (h_e W_k + b_k) = ((h_d W_q + b_q) W_kᵀ) · h_e  +  (h_d W_q + b_q) · b_k
//! ```
//!
//! The last term does not depend on `h_e`, so ranking encoder states by
//! `project_query(h_d) · h_e` gives the same order as ranking the real keys.
//! One index over raw `h_e` therefore serves every head of every layer.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::knn_index::{top_k, Datastore, RetrievalResult};
use crate::model::{CrossAttentionProvider, HeadProjection, ModelWeights, Selection};
use crate::numerics::{axpy, dot, softmax, softmax_in_place, Matrix, Scalar};

fn query_vector<T: Scalar>(h_d: &[T], hp: &HeadProjection<T>) -> Result<Vec<T>> {
    let mut q = hp.w_q.vec_mul(h_d)?;
    for (x, &b) in q.iter_mut().zip(hp.b_q.data()) {
        *x += b;
    }
    Ok(q)
}

/// `(h_d W_q + b_q) W_kᵀ`, a `d_model` vector searchable against raw
/// encoder states.
pub fn project_query<T: Scalar>(h_d: &[T], hp: &HeadProjection<T>) -> Result<Vec<T>> {
    let q = query_vector(h_d, hp)?;
    hp.w_k.vec_mul_t(&q)
}

/// Softmax attention of one head over `rows` (encoder states), returning
/// the `d_head` context. Keys and values carry their biases.
pub fn attend_retrieved<T: Scalar>(h_d: &[T], rows: &Matrix<T>, hp: &HeadProjection<T>) -> Result<Vec<T>> {
    if rows.rows() == 0 {
        return Err(Error::arg("attention over zero retrieved rows"));
    }
    if rows.cols() != hp.d_model() {
        return Err(Error::shape("attend_retrieved", rows.shape(), hp.w_k.shape()));
    }
    let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
    let q = query_vector(h_d, hp)?;
    let mut scores = Vec::with_capacity(rows.rows());
    let mut values = Vec::with_capacity(rows.rows());
    for r in 0..rows.rows() {
        let mut key = hp.w_k.vec_mul(rows.row(r))?;
        axpy(&mut key, T::one(), hp.b_k.data());
        scores.push(dot(&q, &key) * scale);
        let mut value = hp.w_v.vec_mul(rows.row(r))?;
        axpy(&mut value, T::one(), hp.b_v.data());
        values.push(value);
    }
    softmax_in_place(&mut scores);
    let mut context = vec![T::zero(); hp.d_head()];
    for (p, v) in scores.iter().zip(&values) {
        axpy(&mut context, *p, v);
    }
    Ok(context)
}

/// Exact attention over every encoder state, written with whole-matrix
/// products. Reference for the equivalence checks.
pub fn full_attention_oracle<T: Scalar>(h_d: &[T], all_h_e: &Matrix<T>, hp: &HeadProjection<T>) -> Result<Vec<T>> {
    if all_h_e.rows() == 0 {
        return Err(Error::arg("attention over an empty encoder memory"));
    }
    let mut q = Matrix::row_vector(h_d).matmul(&hp.w_q)?;
    q.add_row_broadcast(&hp.b_q)?;
    let mut keys = all_h_e.matmul(&hp.w_k)?;
    keys.add_row_broadcast(&hp.b_k)?;
    let mut values = all_h_e.matmul(&hp.w_v)?;
    values.add_row_broadcast(&hp.b_v)?;
    let mut logits = q.matmul_bt(&keys)?;
    logits.scale(T::one() / T::lit(hp.d_head() as f64).sqrt());
    let probs = Matrix::row_vector(&softmax(logits.row(0))?);
    Ok(probs.matmul(&values)?.into_data())
}

/// Per-head key index in the naive layout: keys `h_e W_k + b_k` materialised
/// for one head of one layer (values likewise).
#[derive(Clone, Debug)]
pub struct PerHeadIndex<T: Scalar = f32> {
    pub layer: usize,
    pub head: usize,
    pub keys: Datastore<T>,
    pub values: Datastore<T>,
}

impl<T: Scalar> PerHeadIndex<T> {
    pub fn build(h_e: &Matrix<T>, hp: &HeadProjection<T>) -> Result<Self> {
        let positions: Vec<usize> = (0..h_e.rows()).collect();
        let mut keys = h_e.matmul(&hp.w_k)?;
        keys.add_row_broadcast(&hp.b_k)?;
        let mut values = h_e.matmul(&hp.w_v)?;
        values.add_row_broadcast(&hp.b_v)?;
        let mut keys = Datastore::from_parts(keys, positions.clone())?;
        keys.freeze();
        let mut values = Datastore::from_parts(values, positions)?;
        values.freeze();
        Ok(Self {
            layer: hp.layer,
            head: hp.head,
            keys,
            values,
        })
    }
}

/// Top-k of `(h_d W_q + b_q) · key` against one head's own key index.
pub fn naive_per_head_topk<T: Scalar>(
    h_d: &[T],
    hp: &HeadProjection<T>,
    index: &PerHeadIndex<T>,
    k: usize,
) -> Result<RetrievalResult<T>> {
    index.keys.query(&query_vector(h_d, hp)?, k)
}

/// Share of the full softmax attention mass (for this head) that falls on
/// the top-`k` rows retrieved through the projected query.
pub fn attention_mass_coverage<T: Scalar>(h_d: &[T], hp: &HeadProjection<T>, ds: &Datastore<T>, k: usize) -> Result<T> {
    let q = project_query(h_d, hp)?;
    let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
    let raw = ds.scores(&q)?;
    let mut probs: Vec<T> = raw.iter().map(|&s| s * scale).collect();
    softmax_in_place(&mut probs);
    let top = top_k(raw, k);
    Ok(top.indices.iter().map(|&i| probs[i]).sum())
}

/// Coverage plus the normalised positions of what was retrieved.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDiagnostics {
    pub coverage: f64,
    pub retrieved_positions: Vec<f64>,
}

pub fn diagnose<T: Scalar>(h_d: &[T], hp: &HeadProjection<T>, ds: &Datastore<T>, k: usize) -> Result<AttentionDiagnostics> {
    let coverage = attention_mass_coverage(h_d, hp, ds, k)?.to_f64();
    let n = ds.len() as f64;
    let retrieved = ds.query(&project_query(h_d, hp)?, k)?;
    Ok(AttentionDiagnostics {
        coverage,
        retrieved_positions: retrieved.indices.iter().map(|&i| ds.positions()[i] as f64 / n).collect(),
    })
}

/// One retrieved row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub rank: usize,
    pub position: usize,
    pub score: f64,
}

pub const LOG_HEADER: &str = "step,layer,head,rank,position,score";

/// Everything a provider retrieved during one session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalLog {
    pub records: Vec<RetrievalRecord>,
    /// Number of (step, layer, head) retrieval calls.
    pub calls: usize,
}

impl RetrievalLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push<T: Scalar>(&mut self, step: usize, hp: &HeadProjection<T>, result: &RetrievalResult<T>, positions: &[usize]) {
        self.calls += 1;
        for (rank, (&idx, &score)) in result.indices.iter().zip(&result.scores).enumerate() {
            self.records.push(RetrievalRecord {
                step,
                layer: hp.layer,
                head: hp.head,
                rank,
                position: positions[idx],
                score: score.to_f64(),
            });
        }
    }

    /// Records sorted by (step, layer, head, rank).
    pub fn canonical(&self) -> Vec<RetrievalRecord> {
        let mut r = self.records.clone();
        r.sort_by_key(|x| (x.step, x.layer, x.head, x.rank));
        r
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(32 * (self.records.len() + 1));
        s.push_str(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.layer, r.head, r.rank, r.position, r.score);
        }
        s
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == LOG_HEADER) {
                continue;
            }
            let bad = |msg: &str| Error::Data {
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 comma-separated fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed integer field"));
            records.push(RetrievalRecord {
                step: int(fields[0])?,
                layer: int(fields[1])?,
                head: int(fields[2])?,
                rank: int(fields[3])?,
                position: int(fields[4])?,
                score: fields[5].parse().map_err(|_| bad("malformed score"))?,
            });
        }
        let mut keys: Vec<_> = records.iter().map(|r| (r.step, r.layer, r.head)).collect();
        keys.sort_unstable();
        keys.dedup();
        Ok(Self {
            calls: keys.len(),
            records,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderMode {
    Full,
    Retrieval,
    NaivePerHeadIndex,
}

/// Cross-attention backed by a frozen datastore.
#[derive(Clone, Debug)]
pub struct KnnCrossAttention<T: Scalar = f32> {
    mode: ProviderMode,
    datastore: Datastore<T>,
    k: usize,
    /// When set, only this decoder layer retrieves; every other layer
    /// attends to the first `window` rows.
    single_layer: Option<(usize, usize)>,
    per_head: Vec<Vec<PerHeadIndex<T>>>,
    log: RetrievalLog,
}

impl<T: Scalar> KnnCrossAttention<T> {
    /// Standard attention over every row.
    pub fn full(datastore: Datastore<T>) -> Self {
        Self {
            mode: ProviderMode::Full,
            datastore,
            k: 0,
            single_layer: None,
            per_head: Vec::new(),
            log: RetrievalLog::default(),
        }
    }

    /// Per-head top-`k` retrieval from the single shared index.
    pub fn retrieval(datastore: Datastore<T>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("retrieval mode needs k >= 1"));
        }
        if !datastore.is_frozen() {
            return Err(Error::State("datastore must be frozen".into()));
        }
        Ok(Self {
            mode: ProviderMode::Retrieval,
            k,
            ..Self::full(datastore)
        })
    }

    /// Builds separate key and value indexes for every (layer, head): the
    /// `2 × L × H` layout. Used as a cross-check only.
    pub fn naive_per_head(datastore: Datastore<T>, weights: &ModelWeights<T>, k: usize) -> Result<Self> {
        let per_head = weights
            .dec_layers
            .iter()
            .map(|layer| {
                layer
                    .cross_attn
                    .heads
                    .iter()
                    .map(|hp| PerHeadIndex::build(datastore.vectors(), hp))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: ProviderMode::NaivePerHeadIndex,
            per_head,
            ..Self::retrieval(datastore, k)?
        })
    }

    /// Retrieval at `layer_index` only; the other layers see a truncated
    /// `window`-row prefix with full attention.
    pub fn memorizing_transformers(
        datastore: Datastore<T>,
        k: usize,
        layer_index: usize,
        n_layers: usize,
        window: usize,
    ) -> Result<Self> {
        if layer_index >= n_layers {
            return Err(Error::arg(format!("layer {layer_index} out of range for {n_layers} decoder layers")));
        }
        Ok(Self {
            single_layer: Some((layer_index, window)),
            ..Self::retrieval(datastore, k)?
        })
    }

    pub fn mode(&self) -> ProviderMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn datastore(&self) -> &Datastore<T> {
        &self.datastore
    }

    pub fn log(&self) -> &RetrievalLog {
        &self.log
    }

    pub fn take_log(&mut self) -> RetrievalLog {
        std::mem::take(&mut self.log)
    }

    /// Total bytes held by the naive per-head key/value indexes.
    pub fn per_head_index_bytes(&self) -> usize {
        self.per_head
            .iter()
            .flatten()
            .map(|ix| ix.keys.payload_bytes() + ix.values.payload_bytes())
            .sum()
    }

    pub fn per_head_index_count(&self) -> usize {
        2 * self.per_head.iter().map(Vec::len).sum::<usize>()
    }

    /// Shared-index top-k for one head, logged.
    pub fn retrieve_for_head(&mut self, step: usize, h_d: &[T], hp: &HeadProjection<T>) -> Result<RetrievalResult<T>> {
        let result = match self.mode {
            ProviderMode::Full => return Err(Error::State("full-attention provider does not retrieve".into())),
            ProviderMode::Retrieval => self.datastore.query(&project_query(h_d, hp)?, self.k)?,
            ProviderMode::NaivePerHeadIndex => {
                let index = self
                    .per_head
                    .get(hp.layer)
                    .and_then(|l| l.get(hp.head))
                    .ok_or_else(|| Error::State(format!("no per-head index for layer {} head {}", hp.layer, hp.head)))?;
                naive_per_head_topk(h_d, hp, index, self.k)?
            }
        };
        self.log.push(step, hp, &result, self.datastore.positions());
        Ok(result)
    }
}

impl<T: Scalar> CrossAttentionProvider<T> for KnnCrossAttention<T> {
    fn memory(&self) -> &Matrix<T> {
        self.datastore.vectors()
    }

    fn select(&mut self, step: usize, hp: &HeadProjection<T>, h_d: &[T]) -> Result<Selection> {
        if self.mode == ProviderMode::Full {
            return Ok(Selection::All);
        }
        if let Some((layer, window)) = self.single_layer {
            if hp.layer != layer {
                let n = self.datastore.len().min(window);
                return Ok(Selection::Rows((0..n).collect()));
            }
        }
        let r = self.retrieve_for_head(step, h_d, hp)?;
        Ok(Selection::Rows(r.indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::EncodedInput;
    use crate::model::ModelConfig;
    use crate::numerics::{seeded_normal, Rng};

    fn head(rng: &mut Rng, d: usize, dh: usize, bias: bool) -> HeadProjection<f64> {
        let b = |rng: &mut Rng| {
            if bias {
                seeded_normal(rng, 1, dh, 0.5).unwrap()
            } else {
                Matrix::zeros(1, dh)
            }
        };
        HeadProjection {
            layer: 0,
            head: 0,
            w_q: seeded_normal(rng, d, dh, 0.5).unwrap(),
            w_k: seeded_normal(rng, d, dh, 0.5).unwrap(),
            w_v: seeded_normal(rng, d, dh, 0.5).unwrap(),
            b_q: b(rng),
            b_k: b(rng),
            b_v: b(rng),
            w_o: seeded_normal(rng, dh, d, 0.5).unwrap(),
        }
    }

    fn store(h: Matrix<f64>) -> Datastore<f64> {
        let n = h.rows();
        Datastore::build(EncodedInput {
            hidden: h,
            positions: (0..n).collect(),
        })
        .unwrap()
    }

    #[test]
    fn identity_projection() {
        let hp = HeadProjection::<f64> {
            layer: 0,
            head: 0,
            w_q: Matrix::identity(3),
            w_k: Matrix::identity(3),
            w_v: Matrix::identity(3),
            b_q: Matrix::zeros(1, 3),
            b_k: Matrix::zeros(1, 3),
            b_v: Matrix::zeros(1, 3),
            w_o: Matrix::identity(3),
        };
        assert_eq!(project_query(&[0.5, -1.0, 2.0], &hp).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn hand_computed_projection() {
        let hp = HeadProjection::<f64> {
            layer: 0,
            head: 0,
            w_q: Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            w_k: Matrix::identity(2),
            w_v: Matrix::identity(2),
            b_q: Matrix::zeros(1, 2),
            b_k: Matrix::zeros(1, 2),
            b_v: Matrix::zeros(1, 2),
            w_o: Matrix::identity(2),
        };
        assert_eq!(project_query(&[1.0, 0.0], &hp).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn projected_dot_equals_key_dot() {
        let mut rng = Rng::new(21);
        let hp = head(&mut rng, 16, 4, true);
        let h_d = seeded_normal::<f64>(&mut rng, 1, 16, 1.0).unwrap();
        let q = project_query(h_d.row(0), &hp).unwrap();
        let qh = query_vector(h_d.row(0), &hp).unwrap();
        for _ in 0..100 {
            let h_e = seeded_normal::<f64>(&mut rng, 1, 16, 1.0).unwrap();
            let key = hp.w_k.vec_mul(h_e.row(0)).unwrap();
            assert!((dot(&q, h_e.row(0)) - dot(&qh, &key)).abs() < 1e-5);
        }
    }

    #[test]
    fn singleton_context_is_value() {
        let mut rng = Rng::new(3);
        let hp = head(&mut rng, 8, 4, true);
        let row = seeded_normal::<f64>(&mut rng, 1, 8, 1.0).unwrap();
        let h_d = seeded_normal::<f64>(&mut rng, 1, 8, 1.0).unwrap();
        let ctx = attend_retrieved(h_d.row(0), &row, &hp).unwrap();
        let mut v = hp.w_v.vec_mul(row.row(0)).unwrap();
        axpy(&mut v, 1.0, hp.b_v.data());
        assert_eq!(ctx, v);
        assert!(attend_retrieved(h_d.row(0), &Matrix::zeros(0, 8), &hp).is_err());
    }

    /// Straight scalar loops, no shared helpers.
    fn scalar_loop_attention(h_d: &[f64], rows: &Matrix<f64>, hp: &HeadProjection<f64>) -> Vec<f64> {
        let (d, dh) = hp.w_q.shape();
        let mut q = vec![0.0; dh];
        for j in 0..dh {
            q[j] = hp.b_q.get(0, j);
            for i in 0..d {
                q[j] += h_d[i] * hp.w_q.get(i, j);
            }
        }
        let n = rows.rows();
        let mut scores = vec![0.0; n];
        let mut vals = vec![vec![0.0; dh]; n];
        for r in 0..n {
            for j in 0..dh {
                let mut k = hp.b_k.get(0, j);
                let mut v = hp.b_v.get(0, j);
                for i in 0..d {
                    k += rows.get(r, i) * hp.w_k.get(i, j);
                    v += rows.get(r, i) * hp.w_v.get(i, j);
                }
                scores[r] += q[j] * k;
                vals[r][j] = v;
            }
            scores[r] /= (dh as f64).sqrt();
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let mut out = vec![0.0; dh];
        for r in 0..n {
            let p = (scores[r] - m).exp() / z;
            for j in 0..dh {
                out[j] += p * vals[r][j];
            }
        }
        out
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = Rng::new(8);
        let hp = head(&mut rng, 6, 3, true);
        let rows = seeded_normal::<f64>(&mut rng, 4, 6, 1.0).unwrap();
        let h_d = seeded_normal::<f64>(&mut rng, 1, 6, 1.0).unwrap();
        let a = attend_retrieved(h_d.row(0), &rows, &hp).unwrap();
        let b = scalar_loop_attention(h_d.row(0), &rows, &hp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        let c = full_attention_oracle(h_d.row(0), &rows, &hp).unwrap();
        for (x, y) in c.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = Rng::new(4);
        let mut hp = head(&mut rng, 4, 2, false);
        hp.w_q.fill(0.0);
        let rows = seeded_normal::<f64>(&mut rng, 5, 4, 1.0).unwrap();
        let ctx = full_attention_oracle(&[1.0, 2.0, 3.0, 4.0], &rows, &hp).unwrap();
        let values = rows.matmul(&hp.w_v).unwrap();
        let mut mean = values.col_sums();
        mean.scale(1.0 / 5.0);
        for (a, b) in ctx.iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_three_rows() {
        // d = d_head = 1, identity weights: scores = h_d * h_e.
        let hp = HeadProjection::<f64> {
            layer: 0,
            head: 0,
            w_q: Matrix::identity(1),
            w_k: Matrix::identity(1),
            w_v: Matrix::identity(1),
            b_q: Matrix::zeros(1, 1),
            b_k: Matrix::zeros(1, 1),
            b_v: Matrix::zeros(1, 1),
            w_o: Matrix::identity(1),
        };
        let rows = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0f64.ln()]]).unwrap();
        // h_d = 1: weights exp(0)=1, exp(1)=e, exp(ln2)=2
        let ctx = full_attention_oracle(&[1.0], &rows, &hp).unwrap();
        let e = std::f64::consts::E;
        let expected = (0.0 + e * 1.0 + 2.0 * 2f64.ln()) / (1.0 + e + 2.0);
        assert!((ctx[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn coverage_cases() {
        let mut rng = Rng::new(5);
        let hp = head(&mut rng, 6, 3, true);
        let ds = store(seeded_normal(&mut rng, 9, 6, 1.0).unwrap());
        let h_d = seeded_normal::<f64>(&mut rng, 1, 6, 1.0).unwrap();
        let mut prev = 0.0;
        for k in 0..=9 {
            let c = attention_mass_coverage(h_d.row(0), &hp, &ds, k).unwrap();
            assert!(c >= prev - 1e-12);
            prev = c;
        }
        assert!((prev - 1.0).abs() < 1e-6);

        // uniform: zero query weights
        let mut flat = hp.clone();
        flat.w_q.fill(0.0);
        flat.b_q.fill(0.0);
        let ds4 = store(seeded_normal(&mut rng, 4, 6, 1.0).unwrap());
        let c = attention_mass_coverage(h_d.row(0), &flat, &ds4, 2).unwrap();
        assert!((c - 0.5).abs() < 1e-12);

        // logits = ln of target probabilities: 1-d identity head, scale 1
        let id = HeadProjection::<f64> {
            layer: 0,
            head: 0,
            w_q: Matrix::identity(1),
            w_k: Matrix::identity(1),
            w_v: Matrix::identity(1),
            b_q: Matrix::zeros(1, 1),
            b_k: Matrix::zeros(1, 1),
            b_v: Matrix::zeros(1, 1),
            w_o: Matrix::identity(1),
        };
        let probs = [0.7f64, 0.2, 0.05, 0.05];
        let ds = store(Matrix::from_rows(&probs.iter().map(|p| vec![p.ln()]).collect::<Vec<_>>()).unwrap());
        let c = attention_mass_coverage(&[1.0], &id, &ds, 1).unwrap();
        assert!((c - 0.7).abs() < 1e-12);
    }

    #[test]
    fn provider_modes() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_dec_layers: 2,
            ..ModelConfig::default()
        };
        let w = ModelWeights::<f64>::init(&cfg).unwrap();
        let ds = store(seeded_normal(&mut Rng::new(1), 20, 8, 1.0).unwrap());
        assert!(KnnCrossAttention::retrieval(ds.clone(), 0).is_err());
        assert!(KnnCrossAttention::memorizing_transformers(ds.clone(), 4, 2, 2, 16).is_err());
        let naive = KnnCrossAttention::naive_per_head(ds.clone(), &w, 4).unwrap();
        assert_eq!(naive.per_head_index_count(), 2 * 2 * 2);
        assert_eq!(naive.per_head_index_bytes(), 8 * 20 * 4 * 8);
        let mut full = KnnCrossAttention::full(ds);
        let hp = &w.dec_layers[0].cross_attn.heads[0];
        assert_eq!(full.select(0, hp, &[0.0; 8]).unwrap(), Selection::All);
        assert!(full.log().is_empty());
    }

    #[test]
    fn log_text_round_trip() {
        let log = RetrievalLog {
            records: vec![
                RetrievalRecord {
                    step: 0,
                    layer: 1,
                    head: 0,
                    rank: 0,
                    position: 17,
                    score: 1.5,
                },
                RetrievalRecord {
                    step: 0,
                    layer: 1,
                    head: 0,
                    rank: 1,
                    position: 3,
                    score: -0.25,
                },
            ],
            calls: 1,
        };
        let text = log.to_text();
        assert!(text.starts_with("step,layer,head,rank,position,score\n0,1,0,0,17,1.5\n"));
        assert_eq!(RetrievalLog::read(text.as_bytes()).unwrap(), log);
        assert!(matches!(
            RetrievalLog::read("0,1,2\n".as_bytes()),
            Err(Error::Data { line: 1, .. })
        ));
    }
}
