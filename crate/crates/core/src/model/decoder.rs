use crate::error::{Error, Result};
use crate::model::layers::{
    cross_attention, cross_attention_backward, embed, embed_backward, feed_forward, feed_forward_backward, layer_norm,
    layer_norm_backward, self_attention, self_attention_backward, CrossAttnCache, FfnCache, LnCache, SelfAttnCache,
};
use crate::model::{HeadProjection, ModelWeights, TokenId, BOS, EOS};
use crate::numerics::{axpy, dot, softmax_in_place, Matrix, Scalar};
use crate::retrieval::attend_retrieved;

/// Which encoder rows one cross-attention head attends to at one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    Rows(Vec<usize>),
}

/// Source of cross-attention for the decoder.
///
/// `select` decides which memory rows a head sees; `context` turns that into
/// the head's context vector and may be overridden by providers that
/// compute attention some other way.
pub trait CrossAttentionProvider<T: Scalar = f32> {
    fn memory(&self) -> &Matrix<T>;

    /// `h_d` is the normalised decoder state entering cross-attention at
    /// decoder position `step`; `hp` identifies the layer and head.
    fn select(&mut self, step: usize, hp: &HeadProjection<T>, h_d: &[T]) -> Result<Selection>;

    fn context(&mut self, step: usize, hp: &HeadProjection<T>, h_d: &[T]) -> Result<Vec<T>> {
        match self.select(step, hp, h_d)? {
            Selection::All => attend_retrieved(h_d, self.memory(), hp),
            Selection::Rows(rows) => attend_retrieved(h_d, &self.memory().gather_rows(&rows), hp),
        }
    }
}

fn with_head_context<R>(hp: &HeadProjection<impl Scalar>, r: Result<R>) -> Result<R> {
    r.map_err(|e| Error::Provider {
        layer: hp.layer,
        head: hp.head,
        source: Box::new(e),
    })
}

fn check_prefix(window: usize, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::arg("decoder prefix is empty"));
    }
    if len > window {
        return Err(Error::Window { len, window });
    }
    Ok(())
}

fn argmax_lowest<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Incremental decoder with cached self-attention keys and values; each
/// `step` consumes one token and queries the provider once per layer and
/// head.
pub struct DecodeSession<'w, T: Scalar = f32> {
    weights: &'w ModelWeights<T>,
    keys: Vec<Vec<Matrix<T>>>,
    values: Vec<Vec<Matrix<T>>>,
    position: usize,
}

impl<'w, T: Scalar> DecodeSession<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>) -> Self {
        let cfg = &weights.config;
        let empty = || vec![Matrix::zeros(0, cfg.d_head()); cfg.n_heads];
        Self {
            weights,
            keys: (0..cfg.n_dec_layers).map(|_| empty()).collect(),
            values: (0..cfg.n_dec_layers).map(|_| empty()).collect(),
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds `token` at the next position and returns next-token logits.
    pub fn step(&mut self, token: TokenId, cross: &mut dyn CrossAttentionProvider<T>) -> Result<Vec<T>> {
        let w = self.weights;
        let cfg = &w.config;
        check_prefix(cfg.window, self.position + 1)?;
        cfg.check_tokens(&[token])?;
        let pos = self.position;
        let mut x = embed(&w.tok_emb, &w.dec_pos.slice_rows(pos..pos + 1), &[token]);
        for (l, layer) in w.dec_layers.iter().enumerate() {
            let (a, _) = layer_norm(&x, &layer.ln1);
            let mut out = layer.self_attn.b_o.clone();
            for (h, hp) in layer.self_attn.heads.iter().enumerate() {
                let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
                let q = crate::model::layers::linear(&a, &hp.w_q, &hp.b_q)?;
                let k = crate::model::layers::linear(&a, &hp.w_k, &hp.b_k)?;
                let v = crate::model::layers::linear(&a, &hp.w_v, &hp.b_v)?;
                self.keys[l][h].push_row(k.row(0))?;
                self.values[l][h].push_row(v.row(0))?;
                let keys = &self.keys[l][h];
                let vals = &self.values[l][h];
                let mut p: Vec<T> = (0..keys.rows()).map(|j| dot(q.row(0), keys.row(j)) * scale).collect();
                softmax_in_place(&mut p);
                let mut c = vec![T::zero(); hp.d_head()];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(&mut c, pj, vals.row(j));
                }
                axpy(out.row_mut(0), T::one(), &hp.w_o.vec_mul(&c)?);
            }
            x.add_assign(&out)?;

            let (h_d, _) = layer_norm(&x, &layer.ln2);
            let mut out = layer.cross_attn.b_o.clone();
            for hp in &layer.cross_attn.heads {
                let c = with_head_context(hp, cross.context(pos, hp, h_d.row(0)))?;
                axpy(out.row_mut(0), T::one(), &hp.w_o.vec_mul(&c)?);
            }
            x.add_assign(&out)?;

            let (f, _) = layer_norm(&x, &layer.ln3);
            let (f_out, _) = feed_forward(&f, &layer.ffn)?;
            x.add_assign(&f_out)?;
        }
        let (z, _) = layer_norm(&x, &w.dec_ln);
        let mut logits = w.tok_emb.vec_mul_t(z.row(0))?;
        for (o, &b) in logits.iter_mut().zip(w.out_bias.data()) {
            *o += b;
        }
        self.position += 1;
        Ok(logits)
    }
}

/// Next-token logits after `prefix`.
pub fn decode_step<T: Scalar>(
    weights: &ModelWeights<T>,
    prefix: &[TokenId],
    cross: &mut dyn CrossAttentionProvider<T>,
) -> Result<Vec<T>> {
    check_prefix(weights.config.window, prefix.len())?;
    let mut session = DecodeSession::new(weights);
    let mut logits = Vec::new();
    for &tok in prefix {
        logits = session.step(tok, cross)?;
    }
    Ok(logits)
}

/// Greedy decoding from BOS. Stops at EOS (not emitted), after
/// `max_new_tokens`, or after `window - 1` tokens.
pub fn greedy_generate<T: Scalar>(
    weights: &ModelWeights<T>,
    cross: &mut dyn CrossAttentionProvider<T>,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    let limit = max_new_tokens.min(weights.config.window - 1);
    let mut out = Vec::new();
    if limit == 0 {
        return Ok(out);
    }
    let mut session = DecodeSession::new(weights);
    let mut logits = session.step(BOS, cross)?;
    loop {
        let next = argmax_lowest(&logits) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() >= limit {
            break;
        }
        logits = session.step(next, cross)?;
    }
    Ok(out)
}

struct DecoderLayerCache<T: Scalar> {
    ln1: LnCache<T>,
    attn: SelfAttnCache<T>,
    ln2: LnCache<T>,
    cross: CrossAttnCache<T>,
    ln3: LnCache<T>,
    ffn: FfnCache<T>,
}

struct DecoderCache<T: Scalar> {
    layers: Vec<DecoderLayerCache<T>>,
    final_ln: LnCache<T>,
    z: Matrix<T>,
}

fn decoder_forward<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[TokenId],
    cross: &mut dyn CrossAttentionProvider<T>,
) -> Result<(Matrix<T>, DecoderCache<T>)> {
    check_prefix(weights.config.window, tokens.len())?;
    weights.config.check_tokens(tokens)?;
    let mut x = embed(&weights.tok_emb, &weights.dec_pos, tokens);
    let mut layers = Vec::with_capacity(weights.dec_layers.len());
    for layer in &weights.dec_layers {
        let (a_in, ln1) = layer_norm(&x, &layer.ln1);
        let (a_out, attn) = self_attention(&a_in, &layer.self_attn, true)?;
        x.add_assign(&a_out)?;
        let (h, ln2) = layer_norm(&x, &layer.ln2);
        let heads = &layer.cross_attn.heads;
        let memory = cross.memory().clone();
        let (c_out, cross_cache) = cross_attention(&h, &memory, &layer.cross_attn, &mut |t, head, row| {
            with_head_context(&heads[head], cross.select(t, &heads[head], row))
        })?;
        x.add_assign(&c_out)?;
        let (f_in, ln3) = layer_norm(&x, &layer.ln3);
        let (f_out, ffn) = feed_forward(&f_in, &layer.ffn)?;
        x.add_assign(&f_out)?;
        layers.push(DecoderLayerCache {
            ln1,
            attn,
            ln2,
            cross: cross_cache,
            ln3,
            ffn,
        });
    }
    let (z, final_ln) = layer_norm(&x, &weights.dec_ln);
    let mut logits = z.matmul_bt(&weights.tok_emb)?;
    logits.add_row_broadcast(&weights.out_bias)?;
    Ok((logits, DecoderCache { layers, final_ln, z }))
}

/// Logits at every position of `tokens` in one batched pass.
pub fn forward_logits<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[TokenId],
    cross: &mut dyn CrossAttentionProvider<T>,
) -> Result<Matrix<T>> {
    decoder_forward(weights, tokens, cross).map(|(l, _)| l)
}

/// Loss, parameter gradients, and the gradient w.r.t. the provider's memory.
pub struct LossAndGrads<T: Scalar = f32> {
    pub loss: T,
    pub grads: ModelWeights<T>,
    pub d_memory: Matrix<T>,
    /// Selections made during the forward pass, `[layer][head][position]`.
    pub selections: Vec<Vec<Vec<Selection>>>,
}

/// Mean next-token cross-entropy of `target` (BOS ... EOS) under teacher
/// forcing, with full backward pass. Row selections are treated as
/// constants.
pub fn teacher_forced_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    cross: &mut dyn CrossAttentionProvider<T>,
    target: &[TokenId],
) -> Result<LossAndGrads<T>> {
    if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
        return Err(Error::arg("target must be at least BOS, EOS and start with BOS and end with EOS"));
    }
    if target.len() > weights.config.window {
        return Err(Error::Window {
            len: target.len(),
            window: weights.config.window,
        });
    }
    let inputs = &target[..target.len() - 1];
    let labels = &target[1..];
    let (logits, cache) = decoder_forward(weights, inputs, cross)?;
    let count = T::lit(labels.len() as f64);
    let mut loss = T::zero();
    let mut dlogits = logits.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(r);
        softmax_in_place(row);
        loss -= row[y as usize].max(T::min_positive_value()).ln();
        row[y as usize] -= T::one();
        row.iter_mut().for_each(|v| *v /= count);
    }
    loss /= count;

    let mut grads = weights.zeros_like();
    let memory = cross.memory();
    let mut d_memory = Matrix::zeros(memory.rows(), memory.cols());
    grads.out_bias.add_assign(&dlogits.col_sums())?;
    grads.tok_emb.add_assign(&dlogits.matmul_at(&cache.z)?)?;
    let dz = dlogits.matmul(&weights.tok_emb)?;
    let mut dx = layer_norm_backward(&dz, &cache.final_ln, &weights.dec_ln, &mut grads.dec_ln);
    for ((layer, g), lc) in weights
        .dec_layers
        .iter()
        .zip(grads.dec_layers.iter_mut())
        .zip(&cache.layers)
        .rev()
    {
        let d_f_in = feed_forward_backward(&dx, &lc.ffn, &layer.ffn, &mut g.ffn)?;
        dx.add_assign(&layer_norm_backward(&d_f_in, &lc.ln3, &layer.ln3, &mut g.ln3))?;
        let dh = cross_attention_backward(&dx, &lc.cross, memory, &layer.cross_attn, &mut g.cross_attn, &mut d_memory)?;
        dx.add_assign(&layer_norm_backward(&dh, &lc.ln2, &layer.ln2, &mut g.ln2))?;
        let d_a_in = self_attention_backward(&dx, &lc.attn, &layer.self_attn, &mut g.self_attn)?;
        dx.add_assign(&layer_norm_backward(&d_a_in, &lc.ln1, &layer.ln1, &mut g.ln1))?;
    }
    embed_backward(&dx, inputs, &mut grads.tok_emb, &mut grads.dec_pos);

    let selections = cache
        .layers
        .iter()
        .map(|lc| (0..weights.config.n_heads).map(|h| lc.cross.selections(h).to_vec()).collect())
        .collect();
    Ok(LossAndGrads {
        loss,
        grads,
        d_memory,
        selections,
    })
}
