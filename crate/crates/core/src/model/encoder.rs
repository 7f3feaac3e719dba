use crate::error::{Error, Result};
use crate::model::layers::{
    embed, embed_backward, feed_forward, feed_forward_backward, layer_norm, layer_norm_backward, self_attention,
    self_attention_backward, FfnCache, LnCache, SelfAttnCache,
};
use crate::model::{ModelWeights, TokenId};
use crate::numerics::{Matrix, Scalar};

struct EncoderLayerCache<T: Scalar> {
    ln1: LnCache<T>,
    attn: SelfAttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

/// Activations of one encoder window, kept for the backward pass.
pub struct EncoderCache<T: Scalar = f32> {
    tokens: Vec<TokenId>,
    layers: Vec<EncoderLayerCache<T>>,
    final_ln: LnCache<T>,
}

fn check_window(weights_window: usize, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::arg("cannot encode an empty window"));
    }
    if len > weights_window {
        return Err(Error::Window {
            len,
            window: weights_window,
        });
    }
    Ok(())
}

/// Top-layer encoder hidden states for a single window, one row per token.
/// Positions restart at 0 for every window.
pub fn encode_window<T: Scalar>(weights: &ModelWeights<T>, tokens: &[TokenId]) -> Result<Matrix<T>> {
    encode_window_cached(weights, tokens).map(|(h, _)| h)
}

pub fn encode_window_cached<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[TokenId],
) -> Result<(Matrix<T>, EncoderCache<T>)> {
    check_window(weights.config.window, tokens.len())?;
    weights.config.check_tokens(tokens)?;
    let mut x = embed(&weights.tok_emb, &weights.enc_pos, tokens);
    let mut layers = Vec::with_capacity(weights.enc_layers.len());
    for layer in &weights.enc_layers {
        let (a_in, ln1) = layer_norm(&x, &layer.ln1);
        let (a_out, attn) = self_attention(&a_in, &layer.self_attn, false)?;
        x.add_assign(&a_out)?;
        let (f_in, ln2) = layer_norm(&x, &layer.ln2);
        let (f_out, ffn) = feed_forward(&f_in, &layer.ffn)?;
        x.add_assign(&f_out)?;
        layers.push(EncoderLayerCache { ln1, attn, ln2, ffn });
    }
    let (h, final_ln) = layer_norm(&x, &weights.enc_ln);
    Ok((
        h,
        EncoderCache {
            tokens: tokens.to_vec(),
            layers,
            final_ln,
        },
    ))
}

/// Backpropagates `d_out` (gradient w.r.t. the window's hidden states) into
/// `grads`.
pub fn encode_window_backward<T: Scalar>(
    weights: &ModelWeights<T>,
    cache: &EncoderCache<T>,
    d_out: &Matrix<T>,
    grads: &mut ModelWeights<T>,
) -> Result<()> {
    let mut dx = layer_norm_backward(d_out, &cache.final_ln, &weights.enc_ln, &mut grads.enc_ln);
    for ((layer, g), lc) in weights
        .enc_layers
        .iter()
        .zip(grads.enc_layers.iter_mut())
        .zip(&cache.layers)
        .rev()
    {
        let d_f_in = feed_forward_backward(&dx, &lc.ffn, &layer.ffn, &mut g.ffn)?;
        dx.add_assign(&layer_norm_backward(&d_f_in, &lc.ln2, &layer.ln2, &mut g.ln2))?;
        let d_a_in = self_attention_backward(&dx, &lc.attn, &layer.self_attn, &mut g.self_attn)?;
        dx.add_assign(&layer_norm_backward(&d_a_in, &lc.ln1, &layer.ln1, &mut g.ln1))?;
    }
    embed_backward(&dx, &cache.tokens, &mut grads.tok_emb, &mut grads.enc_pos);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::grad_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            vocab_size: 12,
            window: 8,
            seed: 5,
        }
    }

    #[test]
    fn shapes_and_errors() {
        let w = ModelWeights::<f32>::init(&tiny()).unwrap();
        assert_eq!(encode_window(&w, &[4]).unwrap().shape(), (1, 8));
        assert!(matches!(encode_window(&w, &[4; 9]), Err(Error::Window { len: 9, window: 8 })));
        assert!(matches!(encode_window(&w, &[12]), Err(Error::Vocab { id: 12, .. })));
        assert!(encode_window(&w, &[]).is_err());
    }

    #[test]
    fn deterministic_and_position_sensitive() {
        let w = ModelWeights::<f32>::init(&tiny()).unwrap();
        let a = encode_window(&w, &[4, 5, 6, 7]).unwrap();
        assert_eq!(a, encode_window(&w, &[4, 5, 6, 7]).unwrap());
        let b = encode_window(&w, &[7, 6, 5, 4]).unwrap();
        // token 4 sits at position 0 in `a` and position 3 in `b`
        assert!(a.row(0).iter().zip(b.row(3)).any(|(x, y)| (x - y).abs() > 1e-4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let w = ModelWeights::<f64>::init(&tiny()).unwrap();
        let tokens = [4, 9, 5, 4, 11];
        let (h, cache) = encode_window_cached(&w, &tokens).unwrap();
        // objective: weighted sum of outputs
        let probe: Vec<f64> = (0..h.data().len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let d_out = Matrix::from_vec(h.rows(), h.cols(), probe.clone()).unwrap();
        let mut grads = w.zeros_like();
        encode_window_backward(&w, &cache, &d_out, &mut grads).unwrap();
        for name in ["enc.0.self.h1.w_k", "enc.0.ffn.w1", "enc.0.ln1.gamma", "tok_emb", "enc_pos"] {
            let x = w.tensor(name).unwrap().clone();
            let analytic = grads.tensor(name).unwrap().clone();
            let err = grad_check(
                |m| {
                    let mut w2 = w.clone();
                    w2.with_tensor_mut(name, |t| *t = m.clone());
                    let h = encode_window(&w2, &tokens).unwrap();
                    h.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
                },
                &analytic,
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
