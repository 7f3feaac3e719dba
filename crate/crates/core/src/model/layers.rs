//! Differentiable building blocks. Every forward returns the activations
//! its backward needs; backward accumulates parameter gradients into a
//! same-shaped weight buffer and returns the input gradient.

use crate::error::{Error, Result};
use crate::model::decoder::Selection;
use crate::model::weights::{AttentionWeights, FeedForwardWeights, LayerNormWeights};
use crate::numerics::{axpy, dot, softmax_in_place, Matrix, Scalar};

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<T: Scalar> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &Matrix<T>, w: &LayerNormWeights<T>) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = x.shape();
    let n = T::lit(d as f64);
    let mut xhat = Matrix::zeros(rows, d);
    let mut y = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.get(r, c) * w.gamma.data()[c] + w.beta.data()[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    w: &LayerNormWeights<T>,
    g: &mut LayerNormWeights<T>,
) -> Matrix<T> {
    let (rows, d) = dy.shape();
    let n = T::lit(d as f64);
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            g.gamma.data_mut()[c] += dyr[c] * xh[c];
            g.beta.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * w.gamma.data()[c];
        }
        let sum: T = dxhat.iter().copied().sum();
        let sum_xh: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let rs = cache.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs / n * (n * dxhat[c] - sum - xh[c] * sum_xh);
        }
    }
    dx
}

pub(crate) fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Returns `dx`; accumulates `dW` and `db`.
pub(crate) fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    gw: &mut Matrix<T>,
    gb: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    gw.add_assign(&x.matmul_at(dy)?)?;
    gb.add_assign(&dy.col_sums())?;
    dy.matmul_bt(w)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) struct FfnCache<T: Scalar> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

pub(crate) fn feed_forward<T: Scalar>(x: &Matrix<T>, w: &FeedForwardWeights<T>) -> Result<(Matrix<T>, FfnCache<T>)> {
    let pre = linear(x, &w.w1, &w.b1)?;
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = linear(&act, &w.w2, &w.b2)?;
    Ok((
        out,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub(crate) fn feed_forward_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &FfnCache<T>,
    w: &FeedForwardWeights<T>,
    g: &mut FeedForwardWeights<T>,
) -> Result<Matrix<T>> {
    let mut dact = linear_backward(&cache.act, &w.w2, dy, &mut g.w2, &mut g.b2)?;
    for (d, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= gelu_grad(p);
    }
    linear_backward(&cache.x, &w.w1, &dact, &mut g.w1, &mut g.b1)
}

pub(crate) struct SelfHeadCache<T: Scalar> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    p: Matrix<T>,
    c: Matrix<T>,
}

pub(crate) struct SelfAttnCache<T: Scalar> {
    x: Matrix<T>,
    heads: Vec<SelfHeadCache<T>>,
    causal: bool,
}

/// Multi-head self-attention over the rows of `x`.
pub(crate) fn self_attention<T: Scalar>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    causal: bool,
) -> Result<(Matrix<T>, SelfAttnCache<T>)> {
    let t = x.rows();
    let mut out = Matrix::zeros(t, x.cols());
    out.add_row_broadcast(&w.b_o)?;
    let mut heads = Vec::with_capacity(w.heads.len());
    for hp in &w.heads {
        let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
        let q = linear(x, &hp.w_q, &hp.b_q)?;
        let k = linear(x, &hp.w_k, &hp.b_k)?;
        let v = linear(x, &hp.w_v, &hp.b_v)?;
        let mut p = Matrix::zeros(t, t);
        let mut c = Matrix::zeros(t, hp.d_head());
        for i in 0..t {
            let visible = if causal { i + 1 } else { t };
            let row = &mut p.row_mut(i)[..visible];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q.row(i), k.row(j)) * scale;
            }
            softmax_in_place(row);
            for j in 0..visible {
                let pij = p.get(i, j);
                axpy(c.row_mut(i), pij, v.row(j));
            }
        }
        out.add_assign(&c.matmul(&hp.w_o)?)?;
        heads.push(SelfHeadCache { q, k, v, p, c });
    }
    Ok((
        out,
        SelfAttnCache {
            x: x.clone(),
            heads,
            causal,
        },
    ))
}

pub(crate) fn self_attention_backward<T: Scalar>(
    dout: &Matrix<T>,
    cache: &SelfAttnCache<T>,
    w: &AttentionWeights<T>,
    g: &mut AttentionWeights<T>,
) -> Result<Matrix<T>> {
    let t = dout.rows();
    g.b_o.add_assign(&dout.col_sums())?;
    let mut dx = Matrix::zeros(t, cache.x.cols());
    for ((hp, gh), hc) in w.heads.iter().zip(g.heads.iter_mut()).zip(&cache.heads) {
        let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
        gh.w_o.add_assign(&hc.c.matmul_at(dout)?)?;
        let dc = dout.matmul_bt(&hp.w_o)?;
        let mut dq = Matrix::zeros(t, hp.d_head());
        let mut dk = Matrix::zeros(t, hp.d_head());
        let mut dv = Matrix::zeros(t, hp.d_head());
        let mut dp = vec![T::zero(); t];
        for i in 0..t {
            let visible = if cache.causal { i + 1 } else { t };
            let prow = &hc.p.row(i)[..visible];
            for j in 0..visible {
                dp[j] = dot(dc.row(i), hc.v.row(j));
                axpy(dv.row_mut(j), prow[j], dc.row(i));
            }
            let inner: T = prow.iter().zip(&dp[..visible]).map(|(&a, &b)| a * b).sum();
            for j in 0..visible {
                let ds = prow[j] * (dp[j] - inner) * scale;
                axpy(dq.row_mut(i), ds, hc.k.row(j));
                axpy(dk.row_mut(j), ds, hc.q.row(i));
            }
        }
        dx.add_assign(&linear_backward(&cache.x, &hp.w_q, &dq, &mut gh.w_q, &mut gh.b_q)?)?;
        dx.add_assign(&linear_backward(&cache.x, &hp.w_k, &dk, &mut gh.w_k, &mut gh.b_k)?)?;
        dx.add_assign(&linear_backward(&cache.x, &hp.w_v, &dv, &mut gh.w_v, &mut gh.b_v)?)?;
    }
    Ok(dx)
}

pub(crate) struct CrossHeadCache<T: Scalar> {
    q: Matrix<T>,
    keys: Matrix<T>,
    values: Matrix<T>,
    selections: Vec<Selection>,
    probs: Vec<Vec<T>>,
    c: Matrix<T>,
}

pub(crate) struct CrossAttnCache<T: Scalar> {
    h: Matrix<T>,
    heads: Vec<CrossHeadCache<T>>,
}

impl<T: Scalar> CrossAttnCache<T> {
    pub(crate) fn selections(&self, head: usize) -> &[Selection] {
        &self.heads[head].selections
    }
}

fn selected<'a>(sel: &'a Selection, n: usize) -> Result<SelectedRows<'a>> {
    match sel {
        Selection::All if n > 0 => Ok(SelectedRows::All(n)),
        Selection::Rows(rows) if !rows.is_empty() => {
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(Error::Range(format!("selected row {bad} outside memory of {n} rows")));
            }
            Ok(SelectedRows::Rows(rows))
        }
        _ => Err(Error::arg("cross-attention over an empty row set")),
    }
}

enum SelectedRows<'a> {
    All(usize),
    Rows(&'a [usize]),
}

impl SelectedRows<'_> {
    fn len(&self) -> usize {
        match self {
            SelectedRows::All(n) => *n,
            SelectedRows::Rows(r) => r.len(),
        }
    }

    #[inline]
    fn get(&self, j: usize) -> usize {
        match self {
            SelectedRows::All(_) => j,
            SelectedRows::Rows(r) => r[j],
        }
    }
}

/// Cross-attention where each (position, head) attends to its own subset of
/// memory rows. `select(t, head, h_row)` is called once per position and
/// head, position-major.
pub(crate) fn cross_attention<T: Scalar>(
    h: &Matrix<T>,
    memory: &Matrix<T>,
    w: &AttentionWeights<T>,
    select: &mut dyn FnMut(usize, usize, &[T]) -> Result<Selection>,
) -> Result<(Matrix<T>, CrossAttnCache<T>)> {
    let t = h.rows();
    let n = memory.rows();
    let n_heads = w.heads.len();
    let mut sels: Vec<Vec<Selection>> = vec![Vec::with_capacity(t); n_heads];
    for i in 0..t {
        for (hi, s) in sels.iter_mut().enumerate() {
            s.push(select(i, hi, h.row(i))?);
        }
    }
    let mut out = Matrix::zeros(t, h.cols());
    out.add_row_broadcast(&w.b_o)?;
    let mut heads = Vec::with_capacity(n_heads);
    for (hp, selections) in w.heads.iter().zip(sels) {
        let scale = T::one() / T::lit(hp.d_head() as f64).sqrt();
        let q = linear(h, &hp.w_q, &hp.b_q)?;
        let keys = linear(memory, &hp.w_k, &hp.b_k)?;
        let values = linear(memory, &hp.w_v, &hp.b_v)?;
        let mut c = Matrix::zeros(t, hp.d_head());
        let mut probs = Vec::with_capacity(t);
        for (i, sel) in selections.iter().enumerate() {
            let rows = selected(sel, n)?;
            let mut p: Vec<T> = (0..rows.len())
                .map(|j| dot(q.row(i), keys.row(rows.get(j))) * scale)
                .collect();
            softmax_in_place(&mut p);
            for (j, &pj) in p.iter().enumerate() {
                axpy(c.row_mut(i), pj, values.row(rows.get(j)));
            }
            probs.push(p);
        }
        out.add_assign(&c.matmul(&hp.w_o)?)?;
        heads.push(CrossHeadCache {
            q,
            keys,
            values,
            selections,
            probs,
            c,
        });
    }
    Ok((out, CrossAttnCache { h: h.clone(), heads }))
}

/// Returns `dh`; accumulates weight gradients and adds the memory gradient
/// into `d_memory`. Only selected rows receive memory gradient.
pub(crate) fn cross_attention_backward<T: Scalar>(
    dout: &Matrix<T>,
    cache: &CrossAttnCache<T>,
    memory: &Matrix<T>,
    w: &AttentionWeights<T>,
    g: &mut AttentionWeights<T>,
    d_memory: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    let t = dout.rows();
    let n = memory.rows();
    g.b_o.add_assign(&dout.col_sums())?;
    let mut dh = Matrix::zeros(t, cache.h.cols());
    for ((hp, gh), hc) in w.heads.iter().zip(g.heads.iter_mut()).zip(&cache.heads) {
        let dhd = hp.d_head();
        let scale = T::one() / T::lit(dhd as f64).sqrt();
        gh.w_o.add_assign(&hc.c.matmul_at(dout)?)?;
        let dc = dout.matmul_bt(&hp.w_o)?;
        let mut dq = Matrix::zeros(t, dhd);
        let mut dkeys = Matrix::zeros(n, dhd);
        let mut dvalues = Matrix::zeros(n, dhd);
        for i in 0..t {
            let rows = selected(&hc.selections[i], n)?;
            let p = &hc.probs[i];
            let dp: Vec<T> = (0..rows.len())
                .map(|j| dot(dc.row(i), hc.values.row(rows.get(j))))
                .collect();
            let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for j in 0..rows.len() {
                let r = rows.get(j);
                axpy(dvalues.row_mut(r), p[j], dc.row(i));
                let ds = p[j] * (dp[j] - inner) * scale;
                axpy(dq.row_mut(i), ds, hc.keys.row(r));
                axpy(dkeys.row_mut(r), ds, hc.q.row(i));
            }
        }
        dh.add_assign(&linear_backward(&cache.h, &hp.w_q, &dq, &mut gh.w_q, &mut gh.b_q)?)?;
        d_memory.add_assign(&linear_backward(memory, &hp.w_k, &dkeys, &mut gh.w_k, &mut gh.b_k)?)?;
        d_memory.add_assign(&linear_backward(memory, &hp.w_v, &dvalues, &mut gh.w_v, &mut gh.b_v)?)?;
    }
    Ok(dh)
}

/// Adds token and position embeddings for `tokens` at positions `0..len`.
pub(crate) fn embed<T: Scalar>(tok_emb: &Matrix<T>, pos_emb: &Matrix<T>, tokens: &[u32]) -> Matrix<T> {
    let d = tok_emb.cols();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        for c in 0..d {
            row[c] = tok_emb.get(tok as usize, c) + pos_emb.get(i, c);
        }
    }
    x
}

pub(crate) fn embed_backward<T: Scalar>(
    dx: &Matrix<T>,
    tokens: &[u32],
    g_tok: &mut Matrix<T>,
    g_pos: &mut Matrix<T>,
) {
    for (i, &tok) in tokens.iter().enumerate() {
        axpy(g_tok.row_mut(tok as usize), T::one(), dx.row(i));
        axpy(g_pos.row_mut(i), T::one(), dx.row(i));
    }
}
