//! Long-input encoding by overlapping windows.
//!
//! Windows start every `w/2` tokens and the last one is pulled back to end
//! exactly at `n`. Each token is owned by exactly one window: the boundary
//! between consecutive windows sits at the midpoint of their overlap, so an
//! interior window keeps its middle half and the first/last windows extend
//! their keep range to the input edges.
//!
//! ```text
//! n = 16, w = 8
//! window 0  [0 ........ 8)      keep [0, 6)
//! window 1      [4 ........ 12)  keep [6, 10)
//! window 2          [8 ........ 16)  keep [10, 16)
//! ```

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{encode_window_backward, encode_window_cached, EncoderCache, ModelWeights, TokenId};
use crate::numerics::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkSpan {
    pub start: usize,
    pub end: usize,
    pub keep_start: usize,
    pub keep_end: usize,
}

impl ChunkSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn keep(&self) -> Range<usize> {
        self.keep_start..self.keep_end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub spans: Vec<ChunkSpan>,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Chunk plan with the default half-window stride.
pub fn chunk_spans(n: usize, w: usize) -> Result<ChunkPlan> {
    chunk_spans_with_stride(n, w, w / 2)
}

pub fn chunk_spans_with_stride(n: usize, w: usize, stride: usize) -> Result<ChunkPlan> {
    if w < 4 || w % 4 != 0 {
        return Err(Error::Config(format!("window must be at least 4 and divisible by 4, got {w}")));
    }
    if stride == 0 || stride > w {
        return Err(Error::Config(format!("stride must be in 1..={w}, got {stride}")));
    }
    if n == 0 {
        return Err(Error::arg("cannot chunk an empty input"));
    }
    if n <= w {
        return Ok(ChunkPlan {
            spans: vec![ChunkSpan {
                start: 0,
                end: n,
                keep_start: 0,
                keep_end: n,
            }],
        });
    }
    let mut starts = vec![0usize];
    loop {
        let last = *starts.last().unwrap();
        let next = last + stride;
        if next + w >= n {
            starts.push(n - w);
            break;
        }
        starts.push(next);
    }
    let mut spans = Vec::with_capacity(starts.len());
    let mut keep_start = 0;
    for (i, &start) in starts.iter().enumerate() {
        let keep_end = match starts.get(i + 1) {
            Some(&next) => (start + next + w) / 2,
            None => n,
        };
        spans.push(ChunkSpan {
            start,
            end: start + w,
            keep_start,
            keep_end,
        });
        keep_start = keep_end;
    }
    Ok(ChunkPlan { spans })
}

/// Encoder states for a whole input: one row per token, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput<T: Scalar = f32> {
    pub hidden: Matrix<T>,
    pub positions: Vec<usize>,
}

impl<T: Scalar> EncodedInput<T> {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }
}

/// Per-chunk activations from [`encode_long_cached`].
pub struct ChunkedEncoding<T: Scalar = f32> {
    pub plan: ChunkPlan,
    caches: Vec<EncoderCache<T>>,
}

pub fn encode_long<T: Scalar>(weights: &ModelWeights<T>, tokens: &[TokenId]) -> Result<EncodedInput<T>> {
    encode_long_cached(weights, tokens).map(|(e, _)| e)
}

pub fn encode_long_cached<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[TokenId],
) -> Result<(EncodedInput<T>, ChunkedEncoding<T>)> {
    let plan = chunk_spans(tokens.len(), weights.config.window)?;
    let d = weights.config.d_model;
    let mut hidden = Matrix::zeros(tokens.len(), d);
    let mut caches = Vec::with_capacity(plan.len());
    for span in &plan.spans {
        let (h, cache) = encode_window_cached(weights, &tokens[span.range()])?;
        for t in span.keep() {
            hidden.row_mut(t).copy_from_slice(h.row(t - span.start));
        }
        caches.push(cache);
    }
    Ok((
        EncodedInput {
            hidden,
            positions: (0..tokens.len()).collect(),
        },
        ChunkedEncoding { plan, caches },
    ))
}

/// Backpropagates a gradient on the assembled hidden states through every
/// chunk that owns a row with nonzero gradient.
pub fn encode_long_backward<T: Scalar>(
    weights: &ModelWeights<T>,
    encoding: &ChunkedEncoding<T>,
    d_hidden: &Matrix<T>,
    grads: &mut ModelWeights<T>,
) -> Result<()> {
    for (span, cache) in encoding.plan.spans.iter().zip(&encoding.caches) {
        let keep = span.keep();
        if keep.clone().all(|t| d_hidden.row(t).iter().all(|&v| v == T::zero())) {
            continue;
        }
        let mut d_out = Matrix::zeros(span.end - span.start, d_hidden.cols());
        for t in keep {
            d_out.row_mut(t - span.start).copy_from_slice(d_hidden.row(t));
        }
        encode_window_backward(weights, cache, &d_out, grads)?;
    }
    Ok(())
}
