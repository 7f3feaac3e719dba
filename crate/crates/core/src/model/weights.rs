use crate::error::Result;
use crate::model::ModelConfig;
use crate::numerics::{seeded_normal, Matrix, Rng, Scalar};

/// Query/key/value projection of one attention head, plus its slice of the
/// output projection. Biases are stored as 1×d_head rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection<T: Scalar = f32> {
    pub layer: usize,
    pub head: usize,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_q: Matrix<T>,
    pub b_k: Matrix<T>,
    pub b_v: Matrix<T>,
    pub w_o: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T: Scalar = f32> {
    pub heads: Vec<HeadProjection<T>>,
    pub b_o: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<T: Scalar = f32> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights<T: Scalar = f32> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T: Scalar = f32> {
    pub ln1: LayerNormWeights<T>,
    pub self_attn: AttentionWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub ffn: FeedForwardWeights<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T: Scalar = f32> {
    pub ln1: LayerNormWeights<T>,
    pub self_attn: AttentionWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub cross_attn: AttentionWeights<T>,
    pub ln3: LayerNormWeights<T>,
    pub ffn: FeedForwardWeights<T>,
}

/// All trainable parameters. The output projection is tied to `tok_emb`;
/// `out_bias` is the only untied output parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub enc_pos: Matrix<T>,
    pub dec_pos: Matrix<T>,
    pub enc_layers: Vec<EncoderLayer<T>>,
    pub enc_ln: LayerNormWeights<T>,
    pub dec_layers: Vec<DecoderLayer<T>>,
    pub dec_ln: LayerNormWeights<T>,
    pub out_bias: Matrix<T>,
}

const EMBED_STD: f64 = 0.1;

fn linear_init<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix<T>> {
    seeded_normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

impl<T: Scalar> HeadProjection<T> {
    fn init(rng: &mut Rng, layer: usize, head: usize, d_model: usize, d_head: usize) -> Result<Self> {
        Ok(Self {
            layer,
            head,
            w_q: linear_init(rng, d_model, d_head)?,
            w_k: linear_init(rng, d_model, d_head)?,
            w_v: linear_init(rng, d_model, d_head)?,
            b_q: Matrix::zeros(1, d_head),
            b_k: Matrix::zeros(1, d_head),
            b_v: Matrix::zeros(1, d_head),
            w_o: linear_init(rng, d_model, d_head)?.transpose(),
        })
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
        ] {
            f(&format!("{prefix}.{name}"), m);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for (name, m) in [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("b_q", &mut self.b_q),
            ("b_k", &mut self.b_k),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
        ] {
            f(&format!("{prefix}.{name}"), m);
        }
    }
}

impl<T: Scalar> AttentionWeights<T> {
    fn init(rng: &mut Rng, layer: usize, cfg: &ModelConfig) -> Result<Self> {
        let heads = (0..cfg.n_heads)
            .map(|h| HeadProjection::init(rng, layer, h, cfg.d_model, cfg.d_head()))
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            b_o: Matrix::zeros(1, cfg.d_model),
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        for (h, hp) in self.heads.iter().enumerate() {
            hp.visit(&format!("{prefix}.h{h}"), f);
        }
        f(&format!("{prefix}.b_o"), &self.b_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for (h, hp) in self.heads.iter_mut().enumerate() {
            hp.visit_mut(&format!("{prefix}.h{h}"), f);
        }
        f(&format!("{prefix}.b_o"), &mut self.b_o);
    }
}

impl<T: Scalar> LayerNormWeights<T> {
    fn init(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, T::one()),
            beta: Matrix::zeros(1, d),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<T: Scalar> FeedForwardWeights<T> {
    fn init(rng: &mut Rng, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            w1: linear_init(rng, cfg.d_model, cfg.d_ff)?,
            b1: Matrix::zeros(1, cfg.d_ff),
            w2: linear_init(rng, cfg.d_ff, cfg.d_model)?,
            b2: Matrix::zeros(1, cfg.d_model),
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Random initialisation, deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let d = config.d_model;
        let mut emb_rng = root.split(1);
        let tok_emb = seeded_normal(&mut emb_rng, config.vocab_size, d, EMBED_STD)?;
        let enc_pos = seeded_normal(&mut emb_rng, config.window, d, EMBED_STD)?;
        let dec_pos = seeded_normal(&mut emb_rng, config.window, d, EMBED_STD)?;
        let mut enc_layers = Vec::with_capacity(config.n_enc_layers);
        for l in 0..config.n_enc_layers {
            let mut rng = root.split(100 + l as u64);
            enc_layers.push(EncoderLayer {
                ln1: LayerNormWeights::init(d),
                self_attn: AttentionWeights::init(&mut rng, l, config)?,
                ln2: LayerNormWeights::init(d),
                ffn: FeedForwardWeights::init(&mut rng, config)?,
            });
        }
        let mut dec_layers = Vec::with_capacity(config.n_dec_layers);
        for l in 0..config.n_dec_layers {
            let mut rng = root.split(200 + l as u64);
            dec_layers.push(DecoderLayer {
                ln1: LayerNormWeights::init(d),
                self_attn: AttentionWeights::init(&mut rng, l, config)?,
                ln2: LayerNormWeights::init(d),
                cross_attn: AttentionWeights::init(&mut rng, l, config)?,
                ln3: LayerNormWeights::init(d),
                ffn: FeedForwardWeights::init(&mut rng, config)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb,
            enc_pos,
            dec_pos,
            enc_layers,
            enc_ln: LayerNormWeights::init(d),
            dec_layers,
            dec_ln: LayerNormWeights::init(d),
            out_bias: Matrix::zeros(1, config.vocab_size),
        })
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, m| m.fill(T::zero()));
        z
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let mut tensors = Vec::new();
        self.visit(&mut |_, m| tensors.push(m.cast::<U>()));
        let mut out = ModelWeights::<U>::init_zeroed(&self.config);
        let mut it = tensors.into_iter();
        out.visit_mut(&mut |_, m| *m = it.next().expect("same structure"));
        out
    }

    /// Correctly shaped weights with all tensors zero (no RNG draws).
    pub fn init_zeroed(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let dh = config.d_head();
        let attn = |layer| AttentionWeights {
            heads: (0..config.n_heads)
                .map(|head| HeadProjection {
                    layer,
                    head,
                    w_q: Matrix::zeros(d, dh),
                    w_k: Matrix::zeros(d, dh),
                    w_v: Matrix::zeros(d, dh),
                    b_q: Matrix::zeros(1, dh),
                    b_k: Matrix::zeros(1, dh),
                    b_v: Matrix::zeros(1, dh),
                    w_o: Matrix::zeros(dh, d),
                })
                .collect(),
            b_o: Matrix::zeros(1, d),
        };
        let ln = || LayerNormWeights {
            gamma: Matrix::zeros(1, d),
            beta: Matrix::zeros(1, d),
        };
        let ffn = || FeedForwardWeights {
            w1: Matrix::zeros(d, config.d_ff),
            b1: Matrix::zeros(1, config.d_ff),
            w2: Matrix::zeros(config.d_ff, d),
            b2: Matrix::zeros(1, d),
        };
        Self {
            config: config.clone(),
            tok_emb: Matrix::zeros(config.vocab_size, d),
            enc_pos: Matrix::zeros(config.window, d),
            dec_pos: Matrix::zeros(config.window, d),
            enc_layers: (0..config.n_enc_layers)
                .map(|l| EncoderLayer {
                    ln1: ln(),
                    self_attn: attn(l),
                    ln2: ln(),
                    ffn: ffn(),
                })
                .collect(),
            enc_ln: ln(),
            dec_layers: (0..config.n_dec_layers)
                .map(|l| DecoderLayer {
                    ln1: ln(),
                    self_attn: attn(l),
                    ln2: ln(),
                    cross_attn: attn(l),
                    ln3: ln(),
                    ffn: ffn(),
                })
                .collect(),
            dec_ln: ln(),
            out_bias: Matrix::zeros(1, config.vocab_size),
        }
    }

    /// Visits every tensor in a fixed order with its stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        f("tok_emb", &self.tok_emb);
        f("enc_pos", &self.enc_pos);
        f("dec_pos", &self.dec_pos);
        for (l, layer) in self.enc_layers.iter().enumerate() {
            layer.ln1.visit(&format!("enc.{l}.ln1"), f);
            layer.self_attn.visit(&format!("enc.{l}.self"), f);
            layer.ln2.visit(&format!("enc.{l}.ln2"), f);
            layer.ffn.visit(&format!("enc.{l}.ffn"), f);
        }
        self.enc_ln.visit("enc_ln", f);
        for (l, layer) in self.dec_layers.iter().enumerate() {
            layer.ln1.visit(&format!("dec.{l}.ln1"), f);
            layer.self_attn.visit(&format!("dec.{l}.self"), f);
            layer.ln2.visit(&format!("dec.{l}.ln2"), f);
            layer.cross_attn.visit(&format!("dec.{l}.cross"), f);
            layer.ln3.visit(&format!("dec.{l}.ln3"), f);
            layer.ffn.visit(&format!("dec.{l}.ffn"), f);
        }
        self.dec_ln.visit("dec_ln", f);
        f("out_bias", &self.out_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f("tok_emb", &mut self.tok_emb);
        f("enc_pos", &mut self.enc_pos);
        f("dec_pos", &mut self.dec_pos);
        for (l, layer) in self.enc_layers.iter_mut().enumerate() {
            layer.ln1.visit_mut(&format!("enc.{l}.ln1"), f);
            layer.self_attn.visit_mut(&format!("enc.{l}.self"), f);
            layer.ln2.visit_mut(&format!("enc.{l}.ln2"), f);
            layer.ffn.visit_mut(&format!("enc.{l}.ffn"), f);
        }
        self.enc_ln.visit_mut("enc_ln", f);
        for (l, layer) in self.dec_layers.iter_mut().enumerate() {
            layer.ln1.visit_mut(&format!("dec.{l}.ln1"), f);
            layer.self_attn.visit_mut(&format!("dec.{l}.self"), f);
            layer.ln2.visit_mut(&format!("dec.{l}.ln2"), f);
            layer.cross_attn.visit_mut(&format!("dec.{l}.cross"), f);
            layer.ln3.visit_mut(&format!("dec.{l}.ln3"), f);
            layer.ffn.visit_mut(&format!("dec.{l}.ffn"), f);
        }
        self.dec_ln.visit_mut("dec_ln", f);
        f("out_bias", &mut self.out_bias);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        let mut found = None;
        self.visit(&mut |n, m| {
            if n == name {
                found = Some(m);
            }
        });
        found
    }

    /// Runs `f` on the named tensor, if present.
    pub fn with_tensor_mut<R>(&mut self, name: &str, f: impl FnOnce(&mut Matrix<T>) -> R) -> Option<R> {
        let mut f = Some(f);
        let mut out = None;
        self.visit_mut(&mut |n, m| {
            if n == name {
                if let Some(f) = f.take() {
                    out = Some(f(m));
                }
            }
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.data().len());
        n
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights<T>, scale: T) {
        let mut src = Vec::new();
        other.visit(&mut |_, m| src.push(m));
        let mut it = src.into_iter();
        self.visit_mut(&mut |_, m| {
            let o = it.next().expect("same structure");
            for (a, &b) in m.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        });
    }
}
