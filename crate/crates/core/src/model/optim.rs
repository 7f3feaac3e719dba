use crate::model::ModelWeights;
use crate::numerics::{Matrix, Scalar};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(weights: &ModelWeights<T>, lr: f64) -> Self {
        let mut m = Vec::new();
        weights.visit(&mut |_, t| m.push(Matrix::zeros(t.rows(), t.cols())));
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, weights: &mut ModelWeights<T>, grads: &ModelWeights<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(self.lr / bc1);
        let (b1, b2, eps, bc2) = (T::lit(b1), T::lit(b2), T::lit(self.eps), T::lit(bc2));
        let mut gs = Vec::new();
        grads.visit(&mut |_, g| gs.push(g));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        weights.visit_mut(&mut |_, w| {
            let g = gs[i].data();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let denom = (v[j] / bc2).sqrt() + eps;
                w.data_mut()[j] -= step_size * m[j] / denom;
            }
            i += 1;
        });
    }
}
