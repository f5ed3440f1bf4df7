//! Minimal dense-layer plumbing for the deformation decoder.
//!
//! Layers are plain `Vec<f64>` weight blocks with hand-written forward and
//! backward passes; tanh is used between layers because the gradient checks
//! need a kink-free activation.

use rand::Rng;

/// Fully connected layer, weights row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// Xavier-uniform init, bias zero.
    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }

    /// Accumulates weight/bias gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], d_y: &[f64], grad: &mut LinearGrad) -> Vec<f64> {
        let mut d_x = vec![0.0; self.in_dim];
        for (o, &dy) in d_y.iter().enumerate() {
            grad.d_b[o] += dy;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.d_w[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dy * x[i];
                d_x[i] += dy * row[i];
            }
        }
        d_x
    }
}

/// Gradient buffer shaped like a [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub d_w: Vec<f64>,
    pub d_b: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        LinearGrad {
            d_w: vec![0.0; layer.w.len()],
            d_b: vec![0.0; layer.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        for (a, b) in self.d_w.iter_mut().zip(other.d_w.iter()) {
            *a += b;
        }
        for (a, b) in self.d_b.iter_mut().zip(other.d_b.iter()) {
            *a += b;
        }
    }
}

pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward through tanh given the forward *output* `y = tanh(z)`.
pub fn tanh_backward(y: &[f64], d_y: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(d_y.iter())
        .map(|(y, dy)| dy * (1.0 - y * y))
        .collect()
}

/// `layers` applied with tanh after every layer except the last (linear
/// output). Returns the output and the post-activation of each hidden layer,
/// which the backward pass consumes.
pub fn mlp_forward(layers: &[Linear], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut acts = Vec::with_capacity(layers.len().saturating_sub(1));
    let mut cur = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let z = layer.forward(&cur);
        if i + 1 < layers.len() {
            let a = tanh_vec(&z);
            acts.push(a.clone());
            cur = a;
        } else {
            cur = z;
        }
    }
    (cur, acts)
}

/// Backward matching [`mlp_forward`]. `grads` must run parallel to `layers`.
pub fn mlp_backward(
    layers: &[Linear],
    x: &[f64],
    acts: &[Vec<f64>],
    d_out: &[f64],
    grads: &mut [LinearGrad],
) -> Vec<f64> {
    let mut d_cur = d_out.to_vec();
    for i in (0..layers.len()).rev() {
        let input = if i == 0 { x } else { &acts[i - 1] };
        if i + 1 < layers.len() {
            d_cur = tanh_backward(&acts[i], &d_cur);
        }
        d_cur = layers[i].backward(input, &d_cur, &mut grads[i]);
    }
    d_cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layers = vec![
            Linear::xavier(5, 8, &mut rng),
            Linear::xavier(8, 8, &mut rng),
            Linear::xavier(8, 3, &mut rng),
        ];
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |layers: &[Linear], x: &[f64]| -> f64 {
            let (y, _) = mlp_forward(layers, x);
            y.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, acts) = mlp_forward(&layers, &x);
        let mut grads: Vec<LinearGrad> = layers.iter().map(LinearGrad::zeros_like).collect();
        let d_x = mlp_backward(&layers, &x, &acts, &upstream, &mut grads);

        let h = 1e-5;
        for k in 0..5 {
            let mut plus = x.clone();
            plus[k] += h;
            let mut minus = x.clone();
            minus[k] -= h;
            let fd = (loss(&layers, &plus) - loss(&layers, &minus)) / (2.0 * h);
            assert!((fd - d_x[k]).abs() < 1e-8 * fd.abs().max(1.0));
        }
        for li in 0..layers.len() {
            for wi in (0..layers[li].w.len()).step_by(7) {
                let mut plus = layers.clone();
                plus[li].w[wi] += h;
                let mut minus = layers.clone();
                minus[li].w[wi] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                assert!(
                    (fd - grads[li].d_w[wi]).abs() < 1e-8 * fd.abs().max(1.0),
                    "layer {li} w {wi}"
                );
            }
        }
    }
}
