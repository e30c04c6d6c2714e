//! Batched multilayer perceptrons on top of `dgemm`, and Fourier feature
//! encoding of 3D coordinates.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierEncoding {
    pub num_bands: usize,
    pub include_input: bool,
}

impl Default for FourierEncoding {
    fn default() -> Self {
        Self {
            num_bands: 6,
            include_input: true,
        }
    }
}

impl FourierEncoding {
    pub fn output_len(&self) -> usize {
        3 * (2 * self.num_bands + usize::from(self.include_input))
    }

    /// Layout: `[x, y, z]` when included, then for each coordinate and band
    /// `k`, `sin(2^k π x_c), cos(2^k π x_c)`.
    pub fn encode_into(&self, x: &Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_len());
        let mut o = 0;
        if self.include_input {
            out[..3].copy_from_slice(x.as_slice());
            o = 3;
        }
        for c in 0..3 {
            let mut freq = PI;
            for _ in 0..self.num_bands {
                let (s, co) = (freq * x[c]).sin_cos();
                out[o] = s;
                out[o + 1] = co;
                o += 2;
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        self.encode_into(x, &mut out);
        out
    }

    /// Pulls a feature cotangent back to the coordinate.
    pub fn backward(&self, x: &Vec3, grad: &[f64]) -> Vec3 {
        let mut g = Vec3::zeros();
        let mut o = 0;
        if self.include_input {
            g += Vec3::new(grad[0], grad[1], grad[2]);
            o = 3;
        }
        for c in 0..3 {
            let mut freq = PI;
            for _ in 0..self.num_bands {
                let (s, co) = (freq * x[c]).sin_cos();
                g[c] += freq * (co * grad[o] - s * grad[o + 1]);
                o += 2;
                freq *= 2.0;
            }
        }
        g
    }
}

/// Y = X·W + b per layer, ReLU between layers, linear output. All weights
/// and biases live in one flat vector (`W` stored `in × out` row-major,
/// followed by `b`) so optimisers and checkpoints see a single group.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer inputs of a batched forward call, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    batch: usize,
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-uniform hidden layers; the output layer is zero when
    /// `zero_output` is set.
    pub fn new<R: Rng>(
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, hidden_layers));
        sizes.push(output);
        let mut mlp = Self::zeros(sizes);
        let n_layers = mlp.num_layers();
        for l in 0..n_layers {
            if zero_output && l + 1 == n_layers {
                continue;
            }
            let (fan_in, _) = mlp.layer_shape(l);
            let bound = (6.0 / fan_in as f64).sqrt();
            let (w, _) = mlp.layer_offsets(l);
            for v in &mut mlp.params[w.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        mlp
    }

    pub fn zeros(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.windows(2).map(|s| s[0] * s[1] + s[1]).sum();
        Self {
            sizes,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        let m = Self::zeros(sizes);
        (m.params.len() == params.len()).then_some(Self { sizes: m.sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.sizes[l], self.sizes[l + 1])
    }

    fn layer_offsets(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.sizes[..l + 1].windows(2).map(|s| s[0] * s[1] + s[1]).sum();
        let (i, o) = self.layer_shape(l);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    /// Final layer bias, e.g. for distilling a constant output.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let (_, b) = self.layer_offsets(self.num_layers() - 1);
        &mut self.params[b]
    }

    /// Zeroes the final layer weight matrix and bias.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.layer_offsets(self.num_layers() - 1);
        self.params[w].iter_mut().for_each(|v| *v = 0.0);
        self.params[b].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Forward pass over `batch` rows of `x` (`batch × input`).
    pub fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpTape) {
        assert_eq!(x.len(), batch * self.input_len());
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut cur = x.to_vec();
        for l in 0..self.num_layers() {
            let (i, o) = self.layer_shape(l);
            let (wr, br) = self.layer_offsets(l);
            let b = &self.params[br];
            let mut y = Vec::with_capacity(batch * o);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            gemm(batch, i, o, &cur, false, &self.params[wr], false, &mut y, 1.0);
            if l + 1 < self.num_layers() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(cur);
            cur = y;
        }
        (cur, MlpTape { batch, inputs })
    }

    /// Forward without keeping activations.
    pub fn predict(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.forward(x, batch).0
    }

    /// Reverse pass. Accumulates parameter gradients into `grad_params` when
    /// given and returns the input cotangent when `want_input` is set.
    pub fn backward(
        &self,
        tape: &MlpTape,
        grad_out: &[f64],
        grad_params: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = tape.batch;
        assert_eq!(grad_out.len(), batch * self.output_len());
        let mut gp = grad_params;
        let mut g = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = self.layer_shape(l);
            let (wr, br) = self.layer_offsets(l);
            let x = &tape.inputs[l];
            if let Some(gp) = gp.as_deref_mut() {
                // gW += Xᵀ·G, gb += Σ_rows G
                gemm(i, batch, o, x, true, &g, false, &mut gp[wr.clone()], 1.0);
                let gb = &mut gp[br];
                for row in g.chunks_exact(o) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut gx = vec![0.0; batch * i];
            gemm(batch, o, i, &g, false, &self.params[wr], true, &mut gx, 0.0);
            if l > 0 {
                // x is the ReLU output of the previous layer
                for (gv, xv) in gx.iter_mut().zip(x) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = gx;
        }
        Some(g)
    }
}

/// `C = A·B + beta·C` with `A: m×k`, `B: k×n` (either optionally stored
/// transposed), all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fourier_examples() {
        let enc = FourierEncoding {
            num_bands: 2,
            include_input: true,
        };
        let f = enc.encode(&Vec3::zeros());
        assert_eq!(f.len(), 15);
        assert_eq!(&f[..3], &[0.0; 3]);
        for c in 0..3 {
            for k in 0..2 {
                assert_eq!(f[3 + 4 * c + 2 * k], 0.0);
                assert_eq!(f[3 + 4 * c + 2 * k + 1], 1.0);
            }
        }
        let f = enc.encode(&Vec3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(f[3], 1.0, epsilon = 1e-15);
        assert!(f[4].abs() < 1e-15);
        assert_eq!(FourierEncoding::default().output_len(), 39);
    }

    #[test]
    fn fourier_backward_matches_fd() {
        let enc = FourierEncoding::default();
        let x = Vec3::new(0.13, -0.42, 0.3);
        let w: Vec<f64> = (0..39).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.1).collect();
        let g = enc.backward(&x, &w);
        let h = 1e-6;
        for c in 0..3 {
            let mut p = x;
            let mut m = x;
            p[c] += h;
            m[c] -= h;
            let dot = |v: &Vec3| enc.encode(v).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(&p) - dot(&m)) / (2.0 * h);
            assert_relative_eq!(g[c], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(5, 16, 4, 3, true, &mut rng);
        let y = mlp.predict(&[0.3; 10], 2);
        assert_eq!(y, vec![0.0; 6]);
        assert_eq!(mlp.num_layers(), 5);
    }

    #[test]
    fn backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::new(4, 8, 3, 2, false, &mut rng);
        for v in mlp.output_bias_mut() {
            *v = 0.1;
        }
        let batch = 3;
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = [0.5, -1.2, 0.8, 0.3, -0.7, 1.1];
        let loss = |m: &Mlp, x: &[f64]| m.predict(x, batch).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, tape) = mlp.forward(&x, batch);
        let mut gp = vec![0.0; mlp.params.len()];
        let gx = mlp.backward(&tape, &w, Some(&mut gp), true).unwrap();
        let h = 1e-6;
        for i in (0..mlp.params.len()).step_by(7) {
            let mut p = mlp.clone();
            let mut m = mlp.clone();
            p.params[i] += h;
            m.params[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert_relative_eq!(gp[i], fd, epsilon = 1e-7, max_relative = 1e-5);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&mlp, &p) - loss(&mlp, &m)) / (2.0 * h);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-7, max_relative = 1e-5);
        }
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
