//! Three-layer ReLU MLP from flattened frames to the latent state.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default hidden widths.
pub const DEFAULT_HIDDEN: (usize, usize) = (256, 128);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

/// Weights are stored `out x in`; `z = W3 relu(W2 relu(W1 x + b1) + b2) + b3`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type EncoderGrads = EncoderParams;

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub z: Array2<f64>,
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init_encoder(dims: EncoderDims, seed: u64) -> Result<EncoderParams> {
    if dims.input == 0 || dims.hidden1 == 0 || dims.hidden2 == 0 || dims.output == 0 {
        return Err(Error::InvalidArgument(format!("encoder dims must be positive: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };
    let w1 = layer(dims.hidden1, dims.input);
    let w2 = layer(dims.hidden2, dims.hidden1);
    let w3 = layer(dims.output, dims.hidden2);
    Ok(EncoderParams {
        w1,
        b1: Array1::zeros(dims.hidden1),
        w2,
        b2: Array1::zeros(dims.hidden2),
        w3,
        b3: Array1::zeros(dims.output),
    })
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 });
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            input: self.w1.ncols(),
            hidden1: self.w1.nrows(),
            hidden2: self.w2.nrows(),
            output: self.w3.nrows(),
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            w1: Array2::zeros((dims.hidden1, dims.input)),
            b1: Array1::zeros(dims.hidden1),
            w2: Array2::zeros((dims.hidden2, dims.hidden1)),
            b2: Array1::zeros(dims.hidden2),
            w3: Array2::zeros((dims.output, dims.hidden2)),
            b3: Array1::zeros(dims.output),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All tensors as flat slices, in a fixed order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Forward pass over a `B x input` batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Activations> {
        if x.ncols() != self.w1.ncols() {
            return Err(Error::DimensionMismatch {
                context: "encoder input",
                expected: self.w1.ncols(),
                actual: x.ncols(),
            });
        }
        let mut h1 = x.dot(&self.w1.t()) + &self.b1;
        relu_inplace(&mut h1);
        let mut h2 = h1.dot(&self.w2.t()) + &self.b2;
        relu_inplace(&mut h2);
        let z = h2.dot(&self.w3.t()) + &self.b3;
        Ok(Activations { h1, h2, z })
    }

    /// Gradient of `sum_b grad_z[b] . z[b]` with respect to every parameter.
    /// The ReLU subgradient at zero is zero.
    pub fn backward(&self, x: ArrayView2<f64>, acts: &Activations, grad_z: ArrayView2<f64>) -> Result<EncoderGrads> {
        if grad_z.dim() != acts.z.dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder output gradient",
                expected: acts.z.ncols(),
                actual: grad_z.ncols(),
            });
        }
        if x.nrows() != acts.z.nrows() || x.ncols() != self.w1.ncols() {
            return Err(Error::DimensionMismatch {
                context: "encoder backward input",
                expected: self.w1.ncols(),
                actual: x.ncols(),
            });
        }
        let w3 = grad_z.t().dot(&acts.h2);
        let b3 = grad_z.sum_axis(Axis(0));
        let mut d2 = grad_z.dot(&self.w3);
        ndarray::Zip::from(&mut d2).and(&acts.h2).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let w2 = d2.t().dot(&acts.h1);
        let b2 = d2.sum_axis(Axis(0));
        let mut d1 = d2.dot(&self.w2);
        ndarray::Zip::from(&mut d1).and(&acts.h1).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = d1.t().dot(&x);
        let b1 = d1.sum_axis(Axis(0));
        Ok(EncoderParams { w1, b1, w2, b2, w3, b3 })
    }
}

/// Encodes one flattened frame.
pub fn encode(params: &EncoderParams, frame: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, frame.len()), frame).expect("row view");
    Ok(params.forward(x)?.z.into_raw_vec_and_offset().0)
}

/// Encodes a `B x input` batch into `B x d`.
pub fn encode_batch(params: &EncoderParams, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(params.forward(frames)?.z)
}

/// Parameter gradients of `grad_z . encode(frame)`.
pub fn encoder_backward(params: &EncoderParams, frame: &[f64], grad_z: &[f64]) -> Result<EncoderGrads> {
    let x = ArrayView2::from_shape((1, frame.len()), frame).expect("row view");
    let acts = params.forward(x)?;
    let g = ArrayView2::from_shape((1, grad_z.len()), grad_z).map_err(|_| Error::DimensionMismatch {
        context: "encoder output gradient",
        expected: params.w3.nrows(),
        actual: grad_z.len(),
    })?;
    params.backward(x, &acts, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn dims(input: usize, h1: usize, h2: usize, out: usize) -> EncoderDims {
        EncoderDims {
            input,
            hidden1: h1,
            hidden2: h2,
            output: out,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_encoder(dims(20, 8, 4, 2), 11).unwrap();
        let b = init_encoder(dims(20, 8, 4, 2), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_encoder(dims(20, 8, 4, 2), 12).unwrap());
        assert!(a.b1.iter().chain(a.b2.iter()).chain(a.b3.iter()).all(|&x| x == 0.0));
        assert!(init_encoder(dims(0, 8, 4, 2), 1).is_err());
    }

    #[test]
    fn kaiming_scale() {
        let p = init_encoder(dims(2500, 256, 128, 1), 5).unwrap();
        let n = p.w1.len() as f64;
        let mean = p.w1.sum() / n;
        let std = (p.w1.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 2500.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let mut p = EncoderParams::zeros(dims(3, 2, 2, 2));
        p.b3 = array![0.5, -1.5];
        assert_eq!(encode(&p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn hand_built_relu_chain() {
        // 1 pixel -> 1 -> 1 -> 1
        let p = EncoderParams {
            w1: array![[2.0]],
            b1: array![-0.5],
            w2: array![[-3.0]],
            b2: array![4.0],
            w3: array![[0.5]],
            b3: array![0.25],
        };
        // x = 0.75: h1 = relu(1.0) = 1; h2 = relu(1.0) = 1; z = 0.75
        assert_eq!(encode(&p, &[0.75]).unwrap(), vec![0.75]);
        // x = 0.1: h1 = relu(-0.3) = 0; h2 = relu(4) = 4; z = 2.25
        assert_eq!(encode(&p, &[0.1]).unwrap(), vec![2.25]);
        // x = 2: h1 = 3.5; h2 = relu(-6.5) = 0; z = 0.25
        assert_eq!(encode(&p, &[2.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn batch_matches_loop() {
        let p = init_encoder(dims(6, 5, 4, 2), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((7, 6), |_| rng.random_range(0.0..1.0));
        let z = encode_batch(&p, x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let single = encode(&p, row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(z.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = init_encoder(dims(6, 5, 4, 2), 3).unwrap();
        assert!(matches!(encode(&p, &[0.0; 5]), Err(Error::DimensionMismatch { .. })));
        assert!(encoder_backward(&p, &[0.0; 6], &[1.0]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let p = init_encoder(dims(6, 5, 4, 2), 3).unwrap();
        let g = encoder_backward(&p, &[0.3; 6], &[0.0, 0.0]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn output_bias_gradient_is_grad_z() {
        let p = init_encoder(dims(6, 5, 4, 2), 3).unwrap();
        let g = encoder_backward(&p, &[0.3; 6], &[0.7, -1.25]).unwrap();
        assert_eq!(g.b3.to_vec(), vec![0.7, -1.25]);
    }

    #[test]
    fn positive_homogeneity_without_biases() {
        let p = init_encoder(dims(8, 6, 5, 2), 9).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 2.5).collect();
        let a = encode(&p, &x).unwrap();
        let b = encode(&p, &scaled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u * 2.5 - v).abs() < 1e-12);
        }
    }

    /// Central differences on `grad_z . encode(x)` for every parameter.
    fn max_relative_fd_error(p: &EncoderParams, x: &[f64], grad_z: &[f64]) -> f64 {
        let g = encoder_backward(p, x, grad_z).unwrap();
        let objective = |q: &EncoderParams| -> f64 {
            encode(q, x).unwrap().iter().zip(grad_z).map(|(z, g)| z * g).sum()
        };
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for t in 0..6 {
            for i in 0..p.tensors()[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let an = g.tensors()[t][i];
                let scale = fd.abs().max(an.abs());
                if scale > 1e-7 {
                    worst = worst.max((fd - an).abs() / scale);
                }
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let mut p = init_encoder(dims(16, 8, 8, 2), trial).unwrap();
            for t in p.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let grad_z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = max_relative_fd_error(&p, &x, &grad_z);
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }
}
