//! Trainable linear maps and plain SGD — the desk-scale stand-ins for the
//! backbone and classifier heads.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::embedding::EmbeddingMatrix;

/// Linear layer `y = x·W + b` with hand-rolled forward/backward.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    /// D_in × D_out.
    pub weight: Array2<f64>,
    /// D_out.
    pub bias: Array1<f64>,
}

impl LinearEncoder {
    /// Scaled-normal initialization (`σ = 1/√D_in`), deterministic per rng.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_fn((d_in, d_out), |_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        });
        Self { weight, bias: Array1::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &EmbeddingMatrix) -> EmbeddingMatrix {
        assert_eq!(x.dim(), self.d_in());
        let mut out = x.values().dot(&self.weight);
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        EmbeddingMatrix::new(out).expect("finite parameters produce finite outputs")
    }

    /// Backward pass: returns (dW, db, dX) for an upstream gradient dY.
    pub fn backward(
        &self,
        x: &EmbeddingMatrix,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let d_weight = x.values().t().dot(grad_out);
        let d_bias = grad_out.sum_axis(ndarray::Axis(0));
        let d_input = grad_out.dot(&self.weight.t());
        (d_weight, d_bias, d_input)
    }

    /// Flattens parameters row-major (weight then bias) for EMA tracking.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.weight.iter().copied().collect();
        out.extend(self.bias.iter().copied());
        out
    }

    /// Restores parameters from [`Self::flat_params`] layout.
    pub fn from_flat(d_in: usize, d_out: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), d_in * d_out + d_out);
        let weight =
            Array2::from_shape_vec((d_in, d_out), flat[..d_in * d_out].to_vec()).unwrap();
        let bias = Array1::from_vec(flat[d_in * d_out..].to_vec());
        Self { weight, bias }
    }
}

/// Plain SGD with optional momentum, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity_w: Array2<f64>,
    velocity_b: Array1<f64>,
}

impl Sgd {
    pub fn new(layer: &LinearEncoder, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity_w: Array2::zeros(layer.weight.raw_dim()),
            velocity_b: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn step(&mut self, layer: &mut LinearEncoder, d_weight: &Array2<f64>, d_bias: &Array1<f64>) {
        if self.momentum > 0.0 {
            self.velocity_w = &self.velocity_w * self.momentum + d_weight;
            self.velocity_b = &self.velocity_b * self.momentum + d_bias;
            layer.weight = &layer.weight - &(&self.velocity_w * self.learning_rate);
            layer.bias = &layer.bias - &(&self.velocity_b * self.learning_rate);
        } else {
            layer.weight = &layer.weight - &(d_weight * self.learning_rate);
            layer.bias = &layer.bias - &(d_bias * self.learning_rate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_hand_matmul() {
        let enc = LinearEncoder {
            weight: array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]],
            bias: array![0.5, -0.5],
        };
        let x = EmbeddingMatrix::new(array![[1.0, 2.0, 3.0]]).unwrap();
        let y = enc.forward(&x);
        assert_eq!(y.row(0).to_vec(), vec![1.0 + 3.0 + 0.5, 4.0 + 3.0 - 0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = LinearEncoder::init(4, 3, &mut rng);
        let x = EmbeddingMatrix::from_flat(
            2,
            4,
            (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect(),
        )
        .unwrap();
        let target = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.5);
        // objective: ½‖y − t‖²; dY = y − t
        let objective = |enc: &LinearEncoder| -> f64 {
            let y = enc.forward(&x);
            y.values()
                .iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let y = enc.forward(&x);
        let grad_out = y.values() - &target;
        let (dw, db, _) = enc.backward(&x, &grad_out);
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let mut plus = enc.clone();
                plus.weight[(r, c)] += h;
                let mut minus = enc.clone();
                minus.weight[(r, c)] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(dw[(r, c)], fd, epsilon = 1e-6);
            }
        }
        for c in 0..3 {
            let mut plus = enc.clone();
            plus.bias[c] += h;
            let mut minus = enc.clone();
            minus.bias[c] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(db[c], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = LinearEncoder::init(5, 2, &mut rng);
        let rebuilt = LinearEncoder::from_flat(5, 2, &enc.flat_params());
        assert_eq!(enc, rebuilt);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = LinearEncoder::init(3, 2, &mut rng);
        let x = EmbeddingMatrix::from_flat(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let target = Array2::from_elem((4, 2), 1.0);
        let mut opt = Sgd::new(&enc, 0.05, 0.9);
        let loss = |enc: &LinearEncoder| -> f64 {
            enc.forward(&x)
                .values()
                .iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let initial = loss(&enc);
        for _ in 0..50 {
            let y = enc.forward(&x);
            let grad_out = y.values() - &target;
            let (dw, db, _) = enc.backward(&x, &grad_out);
            opt.step(&mut enc, &dw, &db);
        }
        assert!(loss(&enc) < initial * 0.01);
    }
}
