use serde::{Deserialize, Serialize};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormState {
    pub fn new(features: usize) -> Self {
        NormState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: NORM_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch into the running statistics. `var` is the biased
    /// batch variance over `n` rows; the running estimate uses the unbiased one.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let k = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        for (rm, m) in self.running_mean.iter_mut().zip(mean) {
            *rm = (1.0 - k) * *rm + k * m;
        }
        for (rv, v) in self.running_var.iter_mut().zip(var) {
            // keeps the running variance strictly positive
            *rv = ((1.0 - k) * *rv + k * v * unbias).max(f64::MIN_POSITIVE);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_column_standardizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut st = NormState::new(1);
        st.eps = 0.0;
        let y = g.batchnorm(x, gamma, beta, &mut st, true).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 5.0, 0.5, 3.0, 9.0]).unwrap());
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let mut st = NormState::new(2);
        let y = g.batchnorm(x, gamma, beta, &mut st, true).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -4.0]);
        }
    }

    #[test]
    fn eval_mode_matches_scalar_formula_and_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut st = NormState::new(3);
        st.running_mean = vec![0.3, -1.0, 2.0];
        st.running_var = vec![0.5, 2.0, 0.1];
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gam = [1.5, -0.5, 2.0];
        let bet = [0.1, 0.2, 0.3];
        let run = |st: &mut NormState| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![4, 3], xs.clone()).unwrap());
            let gamma = g.constant(Tensor::new(vec![3], gam.to_vec()).unwrap());
            let beta = g.constant(Tensor::new(vec![3], bet.to_vec()).unwrap());
            let y = g.batchnorm(x, gamma, beta, st, false).unwrap();
            g.value(y).clone()
        };
        let first = run(&mut st);
        let second = run(&mut st);
        assert_eq!(first, second);
        for r in 0..4 {
            for c in 0..3 {
                let x = xs[r * 3 + c];
                let expect = (x - st.running_mean[c]) / (st.running_var[c] + NORM_EPS).sqrt() * gam[c] + bet[c];
                assert!((first.at(r, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mut st = NormState::new(2);
        assert!(matches!(
            g.batchnorm(x, gamma, beta, &mut st, true),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut st = NormState::new(1);
        st.update(&[2.0], &[1.0], 2);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![4.0, 4.0]]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layernorm(x, gamma, beta, 0.0 + 1e-300).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn layernorm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gam: Vec<f64> = (0..7).map(|_| rng.random_range(0.5..1.5)).collect();
        let bet: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 7], xs.clone()).unwrap());
        let gamma = g.constant(Tensor::new(vec![7], gam.clone()).unwrap());
        let beta = g.constant(Tensor::new(vec![7], bet.clone()).unwrap());
        let y = g.layernorm(x, gamma, beta, NORM_EPS).unwrap();
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for j in 0..7 {
            let expect = (xs[j] - mean) / (var + NORM_EPS).sqrt() * gam[j] + bet[j];
            assert!((g.value(y).data()[j] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn layernorm_single_feature_is_guarded_by_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![5.0, -3.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let y = g.layernorm(x, gamma, beta, NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }
}
