use rand::Rng;

use crate::oracle::GaussianMixture;
use crate::rng;
use crate::sde::SdeSpec;
use crate::tensor::Tensor;

/// Hand-picked probe points: one anomaly between the modes and two normals.
pub const PAPER_POINTS: [([f64; 2], u8); 3] = [([-6.0, 5.0], 1), ([5.17, 5.2], 0), ([-4.2, -4.3], 0)];

/// Quantile of training log-densities below which a point counts as anomalous.
pub const ANOMALY_QUANTILE: f64 = 0.001;

/// Half-width of the square anomalies are drawn from.
pub const ANOMALY_BOX: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub train: Vec<Tensor>,
    pub test_normal: Vec<Tensor>,
    pub test_anomalous: Vec<Tensor>,
    /// Log-density threshold at t = epsilon separating the two test classes.
    pub threshold: f64,
}

impl ToyBenchmark {
    /// Test points with labels (normal = 0 first, then anomalous = 1).
    pub fn labeled_test(&self) -> (Vec<Tensor>, Vec<u8>) {
        let mut xs = self.test_normal.clone();
        xs.extend(self.test_anomalous.iter().cloned());
        let mut labels = vec![0; self.test_normal.len()];
        labels.extend(std::iter::repeat_n(1, self.test_anomalous.len()));
        (xs, labels)
    }
}

/// Build the two-dimensional benchmark.
///
/// Each test class holds `n_test` points (at least the fixed probe points of
/// that class): normals are mixture draws, anomalies are uniform draws from
/// `[-10, 10]^2` rejected until their log-density at `t = epsilon` falls below
/// the 0.1% quantile of the training log-densities.
pub fn gen_toy(seed: u64, n_train: usize, n_test: usize) -> ToyBenchmark {
    let mix = GaussianMixture::toy();
    let spec = SdeSpec::toy_ve(100);
    let eps = spec.epsilon();
    let train = mix.sample(n_train.max(1), &mut rng::stream(seed, &[1]));

    let mut dens: Vec<f64> = train
        .iter()
        .map(|x| mix.marginal_log_density(&spec, x, eps).expect("valid point"))
        .collect();
    dens.sort_by(f64::total_cmp);
    let idx = ((dens.len() as f64 * ANOMALY_QUANTILE).floor() as usize).min(dens.len() - 1);
    let threshold = dens[idx];

    let mut test_normal = Vec::new();
    let mut test_anomalous = Vec::new();
    for (p, label) in PAPER_POINTS {
        let t = Tensor::vector(p.to_vec());
        if label == 1 {
            test_anomalous.push(t);
        } else {
            test_normal.push(t);
        }
    }
    let mut r = rng::stream(seed, &[2]);
    while test_normal.len() < n_test {
        test_normal.push(mix.sample_one(&mut r));
    }
    let mut r = rng::stream(seed, &[3]);
    while test_anomalous.len() < n_test {
        let x = Tensor::vector(vec![
            r.gen_range(-ANOMALY_BOX..ANOMALY_BOX),
            r.gen_range(-ANOMALY_BOX..ANOMALY_BOX),
        ]);
        if mix.marginal_log_density(&spec, &x, eps).expect("valid point") < threshold {
            test_anomalous.push(x);
        }
    }
    ToyBenchmark {
        train,
        test_normal,
        test_anomalous,
        threshold,
    }
}
