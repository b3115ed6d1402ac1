use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::layers::{InitKind, Initializer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights from `N(0, std^2)` restricted to `[-bound, bound]` by rejection;
/// zeros and ones for the other kinds.
pub struct TruncatedNormal {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    bound: f64,
}

impl TruncatedNormal {
    pub fn new(seed: u64, std: f64, bound: f64) -> Self {
        assert!(std > 0.0 && bound > 0.0, "std and bound must be positive");
        TruncatedNormal {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("finite std"),
            bound,
        }
    }

    pub fn sample(&mut self) -> f64 {
        loop {
            let x = self.normal.sample(&mut self.rng);
            if x.abs() <= self.bound {
                return x;
            }
        }
    }
}

impl<S: Scalar> Initializer<S> for TruncatedNormal {
    fn init(&mut self, kind: InitKind, shape: &[usize]) -> Tensor<S> {
        match kind {
            InitKind::Weight => Tensor::from_fn(shape, |_| S::from_f64_lossy(self.sample())),
            InitKind::Zeros => Tensor::zeros(shape),
            InitKind::Ones => Tensor::full(shape, S::one()),
        }
    }
}
