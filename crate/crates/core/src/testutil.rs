//! Small random problems shared by the unit tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Labels};
use crate::model::{LossKind, NetworkSpec, ParamVector};

pub fn random_params(spec: &NetworkSpec, scale: f64, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..spec.count_params()).map(|_| rng.random_range(-scale..scale)).collect();
    ParamVector::new(spec, values).unwrap()
}

/// Standard-uniform-ish inputs with labels suited to the network's loss.
pub fn random_dataset(spec: &NetworkSpec, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = spec.input_dim();
    let k = spec.output_dim();
    let inputs = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.5..1.5));
    match spec.loss_kind {
        LossKind::Mse => {
            let y = Array2::from_shape_simple_fn((n, k), || rng.random_range(-1.0..1.0));
            Dataset::custom(inputs, Labels::Values(y), k).unwrap()
        }
        _ => {
            let classes = spec.classes();
            let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Dataset::custom(inputs, Labels::Classes(y), classes).unwrap()
        }
    }
}
