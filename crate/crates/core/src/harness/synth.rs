//! Synthetic low-rank ratings with known factors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::SyntheticSpec;
use crate::data::MaskedMatrix;
use crate::{Error, Matrix, Result};

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub matrix: MaskedMatrix,
    pub truth: GroundTruth,
}

/// `U*` (m×r*) and `V*` (r*×n) behind a synthetic matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub u: Matrix,
    pub v: Matrix,
}

/// Draws `U*`, `V*` uniform on `[0, 1]`, keeps each entry of
/// `U*V* + σ·N(0, 1)` independently with probability `ρ`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = Array2::from_shape_fn((spec.m, spec.rank), |_| rng.random::<f64>());
    let v = Array2::from_shape_fn((spec.rank, spec.n), |_| rng.random::<f64>());
    let full = u.dot(&v);
    let mut triplets = Vec::new();
    for ((i, j), &x) in full.indexed_iter() {
        if rng.random::<f64>() < spec.density {
            let noise = if spec.noise > 0.0 {
                spec.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            triplets.push((i, j, x + noise));
        }
    }
    if triplets.is_empty() {
        return Err(Error::Config("synthetic draw observed no entries".into()));
    }
    let matrix = MaskedMatrix::from_triplets(spec.m, spec.n, triplets)?;
    Ok(SyntheticData {
        matrix,
        truth: GroundTruth { u, v },
    })
}
