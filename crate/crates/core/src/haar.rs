//! Haar-distributed unitaries and pure states.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::channels::DensityMatrix;
use crate::numerics::{CMatrix, C64};

/// Complex Ginibre matrix with i.i.d. `N(0, 1/2) + i N(0, 1/2)` entries.
pub fn ginibre(d: usize, rng: &mut impl Rng) -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMatrix::from_fn(d, d, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

/// Haar unitary: `Q` from the QR factorization of a Ginibre matrix, with each
/// column multiplied by the phase of the matching diagonal entry of `R`.
pub fn haar_unitary(d: usize, rng: &mut impl Rng) -> CMatrix {
    let (q, r) = nalgebra::linalg::QR::new(ginibre(d, rng).into_nalgebra()).unpack();
    let phases: Vec<C64> = (0..d)
        .map(|k| {
            let z = r[(k, k)];
            if z.norm() > 0.0 {
                z / z.norm()
            } else {
                C64::new(1.0, 0.0)
            }
        })
        .collect();
    CMatrix::from_nalgebra(DMatrix::from_fn(d, d, |i, j| q[(i, j)] * phases[j]))
}

pub fn haar_state_vector(d: usize, rng: &mut impl Rng) -> Vec<C64> {
    haar_unitary(d, rng).column(0)
}

pub fn haar_pure_state(d: usize, rng: &mut impl Rng) -> DensityMatrix {
    let psi = haar_state_vector(d, rng);
    DensityMatrix::pure(&psi).expect("Haar vector has unit norm")
}
