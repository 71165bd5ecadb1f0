//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volcore::matching::CostMatrix;
use volcore::register::RegistrationChain;
use volcore::synth::{generate_stack, SynthSpec, SynthStack};
use volcore::volume::assemble_core;
use volcore::VolumetricCore;

pub fn stack(sections: usize, side: usize, seed: u64) -> SynthStack {
    let scale = side as f64 / 512.0;
    generate_stack(&SynthSpec {
        seed,
        sections,
        width: side,
        height: side,
        ribbon_semi_axes: [160.0 * scale, 75.0 * scale],
        max_translation: 50.0 * scale,
        glands: (25.0 * scale * scale) as usize,
        ..SynthSpec::default()
    })
    .expect("valid spec")
}

/// Core assembled with the true transforms.
pub fn core(sections: usize, side: usize, seed: u64) -> VolumetricCore {
    let s = stack(sections, side, seed);
    let chain = RegistrationChain {
        transforms: (0..sections).map(|i| s.true_transform(i)).collect(),
        ..RegistrationChain::identity(sections)
    };
    assemble_core(&s.sections, &s.masks, &chain).expect("consistent stack")
}

pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) / 0.03).collect();
    CostMatrix::new(rows, cols, scores, 0.8 / 0.03).expect("finite scores")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}
