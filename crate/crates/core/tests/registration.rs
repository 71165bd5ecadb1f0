use std::time::Instant;

use volcore::raster::GrayImage;
use volcore::register::{chain_register, refine_chain_nonrigid, Canvas, ChainParams, Matcher, NonrigidParams, RegistrationChain};
use volcore::synth::{generate_stack, SynthSpec, SynthStack};

fn gray(stack: &SynthStack) -> Vec<GrayImage> {
    stack.sections.iter().map(|s| s.to_gray()).collect()
}

fn mean_landmark_error(stack: &SynthStack, chain: &RegistrationChain) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for track in &stack.landmarks {
        for i in 1..stack.sections.len() {
            let got = chain.transforms[i].apply(track[i]);
            let want = stack.true_transform(i).apply(track[i]);
            total += (got[0] - want[0]).hypot(got[1] - want[1]);
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn synthetic_stack_is_recovered() {
    let stack = generate_stack(&SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    })
    .unwrap();
    let start = Instant::now();
    let chain = chain_register(&gray(&stack), Some(&stack.masks), &ChainParams::default()).unwrap();
    let elapsed = start.elapsed();
    let err = mean_landmark_error(&stack, &chain);
    for p in &chain.pairs {
        eprintln!("{:?} matches {} inliers {} rms {:.3}", (p.moving, p.fixed), p.match_count, p.inlier_count, p.rms_residual);
    }
    eprintln!("mean error {err:.3} px in {elapsed:?}");
    assert!(chain.failed_pairs().is_empty());
    assert!(err < 1.0, "{err}");
}

#[test]
fn identical_sections_register_to_identity() {
    let stack = generate_stack(&SynthSpec {
        sections: 3,
        ..SynthSpec::still(3)
    })
    .unwrap();
    let chain = chain_register(&gray(&stack), None, &ChainParams::default()).unwrap();
    for t in &chain.transforms {
        for p in [[100.0, 100.0], [400.0, 300.0]] {
            let q = t.apply(p);
            assert!((q[0] - p[0]).hypot(q[1] - p[1]) < 0.5);
        }
    }
}

#[test]
fn ratio_matcher_also_registers() {
    let stack = generate_stack(&SynthSpec {
        sections: 3,
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let params = ChainParams {
        matcher: Matcher::RatioTest { ratio: 0.8 },
        ..ChainParams::default()
    };
    let chain = chain_register(&gray(&stack), Some(&stack.masks), &params).unwrap();
    assert!(mean_landmark_error(&stack, &chain) < 1.0);
}

fn rigid_and_nonrigid_errors(stack: &SynthStack, chain: &RegistrationChain) -> (f64, f64) {
    let (mut rigid, mut full, mut n) = (0.0, 0.0, 0.0);
    for track in &stack.landmarks {
        let r = chain.map_point(0, track[0]);
        for i in 1..stack.sections.len() {
            let a = chain.map_point_rigid(i, track[i]);
            let b = chain.map_point(i, track[i]);
            rigid += (a[0] - r[0]).hypot(a[1] - r[1]);
            full += (b[0] - r[0]).hypot(b[1] - r[1]);
            n += 1.0;
        }
    }
    (rigid / n, full / n)
}

#[test]
fn boundary_refinement_reduces_elastic_error() {
    for seed in [1, 3] {
        let stack = generate_stack(&SynthSpec {
            seed,
            elastic_amplitude: 6.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut chain = chain_register(&gray(&stack), Some(&stack.masks), &ChainParams::default()).unwrap();
        let sizes: Vec<_> = stack.sections.iter().map(|s| (s.width, s.height)).collect();
        let canvas = Canvas::covering(&chain.transforms, &sizes, 256);
        refine_chain_nonrigid(&mut chain, &stack.masks, canvas, &NonrigidParams::default()).unwrap();
        let (rigid, full) = rigid_and_nonrigid_errors(&stack, &chain);
        assert!(full < 0.6 * rigid, "seed {seed}: {rigid} -> {full}");
        for p in &chain.pairs {
            assert!(p.nonrigid_final_cost.unwrap() <= p.nonrigid_initial_cost.unwrap());
        }
    }
}

#[test]
fn reversed_stack_gives_inverse_chain() {
    let stack = generate_stack(&SynthSpec {
        seed: 5,
        noise_sigma: 0.0,
        decorrelation: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let n = stack.sections.len();
    let fwd = chain_register(&gray(&stack), Some(&stack.masks), &ChainParams::default()).unwrap();
    let mut images = gray(&stack);
    images.reverse();
    let mut masks = stack.masks.clone();
    masks.reverse();
    let rev = chain_register(&images, Some(&masks), &ChainParams::default()).unwrap();
    let mut worst = 0.0f64;
    for track in &stack.landmarks {
        for j in 0..n {
            let i = n - 1 - j;
            let p = track[i];
            let got = rev.transforms[j].apply(p);
            let want = fwd.transforms[n - 1].inverse().apply(fwd.transforms[i].apply(p));
            worst = worst.max((got[0] - want[0]).hypot(got[1] - want[1]));
        }
    }
    assert!(worst < 1.0, "worst {worst}");
}

#[test]
fn thumbnail_chain_propagates_to_full_resolution() {
    let stack = generate_stack(&SynthSpec {
        seed: 8,
        sections: 4,
        width: 1024,
        height: 1024,
        ribbon_semi_axes: [320.0, 150.0],
        glands: 60,
        max_translation: 80.0,
        landmarks: 50,
        ..SynthSpec::default()
    })
    .unwrap();
    let factor = 2usize;
    let thumbs: Vec<GrayImage> = stack.sections.iter().map(|s| s.downsample(factor).to_gray()).collect();
    let chain = chain_register(&thumbs, None, &ChainParams::default()).unwrap();
    assert!(chain.failed_pairs().is_empty());
    let f = factor as f64;
    let down = |p: [f64; 2]| [p[0] / f, p[1] / f];
    let up = |p: [f64; 2]| [p[0] * f, p[1] * f];
    let (mut thumb_err, mut full_err, mut n) = (0.0, 0.0, 0.0);
    for track in &stack.landmarks {
        for i in 1..stack.sections.len() {
            let want = stack.true_transform(i).apply(track[i]);
            let t = chain.transforms[i];
            let got = up(t.apply(down(track[i])));
            let want_thumb = down(want);
            let got_thumb = t.apply(down(track[i]));
            thumb_err += (got_thumb[0] - want_thumb[0]).hypot(got_thumb[1] - want_thumb[1]);
            let full = volcore::register::propagate_to_level(&t, f).unwrap();
            let q = full.apply(track[i]);
            full_err += (q[0] - want[0]).hypot(q[1] - want[1]);
            assert!((got[0] - q[0]).abs() < 1e-9 && (got[1] - q[1]).abs() < 1e-9);
            n += 1.0;
        }
    }
    let (thumb_err, full_err) = (thumb_err / n, full_err / n);
    eprintln!("thumbnail {thumb_err:.3} px, full {full_err:.3} px");
    assert!(full_err < f * thumb_err + 1.0);
}
