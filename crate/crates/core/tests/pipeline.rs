use volcore::io::read_json;
use volcore::pipeline::{align_stack, evaluate, write_synth_stack, AlignParams, AlignReport, EvalInput, REPORT_FILE, TRUTH_FILE};
use volcore::synth::{generate_stack, SynthSpec};
use volcore::volume::{extract_patches, read_core, PatchParams};

#[test]
fn synth_align_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (stack_dir, core_dir) = (tmp.path().join("stack"), tmp.path().join("core"));
    let stack = generate_stack(&SynthSpec {
        seed: 21,
        elastic_amplitude: 6.0,
        ..SynthSpec::default()
    })
    .unwrap();
    write_synth_stack(&stack, "synth-21", &stack_dir).unwrap();

    let report = align_stack(&stack_dir, &core_dir, &AlignParams::default()).unwrap();
    assert_eq!(report.sections, 8);
    assert!(report.failed_pairs.is_empty());
    assert!(report.final_error.core_error <= report.rigid_error.core_error);
    let on_disk: AlignReport = read_json(&core_dir.join(REPORT_FILE)).unwrap();
    assert_eq!(on_disk, report);

    let core = read_core(&core_dir).unwrap();
    assert_eq!(core.depth(), 8);
    assert_eq!((core.width() % 256, core.height() % 256), (0, 0));
    let loose = PatchParams {
        min_tissue: 0.2,
        ..PatchParams::default()
    };
    assert!(!extract_patches(&core, &loose).is_empty());

    let eval = evaluate(&EvalInput {
        core_dir: Some(core_dir.clone()),
        truth: Some(stack_dir.join(TRUTH_FILE)),
        ..EvalInput::default()
    })
    .unwrap();
    let lm = eval.landmarks.unwrap();
    assert!(lm.mean_px < 0.6 * lm.rigid_mean_px);
}

#[test]
fn rigid_only_run_on_downsampled_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let (stack_dir, core_dir) = (tmp.path().join("stack"), tmp.path().join("core"));
    let stack = generate_stack(&SynthSpec {
        seed: 4,
        sections: 3,
        width: 1024,
        height: 1024,
        ribbon_semi_axes: [320.0, 150.0],
        glands: 60,
        landmarks: 30,
        ..SynthSpec::default()
    })
    .unwrap();
    write_synth_stack(&stack, "big", &stack_dir).unwrap();
    let params = AlignParams {
        rigid_downsample: 2,
        nonrigid: None,
        ..AlignParams::default()
    };
    let report = align_stack(&stack_dir, &core_dir, &params).unwrap();
    assert!(!report.nonrigid);
    let eval = evaluate(&EvalInput {
        core_dir: Some(core_dir),
        truth: Some(stack_dir.join(TRUTH_FILE)),
        ..EvalInput::default()
    })
    .unwrap();
    let lm = eval.landmarks.unwrap();
    assert!(lm.mean_px < 2.0, "{lm:?}");
    assert_eq!(lm.mean_px, lm.rigid_mean_px);
}

#[test]
fn missing_stack_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(align_stack(&tmp.path().join("nope"), &tmp.path().join("out"), &AlignParams::default()).is_err());
}
