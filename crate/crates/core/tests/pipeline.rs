mod common;

use starpose::config::{ModelConfig, RunConfig};
use starpose::synth::{count_clips, generate_dataset, load_split, synthesize_split, SynthConfig};
use starpose::train::{
    evaluate_checkpoint, load_pose_head, new_pose_head, prepare_samples, save_pose_head, save_sr, score_outputs,
    train_sr, POSE_WIDTHS,
};
use starpose::Error;

fn small_synth() -> SynthConfig {
    SynthConfig {
        height: 96,
        width: 64,
        figure_height: (30.0, 36.0),
        ..SynthConfig::default()
    }
}

fn small_run() -> RunConfig {
    let mut run = RunConfig {
        model: ModelConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            channels: 4,
            fused_stages: 1,
            mbconv_stages: 0,
            d_pe: 4,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    run.schedule.steps = 4;
    run.schedule.batch = 2;
    run.schedule.crop = 8;
    run
}

#[test]
fn shipped_pose_head_is_frozen_and_reads_clean_frames() {
    let (head, store) = load_pose_head(&common::pose_fixture()).unwrap();
    assert_eq!(head.widths, POSE_WIDTHS);
    assert!(store.ids().all(|id| store.is_frozen(id)));
    let val = synthesize_split(&SynthConfig::default(), "val", 4, 0).unwrap();
    let samples = prepare_samples(&val, 4).unwrap();
    let hr: Vec<_> = samples.iter().map(|s| s.hr.clone()).collect();
    let m = score_outputs(&hr, &[0.0; 4], &samples, &head, &store).unwrap();
    assert!(m.pck > 0.9, "pck on ground truth frames {}", m.pck);
}

#[test]
fn missing_pose_head_names_the_command_that_makes_it() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_pose_head(&dir.path().join("absent.stck")).unwrap_err();
    assert!(matches!(err, Error::MissingFixture { .. }), "{err}");
    assert!(err.to_string().contains("starpose pretrain-pose"), "{err}");
}

#[test]
fn dataset_on_disk_trains_saves_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    generate_dataset(&root, &small_synth(), 3, 2, 9).unwrap();
    assert_eq!((count_clips(&root, "train"), count_clips(&root, "val")), (3, 2));
    let train = load_split(&root, "train").unwrap();
    assert_eq!(train, synthesize_split(&small_synth(), "train", 3, 9).unwrap());

    let (head, mut hs) = new_pose_head(POSE_WIDTHS, 4);
    hs.freeze_all();
    let head_path = dir.path().join("pose.stck");
    save_pose_head(&head_path, &head, &hs).unwrap();
    let (head, hs) = load_pose_head(&head_path).unwrap();

    let run = small_run();
    let out = train_sr(&run, &head, &hs, &prepare_samples(&train, 4).unwrap()).unwrap();
    assert_eq!(out.log.len(), run.schedule.steps);
    assert!(out.log.iter().all(|r| r.loss.is_finite()));
    let ckpt = dir.path().join("sr.stck");
    save_sr(&ckpt, &out).unwrap();

    let val = load_split(&root, "val").unwrap();
    let report = evaluate_checkpoint(&ckpt, &val, 4, &head, &hs).unwrap();
    assert_eq!(report.clips, 2);
    assert!(report.model.psnr.is_finite() && report.bicubic.psnr.is_finite());
    assert!(matches!(
        evaluate_checkpoint(&ckpt, &val, 2, &head, &hs),
        Err(Error::Config(_))
    ));
}
