use std::fs;
use std::path::Path;

use sftok::checkpoint::Checkpoint;
use sftok::config::{Profile, RunConfig};
use sftok::pipeline::{final_checkpoint, run_stage, run_training, TrainOptions, TrainedTokenizer};
use sftok::Error;

fn ci(stage: u8, steps: usize) -> RunConfig {
    let mut c = RunConfig::defaults(stage, Profile::Ci).unwrap();
    c.training.max_train_steps = steps;
    c.training.eval_every = 5;
    c.dataset.synthetic_train_size = 256;
    c.dataset.synthetic_val_size = 32;
    c.lr_scheduler.warmup_steps = 3;
    if stage == 3 {
        c.losses.discriminator_start = Some(4);
    }
    c
}

fn opts(dir: &Path) -> TrainOptions {
    TrainOptions {
        log_every: 0,
        ..TrainOptions::new(dir)
    }
}

fn csv_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("losses.csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn three_stages_leave_a_checkpoint_trail() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&[ci(1, 6), ci(2, 6), ci(3, 6)], &opts(dir.path())).unwrap();
    assert_eq!(out.len(), 3);
    for (o, stage) in out.iter().zip(1u8..) {
        assert!(o.finished);
        assert_eq!(o.checkpoints.last().unwrap(), &final_checkpoint(dir.path(), stage));
        assert!(dir.path().join(format!("stage{stage}/config.toml")).exists());
    }
    let rows = csv_rows(dir.path());
    assert_eq!(rows[0], "step,stage,term,value,config_hash");
    for stage in 1..=3 {
        assert!(rows.iter().any(|r| r.starts_with(&format!("0,{stage},total,"))));
    }
    assert!(rows.iter().any(|r| r.contains(",1,eval_masked_ce,")));
    assert!(rows.iter().any(|r| r.contains(",3,eval_pixel_l2,")));

    // Stage 1 and 2 never touch the pixel head; stage 3 never touches the
    // encoder or quantizer.
    let ck = |s| Checkpoint::load(&final_checkpoint(dir.path(), s)).unwrap();
    let (c1, c2, c3) = (ck(1), ck(2), ck(3));
    let with = |c: &Checkpoint, p: &str| -> Vec<(String, Vec<f32>)> {
        c.blocks
            .iter()
            .filter(|(k, _)| k.starts_with(p))
            .map(|(k, b)| (k.clone(), b.data.clone()))
            .collect()
    };
    assert_eq!(with(&c1, "pixel_head/"), with(&c2, "pixel_head/"));
    assert_eq!(with(&c1, "teacher/"), with(&c3, "teacher/"));
    assert_eq!(with(&c2, "model/encoder."), with(&c3, "model/encoder."));
    assert_eq!(with(&c2, "model/quantizer."), with(&c3, "model/quantizer."));
    assert_ne!(with(&c2, "model/decoder."), with(&c3, "model/decoder."));
    assert_ne!(with(&c2, "pixel_head/"), with(&c3, "pixel_head/"));

    // Every stage's final checkpoint is usable for reconstruction.
    let tok = TrainedTokenizer::load(&final_checkpoint(dir.path(), 2), true).unwrap();
    let imgs = sftok::data::synthetic_dataset(9, 0, 2, tok.cfg.image_size(), Default::default()).images;
    let rec = tok.reconstruct(&imgs, 4, 1.0, 0, Default::default()).unwrap();
    assert_eq!((rec.batch, rec.height), (2, imgs.height));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let c1 = ci(1, 12);
    run_stage(&c1, &opts(straight.path())).unwrap();

    let mut c1r = c1.clone();
    c1r.experiment.resume_training = true;
    let mut o = opts(split.path());
    o.step_budget = Some(7);
    let first = run_stage(&c1r, &o).unwrap();
    assert!(!first.finished);
    let second = run_stage(&c1r, &opts(split.path())).unwrap();
    assert!(second.finished);

    let a = Checkpoint::load(&final_checkpoint(straight.path(), 1)).unwrap();
    let b = Checkpoint::load(&final_checkpoint(split.path(), 1)).unwrap();
    assert_eq!(a.step, b.step);
    assert_eq!(a.blocks, b.blocks);
    assert_eq!(csv_rows(straight.path()), csv_rows(split.path()));
}

#[test]
fn later_stage_without_prior_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(&ci(2, 3), &opts(dir.path())).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
    assert!(run_training(&[ci(1, 2), ci(3, 2)], &opts(dir.path())).is_err());
}
