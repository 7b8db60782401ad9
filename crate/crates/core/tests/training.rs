mod common;

use common::toy_examples;
use ommx_core::train::{
    loss_and_grads, run_stage, trainable_mask, AdamW, RunOptions, TaskData,
};
use ommx_core::{FreezeGroup, Model, ModelConfig, Stage, StageConfig};

fn hashes(model: &Model<f32>) -> Vec<(FreezeGroup, u64)> {
    FreezeGroup::ALL
        .iter()
        .filter(|g| model.store.group_size(**g) > 0)
        .map(|&g| (g, model.store.group_hash(g)))
        .collect()
}

fn stage_cfg(stage: Stage, steps: usize) -> StageConfig {
    let (mmu_batch, t2i_batch) = match stage {
        Stage::Stage1Mmu => (2, 0),
        Stage::Stage1T2i => (0, 2),
        Stage::Stage2 => (1, 2),
    };
    StageConfig {
        peak_lr: 5e-3,
        warmup_steps: 0,
        total_steps: steps,
        mmu_batch,
        t2i_batch,
    }
}

#[test]
fn stage_one_mmu_overfits_ten_examples() {
    let model0 = Model::init(ModelConfig::default(), 3).unwrap();
    let data = toy_examples(&model0, 10, 11);
    let data = TaskData {
        mmu: data.mmu,
        t2i: vec![],
    };
    let mut model = model0.clone();
    let cfg = StageConfig {
        peak_lr: 1e-3,
        warmup_steps: 10,
        total_steps: 200,
        mmu_batch: 10,
        t2i_batch: 0,
    };
    let report = run_stage(&mut model, Stage::Stage1Mmu, &cfg, &data, &RunOptions::default(), |_| {}).unwrap();
    let loss = |i: usize| report.metrics[i].mmu_loss.unwrap();
    let start = (0..5).map(loss).sum::<f64>() / 5.0;
    let end = loss(199);
    assert!(end <= 0.2 * start, "loss {start} -> {end}");
}

#[test]
fn stages_touch_only_their_groups() {
    let init = Model::init(ModelConfig::tiny(), 5).unwrap();
    let data = toy_examples(&init, 8, 2);
    for stage in [Stage::Stage1Mmu, Stage::Stage1T2i, Stage::Stage2] {
        let mut model = init.clone();
        let before = hashes(&model);
        run_stage(&mut model, stage, &stage_cfg(stage, 5), &data, &RunOptions::default(), |_| {}).unwrap();
        let trainable = stage.trainable_groups();
        for ((g, a), (_, b)) in before.iter().zip(hashes(&model)) {
            if trainable.contains(g) {
                assert_ne!(*a, b, "{stage}: {} did not move", g.name());
            } else {
                assert_eq!(*a, b, "{stage}: {} changed", g.name());
            }
        }
    }
}

#[test]
fn optimizer_state_exists_only_for_trainable_params() {
    let model = Model::init(ModelConfig::tiny(), 1).unwrap();
    for stage in [Stage::Stage1Mmu, Stage::Stage1T2i, Stage::Stage2] {
        let mask = trainable_mask(&model.store, &stage.trainable_groups());
        let opt = AdamW::new(&model.store, &mask);
        for (id, e) in model.store.entries().iter().enumerate() {
            let group = FreezeGroup::of(&e.name).unwrap();
            assert_eq!(opt.has_moments(id), stage.trainable_groups().contains(&group), "{}", e.name);
        }
    }
}

#[test]
fn stage_two_loss_is_the_sum_of_task_losses() {
    let model = Model::init(ModelConfig::tiny(), 4).unwrap();
    let data = toy_examples(&model, 6, 9);
    let mmu: Vec<_> = data.mmu.iter().take(2).collect();
    let t2i: Vec<_> = data.t2i.iter().take(4).collect();
    let mask = trainable_mask(&model.store, &Stage::Stage2.trainable_groups());
    let (both, _) = loss_and_grads(&model, &mmu, &t2i, mask.clone()).unwrap();
    let (m, _) = loss_and_grads(&model, &mmu, &[], mask.clone()).unwrap();
    let (t, _) = loss_and_grads(&model, &[], &t2i, mask).unwrap();
    assert_eq!(both.mmu_loss, m.mmu_loss);
    assert_eq!(both.t2i_loss, t.t2i_loss);
    let sum = m.total + t.total;
    assert!((both.total - sum).abs() <= 1e-6 * sum.abs(), "{} vs {sum}", both.total);
}

#[test]
fn stage_one_rejects_missing_task_data() {
    let mut model = Model::init(ModelConfig::tiny(), 1).unwrap();
    let data = toy_examples(&model, 4, 1);
    let only_t2i = TaskData { mmu: vec![], t2i: data.t2i };
    let err = run_stage(
        &mut model,
        Stage::Stage1Mmu,
        &stage_cfg(Stage::Stage1Mmu, 2),
        &only_t2i,
        &RunOptions::default(),
        |_| {},
    );
    assert!(err.is_err());
}

#[test]
fn intermediate_checkpoints_are_written_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::init(ModelConfig::tiny(), 1).unwrap();
    let data = toy_examples(&model, 4, 1);
    let opts = RunOptions {
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let r = run_stage(&mut model, Stage::Stage1T2i, &stage_cfg(Stage::Stage1T2i, 4), &data, &opts, |_| {}).unwrap();
    assert_eq!(r.checkpoints.len(), 2);
    assert!(r.checkpoints[1].ends_with("stage1t2i_step000004.ckpt"));
    let back = ommx_core::checkpoint::load(&r.checkpoints[1]).unwrap();
    assert_eq!(back.store.entries(), model.store.entries());
}
