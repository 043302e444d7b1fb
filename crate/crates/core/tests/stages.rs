use ovu_core::checkpoint::{to_bytes, Checkpoint, CheckpointMeta, LineageEntry};
use ovu_core::model::{ModelConfig, UnifiedModel};
use ovu_core::params::has_prefix;
use ovu_core::training::{freeze_mask, run_stage, stage_specs, ScaleConfig, TrainConfig};
use ovu_core::{Error, ParamStore};

fn small() -> (UnifiedModel<f32>, CheckpointMeta) {
    let mut cfg = ModelConfig::tiny();
    cfg.image_size = 64;
    let model = UnifiedModel::new(cfg, 21).unwrap();
    let mut meta = CheckpointMeta::new(cfg, 21);
    meta.lineage.push(LineageEntry::VaePretrain);
    (model, meta)
}

fn bits(store: &ParamStore<f32>, name: &str) -> Vec<u32> {
    store.by_name(name).unwrap().tensor.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_step_stage_leaves_the_checkpoint_bitwise_unchanged() {
    let (mut model, mut meta) = small();
    let before = to_bytes(&Checkpoint::from_model(&model, &meta)).unwrap();
    let spec = stage_specs()[0].scaled(&ScaleConfig { factor: 0.0, ..ScaleConfig::default() });
    assert_eq!(spec.steps, 0);
    let out = run_stage(&mut model, &mut meta, &spec, &TrainConfig::default(), &mut |_| {}).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(to_bytes(&Checkpoint::from_model(&model, &meta)).unwrap(), before);
}

#[test]
fn one_stage4_step_keeps_frozen_groups_bit_identical() {
    let (mut model, mut meta) = small();
    meta.lineage.extend((0..4).map(LineageEntry::Stage));
    let spec = stage_specs()[4].scaled(&ScaleConfig::default()).with_steps(1);
    let before = model.store.clone();
    run_stage(&mut model, &mut meta, &spec, &TrainConfig::default(), &mut |_| {}).unwrap();
    let mut changed = 0;
    for p in before.iter() {
        let same = bits(&before, &p.name) == bits(&model.store, &p.name);
        if ["llm", "encoder", "adapter", "vae"].iter().any(|g| has_prefix(&p.name, g)) {
            assert!(same, "{} moved", p.name);
        } else {
            changed += !same as usize;
        }
    }
    assert!(changed > 0);
}

#[test]
fn stage3_leaves_refiner_and_decoder_untouched() {
    let (mut model, mut meta) = small();
    meta.lineage.extend((0..3).map(LineageEntry::Stage));
    let mut spec = stage_specs()[3].scaled(&ScaleConfig::default()).with_steps(3);
    spec.batch_size = 4;
    let before = model.store.clone();
    run_stage(&mut model, &mut meta, &spec, &TrainConfig::default(), &mut |_| {}).unwrap();
    for p in before.iter().filter(|p| has_prefix(&p.name, "refiner") || has_prefix(&p.name, "decoder")) {
        assert_eq!(bits(&before, &p.name), bits(&model.store, &p.name), "{}", p.name);
    }
    assert!(before.iter().any(|p| has_prefix(&p.name, "llm") && bits(&before, &p.name) != bits(&model.store, &p.name)));
}

#[test]
fn all_groups_trained_leaves_only_the_vae_frozen() {
    let (mut model, _) = small();
    let all: Vec<String> = ["refiner", "decoder", "adapter", "encoder", "llm"].iter().map(|s| s.to_string()).collect();
    freeze_mask(&mut model.store, &all).unwrap();
    for p in model.store.iter() {
        assert_eq!(p.trainable, !has_prefix(&p.name, "vae"), "{}", p.name);
    }
    assert!(matches!(freeze_mask(&mut model.store, &["vae".to_string()]), Err(Error::Config(_))));
}

#[test]
fn stages_refuse_a_broken_lineage() {
    let (mut model, mut meta) = small();
    let spec = stage_specs()[2].scaled(&ScaleConfig::default()).with_steps(1);
    let err = run_stage(&mut model, &mut meta, &spec, &TrainConfig::default(), &mut |_| {}).unwrap_err();
    assert_eq!(err.class(), "lineage");
    meta.lineage.clear();
    let spec0 = stage_specs()[0].scaled(&ScaleConfig::default()).with_steps(1);
    assert_eq!(run_stage(&mut model, &mut meta, &spec0, &TrainConfig::default(), &mut |_| {}).unwrap_err().class(), "lineage");
}
