//! Staged training: per-stage trainable masks, task mixtures, condition
//! dropout, VAE pretraining and lineage bookkeeping.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, LineageEntry};
use crate::decoder::TimeSampling;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::model::{CondItem, Drop, FeatureCache, FlowItem, QaItem, UnifiedModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{has_prefix, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::world::scene::render;
use crate::world::tasks::{random_scene, sample_edit, sample_t2i, sample_training_category, sample_understanding};
use crate::world::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Understanding,
    T2i,
    Editing,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Understanding => "understanding",
            Task::T2i => "t2i",
            Task::Editing => "editing",
        }
    }
}

/// Parameter groups a stage may train. The VAE is never among them.
pub const TRAINABLE_GROUPS: [&str; 5] = ["refiner", "decoder", "adapter", "encoder", "llm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: u8,
    pub trained: Vec<String>,
    pub tasks: Vec<Task>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trained.is_empty() || self.tasks.is_empty() || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("stage {} needs trained groups, tasks, batch and lr", self.id)));
        }
        if let Some(p) = self.trained.iter().find(|p| !TRAINABLE_GROUPS.contains(&p.as_str())) {
            return Err(Error::Config(format!("unknown parameter group {p:?}")));
        }
        Ok(())
    }

    /// Maps full-size steps and batch to a toy run.
    pub fn scaled(&self, scale: &ScaleConfig) -> StageSpec {
        let steps = if scale.factor <= 0.0 {
            0
        } else {
            ((self.steps as f64 * scale.factor).round() as usize).max(scale.min_steps)
        };
        StageSpec {
            steps,
            batch_size: self.batch_size.min(scale.max_batch),
            lr: self.lr * scale.lr_multiplier,
            ..self.clone()
        }
    }

    pub fn with_steps(&self, steps: usize) -> StageSpec {
        StageSpec { steps, ..self.clone() }
    }
}

fn spec(id: u8, trained: &[&str], tasks: &[Task], steps: usize, batch_size: usize, lr: f64) -> StageSpec {
    StageSpec { id, trained: trained.iter().map(|s| s.to_string()).collect(), tasks: tasks.to_vec(), steps, batch_size, lr }
}

/// The six full-size stages.
pub fn stage_specs() -> Vec<StageSpec> {
    use Task::*;
    vec![
        spec(0, &["refiner", "decoder"], &[T2i], 500_000, 1024, 1e-4),
        spec(1, &["adapter"], &[Understanding, T2i, Editing], 1_510, 8192, 5e-4),
        spec(2, &["encoder", "adapter"], &[Understanding, T2i, Editing], 2_630, 8192, 1e-4),
        spec(3, &["encoder", "adapter", "llm"], &[Understanding], 23_000, 2240, 5e-5),
        spec(4, &["refiner", "decoder"], &[T2i], 275_000, 256, 5e-5),
        spec(5, &["refiner", "decoder"], &[T2i, Editing], 325_000, 256, 5e-5),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    /// Multiplier on full-size step counts; `0` skips training.
    pub factor: f64,
    pub min_steps: usize,
    pub max_batch: usize,
    /// Multiplier on the stage learning rates.
    pub lr_multiplier: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self { factor: 1.0 / 500.0, min_steps: 200, max_batch: 32, lr_multiplier: 10.0 }
    }
}

/// Marks exactly the parameters under `trained` as trainable; the VAE stays frozen.
pub fn freeze_mask<T: Scalar>(store: &mut ParamStore<T>, trained: &[String]) -> Result<()> {
    if let Some(p) = trained.iter().find(|p| !TRAINABLE_GROUPS.contains(&p.as_str())) {
        return Err(Error::Config(format!("unknown parameter group {p:?}")));
    }
    for p in store.iter_mut() {
        p.trainable = !has_prefix(&p.name, "vae") && trained.iter().any(|t| has_prefix(&p.name, t));
    }
    Ok(())
}

fn group_frozen<T: Scalar>(store: &ParamStore<T>, group: &str) -> bool {
    store.iter().filter(|p| has_prefix(&p.name, group)).all(|p| !p.trainable)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub scale: ScaleConfig,
    /// Probability of replacing the text condition by the null embedding.
    pub text_dropout: f64,
    /// Editing only: probability of dropping the source image.
    pub image_dropout: f64,
    /// Editing only: probability of dropping both conditions.
    pub both_dropout: f64,
    pub cache_capacity: usize,
    /// NaN/Inf trapping inside every op.
    pub checked: bool,
    pub time_sampling: TimeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig { warmup_steps: 50, ..AdamWConfig::default() },
            scale: ScaleConfig::default(),
            text_dropout: 0.1,
            image_dropout: 0.1,
            both_dropout: 0.05,
            cache_capacity: 60_000,
            checked: false,
            time_sampling: TimeSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub records: Vec<LossRecord>,
    pub seconds: f64,
}

impl StageOutcome {
    /// Mean loss of `task` over records with index in `range` of that task's records.
    pub fn window_mean(&self, task: Task, from_end: bool, n: usize) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().filter(|r| r.task == task).map(|r| r.loss).collect();
        if xs.len() < n || n == 0 {
            return None;
        }
        let w = if from_end { &xs[xs.len() - n..] } else { &xs[..n] };
        Some(w.iter().sum::<f64>() / n as f64)
    }
}

/// Checks that `stage` may run on a checkpoint with lineage `meta`.
pub fn check_lineage(meta: &CheckpointMeta, stage: u8) -> Result<()> {
    if !meta.vae_pretrained() {
        return Err(Error::Lineage(format!("stage {stage} needs a pretrained VAE")));
    }
    let expected = stage.checked_sub(1);
    if meta.last_stage() != expected {
        return Err(Error::Lineage(match expected {
            None => format!("stage 0 needs a fresh chain, checkpoint is at stage {:?}", meta.last_stage()),
            Some(e) => format!("stage {stage} needs a stage-{e} checkpoint, found {:?}", meta.last_stage()),
        }));
    }
    Ok(())
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rng_state(seed: u64, rng: &ChaCha8Rng) -> String {
    format!("{seed}:{}:{}", rng.get_stream(), rng.get_word_pos())
}

fn scene_key(scene: &crate::world::SceneSpec) -> String {
    format!("{:?}", scene.canonical())
}

/// Memo of VAE latent tokens by scene.
struct LatentCache<T: Scalar> {
    map: HashMap<String, Tensor<T>>,
    cap: usize,
}

impl<T: Scalar> LatentCache<T> {
    fn get(&mut self, model: &UnifiedModel<T>, items: &[(String, &Image)]) -> Result<Vec<Tensor<T>>> {
        let missing: Vec<usize> = (0..items.len()).filter(|&i| !self.map.contains_key(&items[i].0)).collect();
        let mut fresh = HashMap::new();
        if !missing.is_empty() {
            let imgs: Vec<&Image> = missing.iter().map(|&i| items[i].1).collect();
            for (&i, t) in missing.iter().zip(model.latent_tokens(&imgs)?) {
                fresh.insert(items[i].0.clone(), t);
            }
        }
        let out = items
            .iter()
            .map(|(k, _)| self.map.get(k).or_else(|| fresh.get(k)).cloned().expect("latent resolved"))
            .collect();
        for (k, t) in fresh {
            if self.map.len() < self.cap {
                self.map.insert(k, t);
            }
        }
        Ok(out)
    }
}

fn draw_drop<R: Rng>(rng: &mut R, cfg: &TrainConfig, editing: bool) -> Drop {
    let u: f64 = rng.gen();
    if !editing {
        return if u < cfg.text_dropout { Drop::Text } else { Drop::Keep };
    }
    if u < cfg.text_dropout {
        Drop::Text
    } else if u < cfg.text_dropout + cfg.image_dropout {
        Drop::Image
    } else if u < cfg.text_dropout + cfg.image_dropout + cfg.both_dropout {
        Drop::Both
    } else {
        Drop::Keep
    }
}

struct StageState<T: Scalar> {
    features: FeatureCache<T>,
    latents: LatentCache<T>,
    cache_text: bool,
    cache_images: bool,
}

fn batch_loss<T: Scalar>(
    model: &UnifiedModel<T>,
    task: Task,
    batch: usize,
    cfg: &TrainConfig,
    state: &mut StageState<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, crate::graph::Gradients<T>)> {
    let mut g = Graph::new(&model.store).with_checked(cfg.checked);
    let loss = match task {
        Task::Understanding => {
            let ex: Vec<TrainingExample> = (0..batch).map(|_| sample_understanding(rng)).collect();
            let items: Vec<QaItem> = ex
                .iter()
                .map(|e| match e {
                    TrainingExample::Understanding { image, question, answer, .. } => {
                        QaItem { image, question, answer }
                    }
                    _ => unreachable!("understanding sampler"),
                })
                .collect();
            model.understanding_loss(&mut g, &items)?
        }
        Task::T2i | Task::Editing => {
            let editing = task == Task::Editing;
            let ex: Vec<TrainingExample> = (0..batch)
                .map(|_| {
                    if editing {
                        sample_edit(rng)
                    } else {
                        let cat = sample_training_category(rng);
                        sample_t2i(cat, rng)
                    }
                })
                .collect();
            let drops: Vec<Drop> = (0..batch).map(|_| draw_drop(rng, cfg, editing)).collect();
            let mut keyed: Vec<(String, &Image)> = Vec::new();
            let mut feature_keys = Vec::with_capacity(batch);
            for e in &ex {
                match e {
                    TrainingExample::T2i { scene, image, .. } => {
                        keyed.push((scene_key(scene), image));
                        feature_keys.push(String::new());
                    }
                    TrainingExample::Edit { source, source_image, target, target_image, .. } => {
                        let sk = scene_key(source);
                        keyed.push((scene_key(target), target_image));
                        keyed.push((sk.clone(), source_image));
                        feature_keys.push(sk);
                    }
                    TrainingExample::Understanding { .. } => unreachable!("generation sampler"),
                }
            }
            let lat = state.latents.get(model, &keyed)?;
            let mut items = Vec::with_capacity(batch);
            let mut li = 0;
            for ((e, d), fk) in ex.iter().zip(&drops).zip(&feature_keys) {
                match e {
                    TrainingExample::T2i { prompt, .. } => {
                        items.push(FlowItem {
                            cond: CondItem { text: prompt, image: None, drop: *d, key: Some(fk) },
                            target: &lat[li],
                            context: None,
                        });
                        li += 1;
                    }
                    TrainingExample::Edit { instruction, source_image, .. } => {
                        items.push(FlowItem {
                            cond: CondItem { text: instruction, image: Some(source_image), drop: *d, key: Some(fk) },
                            target: &lat[li],
                            context: Some(&lat[li + 1]),
                        });
                        li += 2;
                    }
                    TrainingExample::Understanding { .. } => unreachable!(),
                }
            }
            let use_cache = if editing { state.cache_images } else { state.cache_text };
            let cache = use_cache.then_some(&mut state.features);
            model.flow_loss(&mut g, &items, cache, cfg.time_sampling, rng)?
        }
    };
    let value = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Runs one stage in place. Lineage is checked before and extended after.
pub fn run_stage<T: Scalar>(
    model: &mut UnifiedModel<T>,
    meta: &mut CheckpointMeta,
    spec: &StageSpec,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LossRecord),
) -> Result<StageOutcome> {
    spec.validate()?;
    check_lineage(meta, spec.id)?;
    if spec.steps == 0 {
        // A zero-step stage leaves the checkpoint untouched, lineage included.
        return Ok(StageOutcome::default());
    }
    let start = Instant::now();
    freeze_mask(&mut model.store, &spec.trained)?;
    let frozen = |g| group_frozen(&model.store, g);
    let cache_text = frozen("llm");
    let cache_images = cache_text && frozen("encoder") && frozen("adapter");
    let mut state = StageState {
        features: FeatureCache::new(cfg.cache_capacity),
        latents: LatentCache { map: HashMap::new(), cap: cfg.cache_capacity },
        cache_text,
        cache_images,
    };
    let mut opt = AdamW::new(AdamWConfig { lr: spec.lr, ..cfg.optimizer });
    let mut rng = stage_rng(meta.seed, spec.id as u64 + 1);
    let mut out = StageOutcome::default();
    for step in 0..spec.steps {
        let task = *spec.tasks.choose(&mut rng).expect("validated nonempty");
        let (loss, grads) = batch_loss(model, task, spec.batch_size, cfg, &mut state, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, task: task.name().into() });
        }
        let norm = opt.step(&mut model.store, &grads);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, task: task.name().into() });
        }
        let rec = LossRecord { step, task, loss };
        log(&rec);
        out.records.push(rec);
    }
    model.store.set_all_trainable(true);
    meta.lineage.push(LineageEntry::Stage(spec.id));
    meta.step += spec.steps as u64;
    meta.rng_state = rng_state(meta.seed, &rng);
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out scenes for the before/after reconstruction error.
    pub eval_images: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 16, lr: 1e-3, eval_images: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeOutcome {
    pub mse_before: f64,
    pub mse_after: f64,
    pub latent_scale: f64,
    pub records: Vec<LossRecord>,
    pub seconds: f64,
}

/// Pretrains the VAE on random scenes, then calibrates the latent scale.
pub fn pretrain_vae<T: Scalar>(
    model: &mut UnifiedModel<T>,
    meta: &mut CheckpointMeta,
    cfg: &VaeTrainConfig,
    log: &mut dyn FnMut(&LossRecord),
) -> Result<VaeOutcome> {
    if !meta.lineage.is_empty() {
        return Err(Error::Lineage("VAE pretraining must start the chain".into()));
    }
    let start = Instant::now();
    let mut eval_rng = stage_rng(meta.seed, 1000);
    let eval: Vec<Image> = (0..cfg.eval_images).map(|_| render(&random_scene(&mut eval_rng, 4))).collect();
    let mse_before = model.vae.recon_mse(&model.store, &eval)?;
    for p in model.store.iter_mut() {
        p.trainable = has_prefix(&p.name, "vae") && p.name != "vae.latent_scale";
    }
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut rng = stage_rng(meta.seed, 0);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let imgs: Vec<Image> = (0..cfg.batch_size).map(|_| render(&random_scene(&mut rng, 4))).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let grads = {
            let mut g = Graph::new(&model.store).with_checked(false);
            let (loss, mse) = model.vae.loss_vars(&mut g, &refs)?;
            let m = g.value(mse).data()[0].to_f64_lossy();
            if !m.is_finite() {
                return Err(Error::Divergence { step, task: "vae".into() });
            }
            let rec = LossRecord { step, task: Task::T2i, loss: m };
            log(&rec);
            records.push(rec);
            g.backward(loss)?
        };
        opt.step(&mut model.store, &grads);
    }
    model.store.set_all_trainable(true);
    let mse_after = model.vae.recon_mse(&model.store, &eval)?;
    let latent_scale = model.calibrate_latent_scale(&eval)?;
    meta.lineage.push(LineageEntry::VaePretrain);
    meta.step += cfg.steps as u64;
    meta.rng_state = rng_state(meta.seed, &rng);
    Ok(VaeOutcome { mse_before, mse_after, latent_scale, records, seconds: start.elapsed().as_secs_f64() })
}

/// Writes loss records as CSV with header `step,task,loss`.
pub fn write_loss_csv<W: std::io::Write>(mut w: W, records: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,task,loss")?;
    for r in records {
        writeln!(w, "{},{},{}", r.step, r.task.name(), r.loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_specs_match_the_stage_table() {
        let s = stage_specs();
        assert_eq!(s.len(), 6);
        let set = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(s[3].trained, set(&["encoder", "adapter", "llm"]));
        assert_eq!(s[3].tasks, vec![Task::Understanding]);
        assert_eq!((s[0].lr, s[0].batch_size, s[0].steps), (1e-4, 1024, 500_000));
        assert_eq!(s[5].tasks, vec![Task::T2i, Task::Editing]);
        assert_eq!(s[4].trained, set(&["refiner", "decoder"]));
        assert_eq!((s[1].steps, s[1].batch_size, s[1].lr), (1_510, 8192, 5e-4));
        assert_eq!((s[2].steps, s[2].lr), (2_630, 1e-4));
        assert_eq!((s[3].steps, s[3].batch_size, s[3].lr), (23_000, 2240, 5e-5));
        assert_eq!((s[4].steps, s[4].batch_size, s[4].lr), (275_000, 256, 5e-5));
        assert_eq!((s[5].steps, s[5].batch_size), (325_000, 256));
        for x in &s {
            x.validate().unwrap();
        }
    }

    #[test]
    fn scaling_applies_factor_floor_and_batch_cap() {
        let sc = ScaleConfig::default();
        let s: Vec<StageSpec> = stage_specs().iter().map(|s| s.scaled(&sc)).collect();
        assert_eq!(s.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![1000, 200, 200, 200, 550, 650]);
        assert!(s.iter().all(|s| s.batch_size == 32));
        let zero = stage_specs()[0].scaled(&ScaleConfig { factor: 0.0, ..sc });
        assert_eq!(zero.steps, 0);
    }

    #[test]
    fn freeze_mask_algebra() {
        let mut store = ParamStore::<f32>::new();
        for n in ["llm.a", "decoder.b", "encoder.c", "adapter.d", "vae.e", "refiner.f", "llmx.g"] {
            store.add(n, Tensor::zeros(&[1]), true).unwrap();
        }
        let all: Vec<String> = TRAINABLE_GROUPS.iter().map(|s| s.to_string()).collect();
        freeze_mask(&mut store, &all).unwrap();
        let frozen: Vec<&str> = store.iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
        assert_eq!(frozen, vec!["vae.e", "llmx.g"]);
        freeze_mask(&mut store, &stage_specs()[4].trained).unwrap();
        let live: Vec<&str> = store.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
        assert_eq!(live, vec!["decoder.b", "refiner.f"]);
        assert!(matches!(freeze_mask(&mut store, &["vae".to_string()]), Err(Error::Config(_))));
        assert!(matches!(freeze_mask(&mut store, &["Dec_i".to_string()]), Err(Error::Config(_))));
    }

    #[test]
    fn lineage_is_a_chain() {
        let mut meta = CheckpointMeta::new(crate::model::ModelConfig::toy(), 0);
        assert!(matches!(check_lineage(&meta, 0), Err(Error::Lineage(_))));
        meta.lineage.push(LineageEntry::VaePretrain);
        check_lineage(&meta, 0).unwrap();
        assert!(matches!(check_lineage(&meta, 2), Err(Error::Lineage(_))));
        meta.lineage.push(LineageEntry::Stage(0));
        meta.lineage.push(LineageEntry::Stage(1));
        check_lineage(&meta, 2).unwrap();
        assert!(matches!(check_lineage(&meta, 1), Err(Error::Lineage(_))));
        assert!(matches!(check_lineage(&meta, 3), Err(Error::Lineage(_))));
    }

    #[test]
    fn loss_csv_format() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[LossRecord { step: 0, task: Task::Editing, loss: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,task,loss\n0,editing,0.5\n");
    }
}
