//! End-to-end drivers: the full staged pipeline and the refiner ablation sweep.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, LineageEntry};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::UnifiedModel;
use crate::params::has_prefix;
use crate::refiner::{GlobalMode, InputMode};
use crate::training::{pretrain_vae, run_stage, stage_specs, LossRecord, StageOutcome, StageSpec, Task, VaeOutcome};
use crate::world::eval::{evaluate_geneval_toy, ModelRunner};

/// Stage specs after scaling and batch override from `run`.
pub fn scaled_specs(run: &RunConfig) -> Vec<StageSpec> {
    stage_specs()
        .iter()
        .map(|s| {
            let mut s = s.scaled(&run.train.scale);
            s.batch_size = s.batch_size.min(run.batch_size);
            s
        })
        .collect()
}

/// A fresh model and its root metadata.
pub fn fresh(run: &RunConfig) -> Result<(UnifiedModel<f32>, CheckpointMeta)> {
    run.require_trainable()?;
    let cfg = run.model_config();
    let model = UnifiedModel::new(cfg, run.seed)?;
    let mut meta = CheckpointMeta::new(cfg, run.seed);
    meta.run_config = run.to_value();
    Ok((model, meta))
}

pub struct PipelineOutcome {
    pub model: UnifiedModel<f32>,
    pub meta: CheckpointMeta,
    pub vae: VaeOutcome,
    pub stages: Vec<(StageSpec, StageOutcome)>,
    pub seconds: f64,
}

/// VAE pretraining followed by stages 0 through 5.
pub fn run_pipeline(run: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let (mut model, mut meta) = fresh(run)?;
    let vae = pretrain_vae(&mut model, &mut meta, &run.vae, &mut |_| {})?;
    log(&format!("vae: mse {:.5} -> {:.5} in {:.0}s", vae.mse_before, vae.mse_after, vae.seconds));
    let mut stages = Vec::new();
    for spec in scaled_specs(run) {
        let out = run_stage(&mut model, &mut meta, &spec, &run.train, &mut |_| {})?;
        let last = out.records.iter().rev().take(50).map(|r| r.loss).sum::<f64>() / out.records.len().clamp(1, 50) as f64;
        log(&format!("stage {}: {} steps in {:.0}s, last-50 loss {last:.4}", spec.id, spec.steps, out.seconds));
        stages.push((spec, out));
    }
    Ok(PipelineOutcome { model, meta, vae, stages, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub input_mode: InputMode,
    pub global_mode: GlobalMode,
    /// Mean flow loss over the final quarter of training.
    pub final_loss: f64,
    /// Constraint-satisfaction rate on the generation benchmark.
    pub geneval_overall: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

fn mode_names(r: &AblationRow) -> (&'static str, &'static str) {
    let i = match r.input_mode {
        InputMode::LastOnly => "last_only",
        InputMode::ConcatTwo => "concat_two",
    };
    let g = match r.global_mode {
        GlobalMode::Averaged => "averaged",
        GlobalMode::ClsToken => "cls_token",
    };
    (i, g)
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("input_mode,global_mode,steps,final_loss,geneval_overall\n");
        for r in &self.rows {
            let (i, g) = mode_names(r);
            let _ = writeln!(s, "{i},{g},{},{:.5},{:.4}", self.steps, r.final_loss, r.geneval_overall);
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:<10} {:>10} {:>8}\n", "input", "global", "flow loss", "geneval");
        for r in &self.rows {
            let (i, g) = mode_names(r);
            let _ = writeln!(s, "{i:<12} {g:<10} {:>10.5} {:>8.3}", r.final_loss, r.geneval_overall);
        }
        s
    }
}

pub const ABLATION_GRID: [(InputMode, GlobalMode); 4] = [
    (InputMode::LastOnly, GlobalMode::Averaged),
    (InputMode::LastOnly, GlobalMode::ClsToken),
    (InputMode::ConcatTwo, GlobalMode::Averaged),
    (InputMode::ConcatTwo, GlobalMode::ClsToken),
];

/// Trains stage 0 for `run.ablation_steps` under each refiner configuration,
/// all starting from one shared pretrained VAE. Returns the trained models
/// alongside the report.
pub fn ablate_refiner(
    run: &RunConfig,
    eval_per_category: usize,
    log: &mut dyn FnMut(&str),
) -> Result<(AblationReport, Vec<UnifiedModel<f32>>)> {
    let (mut base, mut base_meta) = fresh(run)?;
    pretrain_vae(&mut base, &mut base_meta, &run.vae, &mut |_| {})?;
    let spec = scaled_specs(run)[0].with_steps(run.ablation_steps);
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (input_mode, global_mode) in ABLATION_GRID {
        let variant = RunConfig { input_mode, global_mode, ..run.clone() };
        let (mut model, mut meta) = fresh(&variant)?;
        for p in model.store.iter_mut().filter(|p| has_prefix(&p.name, "vae")) {
            let src = base.store.by_name(&p.name).ok_or_else(|| Error::Structure(format!("missing {}", p.name)))?;
            p.tensor = src.tensor.clone();
        }
        meta.lineage.push(LineageEntry::VaePretrain);
        let out = run_stage(&mut model, &mut meta, &spec, &run.train, &mut |_: &LossRecord| {})?;
        let tail = (spec.steps / 4).max(1);
        let final_loss = out.window_mean(Task::T2i, true, tail.min(out.records.len())).unwrap_or(f64::NAN);
        let mut runner = ModelRunner { model: &model, sampler: run.sampler, batch: run.batch_size };
        let geneval_overall = evaluate_geneval_toy(&mut runner, eval_per_category, run.eval_seed)?.overall;
        let row = AblationRow { input_mode, global_mode, final_loss, geneval_overall, seconds: out.seconds };
        let (i, g) = mode_names(&row);
        log(&format!("{i}/{g}: loss {final_loss:.5}, geneval {geneval_overall:.3}"));
        rows.push(row);
        models.push(model);
    }
    Ok((AblationReport { steps: spec.steps, rows }, models))
}
