use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ovu_core::checkpoint::{self, Checkpoint, CheckpointMeta};
use ovu_core::config::{Preset, RunConfig};
use ovu_core::image::Image;
use ovu_core::model::{param_counts, UnifiedModel, MODULES};
use ovu_core::pipeline::{ablate_refiner, fresh, scaled_specs};
use ovu_core::sampler::SamplerConfig;
use ovu_core::training::{pretrain_vae, run_stage, write_loss_csv, LossRecord};
use ovu_core::world::eval::{
    evaluate_edit_toy, evaluate_geneval_toy, Editor, Generator, IdentityEditor, ModelRunner, NoiseGenerator,
    OracleEditor, OracleGenerator,
};

mod run_dir;

use run_dir::{Manifest, RunLock};

#[derive(Parser)]
#[command(name = "ovu", version, about = "Train, sample and evaluate the toy unified model")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Global seed (overrides the config; OVU_SEED overrides both).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    GenevalToy,
    EditToy,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Model,
    Oracle,
    Noise,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    PaperScale,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the VAE; writes `vae.ovu`.
    PretrainVae {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run one training stage on the previous stage's checkpoint.
    Train {
        #[arg(long)]
        stage: u8,
        /// Input checkpoint (default: the previous link of the chain in the run directory).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Override the scaled step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Text-to-image sampling.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        prompt: Vec<String>,
        #[arg(long)]
        cfg_txt: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory (default: `<run-dir>/generate`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Instruction-based editing; without explicit scales sweeps the configured grid.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, requires = "cfg_txt")]
        cfg_img: Option<f64>,
        #[arg(long, requires = "cfg_img")]
        cfg_txt: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint (or a calibration system) on a benchmark suite.
    Eval {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        system: System,
        /// Cases per category or edit type.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train stage 0 under each refiner configuration and compare.
    AblateRefiner {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 10)]
        eval_n: usize,
    },
    /// Print per-module parameter counts and checkpoint metadata.
    Inspect {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(UnifiedModel<f32>, CheckpointMeta)> {
    let ckpt = checkpoint::load::<f32>(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ckpt.into_model()?)
}

fn save_model(model: &UnifiedModel<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    checkpoint::save(&Checkpoint::from_model(model, meta), path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn stage_file(run_dir: &Path, stage: Option<u8>) -> PathBuf {
    match stage {
        None => run_dir.join("vae.ovu"),
        Some(s) => run_dir.join(format!("stage{s}.ovu")),
    }
}

fn counts_table(counts: &[(&str, usize)]) -> String {
    let mut s = format!("{:<10} {:>14} {:>10}\n", "module", "params", "millions");
    for (name, n) in counts {
        s.push_str(&format!("{name:<10} {n:>14} {:>10.2}\n", *n as f64 / 1e6));
    }
    let total: usize = counts.iter().map(|c| c.1).sum();
    s.push_str(&format!("{:<10} {total:>14} {:>10.2}\n", "total", total as f64 / 1e6));
    s
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let dir = cfg.run_dir.clone();
    match cli.cmd {
        Cmd::PretrainVae { steps } => {
            cfg.require_trainable()?;
            fs::create_dir_all(&dir)?;
            let _lock = RunLock::acquire(&dir)?;
            let mut vcfg = cfg.vae;
            if let Some(s) = steps {
                vcfg.steps = s;
            }
            let (mut model, mut meta) = fresh(&cfg)?;
            let out = pretrain_vae(&mut model, &mut meta, &vcfg, &mut |_| {})?;
            let ckpt = stage_file(&dir, None);
            save_model(&model, &meta, &ckpt)?;
            let csv = dir.join("vae_loss.csv");
            write_loss_csv(fs::File::create(&csv)?, &out.records)?;
            println!("vae recon mse {:.6} -> {:.6}, latent scale {:.4}", out.mse_before, out.mse_after, out.latent_scale);
            Manifest::record(&dir, "pretrain-vae", &cfg, &[&ckpt, &csv])?;
        }
        Cmd::Train { stage, from, steps } => {
            cfg.require_trainable()?;
            let specs = scaled_specs(&cfg);
            let Some(spec) = specs.iter().find(|s| s.id == stage) else {
                bail!(ovu_core::Error::Config(format!("no stage {stage}; stages are 0..=5")));
            };
            let spec = match steps {
                Some(s) => spec.with_steps(s),
                None => spec.clone(),
            };
            fs::create_dir_all(&dir)?;
            let _lock = RunLock::acquire(&dir)?;
            let input = from.unwrap_or_else(|| stage_file(&dir, stage.checked_sub(1)));
            if !input.exists() {
                bail!(ovu_core::Error::Lineage(format!(
                    "stage {stage} needs its upstream checkpoint {}",
                    input.display()
                )));
            }
            let (mut model, mut meta) = load_model(&input)?;
            ovu_core::training::check_lineage(&meta, stage)?;
            meta.run_config = cfg.to_value();
            let mut log = |r: &LossRecord| {
                if r.step % 50 == 0 {
                    eprintln!("stage {stage} step {} {} {:.5}", r.step, r.task.name(), r.loss);
                }
            };
            let out = run_stage(&mut model, &mut meta, &spec, &cfg.train, &mut log)?;
            let ckpt = stage_file(&dir, Some(stage));
            save_model(&model, &meta, &ckpt)?;
            let csv = dir.join(format!("stage{stage}_loss.csv"));
            write_loss_csv(fs::File::create(&csv)?, &out.records)?;
            println!("stage {stage}: {} steps in {:.1}s -> {}", spec.steps, out.seconds, ckpt.display());
            Manifest::record(&dir, &format!("train --stage {stage}"), &cfg, &[&ckpt, &csv])?;
        }
        Cmd::Generate { checkpoint, prompt, cfg_txt, steps, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let mut sampler = SamplerConfig { seed: cfg.seed, ..cfg.sampler };
            sampler.cfg_txt = cfg_txt.unwrap_or(sampler.cfg_txt);
            sampler.steps = steps.unwrap_or(sampler.steps);
            sampler.validate()?;
            let out = out.unwrap_or_else(|| dir.join("generate"));
            fs::create_dir_all(&out)?;
            let prompts: Vec<&str> = prompt.iter().map(|s| s.as_str()).collect();
            let images = model.generate(&prompts, &sampler)?;
            let mut index = fs::File::create(out.join("generate.jsonl"))?;
            let mut files = Vec::new();
            for (i, (img, p)) in images.iter().zip(&prompt).enumerate() {
                let path = out.join(format!("gen_{i:03}.ppm"));
                img.save_ppm(&path)?;
                writeln!(index, "{}", json!({"prompt": p, "image": path.file_name().unwrap().to_string_lossy(), "seed": sampler.seed, "cfg_txt": sampler.cfg_txt, "steps": sampler.steps}))?;
                println!("{}", path.display());
                files.push(path);
            }
            let refs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
            Manifest::record(&out, "generate", &cfg, &refs)?;
        }
        Cmd::Edit { checkpoint, image, instruction, cfg_img, cfg_txt, steps, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let source = Image::load_ppm(&image).with_context(|| format!("reading {}", image.display()))?;
            let size = model.cfg.image_size;
            let source = if (source.width, source.height) == (size, size) { source } else { source.resize_bilinear(size, size) };
            let grid: Vec<(f64, f64)> = match (cfg_img, cfg_txt) {
                (Some(i), Some(t)) => vec![(i, t)],
                _ => cfg.cfg_grid.clone(),
            };
            let out = out.unwrap_or_else(|| dir.join("edit"));
            fs::create_dir_all(&out)?;
            let mut csv = String::from("cfg_img,cfg_txt,image,source_mse\n");
            let mut files = Vec::new();
            for (k, &(ci, ct)) in grid.iter().enumerate() {
                let sampler = SamplerConfig {
                    cfg_img: ci,
                    cfg_txt: ct,
                    seed: cfg.seed,
                    steps: steps.unwrap_or(cfg.sampler.steps),
                };
                sampler.validate()?;
                let img = model.edit(&[(&source, instruction.as_str())], &sampler)?.remove(0);
                let path = out.join(format!("edit_{k:02}.ppm"));
                img.save_ppm(&path)?;
                let mse = img.mse(&source);
                csv.push_str(&format!("{ci},{ct},{},{mse:.6}\n", path.file_name().unwrap().to_string_lossy()));
                files.push(path);
            }
            let csv_path = out.join("edit.csv");
            write_text(&csv_path, &csv)?;
            print!("{csv}");
            files.push(csv_path);
            let refs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
            Manifest::record(&out, "edit", &cfg, &refs)?;
        }
        Cmd::Eval { suite, checkpoint, system, n } => {
            let n = n.unwrap_or(cfg.eval_per_category);
            let model = match (system, &checkpoint) {
                (System::Model, Some(p)) => Some(load_model(p)?.0),
                (System::Model, None) => bail!(ovu_core::Error::Config("--system model needs --checkpoint".into())),
                _ => None,
            };
            let sampler = SamplerConfig { seed: cfg.seed, ..cfg.sampler };
            fs::create_dir_all(&dir)?;
            let (name, csv, table) = match suite {
                Suite::GenevalToy => {
                    let mut runner;
                    let gen: &mut dyn Generator = match system {
                        System::Model => {
                            runner = ModelRunner { model: model.as_ref().unwrap(), sampler, batch: cfg.batch_size };
                            &mut runner
                        }
                        System::Oracle => &mut OracleGenerator,
                        System::Noise => &mut NoiseGenerator,
                        System::Identity => bail!(ovu_core::Error::Config("identity applies to edit-toy only".into())),
                    };
                    let r = evaluate_geneval_toy(gen, n, cfg.eval_seed)?;
                    ("geneval_toy", r.to_csv(), r.table())
                }
                Suite::EditToy => {
                    let mut runner;
                    let ed: &mut dyn Editor = match system {
                        System::Model => {
                            runner = ModelRunner { model: model.as_ref().unwrap(), sampler, batch: cfg.batch_size };
                            &mut runner
                        }
                        System::Oracle => &mut OracleEditor,
                        System::Identity => &mut IdentityEditor,
                        System::Noise => bail!(ovu_core::Error::Config("noise applies to geneval-toy only".into())),
                    };
                    let r = evaluate_edit_toy(ed, n, cfg.eval_seed)?;
                    ("edit_toy", r.to_csv(), r.table())
                }
            };
            let path = dir.join(format!("{name}.csv"));
            write_text(&path, &csv)?;
            print!("{table}");
            Manifest::record(&dir, &format!("eval {name}"), &cfg, &[&path])?;
        }
        Cmd::AblateRefiner { steps, eval_n } => {
            let mut run = cfg.clone();
            if let Some(s) = steps {
                run.ablation_steps = s;
            }
            fs::create_dir_all(&dir)?;
            let (report, _) = ablate_refiner(&run, eval_n, &mut |l| eprintln!("{l}"))?;
            let path = dir.join("ablate_refiner.csv");
            write_text(&path, &report.to_csv())?;
            print!("{}", report.table());
            Manifest::record(&dir, "ablate-refiner", &run, &[&path])?;
        }
        Cmd::Inspect { checkpoint, preset } => match (checkpoint, preset) {
            (Some(p), _) => {
                let (model, meta) = load_model(&p)?;
                print!("{}", counts_table(&model.module_counts()));
                println!("lineage: {}", serde_json::to_string(&meta.lineage)?);
                println!("step: {}", meta.step);
                println!("seed: {}", meta.seed);
                println!("rng: {}", meta.rng_state);
            }
            (None, p) => {
                let preset = match p {
                    Some(PresetArg::PaperScale) => Preset::PaperScale,
                    Some(PresetArg::Toy) => Preset::Toy,
                    None => cfg.preset,
                };
                let counts = param_counts(&RunConfig { preset, ..cfg }.model_config())?;
                debug_assert!(counts.iter().map(|c| c.0).eq(MODULES));
                print!("{}", counts_table(&counts));
            }
        },
    }
    Ok(())
}

/// `ovu_core` error class for the first core error in the chain, else a CLI class.
fn error_class(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<ovu_core::Error>().map(|e| e.class()))
        .unwrap_or_else(|| {
            if e.chain().any(|c| c.is::<run_dir::LockHeld>()) {
                "lock"
            } else if e.chain().any(|c| c.is::<std::io::Error>()) {
                "io"
            } else {
                "cli"
            }
        })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&e));
            ExitCode::FAILURE
        }
    }
}
