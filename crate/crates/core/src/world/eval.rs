//! Programmatic scoring of generated and edited images with the scene parser.
//! Scorers only see pixels; the system under test sits behind [`Generator`]
//! and [`Editor`].

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grammar::Prompt;
use super::scene::{parse, render, SceneSpec, CANVAS};
use super::tasks::{sample_edit_kind, sample_scene_prompt, untouched_objects, EditKind, EvalCategory, TrainingExample};
use crate::error::Result;
use crate::image::Image;
use crate::model::UnifiedModel;
use crate::sampler::SamplerConfig;
use crate::tensor::Scalar;

/// One benchmark prompt. `scene` is the reference the prompt was drawn from;
/// only oracle generators may look at it.
#[derive(Debug, Clone)]
pub struct GenCase {
    pub category: EvalCategory,
    pub prompt: Prompt,
    pub text: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone)]
pub struct EditCase {
    pub kind: EditKind,
    pub source: SceneSpec,
    pub source_image: Image,
    pub instruction: String,
    pub target: SceneSpec,
}

pub trait Generator {
    fn generate(&mut self, cases: &[GenCase], seed: u64) -> Result<Vec<Image>>;
}

pub trait Editor {
    fn edit(&mut self, cases: &[EditCase], seed: u64) -> Result<Vec<Image>>;
}

/// Renders the reference scene directly.
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&mut self, cases: &[GenCase], _seed: u64) -> Result<Vec<Image>> {
        Ok(cases.iter().map(|c| render(&c.scene)).collect())
    }
}

/// Uniform per-pixel noise.
pub struct NoiseGenerator;

pub fn noise_image<R: Rng>(rng: &mut R) -> Image {
    let data = (0..CANVAS * CANVAS * 3).map(|_| rng.gen::<f32>()).collect();
    Image::new(CANVAS, CANVAS, data).expect("canvas-sized buffer")
}

impl Generator for NoiseGenerator {
    fn generate(&mut self, cases: &[GenCase], seed: u64) -> Result<Vec<Image>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(cases.iter().map(|_| noise_image(&mut rng)).collect())
    }
}

/// Renders the target scene.
pub struct OracleEditor;

impl Editor for OracleEditor {
    fn edit(&mut self, cases: &[EditCase], _seed: u64) -> Result<Vec<Image>> {
        Ok(cases.iter().map(|c| render(&c.target)).collect())
    }
}

/// Returns the source unchanged.
pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn edit(&mut self, cases: &[EditCase], _seed: u64) -> Result<Vec<Image>> {
        Ok(cases.iter().map(|c| c.source_image.clone()).collect())
    }
}

/// A trained model sampled in chunks of `batch`.
pub struct ModelRunner<'m, T: Scalar> {
    pub model: &'m UnifiedModel<T>,
    pub sampler: SamplerConfig,
    pub batch: usize,
}

impl<T: Scalar> Generator for ModelRunner<'_, T> {
    fn generate(&mut self, cases: &[GenCase], seed: u64) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(cases.len());
        for (i, chunk) in cases.chunks(self.batch.max(1)).enumerate() {
            let prompts: Vec<&str> = chunk.iter().map(|c| c.text.as_str()).collect();
            let cfg = SamplerConfig { seed: seed.wrapping_add(i as u64), ..self.sampler };
            out.extend(self.model.generate(&prompts, &cfg)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Editor for ModelRunner<'_, T> {
    fn edit(&mut self, cases: &[EditCase], seed: u64) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(cases.len());
        for (i, chunk) in cases.chunks(self.batch.max(1)).enumerate() {
            let items: Vec<(&Image, &str)> = chunk.iter().map(|c| (&c.source_image, c.instruction.as_str())).collect();
            let cfg = SamplerConfig { seed: seed.wrapping_add(i as u64), ..self.sampler };
            out.extend(self.model.edit(&items, &cfg)?);
        }
        Ok(out)
    }
}

/// `n` prompts per category, a pure function of `seed`.
pub fn geneval_cases(n_per_category: usize, seed: u64) -> Vec<GenCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_category * EvalCategory::ALL.len());
    for category in EvalCategory::ALL {
        for _ in 0..n_per_category {
            let (scene, prompt) = sample_scene_prompt(category, &mut rng);
            out.push(GenCase { category, text: prompt.text(), prompt, scene });
        }
    }
    out
}

/// `n` edits per kind, a pure function of `seed`.
pub fn edit_cases(n_per_kind: usize, seed: u64) -> Vec<EditCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_kind * EditKind::ALL.len());
    for kind in EditKind::ALL {
        for _ in 0..n_per_kind {
            match sample_edit_kind(kind, &mut rng) {
                TrainingExample::Edit { kind, source, source_image, instruction, target, .. } => {
                    out.push(EditCase { kind, source, source_image, instruction, target })
                }
                _ => unreachable!("edit sampler"),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenevalReport {
    pub n_per_category: usize,
    pub scores: Vec<(EvalCategory, f64)>,
    pub overall: f64,
}

impl GenevalReport {
    pub fn score(&self, category: EvalCategory) -> f64 {
        self.scores.iter().find(|(c, _)| *c == category).map(|s| s.1).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,n,score\n");
        for (c, v) in &self.scores {
            let _ = writeln!(s, "{},{},{v:.4}", c.name(), self.n_per_category);
        }
        let _ = writeln!(s, "overall,{},{:.4}", self.n_per_category * self.scores.len(), self.overall);
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for (c, v) in &self.scores {
            let _ = writeln!(s, "{:<18} {v:>6.3}", c.name());
        }
        let _ = writeln!(s, "{:<18} {:>6.3}", "overall", self.overall);
        s
    }
}

/// Scores images against their prompts; overall is the category mean.
pub fn score_geneval(cases: &[GenCase], images: &[Image], n_per_category: usize) -> GenevalReport {
    let scores: Vec<(EvalCategory, f64)> = EvalCategory::ALL
        .iter()
        .map(|&cat| {
            let (hit, n) = cases.iter().zip(images).filter(|(c, _)| c.category == cat).fold((0, 0), |(h, n), (c, img)| {
                let ok = cat.satisfied(&c.prompt, &parse(img).confident_spec());
                (h + ok as usize, n + 1)
            });
            (cat, if n == 0 { 0.0 } else { hit as f64 / n as f64 })
        })
        .collect();
    let overall = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
    GenevalReport { n_per_category, scores, overall }
}

pub fn evaluate_geneval_toy(gen: &mut dyn Generator, n_per_category: usize, seed: u64) -> Result<GenevalReport> {
    let cases = geneval_cases(n_per_category, seed);
    let images = gen.generate(&cases, seed)?;
    Ok(score_geneval(&cases, &images, n_per_category))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRow {
    pub kind: EditKind,
    pub n: usize,
    /// Parsed output equals the target scene.
    pub success: f64,
    /// Every object the edit should not touch is still present.
    pub preservation: f64,
    /// Both of the above.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub rows: Vec<EditRow>,
    pub overall: f64,
}

impl EditReport {
    pub fn row(&self, kind: EditKind) -> Option<&EditRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("edit,n,success,preservation,score\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4}", r.kind.label(), r.n, r.success, r.preservation, r.score);
        }
        let _ = writeln!(s, "overall,,,,{:.4}", self.overall);
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>12} {:>6}\n", "edit", "success", "preservation", "score");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>8.3} {:>12.3} {:>6.3}", r.kind.label(), r.success, r.preservation, r.score);
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>12} {:>6.3}", "overall", "", "", self.overall);
        s
    }
}

pub fn score_edits(cases: &[EditCase], images: &[Image]) -> EditReport {
    let rows: Vec<EditRow> = EditKind::ALL
        .iter()
        .filter_map(|&kind| {
            let mut acc = [0usize; 3];
            let mut n = 0;
            for (c, img) in cases.iter().zip(images).filter(|(c, _)| c.kind == kind) {
                let parsed = parse(img).confident_spec();
                let success = parsed == c.target.canonical();
                let kept = untouched_objects(kind, &c.source, &c.target).iter().all(|o| parsed.objects.contains(o));
                acc[0] += success as usize;
                acc[1] += kept as usize;
                acc[2] += (success && kept) as usize;
                n += 1;
            }
            (n > 0).then(|| {
                let f = |k: usize| k as f64 / n as f64;
                EditRow { kind, n, success: f(acc[0]), preservation: f(acc[1]), score: f(acc[2]) }
            })
        })
        .collect();
    let overall = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.score).sum::<f64>() / rows.len() as f64 };
    EditReport { rows, overall }
}

pub fn evaluate_edit_toy(editor: &mut dyn Editor, n_per_kind: usize, seed: u64) -> Result<EditReport> {
    let cases = edit_cases(n_per_kind, seed);
    let images = editor.edit(&cases, seed)?;
    Ok(score_edits(&cases, &images))
}
