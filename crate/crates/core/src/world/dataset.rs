//! On-disk dataset shards: a directory of PPM images plus `index.jsonl`,
//! one record per example, referencing its images by file name.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::tasks::{sample_edit, sample_t2i, sample_training_category, sample_understanding, EditKind, TrainingExample};
use crate::error::{Error, Result};
use crate::image::Image;

pub const INDEX: &str = "index.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardKind {
    Understanding,
    T2i,
    Editing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum Record {
    Understanding { image: String, scene: SceneSpec, question: String, answer: String },
    T2i { image: String, scene: SceneSpec, prompt: String },
    Edit { kind: EditKind, source_image: String, source: SceneSpec, instruction: String, target_image: String, target: SceneSpec },
}

/// Shard `index` of `kind`: a pure function of `(seed, kind, index)`.
pub fn generate_shard(kind: ShardKind, seed: u64, index: u64, len: usize) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 3 + kind as u64);
    (0..len)
        .map(|_| match kind {
            ShardKind::Understanding => sample_understanding(&mut rng),
            ShardKind::T2i => {
                let c = sample_training_category(&mut rng);
                sample_t2i(c, &mut rng)
            }
            ShardKind::Editing => sample_edit(&mut rng),
        })
        .collect()
}

pub fn write_shard(dir: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(fs::File::create(dir.join(INDEX))?);
    for (i, ex) in examples.iter().enumerate() {
        let put = |suffix: &str, img: &Image| -> Result<String> {
            let name = format!("{i:06}{suffix}.ppm");
            img.save_ppm(dir.join(&name))?;
            Ok(name)
        };
        let rec = match ex {
            TrainingExample::Understanding { scene, image, question, answer } => Record::Understanding {
                image: put("", image)?,
                scene: scene.clone(),
                question: question.clone(),
                answer: answer.clone(),
            },
            TrainingExample::T2i { scene, prompt, image } => {
                Record::T2i { image: put("", image)?, scene: scene.clone(), prompt: prompt.clone() }
            }
            TrainingExample::Edit { kind, source, source_image, instruction, target, target_image } => Record::Edit {
                kind: *kind,
                source_image: put("_src", source_image)?,
                source: source.clone(),
                instruction: instruction.clone(),
                target_image: put("_tgt", target_image)?,
                target: target.clone(),
            },
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_shard(dir: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let dir = dir.as_ref();
    let index = BufReader::new(fs::File::open(dir.join(INDEX))?);
    let mut out = Vec::new();
    for (n, line) in index.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{INDEX} line {}: {e}", n + 1)))?;
        let img = |name: &str| Image::load_ppm(dir.join(name));
        out.push(match rec {
            Record::Understanding { image, scene, question, answer } => {
                TrainingExample::Understanding { image: img(&image)?, scene, question, answer }
            }
            Record::T2i { image, scene, prompt } => TrainingExample::T2i { image: img(&image)?, scene, prompt },
            Record::Edit { kind, source_image, source, instruction, target_image, target } => TrainingExample::Edit {
                kind,
                source_image: img(&source_image)?,
                source,
                instruction,
                target_image: img(&target_image)?,
                target,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_round_trip_and_regenerate_identically() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ShardKind::Understanding, ShardKind::T2i, ShardKind::Editing] {
            let ex = generate_shard(kind, 4, 1, 6);
            assert_eq!(ex, generate_shard(kind, 4, 1, 6));
            let d = dir.path().join(format!("{kind:?}"));
            write_shard(&d, &ex).unwrap();
            assert_eq!(read_shard(&d).unwrap(), ex);
            let again = dir.path().join(format!("{kind:?}-2"));
            write_shard(&again, &generate_shard(kind, 4, 1, 6)).unwrap();
            assert_eq!(fs::read(d.join(INDEX)).unwrap(), fs::read(again.join(INDEX)).unwrap());
        }
    }
}
