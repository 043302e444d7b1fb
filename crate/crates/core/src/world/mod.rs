//! Synthetic shapes world: scenes, captions, task datasets and the
//! programmatic evaluators.

pub mod dataset;
pub mod eval;
pub mod grammar;
pub mod scene;
pub mod tasks;

pub use grammar::{parse_prompt, Phrase, Prompt, Relation};
pub use scene::{parse, render, Cell, Color, Object, ParsedScene, SceneSpec, Shape, Size};
pub use tasks::{EditKind, EvalCategory, TrainingExample};
