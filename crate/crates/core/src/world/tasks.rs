//! Task generators: text-to-image pairs, visual question answering, and
//! instruction edits, all drawn deterministically from a seeded RNG.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{location_text, Phrase, Prompt, Relation, NUMBER_WORDS};
use super::scene::{render, Cell, Color, Object, SceneSpec, Shape, Size, GRID, MAX_OBJECTS};
use crate::image::Image;

/// The six compositional categories of the toy generation benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCategory {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    AttributeBinding,
}

impl EvalCategory {
    pub const ALL: [EvalCategory; 6] = [
        EvalCategory::SingleObject,
        EvalCategory::TwoObject,
        EvalCategory::Counting,
        EvalCategory::Colors,
        EvalCategory::Position,
        EvalCategory::AttributeBinding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalCategory::SingleObject => "single_object",
            EvalCategory::TwoObject => "two_object",
            EvalCategory::Counting => "counting",
            EvalCategory::Colors => "colors",
            EvalCategory::Position => "position",
            EvalCategory::AttributeBinding => "attribute_binding",
        }
    }

    /// Whether `scene` satisfies `prompt` under this category's scoring rule.
    /// Single/two-object and position check object classes only; colors and
    /// attribute binding also check color; counting checks the exact count.
    pub fn satisfied(self, prompt: &Prompt, scene: &SceneSpec) -> bool {
        let class_only = |p: &Phrase| Phrase { shape: p.shape, color: None, size: None, cell: None };
        let with_color = |p: &Phrase| Phrase { shape: p.shape, color: p.color, size: None, cell: None };
        let reduced = match (self, prompt) {
            (EvalCategory::SingleObject, Prompt::One(p)) => Prompt::One(class_only(p)),
            (EvalCategory::Colors, Prompt::One(p)) => Prompt::One(with_color(p)),
            (EvalCategory::TwoObject, Prompt::Two(a, b)) => Prompt::Two(class_only(a), class_only(b)),
            (EvalCategory::AttributeBinding, Prompt::Two(a, b)) => Prompt::Two(with_color(a), with_color(b)),
            (EvalCategory::Position, Prompt::Relation(a, r, b)) => Prompt::Relation(class_only(a), *r, class_only(b)),
            (EvalCategory::Counting, p @ Prompt::Count { .. }) => p.clone(),
            _ => return false,
        };
        reduced.satisfied_by(scene)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Add,
    Remove,
    Recolor,
    Move,
}

impl EditKind {
    pub const ALL: [EditKind; 4] = [EditKind::Add, EditKind::Remove, EditKind::Recolor, EditKind::Move];

    /// Report label, with the editing-benchmark role in parentheses.
    pub fn label(self) -> &'static str {
        match self {
            EditKind::Add => "add",
            EditKind::Remove => "remove",
            EditKind::Recolor => "recolor(adjust)",
            EditKind::Move => "move(action)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingExample {
    Understanding { scene: SceneSpec, image: Image, question: String, answer: String },
    T2i { scene: SceneSpec, prompt: String, image: Image },
    Edit { kind: EditKind, source: SceneSpec, source_image: Image, instruction: String, target: SceneSpec, target_image: Image },
}

fn pick<T: Copy, R: Rng>(rng: &mut R, xs: &[T]) -> T {
    *xs.choose(rng).expect("nonempty choice")
}

fn random_object<R: Rng>(rng: &mut R, cell: Cell) -> Object {
    Object { shape: pick(rng, &Shape::ALL), color: pick(rng, &Color::ALL), cell, size: pick(rng, &Size::ALL) }
}

fn distinct_cells<R: Rng>(rng: &mut R, n: usize) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Cell::all().collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

/// Describes an object with color always and size/location each at 50%.
fn describe<R: Rng>(rng: &mut R, o: &Object, allow_cell: bool) -> Phrase {
    Phrase {
        shape: o.shape,
        color: Some(o.color),
        size: rng.gen_bool(0.5).then_some(o.size),
        cell: (allow_cell && rng.gen_bool(0.5)).then_some(o.cell),
    }
}

/// A scene and a caption from the given category's template.
pub fn sample_scene_prompt<R: Rng>(category: EvalCategory, rng: &mut R) -> (SceneSpec, Prompt) {
    match category {
        EvalCategory::SingleObject | EvalCategory::Colors => {
            let cell = distinct_cells(rng, 1)[0];
            let o = random_object(rng, cell);
            let p = Prompt::One(describe(rng, &o, true));
            (SceneSpec::new(vec![o]), p)
        }
        EvalCategory::TwoObject | EvalCategory::AttributeBinding => {
            let cells = distinct_cells(rng, 2);
            let a = random_object(rng, cells[0]);
            let mut b = random_object(rng, cells[1]);
            if category == EvalCategory::TwoObject {
                while b.shape == a.shape {
                    b.shape = pick(rng, &Shape::ALL);
                }
            } else {
                while b.color == a.color {
                    b.color = pick(rng, &Color::ALL);
                }
            }
            let p = Prompt::Two(describe(rng, &a, true), describe(rng, &b, true));
            (SceneSpec::new(vec![a, b]), p)
        }
        EvalCategory::Position => {
            let rel = pick(rng, &Relation::ALL);
            let (ca, cb) = loop {
                let cells = distinct_cells(rng, 2);
                if rel.holds(cells[0], cells[1]) {
                    break (cells[0], cells[1]);
                }
            };
            let a = random_object(rng, ca);
            let mut b = random_object(rng, cb);
            while b.shape == a.shape {
                b.shape = pick(rng, &Shape::ALL);
            }
            let p = Prompt::Relation(describe(rng, &a, false), rel, describe(rng, &b, false));
            (SceneSpec::new(vec![a, b]), p)
        }
        EvalCategory::Counting => {
            let n = rng.gen_range(2..=MAX_OBJECTS);
            let shape = pick(rng, &Shape::ALL);
            let color = rng.gen_bool(0.5).then(|| pick(rng, &Color::ALL));
            let objs = distinct_cells(rng, n)
                .into_iter()
                .map(|cell| Object {
                    shape,
                    color: color.unwrap_or_else(|| pick(rng, &Color::ALL)),
                    cell,
                    size: pick(rng, &Size::ALL),
                })
                .collect();
            (SceneSpec::new(objs), Prompt::Count { n, color, shape })
        }
    }
}

pub fn sample_t2i<R: Rng>(category: EvalCategory, rng: &mut R) -> TrainingExample {
    let (scene, prompt) = sample_scene_prompt(category, rng);
    TrainingExample::T2i { image: render(&scene), prompt: prompt.text(), scene }
}

/// Random valid scene with `1..=max` objects.
pub fn random_scene<R: Rng>(rng: &mut R, max: usize) -> SceneSpec {
    let n = rng.gen_range(1..=max.min(MAX_OBJECTS));
    SceneSpec::new(distinct_cells(rng, n).into_iter().map(|c| random_object(rng, c)).collect())
}

pub fn sample_understanding<R: Rng>(rng: &mut R) -> TrainingExample {
    let scene = random_scene(rng, 3);
    let (question, answer) = match rng.gen_range(0..3) {
        0 => {
            let shape = pick(rng, &Shape::ALL);
            let n = scene.objects.iter().filter(|o| o.shape == shape).count();
            (format!("how many {}s?", shape.name()), NUMBER_WORDS[n].to_string())
        }
        1 => {
            let o = scene.objects[rng.gen_range(0..scene.objects.len())];
            if scene.objects.iter().filter(|x| x.shape == o.shape).count() == 1 {
                (format!("what color is the {}?", o.shape.name()), o.color.name().to_string())
            } else {
                (format!("where is the {} {}?", o.color.name(), o.shape.name()), location_text(o.cell))
            }
        }
        _ => {
            let o = scene.objects[rng.gen_range(0..scene.objects.len())];
            (format!("what shape is at {}?", location_text(o.cell)), o.shape.name().to_string())
        }
    };
    TrainingExample::Understanding { image: render(&scene), scene, question, answer }
}

/// Source scene whose (color, shape) pairs are unique so references resolve.
fn edit_source<R: Rng>(rng: &mut R, max: usize) -> SceneSpec {
    loop {
        let s = random_scene(rng, max);
        let mut keys: Vec<(Color, Shape)> = s.objects.iter().map(|o| (o.color, o.shape)).collect();
        keys.sort();
        keys.dedup();
        if keys.len() == s.objects.len() {
            return s;
        }
    }
}

fn reference(o: &Object) -> String {
    format!("the {} {}", o.color.name(), o.shape.name())
}

/// An edit of the given kind applied to a fresh source scene.
pub fn sample_edit_kind<R: Rng>(kind: EditKind, rng: &mut R) -> TrainingExample {
    let source = edit_source(rng, 3);
    let idx = rng.gen_range(0..source.objects.len());
    let target_obj = source.objects[idx];
    let mut objects = source.objects.clone();
    let instruction = match kind {
        EditKind::Recolor => {
            let mut c = pick(rng, &Color::ALL);
            while c == target_obj.color
                || source.objects.iter().any(|o| o.color == c && o.shape == target_obj.shape)
            {
                c = pick(rng, &Color::ALL);
            }
            objects[idx].color = c;
            format!("make {} {}", reference(&target_obj), c.name())
        }
        EditKind::Remove => {
            objects.remove(idx);
            format!("remove {}", reference(&target_obj))
        }
        EditKind::Move => {
            let cell = pick(rng, &source.free_cells());
            objects[idx].cell = cell;
            format!("move {} to {}", reference(&target_obj), location_text(cell))
        }
        EditKind::Add => {
            let cell = pick(rng, &source.free_cells());
            let new = random_object(rng, cell);
            objects.push(new);
            format!("add {}", Phrase::of(&new).text())
        }
    };
    let target = SceneSpec::new(objects);
    TrainingExample::Edit {
        kind,
        source_image: render(&source),
        target_image: render(&target),
        instruction,
        source,
        target,
    }
}

pub fn sample_edit<R: Rng>(rng: &mut R) -> TrainingExample {
    let kind = pick(rng, &EditKind::ALL);
    sample_edit_kind(kind, rng)
}

/// Category used for a training caption: uniform over the six templates.
pub fn sample_training_category<R: Rng>(rng: &mut R) -> EvalCategory {
    pick(rng, &EvalCategory::ALL)
}

/// Cells that stay put under an edit: every source object except the edited one.
pub fn untouched_objects(kind: EditKind, source: &SceneSpec, target: &SceneSpec) -> Vec<Object> {
    match kind {
        EditKind::Add => source.objects.clone(),
        _ => source.objects.iter().filter(|o| target.objects.contains(o)).copied().collect(),
    }
}

pub const GRID_SIDE: usize = GRID;
