//! Caption grammar over scenes, its parser, and constraint checking.
//!
//! ```text
//! phrase   := "a " [size " "] [color " "] shape [" at " row " " col]
//! prompt   := phrase
//!           | phrase " and " phrase
//!           | phrase " " relation " " phrase
//!           | number " " [color " "] shape "s"
//! relation := "left of" | "right of" | "above" | "below"
//! ```

use serde::{Deserialize, Serialize};

use super::scene::{Cell, Color, Object, SceneSpec, Shape, Size};
use crate::error::{Error, Result};

pub const ROW_WORDS: [&str; 4] = ["top", "upper", "lower", "bottom"];
pub const COL_WORDS: [&str; 4] = ["far left", "left", "right", "far right"];
pub const NUMBER_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::LeftOf => a.col < b.col,
            Relation::RightOf => a.col > b.col,
            Relation::Above => a.row < b.row,
            Relation::Below => a.row > b.row,
        }
    }
}

/// One object description; unset fields are unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub cell: Option<Cell>,
}

impl Phrase {
    pub fn of(obj: &Object) -> Self {
        Self { shape: obj.shape, color: Some(obj.color), size: Some(obj.size), cell: Some(obj.cell) }
    }

    pub fn matches(&self, obj: &Object) -> bool {
        obj.shape == self.shape
            && self.color.is_none_or(|c| c == obj.color)
            && self.size.is_none_or(|s| s == obj.size)
            && self.cell.is_none_or(|c| c == obj.cell)
    }

    pub fn text(&self) -> String {
        let mut s = String::from("a ");
        if let Some(z) = self.size {
            s.push_str(z.name());
            s.push(' ');
        }
        if let Some(c) = self.color {
            s.push_str(c.name());
            s.push(' ');
        }
        s.push_str(self.shape.name());
        if let Some(c) = self.cell {
            s.push_str(" at ");
            s.push_str(&location_text(c));
        }
        s
    }
}

pub fn location_text(c: Cell) -> String {
    format!("{} {}", ROW_WORDS[c.row as usize], COL_WORDS[c.col as usize])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    One(Phrase),
    Two(Phrase, Phrase),
    Relation(Phrase, Relation, Phrase),
    Count { n: usize, color: Option<Color>, shape: Shape },
}

impl Prompt {
    pub fn text(&self) -> String {
        match self {
            Prompt::One(p) => p.text(),
            Prompt::Two(a, b) => format!("{} and {}", a.text(), b.text()),
            Prompt::Relation(a, r, b) => format!("{} {} {}", a.text(), r.words(), b.text()),
            Prompt::Count { n, color, shape } => match color {
                Some(c) => format!("{} {} {}s", NUMBER_WORDS[*n], c.name(), shape.name()),
                None => format!("{} {}s", NUMBER_WORDS[*n], shape.name()),
            },
        }
    }

    /// True when `scene` satisfies every constraint the prompt states.
    pub fn satisfied_by(&self, scene: &SceneSpec) -> bool {
        match self {
            Prompt::One(p) => scene.objects.iter().any(|o| p.matches(o)),
            Prompt::Two(a, b) => distinct_pair(scene, |x| a.matches(x), |y| b.matches(y), |_, _| true),
            Prompt::Relation(a, r, b) => {
                distinct_pair(scene, |x| a.matches(x), |y| b.matches(y), |x, y| r.holds(x.cell, y.cell))
            }
            Prompt::Count { n, color, shape } => {
                scene
                    .objects
                    .iter()
                    .filter(|o| o.shape == *shape && color.is_none_or(|c| c == o.color))
                    .count()
                    == *n
            }
        }
    }
}

/// True when two different objects satisfy `fa` and `fb` and jointly `rel`.
pub fn distinct_pair(
    scene: &SceneSpec,
    fa: impl Fn(&Object) -> bool,
    fb: impl Fn(&Object) -> bool,
    rel: impl Fn(&Object, &Object) -> bool,
) -> bool {
    scene.objects.iter().enumerate().any(|(i, a)| {
        fa(a) && scene.objects.iter().enumerate().any(|(j, b)| i != j && fb(b) && rel(a, b))
    })
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn eat(&mut self, lit: &str) -> bool {
        if let Some(r) = self.rest.strip_prefix(lit) {
            self.rest = r;
            true
        } else {
            false
        }
    }

    /// Longest-match choice among `words`.
    fn choose(&mut self, words: &[&str]) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (i, w) in words.iter().enumerate() {
            let followed = self.rest.strip_prefix(w).is_some_and(|r| r.is_empty() || r.starts_with(' ') || r.starts_with('s'));
            if followed && best.is_none_or(|(_, l)| w.len() > l) {
                best = Some((i, w.len()));
            }
        }
        let (i, l) = best?;
        self.rest = &self.rest[l..];
        Some(i)
    }
}

fn names<T: Copy>(all: &[T], f: impl Fn(T) -> &'static str) -> Vec<&'static str> {
    all.iter().map(|&x| f(x)).collect()
}

fn parse_phrase(c: &mut Cursor) -> Option<Phrase> {
    if !c.eat("a ") {
        return None;
    }
    let mut size = None;
    if let Some(i) = c.choose(&names(&Size::ALL, Size::name)) {
        size = Some(Size::ALL[i]);
        c.eat(" ");
    }
    let mut color = None;
    if let Some(i) = c.choose(&names(&Color::ALL, Color::name)) {
        color = Some(Color::ALL[i]);
        c.eat(" ");
    }
    let shape = Shape::ALL[c.choose(&names(&Shape::ALL, Shape::name))?];
    let mut cell = None;
    if c.eat(" at ") {
        let r = c.choose(&ROW_WORDS)?;
        if !c.eat(" ") {
            return None;
        }
        let col = c.choose(&COL_WORDS)?;
        cell = Some(Cell::new(r, col));
    }
    Some(Phrase { shape, color, size, cell })
}

/// Parses a caption produced by [`Prompt::text`].
pub fn parse_prompt(text: &str) -> Result<Prompt> {
    let err = || Error::Format(format!("caption not in grammar: {text:?}"));
    let mut c = Cursor { rest: text };
    if let Some(n) = c.choose(&NUMBER_WORDS) {
        if !c.eat(" ") {
            return Err(err());
        }
        let color = c.choose(&names(&Color::ALL, Color::name)).map(|i| Color::ALL[i]);
        if color.is_some() {
            c.eat(" ");
        }
        let shape = Shape::ALL[c.choose(&names(&Shape::ALL, Shape::name)).ok_or_else(err)?];
        if !c.eat("s") || !c.rest.is_empty() {
            return Err(err());
        }
        return Ok(Prompt::Count { n, color, shape });
    }
    let a = parse_phrase(&mut c).ok_or_else(err)?;
    if c.rest.is_empty() {
        return Ok(Prompt::One(a));
    }
    if c.eat(" and ") {
        let b = parse_phrase(&mut c).ok_or_else(err)?;
        return if c.rest.is_empty() { Ok(Prompt::Two(a, b)) } else { Err(err()) };
    }
    for r in Relation::ALL {
        if c.eat(&format!(" {} ", r.words())) {
            let b = parse_phrase(&mut c).ok_or_else(err)?;
            return if c.rest.is_empty() { Ok(Prompt::Relation(a, r, b)) } else { Err(err()) };
        }
    }
    Err(err())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_caption_parses() {
        let p = parse_prompt("a red circle left of a blue square").unwrap();
        match p {
            Prompt::Relation(a, Relation::LeftOf, b) => {
                assert_eq!((a.shape, a.color), (Shape::Circle, Some(Color::Red)));
                assert_eq!((b.shape, b.color), (Shape::Square, Some(Color::Blue)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_phrase_roundtrip() {
        let p = Prompt::One(Phrase {
            shape: Shape::Triangle,
            color: Some(Color::White),
            size: Some(Size::Large),
            cell: Some(Cell::new(3, 0)),
        });
        assert_eq!(p.text(), "a large white triangle at bottom far left");
        assert_eq!(parse_prompt(&p.text()).unwrap(), p);
        let c = Prompt::Count { n: 3, color: None, shape: Shape::Square };
        assert_eq!(parse_prompt(&c.text()).unwrap(), c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_prompt("an elephant").is_err());
        assert!(parse_prompt("a red circle and").is_err());
    }
}
