//! Symbolic scenes of colored shapes on a 4x4 grid, their rasterization, and
//! the inverse parser used as the evaluation oracle.

use serde::{Deserialize, Serialize};

use crate::image::Image;

pub const CANVAS: usize = 64;
pub const GRID: usize = 4;
pub const CELL: usize = CANVAS / GRID;
pub const MAX_OBJECTS: usize = 4;
pub const SMALL_SIDE: usize = 8;
pub const LARGE_SIDE: usize = 14;

pub const BACKGROUND: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::White,
    ];

    /// Exact palette RGB used by the renderer.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 40],
            Color::Blue => [40, 70, 235],
            Color::Yellow => [240, 225, 30],
            Color::Purple => [165, 50, 215],
            Color::Orange => [245, 135, 20],
            Color::Cyan => [30, 215, 215],
            Color::White => [245, 245, 245],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn side(self) -> usize {
        match self {
            Size::Small => SMALL_SIDE,
            Size::Large => LARGE_SIDE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// Grid cell, `row` from the top, `col` from the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row: row as u8, col: col as u8 }
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID).flat_map(|r| (0..GRID).map(move |c| Cell::new(r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
}

impl SceneSpec {
    pub fn new(mut objects: Vec<Object>) -> Self {
        objects.sort_by_key(|o| o.cell);
        Self { objects }
    }

    /// At most four objects, each in its own cell.
    pub fn is_valid(&self) -> bool {
        if self.objects.len() > MAX_OBJECTS {
            return false;
        }
        let mut cells: Vec<Cell> = self.objects.iter().map(|o| o.cell).collect();
        cells.sort();
        cells.dedup();
        cells.len() == self.objects.len()
            && cells.iter().all(|c| (c.row as usize) < GRID && (c.col as usize) < GRID)
    }

    /// Canonical form: objects ordered by cell.
    pub fn canonical(&self) -> SceneSpec {
        SceneSpec::new(self.objects.clone())
    }

    pub fn object_at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        Cell::all().filter(|c| self.object_at(*c).is_none()).collect()
    }
}

fn covers(shape: Shape, side: usize, dx: usize, dy: usize) -> bool {
    let s = side as f32;
    let px = dx as f32 + 0.5;
    let py = dy as f32 + 0.5;
    let c = s / 2.0;
    match shape {
        Shape::Square => true,
        Shape::Circle => (px - c).powi(2) + (py - c).powi(2) <= c * c,
        Shape::Triangle => (px - c).abs() <= py / s * c,
    }
}

fn origin(obj: &Object) -> (usize, usize) {
    let side = obj.size.side();
    let off = (CELL - side) / 2;
    (obj.cell.col as usize * CELL + off, obj.cell.row as usize * CELL + off)
}

/// Deterministic rasterization onto a black 64x64 canvas.
pub fn render(spec: &SceneSpec) -> Image {
    let bg = BACKGROUND.map(|v| v as f32 / 255.0);
    let mut img = Image::filled(CANVAS, CANVAS, bg);
    for obj in &spec.objects {
        let rgb = obj.color.rgb().map(|v| v as f32 / 255.0);
        let side = obj.size.side();
        let (x0, y0) = origin(obj);
        for dy in 0..side {
            for dx in 0..side {
                if covers(obj.shape, side, dx, dy) {
                    img.set_pixel(x0 + dx, y0 + dy, rgb);
                }
            }
        }
    }
    img
}

/// Maximum RGB distance (0..255 scale) at which a pixel is assigned to a
/// palette color; farther pixels count as background.
pub const COLOR_TOLERANCE: f32 = 70.0;
/// Components smaller than this many pixels are ignored.
pub const MIN_AREA: usize = 14;
/// Bounding-box sides at or above this are classified as large.
pub const LARGE_THRESHOLD: usize = 11;
/// Objects at or above this confidence count as detected.
pub const CONFIDENT: f32 = 0.5;
/// Fill-ratio distance at which shape confidence reaches zero.
const FILL_TOLERANCE: f32 = 0.16;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedObject {
    pub object: Object,
    pub confidence: f32,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedScene {
    pub objects: Vec<ParsedObject>,
}

impl ParsedScene {
    /// Confident detections as a scene; when two claim a cell the larger wins.
    pub fn confident_spec(&self) -> SceneSpec {
        let mut best: Vec<&ParsedObject> = Vec::new();
        for o in self.objects.iter().filter(|o| o.confidence >= CONFIDENT) {
            match best.iter_mut().find(|b| b.object.cell == o.object.cell) {
                Some(b) if b.area < o.area => *b = o,
                Some(_) => {}
                None => best.push(o),
            }
        }
        SceneSpec::new(best.into_iter().map(|o| o.object).collect())
    }
}

fn reference_fill(shape: Shape, size: Size) -> f32 {
    let side = size.side();
    let mut area = 0;
    let (mut minx, mut maxx, mut miny, mut maxy) = (side, 0, side, 0);
    for dy in 0..side {
        for dx in 0..side {
            if covers(shape, side, dx, dy) {
                area += 1;
                minx = minx.min(dx);
                maxx = maxx.max(dx);
                miny = miny.min(dy);
                maxy = maxy.max(dy);
            }
        }
    }
    area as f32 / ((maxx - minx + 1) * (maxy - miny + 1)) as f32
}

fn nearest_color(px: [f32; 3]) -> Option<Color> {
    let p = px.map(|v| v * 255.0);
    let dist = |c: [u8; 3]| {
        ((p[0] - c[0] as f32).powi(2) + (p[1] - c[1] as f32).powi(2) + (p[2] - c[2] as f32).powi(2)).sqrt()
    };
    let bg = dist(BACKGROUND);
    let (best, d) = Color::ALL
        .iter()
        .map(|&c| (c, dist(c.rgb())))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("palette nonempty");
    (d <= COLOR_TOLERANCE && d < bg).then_some(best)
}

/// Recovers a scene from a 64x64 image by palette segmentation, 4-connected
/// components and fill-ratio shape classification. Never fails: unstructured
/// input simply yields few or no confident objects.
pub fn parse(img: &Image) -> ParsedScene {
    let img = if img.width != CANVAS || img.height != CANVAS {
        img.resize_bilinear(CANVAS, CANVAS)
    } else {
        img.clone()
    };
    let labels: Vec<Option<Color>> = (0..CANVAS * CANVAS)
        .map(|i| nearest_color(img.pixel(i % CANVAS, i / CANVAS)))
        .collect();
    let mut seen = vec![false; CANVAS * CANVAS];
    let mut out = ParsedScene::default();
    let mut stack = Vec::new();
    for start in 0..CANVAS * CANVAS {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut minx, mut maxx, mut miny, mut maxy) = (0usize, CANVAS, 0, CANVAS, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % CANVAS, i / CANVAS);
            area += 1;
            minx = minx.min(x);
            maxx = maxx.max(x);
            miny = miny.min(y);
            maxy = maxy.max(y);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < CANVAS {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - CANVAS);
            }
            if y + 1 < CANVAS {
                visit(i + CANVAS);
            }
        }
        if area < MIN_AREA {
            continue;
        }
        if let Some(obj) = classify(color, area, minx, maxx, miny, maxy) {
            out.objects.push(obj);
        }
    }
    out
}

fn classify(color: Color, area: usize, minx: usize, maxx: usize, miny: usize, maxy: usize) -> Option<ParsedObject> {
    let (w, h) = (maxx - minx + 1, maxy - miny + 1);
    let side = w.max(h);
    if side > CELL + 2 || side < 5 {
        return None;
    }
    let aspect_penalty = {
        let diff = w.abs_diff(h) as f32;
        let allowed = (side as f32 * 0.25).max(2.0);
        (1.0 - (diff / allowed - 1.0).max(0.0)).clamp(0.0, 1.0)
    };
    let size = if side >= LARGE_THRESHOLD { Size::Large } else { Size::Small };
    let fill = area as f32 / (w * h) as f32;
    let (shape, dist) = Shape::ALL
        .iter()
        .map(|&s| (s, (fill - reference_fill(s, size)).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("shapes nonempty");
    let confidence = (1.0 - dist / FILL_TOLERANCE).clamp(0.0, 1.0) * aspect_penalty;
    let cx = (minx + maxx + 1) as f32 / 2.0;
    let cy = (miny + maxy + 1) as f32 / 2.0;
    let cell = Cell::new(
        ((cy / CELL as f32) as usize).min(GRID - 1),
        ((cx / CELL as f32) as usize).min(GRID - 1),
    );
    Some(ParsedObject { object: Object { shape, color, cell, size }, confidence, area })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_blank_canvas() {
        let img = render(&SceneSpec::default());
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert!(parse(&img).objects.is_empty());
    }

    #[test]
    fn every_single_object_roundtrips() {
        for shape in Shape::ALL {
            for color in Color::ALL {
                for size in Size::ALL {
                    for cell in Cell::all() {
                        let s = SceneSpec::new(vec![Object { shape, color, cell, size }]);
                        assert_eq!(parse(&render(&s)).confident_spec(), s, "{s:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn reference_fills_are_well_separated() {
        for size in Size::ALL {
            let f: Vec<f32> = Shape::ALL.iter().map(|&s| reference_fill(s, size)).collect();
            assert!(f[1] - f[0] > 0.15 && f[0] - f[2] > 0.15, "{size:?}: {f:?}");
        }
    }

    #[test]
    fn validity_rules() {
        let o = Object { shape: Shape::Circle, color: Color::Red, cell: Cell::new(0, 0), size: Size::Small };
        assert!(SceneSpec::new(vec![o]).is_valid());
        assert!(!SceneSpec::new(vec![o, o]).is_valid());
    }
}
