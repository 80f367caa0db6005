//! Scene layout, the referring-expression grammar and rasterisation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{COLORS, SHAPES, SIZES};
use crate::model::BoundingBox;

pub const GRID: usize = 4;
pub const BACKGROUND: f64 = 0.5;

pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.8, 0.0],
    [0.0, 0.2, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        SIZES[self as usize]
    }

    /// Half extent as a fraction of the grid cell.
    pub fn half_extent(self) -> f64 {
        match self {
            Size::Small => 0.25,
            Size::Large => 0.45,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into [`PALETTE`] / [`COLORS`].
    pub color: usize,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    fn center_px(&self, image_size: usize) -> (f64, f64) {
        let cell = image_size as f64 / GRID as f64;
        ((self.col as f64 + 0.5) * cell, (self.row as f64 + 0.5) * cell)
    }

    fn half_px(&self, image_size: usize) -> f64 {
        self.size.half_extent() * image_size as f64 / GRID as f64
    }

    /// Tight normalised box of the shape.
    pub fn bounding_box(&self, image_size: usize) -> BoundingBox<f64> {
        let (cx, cy) = self.center_px(image_size);
        let s = self.half_px(image_size);
        let n = image_size as f64;
        BoundingBox::new(cx / n, cy / n, 2.0 * s / n, 2.0 * s / n)
    }

    fn contains(&self, px: f64, py: f64, image_size: usize) -> bool {
        let (cx, cy) = self.center_px(image_size);
        let s = self.half_px(image_size);
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            // Apex at the top, base along the bottom edge of the box.
            Shape::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }

    pub fn words(&self) -> String {
        format!("{} {} {}", self.size.word(), COLORS[self.color], self.shape.word())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

impl SceneSpec {
    pub fn target_object(&self) -> &SceneObject {
        &self.objects[self.target]
    }

    /// Every object listed as `size color shape`, in row-major cell order.
    pub fn caption(&self) -> String {
        let mut objs: Vec<&SceneObject> = self.objects.iter().collect();
        objs.sort_by_key(|o| (o.row, o.col));
        objs.iter().map(|o| o.words()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Region {
    fn of(o: &SceneObject) -> Self {
        match (o.row < GRID / 2, o.col < GRID / 2) {
            (true, true) => Region::TopLeft,
            (true, false) => Region::TopRight,
            (false, true) => Region::BottomLeft,
            (false, false) => Region::BottomRight,
        }
    }

    fn words(self) -> &'static str {
        match self {
            Region::TopLeft => "top left",
            Region::TopRight => "top right",
            Region::BottomLeft => "bottom left",
            Region::BottomRight => "bottom right",
        }
    }
}

/// A parsed referring expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expression {
    /// `the [size] [color] <shape>`
    Attributes {
        size: Option<Size>,
        color: Option<usize>,
        shape: Shape,
    },
    /// `the <shape> left of the <shape>`
    Relational {
        shape: Shape,
        relation: Relation,
        anchor: Shape,
    },
    /// `the <color> <shape> in the <region>`
    Located { color: usize, shape: Shape, region: Region },
}

impl Expression {
    pub fn text(&self) -> String {
        match *self {
            Expression::Attributes { size, color, shape } => {
                let mut words = vec!["the"];
                if let Some(s) = size {
                    words.push(s.word());
                }
                if let Some(c) = color {
                    words.push(COLORS[c]);
                }
                words.push(shape.word());
                words.join(" ")
            }
            Expression::Relational { shape, relation, anchor } => {
                let rel = match relation {
                    Relation::LeftOf => "left of",
                    Relation::RightOf => "right of",
                };
                format!("the {} {rel} the {}", shape.word(), anchor.word())
            }
            Expression::Located { color, shape, region } => {
                format!("the {} {} in the {}", COLORS[color], shape.word(), region.words())
            }
        }
    }

    /// Whether object `idx` of `scene` satisfies the expression.
    pub fn matches(&self, scene: &SceneSpec, idx: usize) -> bool {
        let o = &scene.objects[idx];
        match *self {
            Expression::Attributes { size, color, shape } => {
                o.shape == shape && size.is_none_or(|s| s == o.size) && color.is_none_or(|c| c == o.color)
            }
            Expression::Relational { shape, relation, anchor } => {
                o.shape == shape
                    && scene.objects.iter().enumerate().any(|(j, a)| {
                        j != idx
                            && a.shape == anchor
                            && match relation {
                                Relation::LeftOf => o.col < a.col,
                                Relation::RightOf => o.col > a.col,
                            }
                    })
            }
            Expression::Located { color, shape, region } => {
                o.color == color && o.shape == shape && Region::of(o) == region
            }
        }
    }

    pub fn match_count(&self, scene: &SceneSpec) -> usize {
        (0..scene.objects.len()).filter(|&i| self.matches(scene, i)).count()
    }

    /// Every grammar production that could describe the target of `scene`.
    pub fn candidates(scene: &SceneSpec) -> Vec<Expression> {
        let t = scene.target_object();
        let mut out = Vec::new();
        for size in [None, Some(t.size)] {
            for color in [None, Some(t.color)] {
                out.push(Expression::Attributes { size, color, shape: t.shape });
            }
        }
        for anchor in Shape::ALL {
            for relation in [Relation::LeftOf, Relation::RightOf] {
                out.push(Expression::Relational { shape: t.shape, relation, anchor });
            }
        }
        out.push(Expression::Located {
            color: t.color,
            shape: t.shape,
            region: Region::of(t),
        });
        out
    }

    /// Candidates that single out exactly the target.
    pub fn unique_candidates(scene: &SceneSpec) -> Vec<Expression> {
        Self::candidates(scene)
            .into_iter()
            .filter(|e| e.match_count(scene) == 1 && e.matches(scene, scene.target))
            .collect()
    }
}

/// Random scene with `1..=max_distractors` distractors on distinct cells.
pub fn sample_scene<R: Rng>(rng: &mut R, min_distractors: usize, max_distractors: usize) -> SceneSpec {
    let distractors = rng.gen_range(min_distractors..=max_distractors);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let objects: Vec<SceneObject> = cells[..distractors + 1]
        .iter()
        .map(|&cell| SceneObject {
            shape: Shape::ALL[rng.gen_range(0..3)],
            color: rng.gen_range(0..PALETTE.len()),
            size: if rng.gen_bool(0.5) { Size::Small } else { Size::Large },
            row: cell / GRID,
            col: cell % GRID,
        })
        .collect();
    let target = rng.gen_range(0..objects.len());
    SceneSpec { objects, target }
}

/// Renders `objects` on a grey background with `SUPERSAMPLE^2` coverage
/// anti-aliasing, quantised to 8-bit levels. Returns planar `[3, s, s]` data.
pub fn render(objects: &[SceneObject], image_size: usize) -> Vec<f64> {
    let s = image_size;
    let mut img = vec![BACKGROUND; 3 * s * s];
    let sub = SUPERSAMPLE as f64;
    for o in objects {
        let (cx, cy) = o.center_px(s);
        let half = o.half_px(s);
        let lo_x = ((cx - half).floor().max(0.0)) as usize;
        let hi_x = ((cx + half).ceil() as usize).min(s);
        let lo_y = ((cy - half).floor().max(0.0)) as usize;
        let hi_y = ((cy + half).ceil() as usize).min(s);
        for py in lo_y..hi_y {
            for px in lo_x..hi_x {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / sub;
                        let y = py as f64 + (sy as f64 + 0.5) / sub;
                        if o.contains(x, y, s) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f64 / (sub * sub);
                for ch in 0..3 {
                    let p = &mut img[(ch * s + py) * s + px];
                    *p = *p * (1.0 - cov) + PALETTE[o.color][ch] * cov;
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));
    img
}

/// Rounds to the nearest `k / 255`.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
