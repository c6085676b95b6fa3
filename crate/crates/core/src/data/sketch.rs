//! Stroke sketches and their JSON document format:
//!
//! ```json
//! {"version":1,"canvas":{"w":512,"h":512},"strokes":[[[10,20],[30,40]]]}
//! ```
//!
//! Strokes are kept in drawing order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const SKETCH_FORMAT_VERSION: u32 = 1;

/// Sketches with fewer strokes are left alone by stroke removal.
pub const STROKE_REMOVAL_MIN_STROKES: usize = 10;

const STROKE_GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct StrokeSketch {
    pub width: f64,
    pub height: f64,
    pub strokes: Vec<Vec<[f64; 2]>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    version: u32,
    canvas: Canvas,
    strokes: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Canvas {
    #[serde(serialize_with = "num")]
    w: f64,
    #[serde(serialize_with = "num")]
    h: f64,
}

#[derive(Serialize)]
struct DocOut<'a> {
    version: u32,
    canvas: Canvas,
    #[serde(serialize_with = "strokes_out")]
    strokes: &'a [Vec<[f64; 2]>],
}

/// Integral values print without a fractional part, as JavaScript does.
fn num<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.fract() == 0.0 && v.abs() < 9.007_199_254_740_992e15 {
        s.serialize_i64(*v as i64)
    } else {
        s.serialize_f64(*v)
    }
}

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        num(&self.0, s)
    }
}

fn strokes_out<S: Serializer>(strokes: &&[Vec<[f64; 2]>], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(strokes.len()))?;
    for stroke in strokes.iter() {
        let pts: Vec<[Num; 2]> = stroke.iter().map(|p| [Num(p[0]), Num(p[1])]).collect();
        seq.serialize_element(&pts)?;
    }
    seq.end()
}

fn field_err(field: impl Into<String>, msg: impl Into<String>) -> DataError {
    DataError::Sketch {
        field: field.into(),
        msg: msg.into(),
    }
}

impl StrokeSketch {
    pub fn new(width: f64, height: f64, strokes: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        let s = Self { width, height, strokes };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("canvas.w", self.width), ("canvas.h", self.height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(field_err(name, format!("must be a positive number, got {v}")));
            }
        }
        if self.strokes.is_empty() {
            return Err(field_err("strokes", "at least one stroke is required"));
        }
        for (i, stroke) in self.strokes.iter().enumerate() {
            if stroke.is_empty() {
                return Err(field_err(format!("strokes[{i}]"), "stroke has no points"));
            }
            for (j, p) in stroke.iter().enumerate() {
                let inside = p.iter().all(|v| v.is_finite())
                    && (0.0..=self.width).contains(&p[0])
                    && (0.0..=self.height).contains(&p[1]);
                if !inside {
                    return Err(field_err(
                        format!("strokes[{i}][{j}]"),
                        format!("point ({}, {}) lies outside the {}x{} canvas", p[0], p[1], self.width, self.height),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Doc = serde_json::from_str(text).map_err(|e| DataError::SketchSyntax(e.to_string()))?;
        if doc.version != SKETCH_FORMAT_VERSION {
            return Err(field_err(
                "version",
                format!("unsupported version {}, expected {SKETCH_FORMAT_VERSION}", doc.version),
            ));
        }
        Self::new(doc.canvas.w, doc.canvas.h, doc.strokes)
    }

    /// Canonical compact serialization.
    pub fn to_json(&self) -> String {
        let doc = DocOut {
            version: SKETCH_FORMAT_VERSION,
            canvas: Canvas {
                w: self.width,
                h: self.height,
            },
            strokes: &self.strokes,
        };
        serde_json::to_string(&doc).expect("sketch serialization cannot fail")
    }

    pub fn num_strokes(&self) -> usize {
        self.strokes.len()
    }
}

/// Contiguous drawing-order groups as index ranges. The earliest groups
/// receive the extra strokes when the count is not divisible by four.
pub fn stroke_groups(num_strokes: usize) -> Vec<std::ops::Range<usize>> {
    let base = num_strokes / STROKE_GROUPS;
    let extra = num_strokes % STROKE_GROUPS;
    let mut start = 0;
    (0..STROKE_GROUPS)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Drops later stroke groups at random. The first group is always kept and
/// every other group survives with probability one half.
pub fn augment_stroke_removal(sketch: &StrokeSketch, seed: u64) -> StrokeSketch {
    if sketch.strokes.len() < STROKE_REMOVAL_MIN_STROKES {
        return sketch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strokes = Vec::with_capacity(sketch.strokes.len());
    for (g, range) in stroke_groups(sketch.strokes.len()).into_iter().enumerate() {
        let keep = g == 0 || rng.random_bool(0.5);
        if keep {
            strokes.extend_from_slice(&sketch.strokes[range]);
        }
    }
    StrokeSketch {
        width: sketch.width,
        height: sketch.height,
        strokes,
    }
}
