//! Concentric-circle simplification of grade masks and the mask arithmetic
//! around it.

use thiserror::Error;

use crate::data::{BinaryMask, GradeMask, MCSlice, Plane, GRADE_ED, GRADE_ET, GRADE_NCR};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid circles: {0}")]
    InvalidCircles(String),
}

/// Three circles sharing one center; `r1` bounds the whole tumor, `r2` the
/// tumor core and `r3` the necrotic center. Coordinates are in pixels with
/// `cx` the column and `cy` the row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentricCircles {
    pub cx: f64,
    pub cy: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl ConcentricCircles {
    pub fn new(cx: f64, cy: f64, r1: f64, r2: f64, r3: f64) -> Result<Self, GeometryError> {
        let c = Self { cx, cy, r1, r2, r3 };
        if ![cx, cy, r1, r2, r3].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCircles(format!("non-finite parameter in {c:?}")));
        }
        if !(r1 >= r2 && r2 >= r3 && r3 >= 0.0) {
            return Err(GeometryError::InvalidCircles(format!("radii must satisfy r1 >= r2 >= r3 >= 0, got {r1}, {r2}, {r3}")));
        }
        Ok(c)
    }

    /// Whether the center lies inside an `height x width` image.
    pub fn center_within(&self, height: usize, width: usize) -> bool {
        self.cx >= 0.0 && self.cy >= 0.0 && self.cx <= (width - 1) as f64 && self.cy <= (height - 1) as f64
    }
}

/// `β`: 1 where the input exceeds `threshold`, else 0.
pub fn binarize(plane: &Plane, threshold: f32) -> BinaryMask {
    BinaryMask::new(plane.map(|v| if v > threshold { 1.0 } else { 0.0 })).expect("binary by construction")
}

/// Mean (column, row) of the foreground pixels.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64), GeometryError> {
    let (_, w) = mask.dims();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in mask.plane().data().iter().enumerate() {
        if v == 1.0 {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Circles centered on the tumor centroid whose disk and annulus areas equal
/// the per-grade pixel areas.
pub fn simplify_to_circles(mask: &GradeMask) -> Result<ConcentricCircles, GeometryError> {
    let (cx, cy) = centroid(&binarize(mask.plane(), 0.0))?;
    let ncr = mask.count_value(GRADE_NCR) as f64;
    let et = mask.count_value(GRADE_ET) as f64;
    let ed = mask.count_value(GRADE_ED) as f64;
    let radius = |area: f64| (area / std::f64::consts::PI).sqrt();
    ConcentricCircles::new(cx, cy, radius(ncr + et + ed), radius(ncr + et), radius(ncr))
}

fn distances(c: &ConcentricCircles, height: usize, width: usize) -> impl Iterator<Item = f64> + '_ {
    (0..height * width).map(move |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        ((x - c.cx).powi(2) + (y - c.cy).powi(2)).sqrt()
    })
}

fn inside(d: f64, r: f64) -> bool {
    r > 0.0 && d <= r
}

/// Rasterize circles into a grade mask using pixel-center distance with an
/// inclusive boundary. A zero radius covers nothing.
pub fn render_circles(c: &ConcentricCircles, height: usize, width: usize) -> GradeMask {
    let data = distances(c, height, width)
        .map(|d| {
            if inside(d, c.r3) {
                GRADE_NCR
            } else if inside(d, c.r2) {
                GRADE_ET
            } else if inside(d, c.r1) {
                GRADE_ED
            } else {
                0.0
            }
        })
        .collect();
    GradeMask::new(Plane::new(height, width, data)).expect("grade values by construction")
}

/// The outermost circle as a filled binary disk.
pub fn render_disk(c: &ConcentricCircles, height: usize, width: usize) -> BinaryMask {
    let data = distances(c, height, width).map(|d| if inside(d, c.r1) { 1.0 } else { 0.0 }).collect();
    BinaryMask::new(Plane::new(height, width, data)).expect("binary by construction")
}

/// `x · (1 − m)` applied to every contrast.
pub fn apply_mask(x: &MCSlice, m: &BinaryMask) -> Result<MCSlice, GeometryError> {
    if x.dims() != m.dims() {
        return Err(GeometryError::DimensionMismatch(x.dims(), m.dims()));
    }
    let p = x.height() * x.width();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if m.is_set(i % p) { 0.0 } else { v })
        .collect();
    Ok(MCSlice::from_parts(x.height(), x.width(), data, x.is_normalized(), x.support().clone())
        .expect("same layout as input"))
}

/// Snap each pixel to the nearest grade value; ties go to the lower value.
pub fn quantize_grades(continuous: &Plane) -> GradeMask {
    GradeMask::new(continuous.map(quantize_value)).expect("grade values by construction")
}

pub(crate) fn quantize_value(v: f32) -> f32 {
    if v <= 0.25 {
        0.0
    } else if v <= 0.625 {
        GRADE_ED
    } else if v <= 0.875 {
        GRADE_ET
    } else {
        GRADE_NCR
    }
}
