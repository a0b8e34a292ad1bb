//! Landmark shapes, frame normalization and the offset matrices that feed
//! the PCA shape constraint.
//!
//! A [`Shape`] lives in pixel coordinates of some frame (the resized working
//! image or a vertebra RoI). Flattening always yields `(x1, y1, ..., xK, yK)`.

mod pca;

pub use pca::{
    build_transition_matrix, covariance, eigendecompose, fit_transition, project_offsets,
    reconstruct_offsets, EigenPair, SymMatrix, TransitionMatrix,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of vertebrae annotated per spine (thoracic + lumbar).
pub const VERTEBRAE: usize = 17;
/// Corners per vertebra, ordered TL, TR, BL, BR.
pub const CORNERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    /// One center point per vertebra.
    Centers17,
    /// The four corners of a single vertebra.
    Corners4,
    /// Four corners for each of the 17 vertebrae, vertebra-major.
    Full68,
}

impl ShapeKind {
    pub fn landmarks(self) -> usize {
        match self {
            ShapeKind::Centers17 => VERTEBRAE,
            ShapeKind::Corners4 => CORNERS,
            ShapeKind::Full68 => VERTEBRAE * CORNERS,
        }
    }

    /// Length `P` of the flattened coordinate vector.
    pub fn coords(self) -> usize {
        2 * self.landmarks()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered landmarks in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    kind: ShapeKind,
    points: Vec<Point>,
}

impl Shape {
    pub fn new(kind: ShapeKind, points: Vec<Point>) -> Result<Self> {
        if points.len() != kind.landmarks() {
            return Err(invalid(format!(
                "{:?} shape needs {} points, got {}",
                kind,
                kind.landmarks(),
                points.len()
            )));
        }
        Ok(Shape { kind, points })
    }

    /// Builds a shape from `(x1, y1, ..., xK, yK)`.
    pub fn from_flat(kind: ShapeKind, coords: &[f64]) -> Result<Self> {
        if coords.len() != kind.coords() {
            return Err(invalid(format!(
                "{:?} shape needs {} coordinates, got {}",
                kind,
                kind.coords(),
                coords.len()
            )));
        }
        let points = coords.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        Ok(Shape { kind, points })
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Shape {
        Shape {
            kind: self.kind,
            points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Shape {
        Shape {
            kind: self.kind,
            points: self.points.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect(),
        }
    }

    /// Adds a flattened offset vector `ΔS` to this shape.
    pub fn offset_by(&self, delta: &[f64]) -> Result<Shape> {
        if delta.len() != self.kind.coords() {
            return Err(invalid(format!(
                "offset has {} entries, shape has {} coordinates",
                delta.len(),
                self.kind.coords()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(delta.chunks_exact(2))
            .map(|(p, d)| Point::new(p.x + d[0], p.y + d[1]))
            .collect();
        Ok(Shape { kind: self.kind, points })
    }

    /// The four corners of vertebra `index` of a [`ShapeKind::Full68`] shape.
    pub fn vertebra(&self, index: usize) -> Result<Shape> {
        if self.kind != ShapeKind::Full68 || index >= VERTEBRAE {
            return Err(invalid(format!("no vertebra {index} in a {:?} shape", self.kind)));
        }
        let start = index * CORNERS;
        Shape::new(ShapeKind::Corners4, self.points[start..start + CORNERS].to_vec())
    }

    /// Vertebra centers of a [`ShapeKind::Full68`] shape: the mean of each
    /// vertebra's four corners.
    pub fn centers(&self) -> Result<Shape> {
        if self.kind != ShapeKind::Full68 {
            return Err(invalid(format!("centers need a Full68 shape, got {:?}", self.kind)));
        }
        let points = self
            .points
            .chunks_exact(CORNERS)
            .map(|q| {
                let (sx, sy) = q.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
                Point::new(sx / CORNERS as f64, sy / CORNERS as f64)
            })
            .collect();
        Shape::new(ShapeKind::Centers17, points)
    }

    /// Concatenates 17 corner shapes in vertebra order.
    pub fn from_vertebrae(corners: &[Shape]) -> Result<Shape> {
        if corners.len() != VERTEBRAE || corners.iter().any(|c| c.kind != ShapeKind::Corners4) {
            return Err(invalid("expected 17 Corners4 shapes"));
        }
        let points = corners.iter().flat_map(|c| c.points.iter().copied()).collect();
        Shape::new(ShapeKind::Full68, points)
    }

    /// Mean Euclidean distance between corresponding landmarks.
    pub fn mean_point_error(&self, other: &Shape) -> Result<f64> {
        if self.kind != other.kind {
            return Err(invalid(format!("kind mismatch {:?} vs {:?}", self.kind, other.kind)));
        }
        let total: f64 = self.points.iter().zip(&other.points).map(|(a, b)| a.dist(*b)).sum();
        Ok(total / self.points.len() as f64)
    }
}

/// Landmarks divided by frame width/height; `(x1/W, y1/H, ...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedShape {
    kind: ShapeKind,
    coords: Vec<f64>,
}

impl NormalizedShape {
    pub fn new(kind: ShapeKind, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != kind.coords() {
            return Err(invalid(format!(
                "{:?} normalized shape needs {} values, got {}",
                kind,
                kind.coords(),
                coords.len()
            )));
        }
        Ok(NormalizedShape { kind, coords })
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

fn check_frame(wid: f64, hei: f64) -> Result<()> {
    if !(wid > 0.0 && hei > 0.0) {
        return Err(invalid(format!("frame dimensions must be positive, got {wid}x{hei}")));
    }
    Ok(())
}

pub fn normalize_shape(shape: &Shape, wid: f64, hei: f64) -> Result<NormalizedShape> {
    check_frame(wid, hei)?;
    let coords = shape.points.iter().flat_map(|p| [p.x / wid, p.y / hei]).collect();
    Ok(NormalizedShape { kind: shape.kind, coords })
}

pub fn denormalize_shape(norm: &NormalizedShape, wid: f64, hei: f64) -> Result<Shape> {
    check_frame(wid, hei)?;
    let points = norm.coords.chunks_exact(2).map(|c| Point::new(c[0] * wid, c[1] * hei)).collect();
    Ok(Shape { kind: norm.kind, points })
}

/// Coordinate-wise average of normalized shapes.
pub fn mean_shape(shapes: &[NormalizedShape]) -> Result<NormalizedShape> {
    let first = shapes.first().ok_or_else(|| invalid("mean of zero shapes"))?;
    if shapes.iter().any(|s| s.kind != first.kind) {
        return Err(invalid("mean over shapes of mixed kinds"));
    }
    let mut sum = vec![0.0; first.coords.len()];
    for s in shapes {
        for (acc, v) in sum.iter_mut().zip(&s.coords) {
            *acc += v;
        }
    }
    let h = shapes.len() as f64;
    sum.iter_mut().for_each(|v| *v /= h);
    Ok(NormalizedShape { kind: first.kind, coords: sum })
}

/// `P × H` matrix whose column `h` is `flatten(gt_h) − flatten(current_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetMatrix {
    p: usize,
    h: usize,
    // column-major: column h occupies data[h*p..(h+1)*p]
    data: Vec<f64>,
}

impl OffsetMatrix {
    pub fn from_columns(p: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if p == 0 || columns.iter().any(|c| c.len() != p) {
            return Err(invalid(format!("offset columns must all have length {p}")));
        }
        Ok(OffsetMatrix { p, h: columns.len(), data: columns.concat() })
    }

    pub fn rows(&self) -> usize {
        self.p
    }

    pub fn cols(&self) -> usize {
        self.h
    }

    pub fn column(&self, h: usize) -> &[f64] {
        &self.data[h * self.p..(h + 1) * self.p]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.p + row]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.p)
    }
}

pub fn compute_offsets(gt: &[Shape], current: &[Shape]) -> Result<OffsetMatrix> {
    if gt.len() != current.len() {
        return Err(invalid(format!("{} GT shapes vs {} current shapes", gt.len(), current.len())));
    }
    let first = gt.first().ok_or_else(|| invalid("no shapes to offset"))?;
    let kind = first.kind;
    let mut data = Vec::with_capacity(kind.coords() * gt.len());
    for (g, c) in gt.iter().zip(current) {
        if g.kind != kind || c.kind != kind {
            return Err(invalid("offset shapes have mismatched kinds"));
        }
        for (a, b) in g.points.iter().zip(&c.points) {
            data.push(a.x - b.x);
            data.push(a.y - b.y);
        }
    }
    Ok(OffsetMatrix { p: kind.coords(), h: gt.len(), data })
}
