use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{invalid, Result};
use crate::shape::{Point, Shape, ShapeKind, CORNERS};

/// Window cropped around a landmark (`crop_h × crop_w`) and the raster it is
/// resampled to (`out_h × out_w`). All sizes are height × width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub crop_h: usize,
    pub crop_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchSpec {
    /// Center-point patches on the 680-px working image.
    pub const CENTER: PatchSpec = PatchSpec { crop_h: 80, crop_w: 192, out_h: 48, out_w: 80 };
    /// Corner-point patches inside a vertebra RoI.
    pub const CORNER: PatchSpec = PatchSpec { crop_h: 48, crop_w: 48, out_h: 48, out_w: 48 };

    pub fn new(crop_h: usize, crop_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        let spec = PatchSpec { crop_h, crop_w, out_h, out_w };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_h == 0 || self.crop_w == 0 || self.out_h == 0 || self.out_w == 0 {
            return Err(invalid(format!("patch sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Align-corners sampling step: output index `i` reads source `i·step`.
fn step(src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        0.0
    } else {
        (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

#[inline]
fn sample_padded(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let p = |dx: isize, dy: isize| img.get_padded(xi + dx, yi + dy) as f64;
    let top = if fx == 0.0 { p(0, 0) } else { p(0, 0) * (1.0 - fx) + p(1, 0) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { p(0, 1) } else { p(0, 1) * (1.0 - fx) + p(1, 1) * fx };
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resampling with aligned corner pixels, so affine intensity
/// profiles are reproduced exactly.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    if out_w == img.width() && out_h == img.height() {
        return img.clone();
    }
    let (sx, sy) = (step(img.width(), out_w), step(img.height(), out_h));
    let (cx, cy) = (
        if out_w == 1 { (img.width() as f64 - 1.0) / 2.0 } else { 0.0 },
        if out_h == 1 { (img.height() as f64 - 1.0) / 2.0 } else { 0.0 },
    );
    let mut out = GrayImage::new(out_w, out_h);
    let (max_x, max_y) = (img.width() as f64 - 1.0, img.height() as f64 - 1.0);
    for j in 0..out_h {
        let y = (cy + j as f64 * sy).min(max_y);
        for i in 0..out_w {
            let x = (cx + i as f64 * sx).min(max_x);
            let v = sample_padded(img, x, y) as f32;
            out.data_mut()[j * out_w + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Proportional resize to `target_h` rows; width is rounded.
pub fn resize_to_height(img: &GrayImage, target_h: usize) -> GrayImage {
    let target_w = ((img.width() as f64 * target_h as f64 / img.height() as f64).round() as usize).max(1);
    resize_bilinear(img, target_w, target_h)
}

/// Top-left pixel of a `crop_h × crop_w` window centered on `center`.
pub fn window_origin(center: Point, crop_h: usize, crop_w: usize) -> (isize, isize) {
    const LIMIT: f64 = 1e9;
    let cx = if center.x.is_finite() { center.x.clamp(-LIMIT, LIMIT) } else { 0.0 };
    let cy = if center.y.is_finite() { center.y.clamp(-LIMIT, LIMIT) } else { 0.0 };
    (cx.round() as isize - (crop_w / 2) as isize, cy.round() as isize - (crop_h / 2) as isize)
}

/// Crops around `center` with zero padding and resamples to the patch
/// output size, writing row-major values into `out`.
pub fn crop_patch_into(img: &GrayImage, center: Point, spec: &PatchSpec, out: &mut [f32]) {
    debug_assert_eq!(out.len(), spec.out_len());
    let (ox, oy) = window_origin(center, spec.crop_h, spec.crop_w);
    let (sx, sy) = (step(spec.crop_w, spec.out_w), step(spec.crop_h, spec.out_h));
    for j in 0..spec.out_h {
        let y = oy as f64 + j as f64 * sy;
        for i in 0..spec.out_w {
            let x = ox as f64 + i as f64 * sx;
            out[j * spec.out_w + i] = (sample_padded(img, x, y) as f32).clamp(0.0, 1.0);
        }
    }
}

pub fn crop_patch(img: &GrayImage, center: Point, spec: &PatchSpec) -> GrayImage {
    let mut out = GrayImage::new(spec.out_w, spec.out_h);
    crop_patch_into(img, center, spec, out.data_mut());
    out
}

/// Mirrors an image about its vertical axis together with its landmarks.
///
/// Every `x` maps to `(width − 1) − x`. For full 68-point shapes the left and
/// right corners of each vertebra trade roles (TL↔TR, BL↔BR) so the stored
/// order keeps its meaning.
pub fn hflip(img: &GrayImage, shape: &Shape) -> Result<(GrayImage, Shape)> {
    if shape.kind() == ShapeKind::Corners4 {
        return Err(invalid("horizontal flip operates on whole-spine shapes, not single vertebrae"));
    }
    let (w, h) = (img.width(), img.height());
    let mut flipped = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            flipped.data_mut()[y * w + x] = img.get(w - 1 - x, y);
        }
    }
    let right = w as f64 - 1.0;
    let mirrored: Vec<Point> = shape.points().iter().map(|p| Point::new(right - p.x, p.y)).collect();
    let points = match shape.kind() {
        ShapeKind::Full68 => mirrored
            .chunks_exact(CORNERS)
            .flat_map(|q| [q[1], q[0], q[3], q[2]])
            .collect(),
        _ => mirrored,
    };
    Ok((flipped, Shape::new(shape.kind(), points)?))
}
