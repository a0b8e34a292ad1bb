//! Minimal raster drawing for landmark overlays and error curves.

use crate::imaging::GrayImage;
use crate::shape::{Shape, ShapeKind, CORNERS};

/// Draws a 1-px line with Bresenham's algorithm, clipped to the image.
pub fn draw_line(img: &mut GrayImage, from: (f64, f64), to: (f64, f64), value: f32) {
    let (mut x0, mut y0) = (from.0.round() as i64, from.1.round() as i64);
    let (x1, y1) = (to.0.round() as i64, to.1.round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let limit = 4 * (img.width() + img.height()) as i64 + dx - dy;
    for _ in 0..=limit {
        put(img, x0, y0, value);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn put(img: &mut GrayImage, x: i64, y: i64, value: f32) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set(x as usize, y as usize, value);
    }
}

/// A filled square marker of half-size `radius`.
pub fn draw_marker(img: &mut GrayImage, at: (f64, f64), radius: i64, value: f32) {
    let (cx, cy) = (at.0.round() as i64, at.1.round() as i64);
    for y in cy - radius..=cy + radius {
        for x in cx - radius..=cx + radius {
            put(img, x, y, value);
        }
    }
}

/// Copies `img` and draws each shape in its own intensity. Full spines get
/// their vertebra outlines (TL-TR-BR-BL) and center polylines.
pub fn overlay_landmarks(img: &GrayImage, shapes: &[(&Shape, f32)]) -> GrayImage {
    let mut out = img.clone();
    for (shape, value) in shapes {
        let pts: Vec<(f64, f64)> = shape.points().iter().map(|p| (p.x, p.y)).collect();
        match shape.kind() {
            ShapeKind::Full68 | ShapeKind::Corners4 => {
                for q in pts.chunks_exact(CORNERS) {
                    for (a, b) in [(0, 1), (1, 3), (3, 2), (2, 0)] {
                        draw_line(&mut out, q[a], q[b], *value);
                    }
                }
            }
            ShapeKind::Centers17 => {
                for w in pts.windows(2) {
                    draw_line(&mut out, w[0], w[1], *value);
                }
            }
        }
        for p in &pts {
            draw_marker(&mut out, *p, 1, *value);
        }
    }
    out
}

/// One curve of a chart: y values at x = 0, 1, 2, ...
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub values: Vec<f64>,
    pub intensity: f32,
}

/// Line chart on a dark background with a light frame. The y axis spans
/// zero to the largest finite value; every point gets a marker.
pub fn error_chart(series: &[Series], width: usize, height: usize) -> GrayImage {
    let mut img = GrayImage::filled(width.max(16), height.max(16), 0.05);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let margin = 8.0;
    let (x0, y0, x1, y1) = (margin, margin, w - 1.0 - margin, h - 1.0 - margin);
    for (a, b) in [((x0, y1), (x1, y1)), ((x0, y0), (x0, y1))] {
        draw_line(&mut img, a, b, 0.6);
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let top = series.iter().flat_map(|s| s.values.iter()).filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(*v));
    if n == 0 || top <= 0.0 {
        return img;
    }
    let px = |i: usize| if n == 1 { (x0 + x1) / 2.0 } else { x0 + (x1 - x0) * i as f64 / (n - 1) as f64 };
    let py = |v: f64| y1 - (y1 - y0) * (v / top);
    for i in 0..n {
        draw_line(&mut img, (px(i), y1), (px(i), y1 + 3.0), 0.6);
    }
    for s in series {
        let pts: Vec<(f64, f64)> =
            s.values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| (px(i), py(*v))).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], s.intensity);
        }
        for p in &pts {
            draw_marker(&mut img, *p, 2, s.intensity);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Point;

    #[test]
    fn line_endpoints_and_clipping() {
        let mut img = GrayImage::new(10, 10);
        draw_line(&mut img, (1.0, 1.0), (8.0, 4.0), 1.0);
        assert_eq!(img.get(1, 1), 1.0);
        assert_eq!(img.get(8, 4), 1.0);
        let lit = img.data().iter().filter(|v| **v == 1.0).count();
        assert_eq!(lit, 8);
        draw_line(&mut img, (-50.0, 5.0), (50.0, 5.0), 0.5);
        assert!((0..10).all(|x| img.get(x, 5) == 0.5));
    }

    #[test]
    fn overlay_marks_every_landmark() {
        let img = GrayImage::new(40, 40);
        let s = Shape::new(ShapeKind::Corners4, vec![
            Point::new(5.0, 5.0), Point::new(30.0, 6.0), Point::new(6.0, 30.0), Point::new(31.0, 31.0),
        ])
        .unwrap();
        let out = overlay_landmarks(&img, &[(&s, 0.9)]);
        for p in s.points() {
            assert_eq!(out.get(p.x as usize, p.y as usize), 0.9);
        }
        assert_eq!(out.get(20, 20), 0.0);
    }

    #[test]
    fn chart_draws_each_point() {
        let s = Series { values: vec![4.0, 2.0, 1.0, 1.5], intensity: 1.0 };
        let img = error_chart(&[s], 120, 80);
        assert_eq!((img.width(), img.height()), (120, 80));
        // the largest value sits on the top margin at x = left margin
        assert_eq!(img.get(8, 8), 1.0);
        assert!(error_chart(&[], 50, 50).data().iter().all(|v| *v <= 0.6));
    }
}
