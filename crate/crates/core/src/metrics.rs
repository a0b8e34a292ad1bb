//! Landmark and curvature metrics: size-normalized MSE, Cobb angles from 68
//! corner landmarks, and the symmetric mean absolute percentage error.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::shape::{normalize_shape, Shape, ShapeKind, CORNERS};

/// Proximal-thoracic, main-thoracic and thoracolumbar Cobb angles, degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CobbAngles {
    pub pt: f64,
    pub mt: f64,
    pub tl: f64,
}

impl CobbAngles {
    pub fn as_array(&self) -> [f64; 3] {
        [self.pt, self.mt, self.tl]
    }
}

/// Mean over landmarks of the squared distance between size-normalized
/// points. Each landmark contributes `Δx² + Δy²`, and the sum is divided by
/// the landmark count (68 for a full spine), not by the coordinate count.
pub fn normalized_mse(pred: &Shape, gt: &Shape, wid: f64, hei: f64) -> Result<f64> {
    if pred.kind() != gt.kind() {
        return Err(invalid(format!("kind mismatch {:?} vs {:?}", pred.kind(), gt.kind())));
    }
    let (a, b) = (normalize_shape(pred, wid, hei)?, normalize_shape(gt, wid, hei)?);
    let sum: f64 = a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / pred.kind().landmarks() as f64)
}

/// Picks PT/MT/TL from a pairwise angle function over `n` vertebrae ordered
/// top to bottom.
///
/// MT is the largest pairwise angle, attained at `(p, q)` with `p` above `q`
/// (first pair in row-major order on ties). PT is the largest angle between
/// `p` and any vertebra at or above it; TL the largest between `q` and any
/// vertebra at or below it.
fn select_cobb(n: usize, angle: impl Fn(usize, usize) -> f64) -> CobbAngles {
    let (mut mt, mut p, mut q) = (0.0, 0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = angle(i, j);
            if a > mt {
                (mt, p, q) = (a, i, j);
            }
        }
    }
    let pt = (0..=p).map(|i| angle(i, p)).fold(0.0, f64::max);
    let tl = (q..n).map(|j| angle(q, j)).fold(0.0, f64::max);
    CobbAngles { pt, mt, tl }
}

fn angle_between(u: (f64, f64), v: (f64, f64)) -> f64 {
    // atan2 form of arccos(û·v̂); stays accurate for nearly parallel lines
    let cross = u.0 * v.1 - u.1 * v.0;
    let dot = u.0 * v.0 + u.1 * v.1;
    cross.abs().atan2(dot).to_degrees()
}

/// Cobb angles from 68 corners (vertebra-major, TL, TR, BL, BR).
///
/// Each vertebra's slope vector runs from the midpoint of its left edge
/// (TL, BL) to the midpoint of its right edge (TR, BR).
pub fn cobb_angles(landmarks: &Shape) -> Result<CobbAngles> {
    if landmarks.kind() != ShapeKind::Full68 {
        return Err(invalid(format!("Cobb angles need 68 landmarks, got {:?}", landmarks.kind())));
    }
    let pts = landmarks.points();
    let extent = pts.iter().fold(0.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let mut slopes = Vec::with_capacity(pts.len() / CORNERS);
    for (i, q) in pts.chunks_exact(CORNERS).enumerate() {
        let v = (
            0.5 * (q[1].x + q[3].x) - 0.5 * (q[0].x + q[2].x),
            0.5 * (q[1].y + q[3].y) - 0.5 * (q[0].y + q[2].y),
        );
        let len = v.0.hypot(v.1);
        if !len.is_finite() || len <= 1e-12 * extent.max(1e-300) {
            return Err(Error::DegenerateGeometry(format!("vertebra {i} has coincident left/right edges")));
        }
        slopes.push(v);
    }
    Ok(select_cobb(slopes.len(), |i, j| angle_between(slopes[i], slopes[j])))
}

/// Cobb angles from per-vertebra endplate tilts in radians.
pub fn cobb_from_tilts(tilts: &[f64]) -> CobbAngles {
    let dirs: Vec<(f64, f64)> = tilts.iter().map(|t| (t.cos(), t.sin())).collect();
    select_cobb(dirs.len(), |i, j| angle_between(dirs[i], dirs[j]))
}

/// Symmetric mean absolute percentage error over the three Cobb angles, in
/// percent. An image whose six angles are all zero contributes 0.
pub fn smape(pred: &[CobbAngles], gt: &[CobbAngles]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(invalid(format!("SMAPE needs equal non-empty lists, got {} and {}", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let (a, b) = (a.as_array(), b.as_array());
            let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            let den: f64 = a.iter().zip(&b).map(|(x, y)| x + y).sum();
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(format!("Spearman needs two equal lists of length ≥ 2, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("Spearman inputs must be finite"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Point;

    fn spine(tilts_deg: &[f64]) -> Shape {
        let pts = tilts_deg
            .iter()
            .enumerate()
            .flat_map(|(i, t)| {
                let (s, c) = t.to_radians().sin_cos();
                let (cx, cy) = (100.0, 30.0 + 40.0 * i as f64);
                let at = |u: f64, v: f64| Point::new(cx + u * c - v * s, cy + u * s + v * c);
                [at(-25.0, -12.0), at(25.0, -12.0), at(-25.0, 12.0), at(25.0, 12.0)]
            })
            .collect();
        Shape::new(ShapeKind::Full68, pts).unwrap()
    }

    #[test]
    fn mse_examples() {
        let gt = spine(&[0.0; 17]);
        assert_eq!(normalized_mse(&gt, &gt, 200.0, 700.0).unwrap(), 0.0);

        let shifted = gt.translated(2.0, 0.0);
        let m = normalized_mse(&shifted, &gt, 200.0, 700.0).unwrap();
        assert!((m - 1e-4).abs() < 1e-15);

        let mut c = gt.flatten();
        c[0] += 20.0;
        c[1] += 70.0;
        let one = Shape::from_flat(ShapeKind::Full68, &c).unwrap();
        let m = normalized_mse(&one, &gt, 200.0, 700.0).unwrap();
        assert!((m - 0.02 / 68.0).abs() < 1e-15);

        assert!(normalized_mse(&gt, &gt.centers().unwrap(), 1.0, 1.0).is_err());
    }

    #[test]
    fn mse_is_symmetric() {
        let a = spine(&[3.0; 17]);
        let b = spine(&[-2.0; 17]).translated(1.5, -4.0);
        assert_eq!(normalized_mse(&a, &b, 300.0, 680.0).unwrap(), normalized_mse(&b, &a, 300.0, 680.0).unwrap());
    }

    #[test]
    fn cobb_parallel_is_zero() {
        let c = cobb_angles(&spine(&[0.0; 17])).unwrap();
        assert_eq!(c, CobbAngles::default());
    }

    #[test]
    fn cobb_two_tilted_vertebrae() {
        let mut t = [0.0; 17];
        t[4] = 10.0;
        t[11] = -10.0;
        let c = cobb_angles(&spine(&t)).unwrap();
        assert!((c.mt - 20.0).abs() < 1e-9);
        assert!((c.pt - 10.0).abs() < 1e-9);
        assert!((c.tl - 10.0).abs() < 1e-9);
        let analytic = cobb_from_tilts(&t.map(f64::to_radians));
        assert!((analytic.mt - c.mt).abs() < 1e-9);
    }

    #[test]
    fn cobb_degenerate_vertebra() {
        let mut c = spine(&[0.0; 17]).flatten();
        for k in 0..4 {
            c[2 * k] = 5.0;
            c[2 * k + 1] = 5.0;
        }
        let s = Shape::from_flat(ShapeKind::Full68, &c).unwrap();
        assert!(matches!(cobb_angles(&s), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn smape_examples() {
        let a = CobbAngles { pt: 20.0, mt: 20.0, tl: 30.0 };
        let b = CobbAngles { pt: 10.0, mt: 20.0, tl: 30.0 };
        assert_eq!(smape(&[b], &[b]).unwrap(), 0.0);
        assert!((smape(&[a], &[b]).unwrap() - 100.0 * 10.0 / 130.0).abs() < 1e-12);
        let z = CobbAngles::default();
        assert_eq!(smape(&[z], &[z]).unwrap(), 0.0);
        let both = smape(&[a, z], &[b, z]).unwrap();
        assert!((both - 50.0 * 10.0 / 130.0).abs() < 1e-12);
        assert!(smape(&[], &[]).is_err());
        assert!(smape(&[a], &[a, b]).is_err());
    }

    #[test]
    fn spearman_hand_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        // one adjacent swap: 1 - 6·2 / (4·15)
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap().unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&x, &[5.0; 4]).unwrap(), None);
        assert!(spearman(&x, &[1.0]).is_err());
        // ties take average ranks
        let r = spearman(&[0.0, 0.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().unwrap();
        assert!((r - 0.894_427_190_999_915_9).abs() < 1e-12);
    }
}