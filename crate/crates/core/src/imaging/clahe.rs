//! Contrast-limited adaptive histogram equalization.
//!
//! The image is split into a grid of tiles. Each tile gets a histogram whose
//! bins, as fractions of the tile, are clipped at `clip_limit / bins`; the clipped excess
//! is spread evenly over all bins. Output pixels blend the four nearest tile
//! mappings bilinearly.

use serde::{Deserialize, Serialize};

use super::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { clip_limit: 2.0, tile_rows: 8, tile_cols: 8, bins: 256 }
    }
}

#[inline]
fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Tile `t` of `n` over `len` pixels spans `[start, end)`.
fn tile_bounds(t: usize, n: usize, len: usize) -> (usize, usize) {
    (t * len / n, (t + 1) * len / n)
}

fn tile_mapping(img: &GrayImage, x: (usize, usize), y: (usize, usize), p: &ClaheParams) -> Vec<f32> {
    let bins = p.bins;
    let mut hist = vec![0.0f64; bins];
    for yy in y.0..y.1 {
        for xx in x.0..x.1 {
            hist[bin_of(img.get(xx, yy), bins)] += 1.0;
        }
    }
    let total = ((x.1 - x.0) * (y.1 - y.0)) as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    if p.clip_limit.is_finite() {
        let limit = p.clip_limit / bins as f64;
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let share = excess / bins as f64;
        hist.iter_mut().for_each(|h| *h += share);
    }
    let mut cdf = 0.0;
    hist.iter()
        .map(|h| {
            cdf += h;
            cdf.clamp(0.0, 1.0) as f32
        })
        .collect()
}

pub fn clahe(img: &GrayImage, params: &ClaheParams) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return img.clone();
    }
    let p = ClaheParams {
        clip_limit: params.clip_limit.max(1.0),
        tile_rows: params.tile_rows.clamp(1, h),
        tile_cols: params.tile_cols.clamp(1, w),
        bins: params.bins.max(2),
    };
    let (rows, cols) = (p.tile_rows, p.tile_cols);
    let maps: Vec<Vec<f32>> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| tile_mapping(img, tile_bounds(c, cols, w), tile_bounds(r, rows, h), &p))
        .collect();

    // tile centres, in pixel coordinates
    let centre = |t: usize, n: usize, len: usize| {
        let (a, b) = tile_bounds(t, n, len);
        (a + b) as f64 / 2.0 - 0.5
    };
    let xs: Vec<f64> = (0..cols).map(|c| centre(c, cols, w)).collect();
    let ys: Vec<f64> = (0..rows).map(|r| centre(r, rows, h)).collect();
    let locate = |v: f64, cs: &[f64]| -> (usize, usize, f64) {
        if v <= cs[0] {
            return (0, 0, 0.0);
        }
        let last = cs.len() - 1;
        if v >= cs[last] {
            return (last, last, 0.0);
        }
        let i = cs.partition_point(|&c| c <= v) - 1;
        (i, i + 1, (v - cs[i]) / (cs[i + 1] - cs[i]))
    };

    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        let (r0, r1, fy) = locate(y as f64, &ys);
        for x in 0..w {
            let (c0, c1, fx) = locate(x as f64, &xs);
            let b = bin_of(img.get(x, y), p.bins);
            let m = |r: usize, c: usize| maps[r * cols + c][b] as f64;
            let top = m(r0, c0) * (1.0 - fx) + m(r0, c1) * fx;
            let bot = m(r1, c0) * (1.0 - fx) + m(r1, c1) * fx;
            out.data_mut()[y * w + x] = ((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(v: &[f32]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = GrayImage::filled(40, 30, 0.37);
        let out = clahe(&img, &ClaheParams::default());
        let first = out.get(0, 0);
        assert!(out.data().iter().all(|&v| v == first));
    }

    #[test]
    fn unclipped_single_tile_is_global_equalization() {
        let img = GrayImage::from_fn(37, 23, |x, y| (((x * 13 + y * 7) % 29) as f32 / 40.0).powf(1.7));
        let p = ClaheParams { clip_limit: f64::INFINITY, tile_rows: 1, tile_cols: 1, bins: 256 };
        let out = clahe(&img, &p);
        let n = img.data().len() as f64;
        for (i, &v) in img.data().iter().enumerate() {
            let b = bin_of(v, 256);
            let rank = img.data().iter().filter(|&&u| bin_of(u, 256) <= b).count() as f64;
            assert!((out.data()[i] as f64 - rank / n).abs() < 1e-6);
        }
    }

    #[test]
    fn per_tile_contrast_increases() {
        // left half dark and low-contrast, right half bright and low-contrast
        let img = GrayImage::from_fn(64, 32, |x, y| {
            let wobble = ((x * 7 + y * 3) % 10) as f32 / 100.0;
            if x < 32 { 0.1 + wobble } else { 0.8 + wobble }
        });
        let p = ClaheParams { tile_rows: 1, tile_cols: 2, ..ClaheParams::default() };
        let out = clahe(&img, &p);
        for half in [0..32usize, 32..64] {
            let pick = |im: &GrayImage| {
                (0..32).flat_map(|y| half.clone().map(move |x| (x, y))).map(|(x, y)| im.get(x, y)).collect::<Vec<_>>()
            };
            assert!(std_dev(&pick(&out)) >= std_dev(&pick(&img)));
        }
    }

    #[test]
    fn output_in_unit_range_with_more_tiles_than_pixels() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x + y) as f32 / 6.0);
        let out = clahe(&img, &ClaheParams { tile_rows: 9, tile_cols: 9, ..Default::default() });
        assert_eq!((out.width(), out.height()), (5, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
