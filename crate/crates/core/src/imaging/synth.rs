//! Procedural spine radiographs with exact landmark annotations.
//!
//! Each sample draws a smooth centerline `x(t) = a·sin(b·t + φ) + c`, stacks
//! 17 rectangular vertebrae along it (endplates perpendicular to the curve,
//! plus a small smooth tilt wobble), renders them as bright quads over a
//! dark, unevenly lit background, then blurs and adds sensor noise. Corner
//! coordinates and Cobb angles come straight from the construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{invalid, Result};
use crate::metrics::{cobb_from_tilts, CobbAngles};
use crate::shape::{Point, Shape, ShapeKind, VERTEBRAE};

/// Bumped whenever a default below changes, since acceptance thresholds are
/// calibrated against the rendered data.
pub const SYNTH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    /// Image height in pixels, inclusive range.
    pub height: (usize, usize),
    /// Width as a fraction of height.
    pub aspect: (f64, f64),
    /// Centerline sine amplitude as a fraction of width.
    pub amplitude: (f64, f64),
    /// Angular frequency of the centerline over the spine's length, radians.
    pub frequency: (f64, f64),
    /// Horizontal centerline offset as a fraction of width.
    pub offset: (f64, f64),
    /// First vertebra's top, as a fraction of height.
    pub spine_top: (f64, f64),
    /// Last vertebra's bottom, as a fraction of height.
    pub spine_bottom: (f64, f64),
    /// Amplitude of the extra per-vertebra tilt wobble, degrees.
    pub tilt_jitter_deg: f64,
    /// Vertebra width over height.
    pub vertebra_aspect: (f64, f64),
    /// Intensity of vertebra bodies.
    pub bone: (f64, f64),
    pub background: f64,
    /// Peak of the low-frequency soft-tissue glow.
    pub soft_tissue: f64,
    pub blur_sigma: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 250,
            height: (600, 780),
            aspect: (0.45, 0.6),
            amplitude: (0.0, 0.09),
            frequency: (1.5, 4.5),
            offset: (0.38, 0.62),
            spine_top: (0.06, 0.16),
            spine_bottom: (0.80, 0.92),
            tilt_jitter_deg: 3.0,
            vertebra_aspect: (1.3, 1.7),
            bone: (0.55, 0.8),
            background: 0.12,
            soft_tissue: 0.18,
            blur_sigma: 1.2,
            noise_std: 0.03,
        }
    }
}

impl SynthConfig {
    /// Straight, untilted spines: every Cobb angle is zero.
    pub fn straight(count: usize) -> Self {
        SynthConfig { count, amplitude: (0.0, 0.0), tilt_jitter_deg: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("aspect", self.aspect),
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("offset", self.offset),
            ("spine_top", self.spine_top),
            ("spine_bottom", self.spine_bottom),
            ("vertebra_aspect", self.vertebra_aspect),
            ("bone", self.bone),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(format!("{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        if self.height.0 < 64 || self.height.0 > self.height.1 {
            return Err(invalid(format!("height range {:?} invalid (minimum 64)", self.height)));
        }
        if self.aspect.0 <= 0.0 || self.vertebra_aspect.0 <= 0.0 {
            return Err(invalid("aspect ratios must be positive"));
        }
        if !(0.0..1.0).contains(&self.spine_top.0) || self.spine_top.1 >= self.spine_bottom.0 || self.spine_bottom.1 > 1.0 {
            return Err(invalid("spine must start above where it ends, inside the image"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.bone.0) || !unit(self.bone.1) || !unit(self.background) {
            return Err(invalid("intensities must lie in [0, 1]"));
        }
        if self.blur_sigma < 0.0 || self.noise_std < 0.0 || self.soft_tissue < 0.0 || self.tilt_jitter_deg < 0.0 {
            return Err(invalid("blur, noise, tissue and jitter must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub image: GrayImage,
    /// 68 corners, vertebra-major, TL, TR, BL, BR.
    pub corners: Shape,
    pub centers: Shape,
    pub true_cobb: CobbAngles,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

struct Vertebra {
    center: Point,
    tilt: f64,
    half_w: f64,
    half_h: f64,
    bone: f64,
}

impl Vertebra {
    fn corners(&self) -> [Point; 4] {
        let (s, c) = self.tilt.sin_cos();
        let at = |u: f64, v: f64| Point::new(self.center.x + u * c - v * s, self.center.y + u * s + v * c);
        let (w, h) = (self.half_w, self.half_h);
        [at(-w, -h), at(w, -h), at(-w, h), at(w, h)]
    }
}

/// Generates `cfg.count` samples; identical `(cfg, seed)` gives identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.count).map(|_| master.gen()).collect();
    Ok(seeds.par_iter().map(|&s| synth_one(cfg, s)).collect())
}

fn synth_one(cfg: &SynthConfig, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = rng.gen_range(cfg.height.0..=cfg.height.1);
    let width = ((height as f64 * draw(&mut rng, cfg.aspect)).round() as usize).max(16);
    let (wf, hf) = (width as f64, height as f64);

    let amp = draw(&mut rng, cfg.amplitude) * wf * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let freq = draw(&mut rng, cfg.frequency);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let offset = draw(&mut rng, cfg.offset) * wf;
    let top = draw(&mut rng, cfg.spine_top) * hf;
    let bottom = draw(&mut rng, cfg.spine_bottom) * hf;
    let span = bottom - top;
    let spacing = span / VERTEBRAE as f64;
    let ratio = draw(&mut rng, cfg.vertebra_aspect);
    let jitter_amp = cfg.tilt_jitter_deg.to_radians();
    let (jitter_freq, jitter_phase) = (rng.gen_range(0.3..0.9), rng.gen_range(0.0..std::f64::consts::TAU));

    let vertebrae: Vec<Vertebra> = (0..VERTEBRAE)
        .map(|i| {
            let t = (i as f64 + 0.5) / VERTEBRAE as f64;
            let x = offset + amp * (freq * t + phase).sin();
            let y = top + t * span;
            // centerline tangent (dx/dt, dy/dt); endplates run perpendicular
            let (dx, dy) = (amp * freq * (freq * t + phase).cos(), span);
            let wobble = jitter_amp * (jitter_freq * i as f64 + jitter_phase).sin();
            let tilt = (-dx).atan2(dy) + wobble;
            let half_h = 0.36 * spacing * (0.9 + 0.2 * t);
            let half_w = half_h * ratio * (0.92 + 0.16 * t);
            Vertebra { center: Point::new(x, y), tilt, half_w, half_h, bone: draw(&mut rng, cfg.bone) }
        })
        .collect();

    let image = render(cfg, width, height, &vertebrae, (amp, freq, phase, offset, top, span), &mut rng);
    let corner_pts: Vec<Point> = vertebrae.iter().flat_map(|v| v.corners()).collect();
    let corners = Shape::new(ShapeKind::Full68, corner_pts).expect("68 corners");
    let centers = corners.centers().expect("full shape");
    let tilts: Vec<f64> = vertebrae.iter().map(|v| v.tilt).collect();
    SyntheticSample { image, corners, centers, true_cobb: cobb_from_tilts(&tilts) }
}

fn render(
    cfg: &SynthConfig,
    width: usize,
    height: usize,
    vertebrae: &[Vertebra],
    (amp, freq, phase, offset, top, span): (f64, f64, f64, f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let (wf, hf) = (width as f64, height as f64);
    let gradient = rng.gen_range(-0.06..0.06);
    let tissue_width = 0.22 * wf;
    let mut buf = vec![0.0f64; width * height];
    for y in 0..height {
        let t = ((y as f64 - top) / span).clamp(0.0, 1.0);
        let spine_x = offset + amp * (freq * t + phase).sin();
        for x in 0..width {
            let d = (x as f64 - spine_x) / tissue_width;
            let glow = cfg.soft_tissue * (-d * d).exp();
            let shade = gradient * (y as f64 / hf - 0.5) + 0.03 * (3.0 * x as f64 / wf).cos();
            buf[y * width + x] = cfg.background + glow + shade;
        }
    }
    // 2x2 supersampled coverage of each vertebra body
    const SUB: [f64; 2] = [-0.25, 0.25];
    for v in vertebrae {
        let (s, c) = v.tilt.sin_cos();
        let reach = v.half_w.hypot(v.half_h) + 1.0;
        let x0 = ((v.center.x - reach).floor().max(0.0)) as usize;
        let x1 = ((v.center.x + reach).ceil().min(wf - 1.0)).max(0.0) as usize;
        let y0 = ((v.center.y - reach).floor().max(0.0)) as usize;
        let y1 = ((v.center.y + reach).ceil().min(hf - 1.0)).max(0.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut cover = 0.0;
                for sy in SUB {
                    for sx in SUB {
                        let (px, py) = (x as f64 + sx - v.center.x, y as f64 + sy - v.center.y);
                        let u = px * c + py * s;
                        let w = -px * s + py * c;
                        if u.abs() <= v.half_w && w.abs() <= v.half_h {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    let p = &mut buf[y * width + x];
                    *p = *p * (1.0 - cover) + (v.bone + 0.5 * (*p - cfg.background)) * cover;
                }
            }
        }
    }
    let mut buf = gaussian_blur(&buf, width, height, cfg.blur_sigma);
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        buf.iter_mut().for_each(|p| *p += noise.sample(rng));
    }
    let data = buf.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    GrayImage::from_vec(width, height, data).expect("clamped raster")
}

fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[y * width + clamp(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> SynthConfig {
        SynthConfig { count, height: (120, 160), ..Default::default() }
    }

    #[test]
    fn same_seed_same_samples() {
        let a = synth_generate(&small(3), 42).unwrap();
        let b = synth_generate(&small(3), 42).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(3), 43).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn straight_spines_have_zero_cobb() {
        let cfg = SynthConfig { height: (120, 160), ..SynthConfig::straight(4) };
        for s in synth_generate(&cfg, 1).unwrap() {
            assert_eq!(s.true_cobb, CobbAngles { pt: 0.0, mt: 0.0, tl: 0.0 });
            for q in s.corners.points().chunks_exact(4) {
                assert!((q[0].y - q[1].y).abs() < 1e-9 && (q[0].x - q[2].x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn centers_match_corner_means() {
        for s in synth_generate(&small(5), 9).unwrap() {
            let again = s.corners.centers().unwrap();
            for (a, b) in again.points().iter().zip(s.centers.points()) {
                assert!(a.dist(*b) < 1e-9);
            }
        }
    }

    #[test]
    fn corner_order_in_local_frame() {
        for s in synth_generate(&small(5), 17).unwrap() {
            for q in s.corners.points().chunks_exact(4) {
                // undo the vertebra's own tilt (direction TL -> TR)
                let ang = (q[1].y - q[0].y).atan2(q[1].x - q[0].x);
                let (sn, cs) = ang.sin_cos();
                let local: Vec<(f64, f64)> =
                    q.iter().map(|p| (p.x * cs + p.y * sn, -p.x * sn + p.y * cs)).collect();
                let (tl, tr, bl, br) = (local[0], local[1], local[2], local[3]);
                assert!(tl.0 < tr.0 && bl.0 < br.0 && tl.1 < bl.1 && tr.1 < br.1);
            }
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = SynthConfig { aspect: (0.6, 0.4), ..small(1) };
        assert!(synth_generate(&bad, 0).is_err());
        let bad = SynthConfig { noise_std: -1.0, ..small(1) };
        assert!(synth_generate(&bad, 0).is_err());
        let bad = SynthConfig { height: (10, 20), ..small(1) };
        assert!(synth_generate(&bad, 0).is_err());
    }

    #[test]
    fn vertebrae_are_brighter_than_background() {
        let s = &synth_generate(&small(1), 5).unwrap()[0];
        let c = s.centers.points()[8];
        let inside = s.image.get(c.x.round() as usize, c.y.round() as usize);
        assert!(inside > 0.4, "vertebra body intensity {inside}");
        assert!(s.image.get(1, 1) < inside);
    }
}
