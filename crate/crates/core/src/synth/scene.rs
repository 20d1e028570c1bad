//! Procedural clean scenes and depth maps.

use crate::{DepthMap, Error, Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    Ramp,
    Radial,
    SmoothNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Gradients,
    Shapes,
    Textured,
}

/// Everything needed to regenerate one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub depth_kind: DepthKind,
    pub content_kind: ContentKind,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, side) in [("height", self.height), ("width", self.width)] {
            if side < 32 || side % 4 != 0 {
                return Err(Error::InvalidInput(format!(
                    "scene {name} {side} must be >= 32 and divisible by 4"
                )));
            }
        }
        Ok(())
    }

    /// Scene kinds picked from the seed, so a bare seed fully describes a scene.
    pub fn from_seed(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00_D15E_A5E5);
        let depth_kind = [DepthKind::Ramp, DepthKind::Radial, DepthKind::SmoothNoise][rng.random_range(0..3)];
        let content_kind = [ContentKind::Gradients, ContentKind::Shapes, ContentKind::Textured][rng.random_range(0..3)];
        Self {
            seed,
            height,
            width,
            depth_kind,
            content_kind,
        }
    }
}

/// Clean radiance `J` for `spec`. Deterministic per spec.
pub fn gen_clean(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planes: Vec<Vec<f64>> = (0..3).map(|_| vec![0.0; h * w]).collect();

    // Layered gradients: a ramp per channel along its own direction plus a
    // slow wave, then stretched to a wide per-channel range.
    for plane in planes.iter_mut() {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = rng.random_range(0.5..2.0);
        let wave = rng.random_range(0.0..0.3);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
                let s = u * dx + v * dy;
                let t = ((u * dy - v * dx) * freq * std::f64::consts::TAU + phase).sin();
                plane[y * w + x] = s + wave * t;
            }
        }
        let lo = rng.random_range(0.02..0.15);
        let hi = rng.random_range(0.85..0.98);
        stretch(plane, lo, hi);
    }

    if spec.content_kind != ContentKind::Gradients {
        // Gradients fade into the background under the shapes.
        for plane in planes.iter_mut() {
            plane.iter_mut().for_each(|v| *v = 0.25 + 0.5 * *v);
        }
        let shapes = rng.random_range(4..9);
        for _ in 0..shapes {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(h as f64 * 0.08..h as f64 * 0.3);
            let rx = rng.random_range(w as f64 * 0.08..w as f64 * 0.3);
            let ellipse = rng.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    let inside = if ellipse {
                        ny * ny + nx * nx <= 1.0
                    } else {
                        ny.abs() <= 1.0 && nx.abs() <= 1.0
                    };
                    if inside {
                        for (c, plane) in planes.iter_mut().enumerate() {
                            plane[y * w + x] = color[c];
                        }
                    }
                }
            }
        }
    }

    if spec.content_kind == ContentKind::Textured {
        for (octave, amp) in [(8usize, 0.12), (4usize, 0.06)] {
            let noise = value_noise(&mut rng, h, w, (w / octave).max(2));
            for plane in planes.iter_mut() {
                let gain = rng.random_range(0.5..1.0) * amp;
                plane.iter_mut().zip(&noise).for_each(|(v, n)| *v += gain * (2.0 * n - 1.0));
            }
        }
    }

    // Fine grain on every kind: surfaces carry some texture at the pixel
    // scale, which is exactly what haze washes out. Separate stream so the
    // coarser layers do not depend on it.
    let mut grain_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ GRAIN_STREAM);
    let grain = value_noise(&mut grain_rng, h, w, (h.max(w) / GRAIN_CELL_PX).max(2));
    for plane in planes.iter_mut() {
        plane.iter_mut().zip(&grain).for_each(|(v, n)| *v += GRAIN_AMPLITUDE * (2.0 * n - 1.0));
    }

    let data = (0..h * w)
        .flat_map(|i| {
            let p = &planes;
            (0..3).map(move |c| p[c][i].clamp(0.0, 1.0) as f32)
        })
        .collect();
    Image::new(h, w, data)
}

const GRAIN_AMPLITUDE: f64 = 0.02;
const GRAIN_CELL_PX: usize = 2;
const GRAIN_STREAM: u64 = 0x6A41 << 40;

/// Depth map spanning exactly `[z_min, z_max]`.
pub fn gen_depth(spec: &SceneSpec, z_min: f64, z_max: f64) -> Result<DepthMap> {
    spec.validate()?;
    if !(z_min > 0.0) || !z_min.is_finite() || !z_max.is_finite() || z_max <= z_min {
        return Err(Error::InvalidInput(format!(
            "depth range [{z_min}, {z_max}] must satisfy 0 < z_min < z_max"
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.rotate_left(17) ^ 0xDEB7);
    let mut raw = vec![0.0f64; h * w];
    match spec.depth_kind {
        DepthKind::Ramp => {
            for y in 0..h {
                for x in 0..w {
                    raw[y * w + x] = x as f64;
                }
            }
        }
        DepthKind::Radial => {
            let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
            for y in 0..h {
                for x in 0..w {
                    raw[y * w + x] = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                }
            }
        }
        DepthKind::SmoothNoise => {
            let noise = value_noise(&mut rng, h, w, 3);
            let tilt = rng.random_range(0.0..0.5);
            for y in 0..h {
                for x in 0..w {
                    raw[y * w + x] = noise[y * w + x] + tilt * (1.0 - y as f64 / (h - 1) as f64);
                }
            }
        }
    }
    stretch(&mut raw, 0.0, 1.0);
    let span = z_max - z_min;
    let data = raw
        .iter()
        .map(|s| (z_min + span * s).clamp(z_min, z_max) as f32)
        .collect();
    DepthMap::new(h, w, data)
}

/// Affine map of `v` onto exactly `[lo, hi]`.
fn stretch(v: &mut [f64], lo: f64, hi: f64) {
    let (mn, mx) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let range = (mx - mn).max(1e-12);
    for x in v.iter_mut() {
        *x = lo + (hi - lo) * (*x - mn) / range;
    }
}

/// Smoothstep-interpolated lattice noise in `[0, 1]` with `cells` lattice
/// cells across the larger side.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let cell = h.max(w) as f64 / cells as f64;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
