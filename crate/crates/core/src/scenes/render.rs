//! Procedural renderers for the synthetic scenarios.
//!
//! Frames are row-major `height x width` intensities in `[0, 1]` on a black
//! background. Shapes are anti-aliased by testing a 4x4 grid of sample points
//! per pixel and averaging. Geometry is specified for a 50x50 frame and
//! scaled with the shorter side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SUPERSAMPLE: usize = 4;
const REFERENCE_SIZE: f64 = 50.0;

/// Distance from the pivot to the bob centre, in reference pixels.
pub const PENDULUM_ARM: f64 = 18.0;
pub const PENDULUM_BOB_RADIUS: f64 = 5.0;
/// Base radius of the two-halved disc, in reference pixels.
pub const SCALE_BASE_RADIUS: f64 = 12.0;
pub const INTENSITY_RANGE: (f64, f64) = (0.2, 1.0);
/// Peak background texture level behind the two-body sprites.
const BACKGROUND_LEVEL: f64 = 0.3;
const SPRITE_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 50,
            height: 50,
        }
    }
}

impl RenderConfig {
    fn scale(&self) -> f64 {
        self.width.min(self.height) as f64 / REFERENCE_SIZE
    }

    fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Fractional coverage of each pixel by the region `inside(x, y)`.
fn coverage(cfg: &RenderConfig, inside: impl Fn(f64, f64) -> bool) -> Vec<f32> {
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let mut out = vec![0.0f32; cfg.pixels()];
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let mut hits = 0u32;
            for sy in 0..SUPERSAMPLE {
                let y = row as f64 + (sy as f64 + 0.5) * step;
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    if inside(x, y) {
                        hits += 1;
                    }
                }
            }
            out[row * cfg.width + col] = hits as f32 / total;
        }
    }
    out
}

/// Bob position in pixel coordinates for an angle in degrees from the
/// downward vertical, positive towards +x.
pub fn pendulum_bob_position(theta_deg: f64, cfg: &RenderConfig) -> (f64, f64) {
    let (cx, cy) = cfg.center();
    let arm = PENDULUM_ARM * cfg.scale();
    let (s, c) = theta_deg.to_radians().sin_cos();
    (cx + arm * s, cy + arm * c)
}

pub fn render_pendulum(theta_deg: f64, cfg: &RenderConfig) -> Vec<f32> {
    let (bx, by) = pendulum_bob_position(theta_deg, cfg);
    let r = PENDULUM_BOB_RADIUS * cfg.scale();
    let r2 = r * r;
    coverage(cfg, |x, y| (x - bx) * (x - bx) + (y - by) * (y - by) <= r2)
}

/// The irregular blob: a union of three ellipses in unit-square coordinates.
fn in_blob(u: f64, v: f64) -> bool {
    const ELLIPSES: [(f64, f64, f64, f64, f64); 3] = [
        // centre u, centre v, radius u, radius v, rotation
        (0.46, 0.52, 0.26, 0.16, 0.5),
        (0.62, 0.34, 0.14, 0.11, -0.3),
        (0.34, 0.66, 0.11, 0.11, 0.0),
    ];
    ELLIPSES.iter().any(|&(cu, cv, ru, rv, rot)| {
        let (s, c) = f64::sin_cos(rot);
        let du = u - cu;
        let dv = v - cv;
        let a = c * du + s * dv;
        let b = -s * du + c * dv;
        (a / ru).powi(2) + (b / rv).powi(2) <= 1.0
    })
}

/// Binary interior mask of the intensity blob (every sample point inside).
pub fn intensity_interior(cfg: &RenderConfig) -> Vec<bool> {
    coverage(cfg, |x, y| in_blob(x / cfg.width as f64, y / cfg.height as f64))
        .into_iter()
        .map(|c| c == 1.0)
        .collect()
}

/// Renders the blob with every interior pixel equal to `z`; values outside
/// the normalized range are clipped.
pub fn render_intensity(z: f64, cfg: &RenderConfig) -> Vec<f32> {
    let (lo, hi) = INTENSITY_RANGE;
    let level = if z < lo || z > hi {
        log::warn!("intensity {z} outside [{lo}, {hi}], clipping");
        z.clamp(lo, hi)
    } else {
        z
    };
    coverage(cfg, |x, y| in_blob(x / cfg.width as f64, y / cfg.height as f64))
        .into_iter()
        .map(|c| (c as f64 * level) as f32)
        .collect()
}

/// Centred disc whose right half has radius `R0 + r` and left half `R0 - r`.
pub fn render_scale(r: f64, cfg: &RenderConfig) -> Vec<f32> {
    let (cx, cy) = cfg.center();
    let s = cfg.scale();
    let right = ((SCALE_BASE_RADIUS + r) * s).max(0.0);
    let left = ((SCALE_BASE_RADIUS - r) * s).max(0.0);
    coverage(cfg, |x, y| {
        let rad = if x >= cx { right } else { left };
        (x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad
    })
}

/// Static texture behind the two-body sprites.
pub fn background_texture(cfg: &RenderConfig, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_bac6);
    (0..cfg.pixels())
        .map(|_| rng.random_range(0.0..BACKGROUND_LEVEL) as f32)
        .collect()
}

fn plus_sprite(cfg: &RenderConfig, p: [f64; 2]) -> Vec<f32> {
    let s = cfg.scale();
    let arm = SPRITE_RADIUS * s;
    let half = 1.5 * s;
    coverage(cfg, |x, y| {
        let (dx, dy) = ((x - p[0]).abs(), (y - p[1]).abs());
        (dx <= arm && dy <= half) || (dy <= arm && dx <= half)
    })
}

fn ring_sprite(cfg: &RenderConfig, p: [f64; 2]) -> Vec<f32> {
    let s = cfg.scale();
    let outer = SPRITE_RADIUS * s;
    let inner = 0.5 * outer;
    coverage(cfg, |x, y| {
        let r2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
        r2 <= outer * outer && r2 >= inner * inner
    })
}

/// A rendered two-body frame and one binary mask per object.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBodyFrame {
    pub frame: Vec<f32>,
    pub mask1: Vec<f32>,
    pub mask2: Vec<f32>,
}

/// Composites a plus-shaped sprite at `p1` and a ring at `p2` (pixel
/// coordinates) over `background`.
pub fn render_two_body(p1: [f64; 2], p2: [f64; 2], cfg: &RenderConfig, background: &[f32]) -> TwoBodyFrame {
    let c1 = plus_sprite(cfg, p1);
    let c2 = ring_sprite(cfg, p2);
    let frame = background
        .iter()
        .zip(c1.iter().zip(&c2))
        .map(|(&bg, (&a, &b))| {
            let cover = 1.0 - (1.0 - a) * (1.0 - b);
            bg * (1.0 - cover) + cover
        })
        .collect();
    let binary = |c: Vec<f32>| c.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    TwoBodyFrame {
        frame,
        mask1: binary(c1),
        mask2: binary(c2),
    }
}
