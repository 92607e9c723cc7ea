//! Procedural dynamic multi-exposure scenes.
//!
//! A scene is an HDR radiance field: a smooth background plus rectangles and
//! discs, some darker and some far brighter than the mid exposure can hold.
//! Foreground shapes move rigidly between the three capture instants. Each
//! frame is `clamp(radiance · 2^ev, 0, 1)^(1/γ)`; the ground truth is the
//! reference-instant radiance tone-mapped with `(r / (1 + r))^(1/γ)`, so it
//! keeps detail both where the mid frame clips and where it is dark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::ExposureTriplet;
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub num_shapes: usize,
    /// Displacement `(dw, dh)` in pixels between consecutive frames.
    pub motion: (f32, f32),
    /// Exposure-value offsets of the low, mid and high frames, in stops.
    pub ev_offsets: [f32; 3],
    pub gamma: f32,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        SceneSpec {
            width,
            height,
            seed,
            num_shapes: 6,
            motion: (2.0, 1.0),
            ev_offsets: [-2.0, 0.0, 2.0],
            gamma: 2.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidInput(format!(
                "scene must be at least 16×16, got {}×{}",
                self.width, self.height
            )));
        }
        let m = self.motion.0.hypot(self.motion.1);
        if !(m < self.width.min(self.height) as f32 / 4.0) {
            return Err(Error::InvalidInput(format!(
                "motion magnitude {m} must be below a quarter of the smaller dimension"
            )));
        }
        let ev = self.ev_offsets;
        if !(ev[0] < ev[1] && ev[1] < ev[2]) || ev.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "exposure offsets {ev:?} must be strictly increasing"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Geometry {
    Rect { half_w: f32, half_h: f32 },
    Disc { radius: f32 },
}

#[derive(Debug, Clone)]
struct Shape {
    center: (f32, f32),
    geometry: Geometry,
    radiance: [f32; 3],
    /// Per-shape multiple of the scene motion.
    speed: f32,
}

impl Shape {
    fn contains(&self, w: f32, h: f32, offset: (f32, f32)) -> bool {
        let dw = w - (self.center.0 + offset.0 * self.speed);
        let dh = h - (self.center.1 + offset.1 * self.speed);
        match self.geometry {
            Geometry::Rect { half_w, half_h } => dw.abs() <= half_w && dh.abs() <= half_h,
            Geometry::Disc { radius } => dw * dw + dh * dh <= radius * radius,
        }
    }
}

struct Scene {
    shape: Shape3,
    background: [[f32; 3]; 4],
    stripes: (f32, f32),
    shapes: Vec<Shape>,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

impl Scene {
    fn generate(spec: &SceneSpec) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let color = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
            let base = log_uniform(rng, lo, hi);
            [0, 1, 2].map(|_| base * rng.gen_range(0.6..1.4))
        };
        // Corner radiances of a bilinear background gradient.
        let background = [0, 1, 2, 3].map(|_| color(&mut rng, 0.05, 1.5));
        let stripes = (rng.gen_range(0.05..0.3), rng.gen_range(0.0..std::f32::consts::TAU));
        let (w, h) = (spec.width as f32, spec.height as f32);
        let shapes = (0..spec.num_shapes)
            .map(|i| {
                let size = rng.gen_range(0.08..0.25) * w.min(h);
                let geometry = if rng.gen_bool(0.5) {
                    Geometry::Rect {
                        half_w: size * rng.gen_range(0.5..1.0),
                        half_h: size * rng.gen_range(0.5..1.0),
                    }
                } else {
                    Geometry::Disc { radius: size * 0.75 }
                };
                // Alternate highlights (beyond the mid frame's range) and shadows.
                let radiance = if i % 2 == 0 {
                    color(&mut rng, 1.5, 6.0)
                } else {
                    color(&mut rng, 0.02, 0.3)
                };
                Shape {
                    center: (rng.gen_range(0.0..w), rng.gen_range(0.0..h)),
                    geometry,
                    radiance,
                    speed: rng.gen_range(0.5..1.5),
                }
            })
            .collect();
        Scene {
            shape: Shape3::new(3, spec.width, spec.height),
            background,
            stripes,
            shapes,
        }
    }

    /// Radiance at capture instant `t ∈ {-1, 0, 1}`.
    fn radiance(&self, motion: (f32, f32), t: f32) -> Tensor3 {
        let s = self.shape;
        let offset = (motion.0 * t, motion.1 * t);
        let bg = &self.background;
        let mut out = Tensor3::zeros(s);
        for w in 0..s.w {
            for h in 0..s.h {
                let u = (w as f32 + 0.5) / s.w as f32;
                let v = (h as f32 + 0.5) / s.h as f32;
                // Painter's order: later shapes are on top.
                let hit = self
                    .shapes
                    .iter()
                    .rev()
                    .find(|sh| sh.contains(w as f32 + 0.5, h as f32 + 0.5, offset));
                let texture = 1.0 + 0.15 * ((w + h) as f32 * self.stripes.0 + self.stripes.1).sin();
                for c in 0..3 {
                    let value = match hit {
                        Some(sh) => sh.radiance[c],
                        None => {
                            let top = bg[0][c] * (1.0 - u) + bg[1][c] * u;
                            let bottom = bg[2][c] * (1.0 - u) + bg[3][c] * u;
                            top * (1.0 - v) + bottom * v
                        }
                    };
                    out.set(c, w, h, value * texture);
                }
            }
        }
        out
    }
}

/// Renders one scene: the three exposures and the ground truth.
pub fn synth_triplet(spec: &SceneSpec) -> Result<(ExposureTriplet, Tensor3)> {
    spec.validate()?;
    let scene = Scene::generate(spec);
    let inv_gamma = 1.0 / spec.gamma;
    let frame = |t: f32, ev: f32| {
        let gain = ev.exp2();
        scene
            .radiance(spec.motion, t)
            .map(|r| (r * gain).clamp(0.0, 1.0).powf(inv_gamma))
    };
    let x1 = frame(-1.0, spec.ev_offsets[0]);
    let x2 = frame(0.0, spec.ev_offsets[1]);
    let x3 = frame(1.0, spec.ev_offsets[2]);
    let gt = scene
        .radiance(spec.motion, 0.0)
        .map(|r| (r / (1.0 + r)).powf(inv_gamma));
    Ok((ExposureTriplet::new(x1, x2, x3)?, gt))
}
