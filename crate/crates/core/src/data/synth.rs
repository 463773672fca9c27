//! Procedural clips: a background seen through a drifting camera with a
//! foreign textured sprite composited on top.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pnm::{level, quantize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attempts at drawing a sprite trajectory that stays in frame.
const MAX_RETRIES: usize = 64;
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    /// Smooth backgrounds, rigid sprites.
    #[default]
    ToyA,
    /// Textured backgrounds, sprites with per-frame shape jitter.
    ToyB,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-A" => Ok(Profile::ToyA),
            "toy-B" => Ok(Profile::ToyB),
            _ => Err(Error::Contract(format!("unknown profile `{s}` (expected toy-A or toy-B)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::ToyA => "toy-A",
            Profile::ToyB => "toy-B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub profile: Profile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 7,
            height: 48,
            width: 80,
            profile: Profile::ToyA,
        }
    }
}

/// One input/mask/clean triplet. Videos are `[T, 3, H, W]`, masks
/// `[T, H, W]`, all on the 8-bit grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub id: String,
    pub seed: u64,
    pub input: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub clean: Tensor<f32>,
}

impl Snippet {
    pub fn id_for(profile: Profile, seed: u64) -> String {
        format!("{profile}-{seed}")
    }

    pub fn frames(&self) -> usize {
        self.input.shape()[0]
    }

    /// Mask of frame 0, `[H, W]`.
    pub fn first_mask(&self) -> Tensor<f32> {
        let s = self.masks.shape();
        self.masks.narrow(0, 0, 1).expect("nonempty clip").reshaped(&[s[1], s[2]]).expect("same size")
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One sinusoidal component of a colour field.
#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, wavelength: (f64, f64), amp: f64) -> Self {
        let lambda = rng.gen_range(wavelength.0..wavelength.1);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let k = 2.0 * PI / lambda;
        Wave {
            fx: k * dir.cos(),
            fy: k * dir.sin(),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: [0, 1, 2].map(|_| rng.gen_range(-amp..amp)),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        (self.fx * x + self.fy * y + self.phase).sin()
    }
}

/// A colour field defined on the whole plane.
#[derive(Clone, Debug)]
pub struct Scene {
    base: [f64; 3],
    waves: Vec<Wave>,
}

impl Scene {
    pub fn random(rng: &mut ChaCha8Rng, profile: Profile) -> Self {
        let base = [0, 1, 2].map(|_| rng.gen_range(0.3..0.7));
        let mut waves: Vec<Wave> = (0..3).map(|_| Wave::random(rng, (40.0, 120.0), 0.15)).collect();
        let (count, amp) = match profile {
            Profile::ToyA => (2, 0.03),
            Profile::ToyB => (5, 0.08),
        };
        waves.extend((0..count).map(|_| Wave::random(rng, (6.0, 16.0), amp)));
        Scene { base, waves }
    }

    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = w.at(x, y);
            for (ch, a) in c.iter_mut().zip(w.amp) {
                *ch += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Camera path over the scene: a crop window that translates and zooms
/// linearly in time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub origin: (f64, f64),
    /// Pixels per frame, at most 2 in magnitude.
    pub velocity: (f64, f64),
    pub zoom: f64,
    pub zoom_rate: f64,
}

impl Camera {
    pub fn fixed() -> Self {
        Camera {
            origin: (0.0, 0.0),
            velocity: (0.0, 0.0),
            zoom: 1.0,
            zoom_rate: 0.0,
        }
    }

    /// Zoom stays inside `[0.95, 1.05]` for `frames` frames.
    pub fn random(rng: &mut ChaCha8Rng, frames: usize) -> Self {
        let speed = rng.gen_range(0.0..2.0);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let zoom = rng.gen_range(0.97..1.03);
        let span = frames.saturating_sub(1).max(1) as f64;
        let end = rng.gen_range(0.95..1.05);
        Camera {
            origin: (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)),
            velocity: (speed * dir.cos(), speed * dir.sin()),
            zoom,
            zoom_rate: (end - zoom) / span,
        }
    }

    fn world(&self, t: usize, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let z = self.zoom + self.zoom_rate * t as f64;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        (
            self.origin.0 + self.velocity.0 * t as f64 + cx + (x - cx) / z,
            self.origin.1 + self.velocity.1 * t as f64 + cy + (y - cy) / z,
        )
    }
}

/// Renders `scene` through `camera` as a quantised `[T, 3, H, W]` clip.
pub fn render_background(scene: &Scene, camera: &Camera, frames: usize, h: usize, w: usize) -> Tensor<f32> {
    let hw = h * w;
    let mut data = vec![0.0f32; frames * 3 * hw];
    for t in 0..frames {
        for p in 0..hw {
            let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let (wx, wy) = camera.world(t, x, y, h, w);
            let c = scene.color(wx, wy);
            for ch in 0..3 {
                data[(t * 3 + ch) * hw + p] = level(quantize(c[ch]));
            }
        }
    }
    Tensor::new(&[frames, 3, h, w], data).expect("sized above")
}

pub fn gen_background(seed: u64, cfg: &SynthConfig) -> Tensor<f32> {
    let mut rng = rng_for(seed, 0);
    let scene = Scene::random(&mut rng, cfg.profile);
    let camera = Camera::random(&mut rng, cfg.frames);
    render_background(&scene, &camera, cfg.frames, cfg.height, cfg.width)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { a: f64, b: f64 },
    /// Star-shaped polygon with vertex `i` at angle `2*pi*i/n` and the given radius.
    Polygon { radii: Vec<f64> },
}

impl Shape {
    fn area(&self) -> f64 {
        match self {
            Shape::Ellipse { a, b } => PI * a * b,
            Shape::Polygon { radii } => {
                let n = radii.len();
                let step = (2.0 * PI / n as f64).sin();
                (0..n).map(|i| 0.5 * radii[i] * radii[(i + 1) % n] * step).sum()
            }
        }
    }

    fn scaled(&self, s: f64) -> Shape {
        match self {
            Shape::Ellipse { a, b } => Shape::Ellipse { a: a * s, b: b * s },
            Shape::Polygon { radii } => Shape::Polygon {
                radii: radii.iter().map(|r| r * s).collect(),
            },
        }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng, amount: f64) -> Shape {
        let mut j = || 1.0 + rng.gen_range(-amount..amount);
        match self {
            Shape::Ellipse { a, b } => Shape::Ellipse { a: a * j(), b: b * j() },
            Shape::Polygon { radii } => Shape::Polygon {
                radii: radii.iter().map(|r| r * j()).collect(),
            },
        }
    }

    /// Whether local point `(u, v)` lies inside.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Polygon { radii } => {
                let n = radii.len();
                let vert = |i: usize| {
                    let ang = 2.0 * PI * i as f64 / n as f64;
                    (radii[i % n] * ang.cos(), radii[i % n] * ang.sin())
                };
                let mut inside = false;
                for i in 0..n {
                    let ((x1, y1), (x2, y2)) = (vert(i), vert(i + 1));
                    if (y1 > v) != (y2 > v) && u < x1 + (v - y1) * (x2 - x1) / (y2 - y1) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
}

impl Pose {
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.x, py - self.y);
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Pixel-centre rasterisation of `shape` at `pose` on an `h x w` grid.
pub fn rasterize(shape: &Shape, pose: &Pose, h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|p| {
            let (u, v) = pose.local((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            shape.contains(u, v)
        })
        .collect()
}

/// Two-colour striped texture attached to the sprite.
#[derive(Clone, Copy, Debug)]
struct Texture {
    a: [f64; 3],
    b: [f64; 3],
    period: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        // saturated colours stand apart from the muted backgrounds
        let mut vivid = || {
            let mut c = [0, 1, 2].map(|_| rng.gen_range(0.0..0.25));
            c[rng.gen_range(0..3)] = rng.gen_range(0.8..1.0);
            c
        };
        let (a, b) = (vivid(), vivid());
        Texture {
            a,
            b,
            period: rng.gen_range(4.0..9.0),
        }
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let s = (2.0 * PI * (u + 0.5 * v) / self.period).sin();
        let t = 0.5 + 0.5 * s;
        [0, 1, 2].map(|c| self.a[c] * t + self.b[c] * (1.0 - t))
    }
}

/// Sprite layer `[T, 3, H, W]` and binary masks `[T, H, W]`.
pub type ObjectLayers = (Tensor<f32>, Tensor<f32>);

pub fn gen_object(seed: u64, cfg: &SynthConfig) -> Result<ObjectLayers> {
    let mut rng = rng_for(seed, 1);
    let (h, w, frames) = (cfg.height, cfg.width, cfg.frames);
    let frame_area = (h * w) as f64;
    let shape = if rng.gen_bool(0.5) {
        let a = 1.0;
        Shape::Ellipse { a, b: rng.gen_range(0.6..1.0) }
    } else {
        let n = rng.gen_range(5..9);
        Shape::Polygon {
            radii: (0..n).map(|_| rng.gen_range(0.7..1.0)).collect(),
        }
    };
    let target = rng.gen_range(0.04..0.12) * frame_area;
    let shape = shape.scaled((target / shape.area()).sqrt());
    let texture = Texture::random(&mut rng);
    let jitter = match cfg.profile {
        Profile::ToyA => 0.0,
        Profile::ToyB => 0.1,
    };

    for _ in 0..MAX_RETRIES {
        let speed = rng.gen_range(0.0..3.0);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let spin = rng.gen_range(-5.0..5.0f64).to_radians();
        let start = Pose {
            x: rng.gen_range(0.3..0.7) * w as f64,
            y: rng.gen_range(0.3..0.7) * h as f64,
            angle: rng.gen_range(0.0..2.0 * PI),
        };
        let mut sprite = vec![0.0f32; frames * 3 * h * w];
        let mut masks = vec![0.0f32; frames * h * w];
        let mut ok = true;
        for t in 0..frames {
            let tf = t as f64;
            let pose = Pose {
                x: start.x + speed * dir.cos() * tf,
                y: start.y + speed * dir.sin() * tf,
                angle: start.angle + spin * tf,
            };
            let shape_t = if jitter > 0.0 { shape.jittered(&mut rng, jitter) } else { shape.clone() };
            let support = rasterize(&shape_t, &pose, h, w);
            let area = support.iter().filter(|&&b| b).count() as f64 / frame_area;
            if !(MIN_AREA..=MAX_AREA).contains(&area) {
                ok = false;
                break;
            }
            for (p, _) in support.iter().enumerate().filter(|(_, &b)| b) {
                masks[t * h * w + p] = 1.0;
                let (u, v) = pose.local((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                let c = texture.at(u, v);
                for ch in 0..3 {
                    sprite[(t * 3 + ch) * h * w + p] = level(quantize(c[ch]));
                }
            }
        }
        if ok {
            return Ok((
                Tensor::new(&[frames, 3, h, w], sprite)?,
                Tensor::new(&[frames, h, w], masks)?,
            ));
        }
    }
    Err(Error::Contract(format!(
        "seed {seed}: no sprite trajectory stayed in frame after {MAX_RETRIES} attempts"
    )))
}

/// Pastes the sprite layer wherever the mask is set.
pub fn composite_layers(clean: &Tensor<f32>, sprite: &Tensor<f32>, masks: &Tensor<f32>) -> Tensor<f32> {
    let s = clean.shape();
    let hw = s[2] * s[3];
    Tensor::from_fn(s, |i| {
        if masks.data()[(i / (3 * hw)) * hw + i % hw] == 1.0 {
            sprite.data()[i]
        } else {
            clean.data()[i]
        }
    })
}

/// Snippet and the sprite layer it was composited from.
pub fn synthesize_layers(seed: u64, cfg: &SynthConfig) -> Result<(Snippet, Tensor<f32>)> {
    if cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Geometry(format!(
            "clip size {}x{}x{} must be positive",
            cfg.frames, cfg.height, cfg.width
        )));
    }
    let clean = gen_background(seed, cfg);
    let (sprite, masks) = gen_object(seed, cfg)?;
    let input = composite_layers(&clean, &sprite, &masks);
    let snippet = Snippet {
        id: Snippet::id_for(cfg.profile, seed),
        seed,
        input,
        masks,
        clean,
    };
    Ok((snippet, sprite))
}

pub fn synthesize_snippet(seed: u64, cfg: &SynthConfig) -> Result<Snippet> {
    synthesize_layers(seed, cfg).map(|(s, _)| s)
}
