//! Analytic puppet renderer: images, UV labels, flows and keypoints.
//!
//! Each part is drawn as the orthographic silhouette of its cylinder, so a
//! pixel at axial offset `a` and lateral offset `b` from the part frame sees
//! the chart point `(a / L, 0.5 + asin(b / r) / 2 pi)`. Parts are resolved by
//! a fixed depth order.

use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::CorrespondenceField;
use crate::rng::{derive_seed, normal, rng_from, tag};
use crate::surface::{PartFrame, PuppetBody};
use crate::tensor::Tensor;

/// Nominal height of the rest figure in model units.
const FIGURE_HEIGHT: f64 = 175.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Chart count `K`.
    pub parts: usize,
    /// Frames per sequence.
    pub frames: usize,
    /// Multiplier on the per-frame joint velocity noise; 0 freezes the pose.
    pub motion: f64,
    /// Fraction of the image height covered by the rest figure.
    pub fill: f64,
    /// Relative per-sequence scale jitter.
    pub scale_jitter: f64,
    /// Largest deviation of a limb joint from its rest angle (radians).
    pub joint_limit: f64,
    /// Largest initial offset of the pelvis from the image centre (pixels).
    pub root_jitter: f64,
    /// Seed of the body texture, shared by all sequences.
    pub texture_seed: u64,
    /// Samples per pixel along each axis when shading the image.
    pub supersample: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 64,
            height: 64,
            parts: crate::surface::DEFAULT_PARTS,
            frames: 20,
            motion: 1.0,
            fill: 0.85,
            scale_jitter: 0.08,
            joint_limit: 0.9,
            root_jitter: 4.0,
            texture_seed: 0,
            supersample: 2,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(invalid(format!("resolution must be at least 32, got {}x{}", self.width, self.height)));
        }
        if self.frames == 0 {
            return Err(invalid("sequence length must be at least 1"));
        }
        if !(self.motion >= 0.0 && self.motion.is_finite()) {
            return Err(invalid("motion magnitude must be finite and non-negative"));
        }
        if !(self.fill > 0.0 && self.fill <= 2.0) {
            return Err(invalid("fill must be in (0, 2]"));
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(invalid("scale_jitter must be in [0, 0.5)"));
        }
        if !(self.joint_limit >= 0.0 && self.joint_limit <= 3.0) {
            return Err(invalid("joint_limit must be in [0, 3]"));
        }
        if !(self.root_jitter >= 0.0 && self.root_jitter.is_finite()) {
            return Err(invalid("root_jitter must be non-negative"));
        }
        if self.supersample == 0 || self.supersample > 8 {
            return Err(invalid("supersample must be in 1..=8"));
        }
        PuppetBody::humanoid(self.parts)?;
        Ok(())
    }

    fn base_scale(&self) -> f64 {
        self.fill * self.height as f64 / FIGURE_HEIGHT
    }
}

/// Joint configuration of the puppet in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PuppetPose {
    /// Pelvis position in pixels.
    pub root: [f64; 2],
    /// Relative joint angle per part (the torso's is its world angle).
    pub angles: Vec<f64>,
    /// Pixels per model unit.
    pub scale: f64,
}

/// Per-pixel chart labels; `k = 0` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct UvMap {
    pub width: usize,
    pub height: usize,
    pub k: Vec<u8>,
    pub u: Vec<[f64; 2]>,
}

impl UvMap {
    pub fn get(&self, x: usize, y: usize) -> (usize, [f64; 2]) {
        let i = y * self.width + x;
        (self.k[i] as usize, self.u[i])
    }

    pub fn foreground_count(&self) -> usize {
        self.k.iter().filter(|&&k| k != 0).count()
    }
}

/// A named joint tied to a fixed chart point.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub joint: usize,
    pub pos: [f64; 2],
    pub k: usize,
    pub u: [f64; 2],
    pub visible: bool,
}

impl Keypoint {
    pub fn name(&self) -> &'static str {
        JOINTS[self.joint].0
    }

    /// Pixel the keypoint is attached to.
    pub fn pixel(&self) -> (isize, isize) {
        (self.pos[0].round() as isize, self.pos[1].round() as isize)
    }
}

/// Joint name, part name and chart point.
pub const JOINTS: [(&str, &str, [f64; 2]); 14] = [
    ("head", "head", [0.55, 0.5]),
    ("neck", "torso", [0.97, 0.5]),
    ("shoulder_l", "upper_arm_l", [0.04, 0.5]),
    ("shoulder_r", "upper_arm_r", [0.04, 0.5]),
    ("elbow_l", "upper_arm_l", [0.96, 0.5]),
    ("elbow_r", "upper_arm_r", [0.96, 0.5]),
    ("wrist_l", "lower_arm_l", [0.96, 0.5]),
    ("wrist_r", "lower_arm_r", [0.96, 0.5]),
    ("hip_l", "upper_leg_l", [0.04, 0.5]),
    ("hip_r", "upper_leg_r", [0.04, 0.5]),
    ("knee_l", "upper_leg_l", [0.96, 0.5]),
    ("knee_r", "upper_leg_r", [0.96, 0.5]),
    ("ankle_l", "lower_leg_l", [0.96, 0.5]),
    ("ankle_r", "lower_leg_r", [0.96, 0.5]),
];

/// One rendered frame with its oracle labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `1 x H x W` intensities in `[0, 1]`.
    pub image: Tensor,
    pub uv: UvMap,
    /// Field on this frame's grid pointing into the next frame.
    pub flow_next: Option<CorrespondenceField>,
    /// Field on this frame's grid pointing into the previous frame.
    pub flow_prev: Option<CorrespondenceField>,
    /// Pixels visible here and at their destination in the next frame.
    pub covisible_next: Option<Vec<bool>>,
    pub keypoints: Vec<Keypoint>,
    pub pose: PuppetPose,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.uv.width
    }

    pub fn height(&self) -> usize {
        self.uv.height
    }

    /// Per-pixel part index (0 background); identical to the UV chart plane.
    pub fn part_mask(&self) -> &[u8] {
        &self.uv.k
    }
}

/// Result of a silhouette hit test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Part index (chart `part + 1`).
    pub part: usize,
    pub u: [f64; 2],
    /// Axial and lateral offsets in model units.
    pub local: [f64; 2],
}

#[derive(Clone, Copy, Debug)]
struct PixelFrame {
    origin: [f64; 2],
    axis: [f64; 2],
    lateral: [f64; 2],
    length: f64,
    radius: f64,
}

/// Texture and geometry shared by every sequence of a dataset.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub body: PuppetBody,
    pub config: RenderConfig,
    limits: Vec<(f64, f64)>,
    base: Vec<f64>,
}

impl Renderer {
    pub fn new(config: &RenderConfig) -> Result<Self> {
        config.validate()?;
        let body = PuppetBody::humanoid(config.parts)?;
        let rest = body.rest_relative_angles();
        let limits = body
            .parts
            .iter()
            .zip(&rest)
            .map(|(p, &r)| {
                let lim = match p.name {
                    "torso" => 0.3 * config.joint_limit,
                    "head" => 0.4 * config.joint_limit,
                    _ => config.joint_limit,
                };
                (r - lim, r + lim)
            })
            .collect();
        let mut rng = rng_from(config.texture_seed, &[tag("base")]);
        let offset: f64 = rng.gen();
        let base = (0..config.parts)
            .map(|k| 0.3 + 0.45 * ((k as f64 * 0.618_033_988_75 + offset) % 1.0))
            .collect();
        Ok(Renderer { body, config: config.clone(), limits, base })
    }

    pub fn joint_limits(&self) -> &[(f64, f64)] {
        &self.limits
    }

    fn pixel_frames(&self, pose: &PuppetPose) -> Vec<PixelFrame> {
        let frames = self.body.frames([0.0, 0.0], &pose.angles);
        frames
            .iter()
            .zip(&self.body.parts)
            .map(|(f, p)| PixelFrame {
                origin: [pose.root[0] + pose.scale * f.origin[0], pose.root[1] + pose.scale * f.origin[1]],
                axis: f.axis(),
                lateral: f.lateral(),
                length: p.length * pose.scale,
                radius: p.radius * pose.scale,
            })
            .collect()
    }

    /// Part frames in model units with the pelvis at the pose root.
    pub fn part_frames(&self, pose: &PuppetPose) -> Vec<PartFrame> {
        self.body.frames([0.0, 0.0], &pose.angles)
    }

    fn hit_with(&self, frames: &[PixelFrame], scale: f64, p: [f64; 2]) -> Option<Hit> {
        for &part in &self.body.depth_order {
            let f = &frames[part];
            let d = [p[0] - f.origin[0], p[1] - f.origin[1]];
            let a = d[0] * f.axis[0] + d[1] * f.axis[1];
            if a < 0.0 || a > f.length {
                continue;
            }
            let b = d[0] * f.lateral[0] + d[1] * f.lateral[1];
            if b.abs() > f.radius {
                continue;
            }
            let s = (b / f.radius).clamp(-1.0, 1.0);
            return Some(Hit {
                part,
                u: [a / f.length, 0.5 + s.asin() / TAU],
                local: [a / scale, b / scale],
            });
        }
        None
    }

    /// Front-most part under the image point `p`.
    pub fn hit(&self, pose: &PuppetPose, p: [f64; 2]) -> Option<Hit> {
        self.hit_with(&self.pixel_frames(pose), pose.scale, p)
    }

    /// Pixel position of a chart point under a pose (ignores occlusion).
    pub fn project(&self, pose: &PuppetPose, part: usize, u: [f64; 2]) -> [f64; 2] {
        let frames = self.part_frames(pose);
        let w = self.body.chart_to_world(part, &frames[part], u);
        [pose.root[0] + pose.scale * w[0], pose.root[1] + pose.scale * w[1]]
    }

    pub fn render_labels(&self, pose: &PuppetPose) -> UvMap {
        let (w, h) = (self.config.width, self.config.height);
        let frames = self.pixel_frames(pose);
        let mut k = vec![0u8; w * h];
        let mut u = vec![[0.0; 2]; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Some(hit) = self.hit_with(&frames, pose.scale, [x as f64, y as f64]) {
                    k[y * w + x] = (hit.part + 1) as u8;
                    u[y * w + x] = hit.u;
                }
            }
        }
        UvMap { width: w, height: h, k, u }
    }

    /// Surface intensity of a chart point, including a fixed shading term.
    pub fn texture(&self, part: usize, u: [f64; 2]) -> f64 {
        let p = &self.body.parts[part];
        let mut acc = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        for (octave, cell) in [24.0, 12.0, 6.0].into_iter().enumerate() {
            let n_along = (p.length / cell).round().max(1.0) as usize;
            let n_around = (TAU * p.radius / cell).round().max(2.0) as usize;
            let seed = derive_seed(self.config.texture_seed, &[tag("tex"), part as u64, octave as u64]);
            acc += amp * lattice_noise(seed, u[0] * n_along as f64, u[1] * n_around as f64, Some(n_around));
            norm += amp;
            amp *= 0.6;
        }
        let theta = TAU * (u[1] - 0.5);
        let shade = 0.75 + 0.25 * theta.cos();
        ((self.base[part] + 0.25 * acc / norm) * shade).clamp(0.0, 1.0)
    }

    /// Shaded image of a pose over a sequence background.
    pub fn render_image(&self, pose: &PuppetPose, background_seed: u64) -> Tensor {
        let (w, h) = (self.config.width, self.config.height);
        let frames = self.pixel_frames(pose);
        let s = self.config.supersample;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for sy in 0..s {
                    for sx in 0..s {
                        let p = [
                            x as f64 + (sx as f64 + 0.5) / s as f64 - 0.5,
                            y as f64 + (sy as f64 + 0.5) / s as f64 - 0.5,
                        ];
                        acc += match self.hit_with(&frames, pose.scale, p) {
                            Some(hit) => self.texture(hit.part, hit.u),
                            None => background(background_seed, p),
                        };
                    }
                }
                data.push(acc / (s * s) as f64);
            }
        }
        Tensor { channels: 1, height: h, width: w, data }
    }

    /// Rigid per-part motion from `from` to `to`, sampled on the grid of
    /// `from`. Background pixels are static. A pixel is covisible when its
    /// destination lies inside the image and the same surface (part or
    /// background) is in front there. Only covisible pixels are valid: an
    /// occluded point has no corresponding pixel in the other frame.
    pub fn flow(&self, from: &PuppetPose, to: &PuppetPose) -> Result<(CorrespondenceField, Vec<bool>)> {
        let (w, h) = (self.config.width, self.config.height);
        if from == to {
            return Ok((CorrespondenceField::identity(w, h)?, vec![true; w * h]));
        }
        let fa = self.pixel_frames(from);
        let fb = self.pixel_frames(to);
        let mut map = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        let mut covisible = Vec::with_capacity(w * h);
        let inside = |q: [f64; 2]| q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (w - 1) as f64 && q[1] <= (h - 1) as f64;
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                match self.hit_with(&fa, from.scale, p) {
                    Some(hit) => {
                        let f = &fb[hit.part];
                        let a = hit.local[0] * to.scale;
                        let b = hit.local[1] * to.scale;
                        let q = [
                            f.origin[0] + a * f.axis[0] + b * f.lateral[0],
                            f.origin[1] + a * f.axis[1] + b * f.lateral[1],
                        ];
                        let seen = inside(q) && self.hit_with(&fb, to.scale, q).map(|h| h.part) == Some(hit.part);
                        map.push(q);
                        valid.push(seen);
                        covisible.push(seen);
                    }
                    None => {
                        let seen = self.hit_with(&fb, to.scale, p).is_none();
                        map.push(p);
                        valid.push(seen);
                        covisible.push(seen);
                    }
                }
            }
        }
        Ok((CorrespondenceField::from_parts(w, h, map, valid)?, covisible))
    }

    /// The fixed joint set for the configured parts, with visibility taken
    /// from the rendered labels.
    pub fn keypoints(&self, pose: &PuppetPose, uv: &UvMap) -> Vec<Keypoint> {
        let mut out = Vec::new();
        for (j, (_, part_name, u)) in JOINTS.iter().enumerate() {
            let Some(part) = self.body.parts.iter().position(|p| p.name == *part_name) else {
                continue;
            };
            let pos = self.project(pose, part, *u);
            let (px, py) = (pos[0].round(), pos[1].round());
            let visible = px >= 0.0
                && py >= 0.0
                && (px as usize) < uv.width
                && (py as usize) < uv.height
                && uv.k[py as usize * uv.width + px as usize] as usize == part + 1;
            out.push(Keypoint { joint: j, pos, k: part + 1, u: *u, visible });
        }
        out
    }

    /// Random-walk poses of one sequence: bounded joint angles driven by
    /// smoothed velocity noise scaled by the motion magnitude.
    pub fn sample_poses(&self, seed: u64) -> Vec<PuppetPose> {
        let cfg = &self.config;
        let mut rng = rng_from(seed, &[tag("pose")]);
        let scale = cfg.base_scale() * (1.0 + cfg.scale_jitter * rng.gen_range(-1.0..=1.0));
        let mut root = [
            cfg.width as f64 / 2.0 + cfg.root_jitter * rng.gen_range(-1.0..=1.0),
            cfg.height as f64 / 2.0 + cfg.root_jitter * rng.gen_range(-1.0..=1.0),
        ];
        let rest = self.body.rest_relative_angles();
        let mut angles: Vec<f64> = self
            .limits
            .iter()
            .zip(&rest)
            .map(|(&(lo, hi), &r)| r + 0.8 * (hi - lo) / 2.0 * rng.gen_range(-1.0..=1.0))
            .collect();
        let mut vel = vec![0.0; angles.len()];
        let mut root_vel = [0.0; 2];
        let mut poses = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            if t > 0 {
                for i in 0..angles.len() {
                    vel[i] = 0.8 * vel[i] + cfg.motion * 0.05 * normal(&mut rng);
                    let (lo, hi) = self.limits[i];
                    let mut a = angles[i] + vel[i];
                    if a > hi {
                        a = 2.0 * hi - a;
                        vel[i] = -vel[i];
                    }
                    if a < lo {
                        a = 2.0 * lo - a;
                        vel[i] = -vel[i];
                    }
                    angles[i] = a.clamp(lo, hi);
                }
                for d in 0..2 {
                    root_vel[d] = 0.8 * root_vel[d] + cfg.motion * 0.15 * normal(&mut rng);
                    let c = if d == 0 { cfg.width } else { cfg.height } as f64 / 2.0;
                    let lim = cfg.root_jitter.max(1.0);
                    root[d] = (root[d] + root_vel[d]).clamp(c - lim, c + lim);
                }
            }
            poses.push(PuppetPose { root, angles: angles.clone(), scale });
        }
        poses
    }
}

/// Renders a full sequence. Frames depend only on `(seed, config)`; the
/// texture comes from `config.texture_seed` and the background from `seed`.
pub fn render_sequence(seed: u64, config: &RenderConfig) -> Result<Vec<Frame>> {
    let renderer = Renderer::new(config)?;
    renderer_sequence(&renderer, seed)
}

pub(crate) fn renderer_sequence(renderer: &Renderer, seed: u64) -> Result<Vec<Frame>> {
    let poses = renderer.sample_poses(seed);
    let bg = derive_seed(seed, &[tag("background")]);
    let n = poses.len();
    let mut frames = Vec::with_capacity(n);
    for (t, pose) in poses.iter().enumerate() {
        let uv = renderer.render_labels(pose);
        let image = renderer.render_image(pose, bg);
        let keypoints = renderer.keypoints(pose, &uv);
        let (flow_next, covisible_next) = if t + 1 < n {
            let (f, c) = renderer.flow(pose, &poses[t + 1])?;
            (Some(f), Some(c))
        } else {
            (None, None)
        };
        let flow_prev = if t > 0 { Some(renderer.flow(pose, &poses[t - 1])?.0) } else { None };
        frames.push(Frame { image, uv, flow_next, flow_prev, covisible_next, keypoints, pose: pose.clone() });
    }
    Ok(frames)
}

fn background(seed: u64, p: [f64; 2]) -> f64 {
    let coarse = lattice_noise(seed, p[0] / 10.0, p[1] / 10.0, None);
    let fine = lattice_noise(seed ^ 0x5bd1_e995, p[0] / 4.0, p[1] / 4.0, None);
    (0.5 + 0.25 * coarse + 0.1 * fine).clamp(0.0, 1.0)
}

/// Smoothly interpolated lattice noise in `[-1, 1]`, optionally periodic in
/// the second coordinate.
fn lattice_noise(seed: u64, x: f64, y: f64, period_y: Option<usize>) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let node = |i: i64, j: i64| -> f64 {
        let j = match period_y {
            Some(p) => j.rem_euclid(p as i64),
            None => j,
        };
        let h = derive_seed(seed, &[i as u64, j as u64]);
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let (i, j) = (x0 as i64, y0 as i64);
    let top = node(i, j) + fx * (node(i + 1, j) - node(i, j));
    let bot = node(i, j + 1) + fx * (node(i + 1, j + 1) - node(i, j + 1));
    top + fy * (bot - top)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
