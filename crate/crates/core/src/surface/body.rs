//! Articulated puppet body: a tree of cylindrical parts, one chart each.
//!
//! Lengths are model units (1 unit = 1 cm). Directions live in the image
//! plane with y pointing down; depth `z` points towards the camera.
//! A chart point `u = (along, around)` on part `k` sits at
//! `along * length` down the part axis and at angle
//! `theta = 2 pi (around - 0.5)` around it, so `around = 0.5` faces the
//! camera and the visible half is `around in [0.25, 0.75]`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BodyPart {
    pub name: &'static str,
    pub parent: Option<usize>,
    pub length: f64,
    pub radius: f64,
    /// Attachment on the parent: fraction along its axis, and lateral offset
    /// as a fraction of its radius.
    pub attach: (f64, f64),
    /// World direction of the axis in the rest pose (radians, y down).
    pub rest_angle: f64,
}

/// Largest supported chart count.
pub const MAX_PARTS: usize = 14;

/// Chart count used unless configured otherwise.
pub const DEFAULT_PARTS: usize = 10;

const HUMANOID: [BodyPart; MAX_PARTS] = [
    BodyPart { name: "torso", parent: None, length: 60.0, radius: 17.0, attach: (0.0, 0.0), rest_angle: -FRAC_PI_2 },
    BodyPart { name: "head", parent: Some(0), length: 24.0, radius: 12.0, attach: (1.0, 0.0), rest_angle: -FRAC_PI_2 },
    BodyPart { name: "upper_arm_l", parent: Some(0), length: 30.0, radius: 7.5, attach: (0.93, -1.0), rest_angle: FRAC_PI_2 + 0.25 },
    BodyPart { name: "upper_arm_r", parent: Some(0), length: 30.0, radius: 7.5, attach: (0.93, 1.0), rest_angle: FRAC_PI_2 - 0.25 },
    BodyPart { name: "upper_leg_l", parent: Some(0), length: 44.0, radius: 10.0, attach: (0.0, -0.5), rest_angle: FRAC_PI_2 + 0.08 },
    BodyPart { name: "upper_leg_r", parent: Some(0), length: 44.0, radius: 10.0, attach: (0.0, 0.5), rest_angle: FRAC_PI_2 - 0.08 },
    BodyPart { name: "lower_arm_l", parent: Some(2), length: 28.0, radius: 6.5, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 + 0.1 },
    BodyPart { name: "lower_arm_r", parent: Some(3), length: 28.0, radius: 6.5, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 - 0.1 },
    BodyPart { name: "lower_leg_l", parent: Some(4), length: 44.0, radius: 8.0, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 + 0.02 },
    BodyPart { name: "lower_leg_r", parent: Some(5), length: 44.0, radius: 8.0, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 - 0.02 },
    BodyPart { name: "hand_l", parent: Some(6), length: 9.0, radius: 4.5, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 + 0.1 },
    BodyPart { name: "hand_r", parent: Some(7), length: 9.0, radius: 4.5, attach: (1.0, 0.0), rest_angle: FRAC_PI_2 - 0.1 },
    BodyPart { name: "foot_l", parent: Some(8), length: 12.0, radius: 4.5, attach: (1.0, 0.0), rest_angle: PI },
    BodyPart { name: "foot_r", parent: Some(9), length: 12.0, radius: 4.5, attach: (1.0, 0.0), rest_angle: 0.0 },
];

/// Painter's order of the humanoid, front-most first.
const DEPTH_ORDER: [&str; MAX_PARTS] = [
    "hand_r",
    "lower_arm_r",
    "upper_arm_r",
    "head",
    "torso",
    "foot_r",
    "lower_leg_r",
    "upper_leg_r",
    "foot_l",
    "lower_leg_l",
    "upper_leg_l",
    "hand_l",
    "lower_arm_l",
    "upper_arm_l",
];

/// Image-plane placement of one part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartFrame {
    /// Proximal joint position.
    pub origin: [f64; 2],
    /// Axis angle (radians, y down).
    pub angle: f64,
}

impl PartFrame {
    pub fn axis(&self) -> [f64; 2] {
        [self.angle.cos(), self.angle.sin()]
    }

    pub fn lateral(&self) -> [f64; 2] {
        [-self.angle.sin(), self.angle.cos()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PuppetBody {
    pub parts: Vec<BodyPart>,
    /// Part indices, front-most first.
    pub depth_order: Vec<usize>,
}

impl PuppetBody {
    /// The first `parts` parts of the humanoid (torso and head first, then
    /// limbs from the body outwards). Charts are numbered `1..=parts`.
    pub fn humanoid(parts: usize) -> Result<Self> {
        if parts < 2 {
            return Err(invalid(format!("puppet needs at least 2 parts, got {parts}")));
        }
        if parts > MAX_PARTS {
            return Err(invalid(format!("puppet supports at most {MAX_PARTS} parts, got {parts}")));
        }
        let parts_v: Vec<BodyPart> = HUMANOID[..parts].to_vec();
        let depth_order = DEPTH_ORDER
            .iter()
            .filter_map(|n| parts_v.iter().position(|p| p.name == *n))
            .collect();
        Ok(PuppetBody { parts: parts_v, depth_order })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Relative joint angle of each part in the rest pose (the root's is its
    /// world angle).
    pub fn rest_relative_angles(&self) -> Vec<f64> {
        self.parts
            .iter()
            .map(|p| match p.parent {
                Some(q) => p.rest_angle - self.parts[q].rest_angle,
                None => p.rest_angle,
            })
            .collect()
    }

    /// Forward kinematics in model units from relative angles (one per part)
    /// with the root joint at `root`.
    pub fn frames(&self, root: [f64; 2], relative: &[f64]) -> Vec<PartFrame> {
        let mut out: Vec<PartFrame> = Vec::with_capacity(self.parts.len());
        for (i, p) in self.parts.iter().enumerate() {
            let frame = match p.parent {
                None => PartFrame { origin: root, angle: relative[i] },
                Some(q) => {
                    let pf = out[q];
                    let parent = &self.parts[q];
                    let ax = pf.axis();
                    let lat = pf.lateral();
                    let a = p.attach.0 * parent.length;
                    let b = p.attach.1 * parent.radius;
                    PartFrame {
                        origin: [
                            pf.origin[0] + a * ax[0] + b * lat[0],
                            pf.origin[1] + a * ax[1] + b * lat[1],
                        ],
                        angle: pf.angle + relative[i],
                    }
                }
            };
            out.push(frame);
        }
        out
    }

    /// Rest-pose frames with the pelvis at the origin.
    pub fn rest_frames(&self) -> Vec<PartFrame> {
        self.frames([0.0, 0.0], &self.rest_relative_angles())
    }

    /// Part-local coordinates `(along, lateral, depth)` of a chart point.
    pub fn chart_to_local(&self, part: usize, u: [f64; 2]) -> [f64; 3] {
        let p = &self.parts[part];
        let theta = TAU * (u[1] - 0.5);
        [u[0] * p.length, p.radius * theta.sin(), p.radius * theta.cos()]
    }

    /// 3D position of a chart point for a given part frame.
    pub fn chart_to_world(&self, part: usize, frame: &PartFrame, u: [f64; 2]) -> [f64; 3] {
        let [a, b, z] = self.chart_to_local(part, u);
        let ax = frame.axis();
        let lat = frame.lateral();
        [
            frame.origin[0] + a * ax[0] + b * lat[0],
            frame.origin[1] + a * ax[1] + b * lat[1],
            z,
        ]
    }
}
