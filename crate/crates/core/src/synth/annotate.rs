//! Sparse annotations and the annotation-budget schemes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::render::{Frame, Keypoint};
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Manual,
    Propagated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::Propagated => "propagated",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(Provenance::Manual),
            "propagated" => Ok(Provenance::Propagated),
            _ => Err(Error::Format(format!("unknown provenance '{s}'"))),
        }
    }
}

/// One clicked pixel with its surface label.
#[derive(Clone, Debug, PartialEq)]
pub struct Click {
    pub x: f64,
    pub y: f64,
    /// Chart index, never 0: clicks are placed on the body.
    pub k: usize,
    pub u: [f64; 2],
    pub has_uv: bool,
    pub provenance: Provenance,
}

impl Click {
    /// Nearest pixel, or `None` outside a `w x h` image.
    pub fn pixel(&self, w: usize, h: usize) -> Option<(usize, usize)> {
        let (x, y) = (self.x.round(), self.y.round());
        (x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h).then_some((x as usize, y as usize))
    }
}

/// The supervision available for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub width: usize,
    pub height: usize,
    pub clicks: Vec<Click>,
    pub keypoints: Option<Vec<Keypoint>>,
    /// Dense per-pixel part index.
    pub part_mask: Option<Vec<u8>>,
}

impl AnnotationSet {
    pub fn empty(width: usize, height: usize) -> Self {
        AnnotationSet { width, height, clicks: Vec::new(), keypoints: None, part_mask: None }
    }

    /// True when the set carries no supervision at all.
    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
            && self.keypoints.as_ref().map_or(true, |k| k.iter().all(|k| !k.visible))
            && self.part_mask.is_none()
    }

    pub fn uv_click_count(&self) -> usize {
        self.clicks.iter().filter(|c| c.has_uv).count()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.clicks {
            if !(c.x >= -0.5 && c.y >= -0.5 && c.x < self.width as f64 - 0.5 && c.y < self.height as f64 - 0.5) {
                return Err(invalid(format!("click ({}, {}) lies outside the image", c.x, c.y)));
            }
            if c.has_uv && !(0.0..=1.0).contains(&c.u[0]) || c.has_uv && !(0.0..=1.0).contains(&c.u[1]) {
                return Err(invalid(format!("click chart point {:?} outside [0,1]^2", c.u)));
            }
            if c.k == 0 {
                return Err(invalid("click on background"));
            }
        }
        if let Some(m) = &self.part_mask {
            if m.len() != self.width * self.height {
                return Err(invalid("part mask size does not match image"));
            }
        }
        Ok(())
    }
}

/// Simulated manual annotation: `count` distinct body pixels drawn uniformly
/// over the part mask, labelled from the rendered UV map.
pub fn manual_clicks(frame: &Frame, count: usize, seed: u64) -> AnnotationSet {
    let (w, h) = (frame.width(), frame.height());
    let mut fg: Vec<usize> = (0..w * h).filter(|&i| frame.uv.k[i] != 0).collect();
    let mut rng = rng_from(seed, &[tag("clicks")]);
    let n = count.min(fg.len());
    let (chosen, _) = fg.partial_shuffle(&mut rng, n);
    let clicks = chosen
        .iter()
        .map(|&i| Click {
            x: (i % w) as f64,
            y: (i / w) as f64,
            k: frame.uv.k[i] as usize,
            u: frame.uv.u[i],
            has_uv: true,
            provenance: Provenance::Manual,
        })
        .collect();
    AnnotationSet { width: w, height: h, clicks, keypoints: None, part_mask: None }
}

/// Annotation-reduction schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// Everything in the input, unchanged.
    Full,
    /// All clicks on a random `p`-fraction of images, nothing elsewhere.
    ImageFrac(f64),
    /// Part masks on every image, `(k, u)` clicks on a `p`-fraction.
    ImageFracKOnly(f64),
    /// Every click kept independently with probability `p`.
    PointFrac(f64),
    /// Part masks only.
    SegOnly,
    /// Keypoints only.
    KeypointsOnly,
    /// Point subsampling plus keypoints on every image.
    PointFracPlusKeypoints(f64),
}

impl Scheme {
    pub fn fraction(&self) -> Option<f64> {
        match *self {
            Scheme::ImageFrac(p) | Scheme::ImageFracKOnly(p) | Scheme::PointFrac(p) | Scheme::PointFracPlusKeypoints(p) => {
                Some(p)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.fraction() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(invalid(format!("scheme fraction must be in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Full => write!(f, "full"),
            Scheme::ImageFrac(p) => write!(f, "image:{p}"),
            Scheme::ImageFracKOnly(p) => write!(f, "image_k:{p}"),
            Scheme::PointFrac(p) => write!(f, "point:{p}"),
            Scheme::SegOnly => write!(f, "seg_only"),
            Scheme::KeypointsOnly => write!(f, "keypoints_only"),
            Scheme::PointFracPlusKeypoints(p) => write!(f, "point_kp:{p}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let frac = || -> Result<f64> {
            let a = arg.ok_or_else(|| invalid(format!("scheme '{name}' needs a fraction, e.g. '{name}:0.05'")))?;
            a.parse::<f64>().map_err(|_| invalid(format!("bad scheme fraction '{a}'")))
        };
        let scheme = match name {
            "full" => Scheme::Full,
            "image" => Scheme::ImageFrac(frac()?),
            "image_k" => Scheme::ImageFracKOnly(frac()?),
            "point" => Scheme::PointFrac(frac()?),
            "seg_only" => Scheme::SegOnly,
            "keypoints_only" => Scheme::KeypointsOnly,
            "point_kp" => Scheme::PointFracPlusKeypoints(frac()?),
            _ => {
                return Err(invalid(format!(
                    "unknown scheme '{s}' (expected full, image:P, image_k:P, point:P, seg_only, keypoints_only, point_kp:P)"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Oracle resources a scheme may draw on besides the clicks: the rendered
/// part mask and the joint keypoints of each image.
pub struct LabelSource<'a> {
    pub part_mask: &'a [u8],
    pub keypoints: &'a [Keypoint],
}

impl<'a> From<&'a Frame> for LabelSource<'a> {
    fn from(f: &'a Frame) -> Self {
        LabelSource { part_mask: f.part_mask(), keypoints: &f.keypoints }
    }
}

/// Applies a scheme to a dataset of per-image annotation sets. `sources`
/// runs parallel to `full`. Output clicks are always a subset of the input
/// clicks; masks and keypoints are copies of the sources.
pub fn subsample_annotations(
    full: &[AnnotationSet],
    sources: &[LabelSource<'_>],
    scheme: Scheme,
    seed: u64,
) -> Result<Vec<AnnotationSet>> {
    scheme.validate()?;
    if sources.len() != full.len() {
        return Err(invalid("annotation sets and label sources differ in length"));
    }
    let n = full.len();
    let chosen_images = |p: f64| -> Vec<bool> {
        let m = ((p * n as f64).round() as usize).clamp(1.min(n), n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(seed, &[tag("images")]));
        let mut keep = vec![false; n];
        order[..m].iter().for_each(|&i| keep[i] = true);
        keep
    };
    let mut rng = rng_from(seed, &[tag("points")]);
    let mut thin = |set: &AnnotationSet, p: f64| -> Vec<Click> {
        set.clicks.iter().filter(|_| rng.gen::<f64>() < p).cloned().collect()
    };
    let base = |set: &AnnotationSet| AnnotationSet::empty(set.width, set.height);
    let kps = |i: usize| Some(sources[i].keypoints.to_vec());
    let mask = |i: usize| Some(sources[i].part_mask.to_vec());

    let out = match scheme {
        Scheme::Full => full.to_vec(),
        Scheme::ImageFrac(p) => {
            let keep = chosen_images(p);
            full.iter()
                .zip(&keep)
                .map(|(s, &k)| if k { AnnotationSet { clicks: s.clicks.clone(), ..base(s) } } else { base(s) })
                .collect()
        }
        Scheme::ImageFracKOnly(p) => {
            let keep = chosen_images(p);
            full.iter()
                .enumerate()
                .map(|(i, s)| AnnotationSet {
                    clicks: if keep[i] { s.clicks.clone() } else { Vec::new() },
                    part_mask: mask(i),
                    ..base(s)
                })
                .collect()
        }
        Scheme::PointFrac(p) => {
            if p >= 1.0 {
                full.to_vec()
            } else {
                full.iter().map(|s| AnnotationSet { clicks: thin(s, p), ..s.clone() }).collect()
            }
        }
        Scheme::SegOnly => full.iter().enumerate().map(|(i, s)| AnnotationSet { part_mask: mask(i), ..base(s) }).collect(),
        Scheme::KeypointsOnly => {
            full.iter().enumerate().map(|(i, s)| AnnotationSet { keypoints: kps(i), ..base(s) }).collect()
        }
        Scheme::PointFracPlusKeypoints(p) => full
            .iter()
            .enumerate()
            .map(|(i, s)| AnnotationSet {
                clicks: if p >= 1.0 { s.clicks.clone() } else { thin(s, p) },
                keypoints: kps(i),
                ..s.clone()
            })
            .collect(),
    };
    Ok(out)
}
