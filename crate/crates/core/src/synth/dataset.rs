//! Rendered datasets and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.txt         key=value summary
//! <dir>/config.toml          full generation config
//! <dir>/frames/<split>_<seq>_<frame>.eqmp
//! <dir>/annotations.csv      manual clicks on the training split
//! ```
//!
//! All real values are rounded to `f32` at generation time so a dataset read
//! back from disk is identical to the one that was written.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::annotate::{manual_clicks, AnnotationSet, Click};
use super::noise::FlowNoise;
use super::render::{renderer_sequence, Frame, Keypoint, PuppetPose, Renderer, RenderConfig, UvMap};
use crate::container::Container;
use crate::error::{invalid, Error, Result};
use crate::field::CorrespondenceField;
use crate::rng::{derive_seed, tag};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "eqmp-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Sequences used for training.
    pub train_sequences: usize,
    /// Held-out sequences used for evaluation.
    pub eval_sequences: usize,
    /// Simulated manual clicks per training frame.
    pub clicks_per_frame: usize,
    pub render: RenderConfig,
    /// Error model of the flow estimator used for "real" correspondences.
    pub noise: FlowNoise,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_sequences: 8,
            eval_sequences: 2,
            clicks_per_frame: 100,
            render: RenderConfig::default(),
            noise: FlowNoise::default(),
        }
    }
}

impl DatasetConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: DatasetConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("dataset config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_sequences == 0 {
            return Err(invalid("train_sequences must be at least 1"));
        }
        self.render.validate()?;
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub seed: u64,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Vec<Sequence>,
    pub eval: Vec<Sequence>,
    /// Manual annotations, `annotations[seq][frame]` over the training split.
    pub annotations: Vec<Vec<AnnotationSet>>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        Self::generate_with_workers(config, seed, 1)
    }

    /// Sequences are independent, so rendering them on several threads gives
    /// the same dataset as rendering them in order.
    pub fn generate_with_workers(config: &DatasetConfig, seed: u64, workers: usize) -> Result<Self> {
        config.validate()?;
        let renderer = Renderer::new(&config.render)?;
        let mut jobs: Vec<(bool, usize, u64)> = Vec::new();
        for i in 0..config.train_sequences {
            jobs.push((true, i, derive_seed(seed, &[tag("train"), i as u64])));
        }
        for i in 0..config.eval_sequences {
            jobs.push((false, i, derive_seed(seed, &[tag("eval"), i as u64])));
        }
        let render = |s: u64| -> Result<Sequence> {
            let mut frames = renderer_sequence(&renderer, s)?;
            frames.iter_mut().for_each(quantize_frame);
            Ok(Sequence { seed: s, frames })
        };
        let results: Vec<Result<Sequence>> = if workers <= 1 {
            jobs.iter().map(|j| render(j.2)).collect()
        } else {
            let mut slots: Vec<Option<Result<Sequence>>> = (0..jobs.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let chunk = jobs.len().div_ceil(workers).max(1);
                for (jc, sc) in jobs.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                    let render = &render;
                    scope.spawn(move || {
                        for (j, slot) in jc.iter().zip(sc.iter_mut()) {
                            *slot = Some(render(j.2));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
        };
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (job, seq) in jobs.iter().zip(results) {
            if job.0 {
                train.push(seq?);
            } else {
                eval.push(seq?);
            }
        }
        let annotations = train
            .iter()
            .enumerate()
            .map(|(s, seq)| {
                seq.frames
                    .iter()
                    .enumerate()
                    .map(|(t, f)| {
                        manual_clicks(f, config.clicks_per_frame, derive_seed(seed, &[tag("clicks"), s as u64, t as u64]))
                    })
                    .collect()
            })
            .collect();
        Ok(Dataset { config: config.clone(), seed, train, eval, annotations })
    }

    pub fn renderer(&self) -> Result<Renderer> {
        Renderer::new(&self.config.render)
    }

    pub fn width(&self) -> usize {
        self.config.render.width
    }

    pub fn height(&self) -> usize {
        self.config.render.height
    }

    pub fn parts(&self) -> usize {
        self.config.render.parts
    }

    pub fn train_frame_count(&self) -> usize {
        self.train.iter().map(|s| s.frames.len()).sum()
    }

    /// Writes the dataset into `dir` (created if needed) and returns its
    /// content digest.
    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::write(dir.join("manifest.txt"), self.manifest())?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(dir.join("config.toml"), cfg)?;
        for (split, seqs) in [("train", &self.train), ("eval", &self.eval)] {
            for (s, seq) in seqs.iter().enumerate() {
                for (t, f) in seq.frames.iter().enumerate() {
                    frame_container(f, seq.seed)?.write(&dir.join("frames").join(frame_file(split, s, t)))?;
                }
            }
        }
        let rows: Vec<(usize, usize, &AnnotationSet)> = self
            .annotations
            .iter()
            .enumerate()
            .flat_map(|(s, v)| v.iter().enumerate().map(move |(t, a)| (s, t, a)))
            .collect();
        write_annotations_csv(&dir.join("annotations.csv"), &rows)?;
        digest_dir(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        if !manifest_path.is_file() {
            return Err(Error::NotFound(format!("dataset '{}' (no manifest.txt)", dir.display())));
        }
        let manifest = parse_manifest(&std::fs::read_to_string(&manifest_path)?)?;
        let get = |k: &str| manifest.get(k).ok_or_else(|| Error::Format(format!("manifest lacks '{k}'")));
        if get("format")? != DATASET_FORMAT {
            return Err(Error::Format("manifest format is not an eqmp dataset".into()));
        }
        let version: u32 = get("version")?.parse().map_err(|_| Error::Format("bad manifest version".into()))?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let seed: u64 = get("seed")?.parse().map_err(|_| Error::Format("bad manifest seed".into()))?;
        let config: DatasetConfig = toml::from_str(&std::fs::read_to_string(dir.join("config.toml"))?)
            .map_err(|e| Error::Format(format!("dataset config: {e}")))?;
        config.validate()?;
        let renderer = Renderer::new(&config.render)?;
        let mut splits = Vec::new();
        for (split, n) in [("train", config.train_sequences), ("eval", config.eval_sequences)] {
            let mut seqs = Vec::with_capacity(n);
            for s in 0..n {
                let mut frames = Vec::with_capacity(config.render.frames);
                let mut seq_seed = 0;
                for t in 0..config.render.frames {
                    let c = Container::read(&dir.join("frames").join(frame_file(split, s, t)))?;
                    let (f, sd) = frame_from_container(&c, &renderer)?;
                    seq_seed = sd;
                    frames.push(f);
                }
                seqs.push(Sequence { seed: seq_seed, frames });
            }
            splits.push(seqs);
        }
        let eval = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        let (w, h) = (config.render.width, config.render.height);
        let mut annotations: Vec<Vec<AnnotationSet>> = train
            .iter()
            .map(|s| s.frames.iter().map(|_| AnnotationSet::empty(w, h)).collect())
            .collect();
        for ((s, t), set) in read_annotations_csv(&dir.join("annotations.csv"), w, h)? {
            let slot = annotations
                .get_mut(s)
                .and_then(|v| v.get_mut(t))
                .ok_or_else(|| Error::Format(format!("annotation for missing frame ({s}, {t})")))?;
            *slot = set;
        }
        Ok(Dataset { config, seed, train, eval, annotations })
    }

    fn manifest(&self) -> String {
        let r = &self.config.render;
        format!(
            "format={DATASET_FORMAT}\nversion={DATASET_VERSION}\nseed={}\nwidth={}\nheight={}\nparts={}\nframes_per_sequence={}\ntrain_sequences={}\neval_sequences={}\nclicks_per_frame={}\n",
            self.seed,
            r.width,
            r.height,
            r.parts,
            r.frames,
            self.config.train_sequences,
            self.config.eval_sequences,
            self.config.clicks_per_frame
        )
    }
}

fn frame_file(split: &str, seq: usize, t: usize) -> String {
    format!("{split}_{seq:03}_{t:03}.eqmp")
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {} is not key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// SHA-256 over every dataset file (name and bytes) in sorted order.
pub fn digest_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(dir.join(&rel))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).map_err(|e| Error::Internal(e.to_string()))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_frame(f: &mut Frame) {
    f.image.data.iter_mut().for_each(|v| *v = q(*v));
    f.uv.u.iter_mut().for_each(|u| *u = [q(u[0]), q(u[1])]);
    for fl in [&mut f.flow_next, &mut f.flow_prev].into_iter().flatten() {
        fl.map_mut().iter_mut().for_each(|m| *m = [q(m[0]), q(m[1])]);
    }
    for k in &mut f.keypoints {
        k.pos = [q(k.pos[0]), q(k.pos[1])];
        k.u = [q(k.u[0]), q(k.u[1])];
    }
    f.pose.root = [q(f.pose.root[0]), q(f.pose.root[1])];
    f.pose.scale = q(f.pose.scale);
    f.pose.angles.iter_mut().for_each(|a| *a = q(*a));
}

fn to_f32(v: impl IntoIterator<Item = f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn push_field(c: &mut Container, name: &str, f: &CorrespondenceField) -> Result<()> {
    let (w, h) = (f.width(), f.height());
    let mut planes = Vec::with_capacity(2 * w * h);
    planes.extend(f.map().iter().map(|m| m[0] as f32));
    planes.extend(f.map().iter().map(|m| m[1] as f32));
    c.push_f32(format!("{name}.map"), &[2, h, w], planes)?;
    c.push_u8(format!("{name}.valid"), &[h, w], f.valid().iter().map(|&v| v as u8).collect())
}

pub fn read_field(c: &Container, name: &str) -> Result<CorrespondenceField> {
    let (dims, m) = c.f32(&format!("{name}.map"))?;
    let (vd, v) = c.u8(&format!("{name}.valid"))?;
    if dims.len() != 3 || dims[0] != 2 || vd != dims[1..] {
        return Err(Error::Format(format!("field '{name}' has inconsistent shape")));
    }
    let (h, w) = (dims[1], dims[2]);
    let map = (0..w * h).map(|i| [m[i] as f64, m[w * h + i] as f64]).collect();
    CorrespondenceField::from_parts(w, h, map, v.iter().map(|&b| b != 0).collect())
        .map_err(|e| Error::Format(e.to_string()))
}

fn frame_container(f: &Frame, seq_seed: u64) -> Result<Container> {
    let (w, h) = (f.width(), f.height());
    let mut c = Container::new();
    c.push_f32("image", &[1, h, w], to_f32(f.image.data.iter().copied()))?;
    c.push_u8("uv.k", &[h, w], f.uv.k.clone())?;
    let mut u = to_f32(f.uv.u.iter().map(|u| u[0]));
    u.extend(to_f32(f.uv.u.iter().map(|u| u[1])));
    c.push_f32("uv.u", &[2, h, w], u)?;
    if let Some(fl) = &f.flow_next {
        push_field(&mut c, "flow_next", fl)?;
    }
    if let Some(fl) = &f.flow_prev {
        push_field(&mut c, "flow_prev", fl)?;
    }
    if let Some(cv) = &f.covisible_next {
        c.push_u8("covisible_next", &[h, w], cv.iter().map(|&b| b as u8).collect())?;
    }
    let j = f.keypoints.len();
    c.push_f32(
        "keypoints.geom",
        &[j, 4],
        f.keypoints.iter().flat_map(|k| [k.pos[0], k.pos[1], k.u[0], k.u[1]]).map(|v| v as f32).collect(),
    )?;
    c.push_i32(
        "keypoints.meta",
        &[j, 3],
        f.keypoints.iter().flat_map(|k| [k.joint as i32, k.k as i32, k.visible as i32]).collect(),
    )?;
    let mut pose = vec![f.pose.root[0], f.pose.root[1], f.pose.scale];
    pose.extend(&f.pose.angles);
    c.push_f32("pose", &[pose.len()], to_f32(pose))?;
    let s = seq_seed.to_le_bytes();
    c.push_u8("sequence_seed", &[8], s.to_vec())?;
    Ok(c)
}

fn frame_from_container(c: &Container, renderer: &Renderer) -> Result<(Frame, u64)> {
    let cfg = &renderer.config;
    let (w, h) = (cfg.width, cfg.height);
    let shape_err = |what: &str| Error::Format(format!("frame entry '{what}' has unexpected shape"));
    let (d, img) = c.f32("image")?;
    if d != [1, h, w] {
        return Err(shape_err("image"));
    }
    let image = Tensor::from_vec(1, h, w, img.iter().map(|&v| v as f64).collect())?;
    let (d, k) = c.u8("uv.k")?;
    if d != [h, w] {
        return Err(shape_err("uv.k"));
    }
    let (d, u) = c.f32("uv.u")?;
    if d != [2, h, w] {
        return Err(shape_err("uv.u"));
    }
    let uv = UvMap {
        width: w,
        height: h,
        k: k.to_vec(),
        u: (0..w * h).map(|i| [u[i] as f64, u[w * h + i] as f64]).collect(),
    };
    let flow_next = if c.contains("flow_next.map") { Some(read_field(c, "flow_next")?) } else { None };
    let flow_prev = if c.contains("flow_prev.map") { Some(read_field(c, "flow_prev")?) } else { None };
    let covisible_next = if c.contains("covisible_next") {
        Some(c.u8("covisible_next")?.1.iter().map(|&b| b != 0).collect())
    } else {
        None
    };
    let (gd, geom) = c.f32("keypoints.geom")?;
    let (md, meta) = c.i32("keypoints.meta")?;
    if gd.len() != 2 || md.len() != 2 || gd[0] != md[0] || gd[1] != 4 || md[1] != 3 {
        return Err(shape_err("keypoints"));
    }
    let keypoints = (0..gd[0])
        .map(|i| Keypoint {
            joint: meta[3 * i] as usize,
            k: meta[3 * i + 1] as usize,
            visible: meta[3 * i + 2] != 0,
            pos: [geom[4 * i] as f64, geom[4 * i + 1] as f64],
            u: [geom[4 * i + 2] as f64, geom[4 * i + 3] as f64],
        })
        .collect();
    let (_, p) = c.f32("pose")?;
    if p.len() != 3 + cfg.parts {
        return Err(shape_err("pose"));
    }
    let pose = PuppetPose {
        root: [p[0] as f64, p[1] as f64],
        scale: p[2] as f64,
        angles: p[3..].iter().map(|&a| a as f64).collect(),
    };
    let (_, sb) = c.u8("sequence_seed")?;
    let seed = u64::from_le_bytes(sb.try_into().map_err(|_| shape_err("sequence_seed"))?);
    Ok((Frame { image, uv, flow_next, flow_prev, covisible_next, keypoints, pose }, seed))
}

const CSV_HEADER: [&str; 9] = ["seq", "frame", "x", "y", "k", "u0", "u1", "has_uv", "provenance"];

/// Writes clicks as CSV rows `seq, frame, x, y, k, u0, u1, has_uv, provenance`.
pub fn write_annotations_csv(path: &Path, rows: &[(usize, usize, &AnnotationSet)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for (s, t, set) in rows {
        for c in &set.clicks {
            w.write_record([
                s.to_string(),
                t.to_string(),
                c.x.to_string(),
                c.y.to_string(),
                c.k.to_string(),
                c.u[0].to_string(),
                c.u[1].to_string(),
                (c.has_uv as u8).to_string(),
                c.provenance.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads click CSV rows grouped by `(seq, frame)`.
pub fn read_annotations_csv(path: &Path, width: usize, height: usize) -> Result<BTreeMap<(usize, usize), AnnotationSet>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::NotFound(path.display().to_string())
        }
        _ => Error::from(e),
    })?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Format(format!("unexpected annotation header in {}", path.display())));
    }
    let mut out: BTreeMap<(usize, usize), AnnotationSet> = BTreeMap::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("annotation row {}: bad {what}", n + 1));
        let num = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what));
        let int = |i: usize, what: &str| rec[i].parse::<usize>().map_err(|_| bad(what));
        let click = Click {
            x: num(2, "x")?,
            y: num(3, "y")?,
            k: int(4, "k")?,
            u: [num(5, "u0")?, num(6, "u1")?],
            has_uv: int(7, "has_uv")? != 0,
            provenance: rec[8].parse()?,
        };
        out.entry((int(0, "seq")?, int(1, "frame")?))
            .or_insert_with(|| AnnotationSet::empty(width, height))
            .clicks
            .push(click);
    }
    for set in out.values() {
        set.validate().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}
