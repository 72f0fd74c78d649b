//! Deterministic synthetic scenes: textured rectangles drifting over a
//! static noisy background, with entries, exits and occlusions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::augment::hsv_to_rgb;
use super::frame::{frame_file, load_sequence_frame, save_png, Frame, DEFAULT_MEAN_PIXEL, IMAGE_DIR};
use super::mot::{parse_mot_csv, write_mot_csv, BBox, Detection};
use crate::error::{DanError, Result};
use crate::io::atomic_write;
use crate::label::VISIBILITY_THRESHOLD;

/// Object `id` is hidden for frames `start ..= start + len - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduledOcclusion {
    pub id: i64,
    pub start: u32,
    pub len: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub fps: u32,
    /// Objects present from the first frame.
    pub objects: usize,
    /// Cap on simultaneously present objects (entries are refused above it).
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    pub max_speed: f32,
    /// Per-frame velocity noise (pixels/frame).
    pub motion_jitter: f32,
    /// Per-frame probability that a new object enters.
    pub enter_prob: f64,
    /// Per-frame, per-object probability of leaving for good.
    pub leave_prob: f64,
    /// Per-frame, per-object probability of starting a random occlusion.
    pub occlusion_prob: f64,
    pub max_occlusion_len: u32,
    pub occlusions: Vec<ScheduledOcclusion>,
    pub det_dropout: f64,
    pub det_jitter: f32,
    pub mean_pixel: [u8; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synth".into(),
            width: 128,
            height: 128,
            frames: 300,
            fps: 30,
            objects: 6,
            max_objects: 8,
            min_size: 14,
            max_size: 26,
            max_speed: 1.5,
            motion_jitter: 0.15,
            enter_prob: 0.0,
            leave_prob: 0.0,
            occlusion_prob: 0.0,
            max_occlusion_len: 5,
            occlusions: Vec::new(),
            det_dropout: 0.05,
            det_jitter: 1.0,
            mean_pixel: DEFAULT_MEAN_PIXEL,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DanError::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("object size range {}..{} is empty", self.min_size, self.max_size));
        }
        if self.max_size > self.width || self.max_size > self.height {
            return bad(format!(
                "objects up to {} px do not fit a {}x{} frame",
                self.max_size, self.width, self.height
            ));
        }
        if self.objects > self.max_objects {
            return bad(format!("{} initial objects exceed max_objects {}", self.objects, self.max_objects));
        }
        for (name, p) in [
            ("enter_prob", self.enter_prob),
            ("leave_prob", self.leave_prob),
            ("occlusion_prob", self.occlusion_prob),
            ("det_dropout", self.det_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.max_speed >= 0.0 && self.motion_jitter >= 0.0 && self.det_jitter >= 0.0) {
            return bad("speeds and jitters must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub frames: Vec<Frame>,
    /// Ground truth with identities; only boxes with visibility ≥ 0.3.
    pub gt: Vec<Detection>,
    /// Noisy detections without identities.
    pub dets: Vec<Detection>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame by 1-based index.
    pub fn frame(&self, index: u32) -> Option<&Frame> {
        self.frames.get((index as usize).checked_sub(1)?)
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    HStripes(u32),
    VStripes(u32),
    Checker(u32),
}

struct Object {
    id: i64,
    x: f32,
    y: f32,
    vx: f32,
    vy: f32,
    w: u32,
    h: u32,
    primary: [u8; 3],
    secondary: [u8; 3],
    pattern: Pattern,
    depth: u32,
    hidden_until: u32,
}

fn to_u8(c: (f64, f64, f64)) -> [u8; 3] {
    [c.0, c.1, c.2].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

impl Object {
    fn spawn(id: i64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Object {
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let x = rng.random_range(0.0..=(cfg.width - w) as f32);
        let y = rng.random_range(0.0..=(cfg.height - h) as f32);
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let speed = rng.random_range(0.0..=cfg.max_speed);
        // Golden-angle hue spacing keeps consecutive identities far apart.
        let hue = (id as f64 * 137.507_764).rem_euclid(360.0);
        let sat = rng.random_range(0.6..1.0);
        let val = rng.random_range(0.7..1.0);
        let primary = to_u8(hsv_to_rgb(hue, sat, val));
        let secondary = to_u8(hsv_to_rgb((hue + rng.random_range(90.0..270.0)).rem_euclid(360.0), sat, val * 0.5));
        let period = rng.random_range(2..=5);
        let pattern = match rng.random_range(0..4) {
            0 => Pattern::Solid,
            1 => Pattern::HStripes(period),
            2 => Pattern::VStripes(period),
            _ => Pattern::Checker(period),
        };
        Object {
            id,
            x,
            y,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
            primary,
            secondary,
            pattern,
            depth: rng.random(),
            hidden_until: 0,
        }
    }

    fn advance(&mut self, cfg: &SynthConfig, noise: &Normal<f32>, rng: &mut ChaCha8Rng) {
        self.vx += noise.sample(rng);
        self.vy += noise.sample(rng);
        let speed = (self.vx * self.vx + self.vy * self.vy).sqrt();
        if speed > cfg.max_speed && speed > 0.0 {
            self.vx *= cfg.max_speed / speed;
            self.vy *= cfg.max_speed / speed;
        }
        self.x += self.vx;
        self.y += self.vy;
        let (mx, my) = ((cfg.width - self.w) as f32, (cfg.height - self.h) as f32);
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = -self.vx;
        }
        if self.x > mx {
            self.x = 2.0 * mx - self.x;
            self.vx = -self.vx;
        }
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = -self.vy;
        }
        if self.y > my {
            self.y = 2.0 * my - self.y;
            self.vy = -self.vy;
        }
        self.x = self.x.clamp(0.0, mx);
        self.y = self.y.clamp(0.0, my);
    }

    fn rect(&self) -> (u32, u32, u32, u32) {
        (self.x.round() as u32, self.y.round() as u32, self.w, self.h)
    }

    fn color_at(&self, lx: u32, ly: u32) -> [u8; 3] {
        let alt = match self.pattern {
            Pattern::Solid => false,
            Pattern::HStripes(p) => (ly / p) % 2 == 1,
            Pattern::VStripes(p) => (lx / p) % 2 == 1,
            Pattern::Checker(p) => (lx / p + ly / p) % 2 == 1,
        };
        if alt {
            self.secondary
        } else {
            self.primary
        }
    }
}

/// Renders a deterministic sequence from `seed`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SceneSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, cfg.motion_jitter).map_err(|e| DanError::Config(e.to_string()))?;
    let det_noise = Normal::new(0.0f32, cfg.det_jitter).map_err(|e| DanError::Config(e.to_string()))?;
    let (w, h) = (cfg.width, cfg.height);

    let background = Frame::from_fn(w, h, |_, _| {
        let d: i16 = rng.random_range(-12..=12);
        Rgb(cfg.mean_pixel.map(|c| (c as i16 + d).clamp(0, 255) as u8))
    });

    let mut next_id = 1i64;
    let mut live: Vec<Object> = Vec::new();
    for _ in 0..cfg.objects {
        live.push(Object::spawn(next_id, cfg, &mut rng));
        next_id += 1;
    }

    let mut frames = Vec::with_capacity(cfg.frames as usize);
    let mut gt = Vec::new();
    let mut dets = Vec::new();
    let mut owner = vec![usize::MAX; (w * h) as usize];

    for t in 1..=cfg.frames {
        if t > 1 {
            live.retain(|_| !(cfg.leave_prob > 0.0 && rng.random_bool(cfg.leave_prob)));
            if cfg.enter_prob > 0.0 && rng.random_bool(cfg.enter_prob) && live.len() < cfg.max_objects {
                live.push(Object::spawn(next_id, cfg, &mut rng));
                next_id += 1;
            }
            for o in live.iter_mut() {
                o.advance(cfg, &noise, &mut rng);
            }
        }
        for o in live.iter_mut() {
            if cfg.occlusion_prob > 0.0 && o.hidden_until < t && rng.random_bool(cfg.occlusion_prob) {
                o.hidden_until = t + rng.random_range(1..=cfg.max_occlusion_len.max(1)) - 1;
            }
        }
        let hidden = |o: &Object| {
            o.hidden_until >= t
                || cfg
                    .occlusions
                    .iter()
                    .any(|s| s.id == o.id && t >= s.start && t < s.start + s.len)
        };

        // Paint back to front, remembering which object owns each pixel.
        let mut order: Vec<usize> = (0..live.len()).filter(|&k| !hidden(&live[k])).collect();
        order.sort_by_key(|&k| (live[k].depth, live[k].id));
        let mut img = background.clone();
        owner.fill(usize::MAX);
        for &k in &order {
            let o = &live[k];
            let (x0, y0, ow, oh) = o.rect();
            for ly in 0..oh {
                for lx in 0..ow {
                    let (px, py) = (x0 + lx, y0 + ly);
                    img.put_pixel(px, py, Rgb(o.color_at(lx, ly)));
                    owner[(py * w + px) as usize] = k;
                }
            }
        }
        let mut visible = vec![0u32; live.len()];
        for &k in owner.iter().filter(|&&k| k != usize::MAX) {
            visible[k] += 1;
        }

        let mut present: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&k| visible[k] as f32 / (live[k].w * live[k].h) as f32 >= VISIBILITY_THRESHOLD)
            .collect();
        present.sort_by_key(|&k| live[k].id);
        for k in present {
            let o = &live[k];
            let (x0, y0, ow, oh) = o.rect();
            let bbox = BBox::new(x0 as f32, y0 as f32, ow as f32, oh as f32);
            gt.push(Detection::new(t, o.id, bbox, 1.0));
            let dropped = cfg.det_dropout > 0.0 && rng.random_bool(cfg.det_dropout);
            if !dropped {
                let jit = |v: f32, rng: &mut ChaCha8Rng| {
                    if cfg.det_jitter > 0.0 {
                        v + det_noise.sample(rng)
                    } else {
                        v
                    }
                };
                let l = jit(bbox.left, &mut rng);
                let tp = jit(bbox.top, &mut rng);
                let bw = jit(bbox.width, &mut rng).max(1.0);
                let bh = jit(bbox.height, &mut rng).max(1.0);
                let conf: f32 = rng.random_range(0.5..1.0);
                dets.push(Detection::new(t, -1, BBox::new(l, tp, bw, bh), conf));
            }
        }
        frames.push(img);
    }

    Ok(SceneSequence {
        name: cfg.name.clone(),
        width: w,
        height: h,
        fps: cfg.fps,
        frames,
        gt,
        dets,
    })
}

pub const SEQINFO: &str = "seqinfo.txt";
pub const GT_FILE: &str = "gt.csv";
pub const DET_FILE: &str = "det.csv";

/// Writes `img1/NNNNNN.png`, `gt.csv`, `det.csv` and `seqinfo.txt`.
pub fn write_sequence(dir: &Path, seq: &SceneSequence) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_png(&frame_file(dir, i as u32 + 1, "png"), f)?;
    }
    write_mot_csv(&dir.join(GT_FILE), &seq.gt)?;
    write_mot_csv(&dir.join(DET_FILE), &seq.dets)?;
    let mut info = String::new();
    let _ = writeln!(info, "name = {}", seq.name);
    let _ = writeln!(info, "frames = {}", seq.frames.len());
    let _ = writeln!(info, "width = {}", seq.width);
    let _ = writeln!(info, "height = {}", seq.height);
    let _ = writeln!(info, "fps = {}", seq.fps);
    let _ = writeln!(info, "image_dir = {IMAGE_DIR}");
    atomic_write(&dir.join(SEQINFO), info.as_bytes())
}

/// Sequence metadata from `seqinfo.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInfo {
    pub name: String,
    pub frames: u32,
    pub width: u32,
    pub height: u32,
    pub fps: u32,
}

pub fn read_seqinfo(dir: &Path) -> Result<SeqInfo> {
    let path = dir.join(SEQINFO);
    let text = fs::read_to_string(&path)?;
    let kv: BTreeMap<String, (String, usize)> = super::config::parse_key_values(&text, &path)?
        .into_iter()
        .map(|e| (e.key, (e.value, e.line)))
        .collect();
    let get = |k: &str| -> Result<u32> {
        let (v, line) = kv.get(k).ok_or_else(|| DanError::Config(format!("{}: missing key {k}", path.display())))?;
        v.parse().map_err(|_| DanError::Parse {
            path: path.clone(),
            line: *line,
            msg: format!("{k} must be a nonnegative integer"),
        })
    };
    Ok(SeqInfo {
        name: kv.get("name").map(|(v, _)| v.clone()).unwrap_or_default(),
        frames: get("frames")?,
        width: get("width")?,
        height: get("height")?,
        fps: get("fps").unwrap_or(30),
    })
}

/// Loads a sequence directory written by [`write_sequence`]. Missing
/// `det.csv` yields no detections.
pub fn read_sequence(dir: &Path) -> Result<SceneSequence> {
    let info = read_seqinfo(dir)?;
    let frames = (1..=info.frames)
        .map(|i| load_sequence_frame(dir, i))
        .collect::<Result<Vec<_>>>()?;
    let gt = parse_mot_csv(&dir.join(GT_FILE))?;
    let det_path = dir.join(DET_FILE);
    let dets = if det_path.exists() { parse_mot_csv(&det_path)? } else { Vec::new() };
    Ok(SceneSequence {
        name: info.name,
        width: info.width,
        height: info.height,
        fps: info.fps,
        frames,
        gt,
        dets,
    })
}
