//! Training-time augmentations for frame pairs.
//!
//! Photometric distortion, canvas expansion and cropping each fire with
//! probability [`STEP_PROB`] per pair (one decision shared by both frames,
//! magnitudes drawn per frame), then both frames are resized and flipped
//! together with probability [`FLIP_PROB`].
//!
//! Photometric arithmetic runs in `f64` without intermediate rounding;
//! only the final value is clamped to `[0, 255]` and rounded half away from
//! zero. Hue lives in `[0, 360)`, saturation and value in `[0, 1]`.

use image::Rgb;
use rand::Rng;

use super::frame::{resize_frame, Frame};
use super::mot::BBox;

pub const STEP_PROB: f64 = 0.3;
pub const FLIP_PROB: f64 = 0.5;
pub const DISTORT_RANGE: (f64, f64) = (0.7, 1.5);
pub const EXPAND_RANGE: (f64, f64) = (1.0, 1.2);
pub const CROP_RANGE: (f64, f64) = (0.8, 1.0);
pub const CROP_ATTEMPTS: usize = 50;

/// A frame with its object boxes and identities (parallel vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub image: Frame,
    pub boxes: Vec<BBox>,
    pub ids: Vec<i64>,
}

impl AnnotatedFrame {
    /// Box centers normalized by the frame size.
    pub fn centers(&self) -> Vec<(f32, f32)> {
        let (w, h) = (self.image.width() as f32, self.image.height() as f32);
        self.boxes
            .iter()
            .map(|b| {
                let (cx, cy) = b.center();
                (cx / w, cy / h)
            })
            .collect()
    }
}

/// Which steps fired for one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub photometric: bool,
    pub expand: bool,
    pub crop: bool,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub out_width: u32,
    pub out_height: u32,
    pub mean_pixel: [u8; 3],
    pub step_prob: f64,
    pub flip_prob: f64,
}

impl AugmentParams {
    pub fn new(out_width: u32, out_height: u32, mean_pixel: [u8; 3]) -> Self {
        AugmentParams {
            out_width,
            out_height,
            mean_pixel,
            step_prob: STEP_PROB,
            flip_prob: FLIP_PROB,
        }
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Brightness scale `u1`, saturation scale `u2`, brightness scale `u3`.
pub fn photometric_with(frame: &Frame, u1: f64, u2: f64, u3: f64) -> Frame {
    let mut out = frame.clone();
    for px in out.pixels_mut() {
        let [r, g, b] = px.0.map(|c| (c as f64 * u1).clamp(0.0, 255.0) / 255.0);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h, (s * u2).clamp(0.0, 1.0), v);
        let q = |c: f64| (c * 255.0 * u3).clamp(0.0, 255.0).round() as u8;
        *px = Rgb([q(r), q(g), q(b)]);
    }
    out
}

fn draw<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

pub fn photometric_distort<R: Rng + ?Sized>(frame: &Frame, rng: &mut R) -> Frame {
    let u1 = draw(rng, DISTORT_RANGE);
    let u2 = draw(rng, DISTORT_RANGE);
    let u3 = draw(rng, DISTORT_RANGE);
    photometric_with(frame, u1, u2, u3)
}

/// Canvas of `ceil(ratio·H) × ceil(ratio·W)` filled with `mean`, the frame
/// pasted at `(off_x, off_y)`. Offsets are clamped to the free margin.
pub fn expand_with(frame: &Frame, boxes: &[BBox], ratio: f64, off_x: u32, off_y: u32, mean: [u8; 3]) -> (Frame, Vec<BBox>) {
    let (w, h) = frame.dimensions();
    let nw = (ratio * w as f64).ceil() as u32;
    let nh = (ratio * h as f64).ceil() as u32;
    let ox = off_x.min(nw - w);
    let oy = off_y.min(nh - h);
    let mut canvas = Frame::from_pixel(nw, nh, Rgb(mean));
    image::imageops::replace(&mut canvas, frame, ox as i64, oy as i64);
    let boxes = boxes
        .iter()
        .map(|b| BBox::new(b.left + ox as f32, b.top + oy as f32, b.width, b.height))
        .collect();
    (canvas, boxes)
}

pub fn expand_frame<R: Rng + ?Sized>(frame: &Frame, boxes: &[BBox], mean: [u8; 3], rng: &mut R) -> (Frame, Vec<BBox>) {
    let ratio = draw(rng, EXPAND_RANGE);
    let (w, h) = frame.dimensions();
    let nw = (ratio * w as f64).ceil() as u32;
    let nh = (ratio * h as f64).ceil() as u32;
    let ox = rng.random_range(0..=nw - w);
    let oy = rng.random_range(0..=nh - h);
    expand_with(frame, boxes, ratio, ox, oy, mean)
}

/// Crops the `cw × ch` window at `(x0, y0)` if it contains every box center;
/// boxes are clipped to the window and translated.
pub fn crop_with(frame: &Frame, boxes: &[BBox], x0: u32, y0: u32, cw: u32, ch: u32) -> Option<(Frame, Vec<BBox>)> {
    let (w, h) = frame.dimensions();
    if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h {
        return None;
    }
    let (fx0, fy0, fx1, fy1) = (x0 as f32, y0 as f32, (x0 + cw) as f32, (y0 + ch) as f32);
    let inside = boxes.iter().all(|b| {
        let (cx, cy) = b.center();
        cx >= fx0 && cx < fx1 && cy >= fy0 && cy < fy1
    });
    if !inside {
        return None;
    }
    let img = image::imageops::crop_imm(frame, x0, y0, cw, ch).to_image();
    let boxes = boxes
        .iter()
        .map(|b| {
            let l = b.left.max(fx0);
            let t = b.top.max(fy0);
            let r = (b.left + b.width).min(fx1);
            let btm = (b.top + b.height).min(fy1);
            BBox::new(l - fx0, t - fy0, r - l, btm - t)
        })
        .collect();
    Some((img, boxes))
}

pub fn crop_frame<R: Rng + ?Sized>(frame: &Frame, boxes: &[BBox], rng: &mut R) -> (Frame, Vec<BBox>) {
    let ratio = draw(rng, CROP_RANGE);
    let (w, h) = frame.dimensions();
    let cw = ((ratio * w as f64).round() as u32).clamp(1, w);
    let ch = ((ratio * h as f64).round() as u32).clamp(1, h);
    for _ in 0..CROP_ATTEMPTS {
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        if let Some(out) = crop_with(frame, boxes, x0, y0, cw, ch) {
            return out;
        }
    }
    (frame.clone(), boxes.to_vec())
}

pub fn flip_horizontal(frame: &Frame, boxes: &[BBox]) -> (Frame, Vec<BBox>) {
    let w = frame.width() as f32;
    let img = image::imageops::flip_horizontal(frame);
    let boxes = boxes
        .iter()
        .map(|b| BBox::new(w - b.left - b.width, b.top, b.width, b.height))
        .collect();
    (img, boxes)
}

fn apply(f: &mut AnnotatedFrame, step: impl FnOnce(&Frame, &[BBox]) -> (Frame, Vec<BBox>)) {
    let (img, boxes) = step(&f.image, &f.boxes);
    f.image = img;
    f.boxes = boxes;
}

/// Augments both frames of a pair; identities are never altered.
pub fn augment_pair<R: Rng + ?Sized>(
    prev: &AnnotatedFrame,
    cur: &AnnotatedFrame,
    params: &AugmentParams,
    rng: &mut R,
) -> (AnnotatedFrame, AnnotatedFrame, AugmentTrace) {
    let mut pair = [prev.clone(), cur.clone()];
    let mut trace = AugmentTrace::default();

    trace.photometric = rng.random_bool(params.step_prob);
    if trace.photometric {
        for f in pair.iter_mut() {
            f.image = photometric_distort(&f.image, rng);
        }
    }
    trace.expand = rng.random_bool(params.step_prob);
    if trace.expand {
        for f in pair.iter_mut() {
            apply(f, |img, b| expand_frame(img, b, params.mean_pixel, rng));
        }
    }
    trace.crop = rng.random_bool(params.step_prob);
    if trace.crop {
        for f in pair.iter_mut() {
            apply(f, |img, b| crop_frame(img, b, rng));
        }
    }
    for f in pair.iter_mut() {
        apply(f, |img, b| resize_frame(img, b, params.out_width, params.out_height));
    }
    trace.flip = rng.random_bool(params.flip_prob);
    if trace.flip {
        for f in pair.iter_mut() {
            apply(f, flip_horizontal);
        }
    }
    let [a, b] = pair;
    (a, b, trace)
}
