//! RGB frames: loading, saving, resizing and conversion to network input.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};

use super::mot::BBox;
use crate::error::{DanError, Result};
use crate::io::atomic_write;

pub type Frame = RgbImage;

/// Default mean pixel used for padding and input centering.
pub const DEFAULT_MEAN_PIXEL: [u8; 3] = [104, 117, 123];

/// Sub-directory holding numbered frame images.
pub const IMAGE_DIR: &str = "img1";

pub fn frame_file(dir: &Path, index: u32, ext: &str) -> PathBuf {
    dir.join(IMAGE_DIR).join(format!("{index:06}.{ext}"))
}

/// Loads frame `index` of a sequence directory, trying PNG and then PPM.
pub fn load_sequence_frame(dir: &Path, index: u32) -> Result<Frame> {
    for ext in ["png", "ppm"] {
        let p = frame_file(dir, index, ext);
        if p.exists() {
            return load_frame(&p);
        }
    }
    Err(DanError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("frame {index} not found under {}", dir.join(IMAGE_DIR).display()),
    )))
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    Ok(img.to_rgb8())
}

pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    frame.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, frame: &Frame) -> Result<()> {
    atomic_write(path, &encode_png(frame)?)
}

/// Binary PPM (P6).
pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(frame.as_raw());
    out
}

/// Resizes a frame and rescales its boxes to match.
pub fn resize_frame(frame: &Frame, boxes: &[BBox], width: u32, height: u32) -> (Frame, Vec<BBox>) {
    if frame.width() == width && frame.height() == height {
        return (frame.clone(), boxes.to_vec());
    }
    let sx = width as f32 / frame.width() as f32;
    let sy = height as f32 / frame.height() as f32;
    let out = imageops::resize(frame, width, height, FilterType::Triangle);
    let boxes = boxes
        .iter()
        .map(|b| BBox::new(b.left * sx, b.top * sy, b.width * sx, b.height * sy))
        .collect();
    (out, boxes)
}

/// Channel-major `[3, H, W]` values, centered on `mean` and scaled to
/// roughly unit range.
pub fn frame_to_input(frame: &Frame, mean: [u8; 3]) -> Vec<f32> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let mut out = vec![0f32; 3 * w * h];
    for (i, px) in frame.pixels().enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = (px[c] as f32 - mean[c] as f32) / 128.0;
        }
    }
    out
}
