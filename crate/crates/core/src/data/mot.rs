//! MOTChallenge CSV records:
//! `frame,id,bb_left,bb_top,bb_width,bb_height,conf[,x,y,z]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{DanError, Result};
use crate::io::atomic_write;

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub left: f32,
    pub top: f32,
    pub width: f32,
    pub height: f32,
}

impl BBox {
    pub fn new(left: f32, top: f32, width: f32, height: f32) -> Self {
        BBox {
            left,
            top,
            width,
            height,
        }
    }

    pub fn center(&self) -> (f32, f32) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (l0, t0, l1, t1) = (self.left as f64, self.top as f64, other.left as f64, other.top as f64);
        let x0 = l0.max(l1);
        let y0 = t0.max(t1);
        let x1 = (l0 + self.width as f64).min(l1 + other.width as f64);
        let y1 = (t0 + self.height as f64).min(t1 + other.height as f64);
        let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One CSV row. `id` is −1 for detections without identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub id: i64,
    pub bbox: BBox,
    pub conf: f32,
    pub world: [f32; 3],
}

impl Detection {
    pub fn new(frame: u32, id: i64, bbox: BBox, conf: f32) -> Self {
        Detection {
            frame,
            id,
            bbox,
            conf,
            world: [-1.0; 3],
        }
    }

    /// Box center normalized by the frame size.
    pub fn center(&self, frame_w: u32, frame_h: u32) -> (f32, f32) {
        let (cx, cy) = self.bbox.center();
        (cx / frame_w as f32, cy / frame_h as f32)
    }
}

fn parse_int(field: &str) -> Option<i64> {
    let f = field.trim();
    if let Ok(v) = f.parse::<i64>() {
        return Some(v);
    }
    // Some toolkits write integral columns as floats ("1.0").
    let v = f.parse::<f64>().ok()?;
    (v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

fn parse_float(field: &str) -> Option<f32> {
    field.trim().parse::<f32>().ok().filter(|v| v.is_finite())
}

/// Parses one CSV line (1-based `line` is only used in error messages).
pub fn parse_line(text: &str, path: &Path, line: usize) -> Result<Detection> {
    let err = |msg: String| DanError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() < 7 {
        return Err(err(format!("expected at least 7 fields, found {}", fields.len())));
    }
    let frame = parse_int(fields[0])
        .filter(|f| *f >= 1 && *f <= u32::MAX as i64)
        .ok_or_else(|| err(format!("bad frame index {:?}", fields[0])))?;
    let id = parse_int(fields[1]).ok_or_else(|| err(format!("bad identity {:?}", fields[1])))?;
    let mut nums = [0f32; 5];
    for (k, slot) in nums.iter_mut().enumerate() {
        *slot = parse_float(fields[2 + k]).ok_or_else(|| err(format!("bad numeric field {:?}", fields[2 + k])))?;
    }
    let [left, top, width, height, conf] = nums;
    if width <= 0.0 || height <= 0.0 {
        return Err(err(format!("nonpositive box extent {width}x{height}")));
    }
    let mut world = [-1.0f32; 3];
    for (k, slot) in world.iter_mut().enumerate() {
        if let Some(f) = fields.get(7 + k) {
            *slot = parse_float(f).ok_or_else(|| err(format!("bad numeric field {f:?}")))?;
        }
    }
    Ok(Detection {
        frame: frame as u32,
        id,
        bbox: BBox::new(left, top, width, height),
        conf,
        world,
    })
}

pub fn parse_mot_str(text: &str, path: &Path) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, path, i + 1))
        .collect()
}

pub fn parse_mot_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path)?;
    parse_mot_str(&text, path)
}

pub fn format_detection(d: &Detection) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        d.frame, d.id, d.bbox.left, d.bbox.top, d.bbox.width, d.bbox.height, d.conf, d.world[0], d.world[1], d.world[2]
    )
}

pub fn format_mot(dets: &[Detection]) -> String {
    let mut out = String::with_capacity(dets.len() * 48);
    for d in dets {
        let _ = writeln!(out, "{}", format_detection(d));
    }
    out
}

pub fn write_mot_csv(path: &Path, dets: &[Detection]) -> Result<()> {
    atomic_write(path, format_mot(dets).as_bytes())
}

/// Detections grouped by frame, in ascending frame order.
pub fn group_by_frame(dets: &[Detection]) -> std::collections::BTreeMap<u32, Vec<Detection>> {
    let mut map: std::collections::BTreeMap<u32, Vec<Detection>> = Default::default();
    for d in dets {
        map.entry(d.frame).or_default().push(*d);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.csv")
    }

    #[test]
    fn full_row() {
        let d = parse_line("1,2,10,20,30,40,1,-1,-1,-1", p(), 1).unwrap();
        assert_eq!(d.frame, 1);
        assert_eq!(d.id, 2);
        assert_eq!(d.bbox, BBox::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(d.conf, 1.0);
    }

    #[test]
    fn seven_field_detection() {
        let d = parse_line("5,-1,0,0,10,10,0.9", p(), 1).unwrap();
        assert_eq!(d.id, -1);
        assert_eq!(d.frame, 5);
        assert_eq!(d.conf, 0.9);
        assert_eq!(d.world, [-1.0; 3]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_mot_str("1,1,0,0,5,5,1\n2,1,zz,0,5,5,1\n", p()).unwrap_err();
        match err {
            DanError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(parse_line("1,1,0,0,0,5,1", p(), 1).is_err());
        assert!(parse_line("1,1,0,0,5,-5,1", p(), 1).is_err());
        assert!(parse_line("1,1,0,0,5", p(), 1).is_err());
        assert!(parse_line("0,1,0,0,5,5,1", p(), 1).is_err());
    }

    #[test]
    fn float_formatted_integers_are_accepted() {
        let d = parse_line("3.0,7.0,1.5,2.5,3,4,0.5", p(), 1).unwrap();
        assert_eq!((d.frame, d.id), (3, 7));
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        let half = a.iou(&BBox::new(5.0, 0.0, 10.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-12);
    }

    fn detection() -> impl Strategy<Value = Detection> {
        (
            1u32..10_000,
            -1i64..1000,
            -1e4f32..1e4,
            -1e4f32..1e4,
            1e-3f32..1e4,
            1e-3f32..1e4,
            -1f32..1.0,
            proptest::array::uniform3(-1e3f32..1e3),
        )
            .prop_map(|(frame, id, l, t, w, h, conf, world)| Detection {
                frame,
                id,
                bbox: BBox::new(l, t, w, h),
                conf,
                world,
            })
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(dets in proptest::collection::vec(detection(), 0..50)) {
            let text = format_mot(&dets);
            prop_assert_eq!(parse_mot_str(&text, p()).unwrap(), dets);
        }
    }
}
