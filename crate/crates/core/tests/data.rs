use std::path::Path;

use dan_core::data::augment::{augment_pair, crop_frame, crop_with, photometric_with, AnnotatedFrame, AugmentParams};
use dan_core::data::frame::DEFAULT_MEAN_PIXEL;
use dan_core::data::mot::{format_mot, parse_mot_str, BBox, Detection};
use dan_core::data::pairs::sample_indices;
use dan_core::data::synth::{read_sequence, write_sequence};
use dan_core::data::{generate_synthetic, Frame, SynthConfig};
use image::Rgb;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_frame(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Frame {
    Frame::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Textbook HSV round trip written independently of the library: hue from
/// the sector of the largest channel, back via the six-case table.
fn oracle_pixel(p: [u8; 3], u1: f64, u2: f64, u3: f64) -> [u8; 3] {
    let c: Vec<f64> = p.iter().map(|&v| (v as f64 * u1).min(255.0) / 255.0).collect();
    let (r, g, b) = (c[0], c[1], c[2]);
    let v = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let chroma = v - mn;
    let mut s = if v == 0.0 { 0.0 } else { chroma / v };
    let mut h = if chroma == 0.0 {
        0.0
    } else if v == r {
        let x = (g - b) / chroma;
        if x < 0.0 {
            x + 6.0
        } else {
            x
        }
    } else if v == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    s = (s * u2).min(1.0);
    if h >= 6.0 {
        h -= 6.0;
    }
    let sector = h.floor();
    let f = h - sector;
    let (pp, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as i32 {
        0 => (v, t, pp),
        1 => (q, v, pp),
        2 => (pp, v, t),
        3 => (pp, q, v),
        4 => (t, pp, v),
        _ => (v, pp, q),
    };
    [r, g, b].map(|x| (x * 255.0 * u3).clamp(0.0, 255.0).round() as u8)
}

#[test]
fn photometric_distortion_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let f = noise_frame(&mut rng, 16, 16);
        let (u1, u2, u3) = (rng.random_range(0.7..1.5), rng.random_range(0.7..1.5), rng.random_range(0.7..1.5));
        let out = photometric_with(&f, u1, u2, u3);
        for (a, b) in f.pixels().zip(out.pixels()) {
            let want = oracle_pixel(a.0, u1, u2, u3);
            for k in 0..3 {
                assert!((want[k] as i32 - b.0[k] as i32).abs() <= 1, "{:?} -> {:?} vs {:?}", a.0, b.0, want);
            }
        }
    }
    let f = noise_frame(&mut rng, 4, 4);
    assert_eq!(photometric_with(&f, 1.0, 1.0, 1.0), f);
}

fn boxed_frame(rng: &mut ChaCha8Rng, w: u32, h: u32, n: usize) -> AnnotatedFrame {
    let boxes = (0..n)
        .map(|_| {
            let bw = rng.random_range(2.0..(w as f32 / 3.0));
            let bh = rng.random_range(2.0..(h as f32 / 3.0));
            BBox::new(rng.random_range(0.0..w as f32 - bw), rng.random_range(0.0..h as f32 - bh), bw, bh)
        })
        .collect();
    AnnotatedFrame {
        image: noise_frame(rng, w, h),
        boxes,
        ids: (0..n as i64).collect(),
    }
}

#[test]
fn augmentation_step_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = boxed_frame(&mut rng, 24, 24, 3);
    let b = boxed_frame(&mut rng, 24, 24, 3);
    let params = AugmentParams::new(24, 24, DEFAULT_MEAN_PIXEL);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let (x, y, t) = augment_pair(&a, &b, &params, &mut rng);
        for (c, fired) in counts.iter_mut().zip([t.photometric, t.expand, t.crop, t.flip]) {
            *c += fired as usize;
        }
        assert_eq!(x.ids, a.ids);
        assert_eq!(y.ids, b.ids);
        assert_eq!(x.image.dimensions(), (24, 24));
        for f in [&x, &y] {
            for bb in &f.boxes {
                let (cx, cy) = bb.center();
                assert!((0.0..=24.0).contains(&cx) && (0.0..=24.0).contains(&cy));
            }
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    for f in &freq[..3] {
        assert!((0.28..=0.32).contains(f), "{freq:?}");
    }
    assert!((0.48..=0.52).contains(&freq[3]), "{freq:?}");
}

#[test]
fn crops_keep_every_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..500 {
        let k = rng.random_range(1..6);
        let f = boxed_frame(&mut rng, 40, 30, k);
        let (img, boxes) = crop_frame(&f.image, &f.boxes, &mut rng);
        // Recover the window offset by locating the crop inside the frame.
        let (cw, ch) = img.dimensions();
        let offset = (0..=30 - ch)
            .flat_map(|y| (0..=40 - cw).map(move |x| (x, y)))
            .find(|&(x, y)| image::imageops::crop_imm(&f.image, x, y, cw, ch).to_image() == img)
            .expect("crop is a window of the frame");
        for (orig, clipped) in f.boxes.iter().zip(&boxes) {
            let (cx, cy) = orig.center();
            let (lx, ly) = (cx - offset.0 as f32, cy - offset.1 as f32);
            assert!(lx >= 0.0 && lx < cw as f32 && ly >= 0.0 && ly < ch as f32);
            assert!(clipped.width > 0.0 && clipped.height > 0.0);
        }
    }
    // A window missing a center is refused.
    let f = AnnotatedFrame {
        image: Frame::new(10, 10),
        boxes: vec![BBox::new(7.0, 7.0, 2.0, 2.0)],
        ids: vec![1],
    };
    assert!(crop_with(&f.image, &f.boxes, 0, 0, 8, 8).is_none());
    assert!(crop_with(&f.image, &f.boxes, 2, 2, 8, 8).is_some());
}

/// Pearson chi-square statistic against uniform expected counts.
fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn pair_gaps_and_positions_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (len, n_v) = (40usize, 10u32);
    let mut gaps = vec![0usize; n_v as usize];
    let mut ends_for_gap3 = vec![0usize; len - 3];
    for _ in 0..60_000 {
        let (a, b) = sample_indices(len, n_v, &mut rng).unwrap();
        assert!(a >= 1 && b as usize <= len && b > a);
        let n = b - a;
        gaps[n as usize - 1] += 1;
        if n == 3 {
            ends_for_gap3[b as usize - 4] += 1;
        }
    }
    // 99.9% quantiles: 27.88 for 9 degrees of freedom, 63.87 for 36.
    assert!(chi_square(&gaps) < 27.88, "{gaps:?}");
    assert!(chi_square(&ends_for_gap3) < 63.87, "{ends_for_gap3:?}");
}

#[test]
fn synthetic_sequences_are_deterministic_and_round_trip() {
    let cfg = SynthConfig {
        frames: 12,
        enter_prob: 0.2,
        leave_prob: 0.02,
        occlusion_prob: 0.05,
        ..SynthConfig::default()
    };
    let a = generate_synthetic(&cfg, 5).unwrap();
    let b = generate_synthetic(&cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic(&cfg, 6).unwrap());
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &a).unwrap();
    let back = read_sequence(dir.path()).unwrap();
    assert_eq!(back.frames, a.frames);
    assert_eq!(back.gt, a.gt);
    assert_eq!(back.dets, a.dets);
}

fn detection() -> impl Strategy<Value = Detection> {
    (
        1u32..10_000,
        -1i64..100_000,
        -500.0f32..2000.0,
        -500.0f32..2000.0,
        0.01f32..900.0,
        0.01f32..900.0,
        -1.0f32..1.0,
    )
        .prop_map(|(frame, id, l, t, w, h, conf)| Detection::new(frame, id, BBox::new(l, t, w, h), conf))
}

proptest! {
    #[test]
    fn mot_text_round_trip_is_lossless(dets in proptest::collection::vec(detection(), 0..40)) {
        let text = format_mot(&dets);
        let back = parse_mot_str(&text, Path::new("x.csv")).unwrap();
        prop_assert_eq!(back, dets);
    }
}
