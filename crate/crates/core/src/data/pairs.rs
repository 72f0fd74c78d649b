//! Frame-pair sampling for training.

use rand::Rng;

use super::augment::AnnotatedFrame;
use super::synth::SceneSequence;
use crate::error::{DanError, Result};
use crate::label::AssociationLabel;

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub prev: AnnotatedFrame,
    pub cur: AnnotatedFrame,
    /// Frame distance `n`.
    pub gap: u32,
    pub label: AssociationLabel,
}

/// Ground-truth objects of 1-based frame `t`, in identity order.
pub fn annotated_frame(seq: &SceneSequence, t: u32) -> Result<AnnotatedFrame> {
    let image = seq
        .frame(t)
        .ok_or_else(|| DanError::Contract(format!("frame {t} outside 1..={}", seq.len())))?
        .clone();
    let mut objs: Vec<_> = seq.gt.iter().filter(|d| d.frame == t).collect();
    objs.sort_by_key(|d| d.id);
    Ok(AnnotatedFrame {
        image,
        boxes: objs.iter().map(|d| d.bbox).collect(),
        ids: objs.iter().map(|d| d.id).collect(),
    })
}

/// Draws `(t - n, t)` with `n` uniform on `1..=n_v`.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, n_v: u32, rng: &mut R) -> Result<(u32, u32)> {
    if n_v == 0 || len <= n_v as usize {
        return Err(DanError::SequenceTooShort {
            len,
            need: n_v as usize + 1,
        });
    }
    let n = rng.random_range(1..=n_v);
    let t = rng.random_range(n + 1..=len as u32);
    Ok((t - n, t))
}

pub fn pair_at(seq: &SceneSequence, prev: u32, cur: u32, n_m: usize) -> Result<PairSample> {
    let prev_f = annotated_frame(seq, prev)?;
    let cur_f = annotated_frame(seq, cur)?;
    let label = AssociationLabel::build(&prev_f.ids, &cur_f.ids, n_m)?;
    Ok(PairSample {
        prev: prev_f,
        cur: cur_f,
        gap: cur - prev,
        label,
    })
}

pub fn sample_pair<R: Rng + ?Sized>(seq: &SceneSequence, n_v: u32, n_m: usize, rng: &mut R) -> Result<PairSample> {
    let (a, b) = sample_indices(seq.len(), n_v, rng)?;
    pair_at(seq, a, b, n_m)
}
