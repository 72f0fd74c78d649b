//! Pair datasets, the SGD training loop and held-out association accuracy.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use super::loss::{association_hits, Losses};
use super::{DanModel, FeatureMatrix, Mode};
use crate::data::augment::{augment_pair, AnnotatedFrame, AugmentParams};
use crate::data::frame::resize_frame;
use crate::data::pairs::{pair_at, sample_indices};
use crate::data::synth::SceneSequence;
use crate::data::PairSample;
use crate::error::{DanError, Result};
use crate::label::AssociationLabel;
use crate::tensor::{Sgd, Tensor};

/// Frame pairs drawn from a set of sequences, stored as `(sequence, prev,
/// cur)` with 1-based frame numbers.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub sequences: Vec<SceneSequence>,
    pub pairs: Vec<(usize, u32, u32)>,
}

impl PairDataset {
    /// Draws `count` pairs, spreading them over the sequences round-robin.
    pub fn sample<R: Rng + ?Sized>(sequences: Vec<SceneSequence>, count: usize, n_v: u32, rng: &mut R) -> Result<Self> {
        if sequences.is_empty() {
            return Err(DanError::EmptyDataset);
        }
        let mut pairs = Vec::with_capacity(count);
        for k in 0..count {
            let s = k % sequences.len();
            let (a, b) = sample_indices(sequences[s].len(), n_v, rng)?;
            pairs.push((s, a, b));
        }
        Ok(PairDataset { sequences, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, k: usize, n_m: usize) -> Result<PairSample> {
        let (s, a, b) = self.pairs[k];
        pair_at(&self.sequences[s], a, b, n_m)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub losses: Losses,
}

pub const LOG_HEADER: &str = "epoch,lr,mean_loss,L_f,L_b,L_c,L_a";

pub fn format_log_row(r: &EpochRow) -> String {
    let l = &r.losses;
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.epoch, r.lr, l.total, l.forward, l.backward, l.consistency, l.assemble
    )
}

pub fn format_log(rows: &[EpochRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format_log_row(r));
        s.push('\n');
    }
    s
}

fn fit_frame(f: &AnnotatedFrame, w: u32, h: u32) -> AnnotatedFrame {
    if f.image.width() == w && f.image.height() == h {
        return f.clone();
    }
    let (image, boxes) = resize_frame(&f.image, &f.boxes, w, h);
    AnnotatedFrame {
        image,
        boxes,
        ids: f.ids.clone(),
    }
}

/// Keeps the first `n_m` objects of a frame.
fn truncate(mut f: AnnotatedFrame, n_m: usize) -> AnnotatedFrame {
    f.boxes.truncate(n_m);
    f.ids.truncate(n_m);
    f
}

struct Batch {
    input: Tensor<f32>,
    centers: Vec<Vec<(f32, f32)>>,
    labels: Vec<AssociationLabel>,
    counts: Vec<(usize, usize)>,
}

fn build_batch<R: Rng + ?Sized>(
    model: &DanModel<f32>,
    data: &PairDataset,
    idx: &[usize],
    augment: Option<&AugmentParams>,
    rng: &mut R,
) -> Result<Batch> {
    let cfg = model.config();
    let (w, h) = (cfg.input_w as u32, cfg.input_h as u32);
    let mut frames = Vec::with_capacity(2 * idx.len());
    let mut centers = Vec::with_capacity(2 * idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    let mut counts = Vec::with_capacity(idx.len());
    for &k in idx {
        let s = data.get(k, cfg.n_m)?;
        let (a, b) = match augment {
            Some(p) => {
                let (a, b, _) = augment_pair(&s.prev, &s.cur, p, rng);
                (a, b)
            }
            None => (fit_frame(&s.prev, w, h), fit_frame(&s.cur, w, h)),
        };
        let (a, b) = (truncate(a, cfg.n_m), truncate(b, cfg.n_m));
        labels.push(AssociationLabel::build(&a.ids, &b.ids, cfg.n_m)?);
        counts.push((a.ids.len(), b.ids.len()));
        for f in [a, b] {
            centers.push(f.centers().into_iter().map(|(x, y)| (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))).collect());
            frames.push(f.image);
        }
    }
    let refs: Vec<_> = frames.iter().collect();
    Ok(Batch {
        input: model.input_batch(&refs)?,
        centers,
        labels,
        counts,
    })
}

fn run_batch(model: &DanModel<f32>, batch: Batch, mode: Mode, grad: bool) -> Result<(Losses, super::Pass<f32>, super::LossVars)> {
    let mut pass = model.begin(mode, grad);
    let feats = model.features(&mut pass, batch.input, &batch.centers)?;
    let pairs: Vec<(usize, usize)> = (0..batch.labels.len()).map(|k| (2 * k, 2 * k + 1)).collect();
    let m = model.similarity(&mut pass, feats, &pairs)?;
    let heads = model.heads(&mut pass, m, &batch.counts)?;
    let refs: Vec<&AssociationLabel> = batch.labels.iter().collect();
    let lv = model.losses(&mut pass, &heads, &refs)?;
    let v = |x| pass.graph.value(x).data()[0] as f64;
    let losses = Losses {
        forward: v(lv.forward),
        backward: v(lv.backward),
        consistency: v(lv.consistency),
        assemble: v(lv.assemble),
        total: v(lv.total),
    };
    Ok((losses, pass, lv))
}

fn weighted_mean(parts: &[(Losses, usize)]) -> Losses {
    let n: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Losses::default();
    for (l, k) in parts {
        let w = *k as f64 / n.max(1) as f64;
        out.forward += l.forward * w;
        out.backward += l.backward * w;
        out.consistency += l.consistency * w;
        out.assemble += l.assemble * w;
        out.total += l.total * w;
    }
    out
}

/// Mean loss over the whole dataset without touching the model. Batch norm
/// runs in training mode so the number is comparable with epoch means.
pub fn initial_loss<R: Rng + ?Sized>(model: &DanModel<f32>, data: &PairDataset, cfg: &TrainConfig, rng: &mut R) -> Result<Losses> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(cfg.batch_size) {
        let batch = build_batch(model, data, chunk, None, rng)?;
        parts.push((run_batch(model, batch, Mode::Train, false)?.0, chunk.len()));
    }
    Ok(weighted_mean(&parts))
}

/// Trains `model` in place. The returned log starts with an epoch-0 row
/// holding the initial mean loss; `on_epoch` sees every row as it is made.
pub fn train<R: Rng + ?Sized>(
    model: &mut DanModel<f32>,
    data: &PairDataset,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<Vec<EpochRow>> {
    if data.is_empty() {
        return Err(DanError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(DanError::Config("batch_size must be positive".into()));
    }
    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let first = EpochRow {
        epoch: 0,
        lr: cfg.lr_at(0),
        losses: initial_loss(model, data, cfg, rng)?,
    };
    on_epoch(&first);
    rows.push(first);

    let mc = model.config();
    let params = AugmentParams::new(mc.input_w as u32, mc.input_h as u32, mc.mean_pixel);
    let augment = cfg.augment.then_some(&params);
    let trainable = model.trainable_indices();
    let mut sgd = Sgd::new(cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        sgd.lr = lr as f32;
        order.shuffle(rng);
        let mut parts = Vec::with_capacity(order.len() / cfg.batch_size + 1);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = build_batch(model, data, chunk, augment, rng)?;
            let (losses, mut pass, lv) = run_batch(model, batch, Mode::Train, true)?;
            if !losses.total.is_finite() {
                return Err(DanError::Contract(format!("non-finite loss at epoch {epoch}")));
            }
            pass.graph.backward(lv.total)?;
            let grads: Vec<Tensor<f32>> = trainable
                .iter()
                .map(|&i| {
                    pass.graph
                        .grad(pass.var(i))
                        .unwrap_or_else(|| Tensor::zeros(model.tensors()[i].shape()))
                })
                .collect();
            model.update_running_stats(&pass);
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut targets: Vec<&mut Tensor<f32>> = model
                .tensors_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| trainable.binary_search(i).is_ok())
                .map(|(_, t)| t)
                .collect();
            sgd.step(&mut targets, &grad_refs)?;
            parts.push((losses, chunk.len()));
        }
        let row = EpochRow {
            epoch,
            lr,
            losses: weighted_mean(&parts),
        };
        log::info!("epoch {epoch}: lr {} loss {:.4}", row.lr, row.losses.total);
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Held-out association accuracy: for each real object of the earlier frame,
/// whether the row argmax of the predicted affinity hits the label.
pub fn association_accuracy(model: &DanModel<f32>, samples: &[PairSample]) -> Result<(usize, usize)> {
    let cfg = model.config();
    let (w, h) = (cfg.input_w as u32, cfg.input_h as u32);
    let (mut hits, mut total) = (0, 0);
    for chunk in samples.chunks(8) {
        let mut frames = Vec::new();
        let mut centers = Vec::new();
        let mut labels = Vec::new();
        for s in chunk {
            let a = truncate(fit_frame(&s.prev, w, h), cfg.n_m);
            let b = truncate(fit_frame(&s.cur, w, h), cfg.n_m);
            labels.push(AssociationLabel::build(&a.ids, &b.ids, cfg.n_m)?);
            for f in [a, b] {
                centers.push(f.centers().into_iter().map(|(x, y)| (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))).collect());
                frames.push(f.image);
            }
        }
        let refs: Vec<_> = frames.iter().collect();
        let feats: Vec<FeatureMatrix<f32>> = model.extract_features(&refs, &centers)?;
        for (k, label) in labels.iter().enumerate() {
            let b = model.estimate_affinity(&feats[2 * k], &feats[2 * k + 1])?;
            let (h, t) = association_hits(&b, label);
            hits += h;
            total += t;
        }
    }
    Ok((hits, total))
}
