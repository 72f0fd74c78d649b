//! Online association of detections into trajectories.
//!
//! Every frame's detections are turned into features once and cached for the
//! last `delta_b` frames. A trajectory's score for a detection is the sum of
//! the affinities between the trajectory's cached objects and that detection
//! (the accumulator). The accumulator's unidentified column is repeated once
//! per trajectory so every trajectory can be left unmatched, and the
//! assignment maximizing the total is taken.

use std::collections::VecDeque;

use crate::assignment::{solve_hungarian, AssignmentProblem};
use crate::data::frame::Frame;
use crate::data::mot::{BBox, Detection};
use crate::error::{DanError, Result};
use crate::model::{DanModel, FeatureMatrix, TrackConfig};
use crate::tensor::{Scalar, Tensor};

/// Produces per-frame features and pairwise affinities for the tracker.
pub trait AffinitySource {
    type Features;

    /// Features of one frame's (already truncated) detections.
    fn features(&mut self, frame: Option<&Frame>, dets: &[Detection]) -> Result<Self::Features>;

    /// For each cached entry, an `n_prev × (n_cur + 1)` matrix whose last
    /// column is the unidentified (departed) score.
    fn affinities(&mut self, cached: &[&Self::Features], cur: &Self::Features) -> Result<Vec<Tensor<f64>>>;
}

/// Ground-truth affinities: detections carry their true identity in `id`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleAffinity;

impl AffinitySource for OracleAffinity {
    type Features = Vec<i64>;

    fn features(&mut self, _frame: Option<&Frame>, dets: &[Detection]) -> Result<Vec<i64>> {
        Ok(dets.iter().map(|d| d.id).collect())
    }

    fn affinities(&mut self, cached: &[&Vec<i64>], cur: &Vec<i64>) -> Result<Vec<Tensor<f64>>> {
        let n = cur.len();
        cached
            .iter()
            .map(|prev| {
                let mut a = vec![0.0; prev.len() * (n + 1)];
                for (i, id) in prev.iter().enumerate() {
                    match cur.iter().position(|c| c == id) {
                        Some(j) => a[i * (n + 1) + j] = 1.0,
                        None => a[i * (n + 1) + n] = 1.0,
                    }
                }
                Tensor::new(&[prev.len(), n + 1], a)
            })
            .collect()
    }
}

/// Affinities predicted by a trained network.
pub struct ModelAffinity<'a, T> {
    model: &'a DanModel<T>,
}

impl<'a, T: Scalar> ModelAffinity<'a, T> {
    pub fn new(model: &'a DanModel<T>) -> Self {
        ModelAffinity { model }
    }
}

impl<T: Scalar> AffinitySource for ModelAffinity<'_, T> {
    type Features = FeatureMatrix<T>;

    fn features(&mut self, frame: Option<&Frame>, dets: &[Detection]) -> Result<FeatureMatrix<T>> {
        if dets.is_empty() {
            let c = self.model.config();
            return Ok(FeatureMatrix {
                data: Tensor::zeros(&[c.feature_dim(), c.n_m]),
                n_real: 0,
            });
        }
        let frame = frame.ok_or_else(|| DanError::Contract("the network needs frame images".into()))?;
        let centers: Vec<(f32, f32)> = dets
            .iter()
            .map(|d| {
                let (x, y) = d.center(frame.width(), frame.height());
                (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
            })
            .collect();
        Ok(self.model.extract_features(&[frame], &[centers])?.remove(0))
    }

    fn affinities(&mut self, cached: &[&FeatureMatrix<T>], cur: &FeatureMatrix<T>) -> Result<Vec<Tensor<f64>>> {
        let n_m = self.model.config().n_m;
        let bundles = self.model.estimate_affinities(cached, cur)?;
        bundles
            .iter()
            .map(|b| {
                let (rows, n) = (b.n_prev, b.n_cur);
                let mut a = Vec::with_capacity(rows * (n + 1));
                for i in 0..rows {
                    for j in 0..n {
                        a.push(b.a.at2(i, j).as_f64());
                    }
                    a.push(b.a.at2(i, n_m).as_f64());
                }
                Tensor::new(&[rows, n + 1], a)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    /// `(frame, detection index)`, oldest first.
    pub nodes: VecDeque<(u32, usize)>,
    pub miss_count: usize,
    pub last_box: BBox,
}

pub struct Tracker<S: AffinitySource> {
    source: S,
    params: TrackConfig,
    n_m: usize,
    tracks: Vec<Trajectory>,
    cache: VecDeque<(u32, S::Features)>,
    next_id: u64,
    last_frame: Option<u32>,
}

/// Keeps the `n_m` most confident detections, in their original order.
pub fn truncate_detections(dets: &[Detection], n_m: usize) -> Vec<Detection> {
    if dets.len() <= n_m {
        return dets.to_vec();
    }
    log::warn!(
        "frame {}: {} detections, keeping the {n_m} most confident",
        dets.first().map_or(0, |d| d.frame),
        dets.len()
    );
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].conf.total_cmp(&dets[a].conf).then(a.cmp(&b)));
    order.truncate(n_m);
    order.sort_unstable();
    order.into_iter().map(|i| dets[i].clone()).collect()
}

impl<S: AffinitySource> Tracker<S> {
    pub fn new(source: S, params: TrackConfig, n_m: usize) -> Result<Self> {
        if params.delta_b == 0 {
            return Err(DanError::Config("delta_b must be positive".into()));
        }
        if n_m == 0 {
            return Err(DanError::Config("n_m must be positive".into()));
        }
        Ok(Tracker {
            source,
            params,
            n_m,
            tracks: Vec::new(),
            cache: VecDeque::new(),
            next_id: 1,
            last_frame: None,
        })
    }

    pub fn tracks(&self) -> &[Trajectory] {
        &self.tracks
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Accumulated scores of every live trajectory against `n_cur`
    /// detections, given affinities against each cache entry.
    fn accumulate(&self, affinities: &[Tensor<f64>], n_cur: usize) -> Vec<Vec<f64>> {
        self.tracks
            .iter()
            .map(|t| {
                let mut row = vec![0.0; n_cur + 1];
                for ((frame, _), a) in self.cache.iter().zip(affinities) {
                    if let Some(&(_, k)) = t.nodes.iter().find(|(f, _)| f == frame) {
                        for (j, r) in row.iter_mut().enumerate() {
                            *r += a.at2(k, j);
                        }
                    }
                }
                row
            })
            .collect()
    }

    /// Processes one frame and returns the hypothesis rows it produces:
    /// every extended or newly started trajectory at this frame.
    pub fn step(&mut self, frame_idx: u32, frame: Option<&Frame>, dets: &[Detection]) -> Result<Vec<Detection>> {
        if self.last_frame.is_some_and(|f| frame_idx <= f) {
            return Err(DanError::Contract(format!(
                "frame {frame_idx} after frame {}",
                self.last_frame.unwrap_or(0)
            )));
        }
        self.last_frame = Some(frame_idx);
        let dets = truncate_detections(dets, self.n_m);
        let n_cur = dets.len();
        let feats = self.source.features(frame, &dets)?;
        let mut assigned = vec![None; self.tracks.len()];
        let mut taken = vec![false; n_cur];

        if !self.tracks.is_empty() {
            let cached: Vec<&S::Features> = self.cache.iter().map(|(_, f)| f).collect();
            let affinities = self.source.affinities(&cached, &feats)?;
            let lambda = self.accumulate(&affinities, n_cur);
            let rows = self.tracks.len();
            let cols = n_cur + rows;
            let mut scores = Vec::with_capacity(rows * cols);
            for r in &lambda {
                scores.extend_from_slice(&r[..n_cur]);
                scores.extend(std::iter::repeat_n(r[n_cur], rows));
            }
            let sol = solve_hungarian(&AssignmentProblem::new(rows, cols, scores)?)?;
            for (i, &c) in sol.cols.iter().enumerate() {
                if c < n_cur && lambda[i][c] > lambda[i][n_cur] {
                    assigned[i] = Some(c);
                    taken[c] = true;
                }
            }
        }

        let mut out = Vec::new();
        for (t, a) in self.tracks.iter_mut().zip(&assigned) {
            match *a {
                Some(j) => {
                    t.nodes.push_back((frame_idx, j));
                    t.miss_count = 0;
                    t.last_box = dets[j].bbox;
                    out.push(Detection::new(frame_idx, t.id as i64, dets[j].bbox, 1.0));
                }
                None => t.miss_count += 1,
            }
        }
        let delta_w = self.params.delta_w;
        self.tracks.retain(|t| t.miss_count <= delta_w);
        for (j, d) in dets.iter().enumerate() {
            if !taken[j] {
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.push(Trajectory {
                    id,
                    nodes: VecDeque::from([(frame_idx, j)]),
                    miss_count: 0,
                    last_box: d.bbox,
                });
                out.push(Detection::new(frame_idx, id as i64, d.bbox, 1.0));
            }
        }
        let delta_b = self.params.delta_b;
        for t in &mut self.tracks {
            while t.nodes.len() > delta_b {
                t.nodes.pop_front();
            }
        }
        self.cache.push_back((frame_idx, feats));
        while self.cache.len() > delta_b {
            self.cache.pop_front();
        }
        out.sort_by_key(|d| d.id);
        Ok(out)
    }
}

/// Runs a tracker over frames `1..=frames`, pulling images from `load` for
/// frames with detections (`load` may return `None` for sources that need
/// no images).
pub fn track_sequence<S: AffinitySource>(
    tracker: &mut Tracker<S>,
    frames: u32,
    dets: &[Detection],
    mut load: impl FnMut(u32) -> Result<Option<Frame>>,
) -> Result<Vec<Detection>> {
    let by_frame = crate::data::mot::group_by_frame(dets);
    if let Some((&f, _)) = by_frame.iter().find(|(&f, _)| f == 0 || f > frames) {
        return Err(DanError::Contract(format!("detection at frame {f} outside 1..={frames}")));
    }
    let mut out = Vec::new();
    let empty = Vec::new();
    for t in 1..=frames {
        let d = by_frame.get(&t).unwrap_or(&empty);
        let image = if d.is_empty() { None } else { load(t)? };
        out.extend(tracker.step(t, image.as_ref(), d)?);
    }
    Ok(out)
}
