//! CLEAR-MOT and identity metrics.
//!
//! Per frame, ground-truth/hypothesis correspondences from the previous
//! frame are kept while their IoU stays above the threshold; the remaining
//! boxes are matched by a maximum-IoU assignment. Counts accumulate per
//! frame into MOTA, MOTAL, MOTP, recall, MT/ML, fragmentations and ID
//! switches. IDF1 comes from a global truth-to-hypothesis identity matching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::assignment::{max_total_assignment, AssignmentProblem};
use crate::data::mot::{group_by_frame, Detection};
use crate::error::{DanError, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Matched pair within one frame: indices into that frame's gt/hyp lists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub gt: usize,
    pub hyp: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatches {
    pub frame: u32,
    pub gt: Vec<Detection>,
    pub hyp: Vec<Detection>,
    pub matches: Vec<Correspondence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Match,
    FalsePositive,
    Miss,
    Switch,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Match => "MATCH",
            EventKind::FalsePositive => "FP",
            EventKind::Miss => "FN",
            EventKind::Switch => "SWITCH",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub frame: u32,
    pub kind: EventKind,
    pub gt_id: i64,
    pub hyp_id: i64,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub mota: f64,
    pub motal: f64,
    pub motp: f64,
    pub rcll: f64,
    pub prcn: f64,
    pub idf1: f64,
    pub mt: f64,
    pub ml: f64,
    pub mt_count: usize,
    pub ml_count: usize,
    pub gt_tracks: usize,
    pub fp: usize,
    pub fn_: usize,
    pub id_sw: usize,
    pub frag: usize,
    pub num_gt: usize,
    pub num_hyp: usize,
    pub num_matches: usize,
    pub idtp: f64,
}

impl EvalResult {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mota={:.4}", self.mota);
        let _ = writeln!(s, "motal={:.4}", self.motal);
        let _ = writeln!(s, "motp={:.4}", self.motp);
        let _ = writeln!(s, "rcll={:.4}", self.rcll);
        let _ = writeln!(s, "prcn={:.4}", self.prcn);
        let _ = writeln!(s, "idf1={:.4}", self.idf1);
        let _ = writeln!(s, "mt={:.4}", self.mt);
        let _ = writeln!(s, "ml={:.4}", self.ml);
        let _ = writeln!(s, "mt_count={}", self.mt_count);
        let _ = writeln!(s, "ml_count={}", self.ml_count);
        let _ = writeln!(s, "gt_tracks={}", self.gt_tracks);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        let _ = writeln!(s, "id_sw={}", self.id_sw);
        let _ = writeln!(s, "frag={}", self.frag);
        let _ = writeln!(s, "num_gt={}", self.num_gt);
        let _ = writeln!(s, "num_hyp={}", self.num_hyp);
        let _ = writeln!(s, "num_matches={}", self.num_matches);
        s
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}\n{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>6} {:>6} {:>6} {:>6}\n",
            "MOTA", "MOTAL", "MOTP", "Rcll", "IDF1", "MT", "ML", "FP", "FN", "IDSw", "Frag",
            self.mota, self.motal, self.motp, self.rcll, self.idf1, self.mt, self.ml, self.fp, self.fn_, self.id_sw, self.frag
        )
    }
}

/// Maximum-IoU matching of the boxes not yet paired; pairs under the
/// threshold are never returned.
fn optimal_pairs(gt: &[Detection], hyp: &[Detection], gt_free: &[usize], hyp_free: &[usize], thr: f64) -> Vec<Correspondence> {
    if gt_free.is_empty() || hyp_free.is_empty() {
        return Vec::new();
    }
    let score = |g: usize, h: usize| {
        let iou = gt[g].bbox.iou(&hyp[h].bbox);
        if iou >= thr {
            iou
        } else {
            0.0
        }
    };
    let transpose = gt_free.len() > hyp_free.len();
    let (rows, cols) = if transpose { (hyp_free, gt_free) } else { (gt_free, hyp_free) };
    let mut scores = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            scores.push(if transpose { score(c, r) } else { score(r, c) });
        }
    }
    let p = AssignmentProblem::new(rows.len(), cols.len(), scores).expect("finite IoU scores");
    let a = max_total_assignment(&p);
    let mut out = Vec::new();
    for (ri, &ci) in a.cols.iter().enumerate() {
        let (g, h) = if transpose { (cols[ci], rows[ri]) } else { (rows[ri], cols[ci]) };
        let iou = gt[g].bbox.iou(&hyp[h].bbox);
        if iou >= thr && iou > 0.0 {
            out.push(Correspondence { gt: g, hyp: h, iou });
        }
    }
    out
}

/// Per-frame correspondences following the CLEAR-MOT protocol.
pub fn match_frames(gt: &[Detection], hyp: &[Detection], iou_threshold: f64) -> Vec<FrameMatches> {
    let gt_frames = group_by_frame(gt);
    let hyp_frames = group_by_frame(hyp);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();
    // gt id → hyp id matched in the previous frame
    let mut previous: HashMap<i64, i64> = HashMap::new();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let g = gt_frames.get(&f).cloned().unwrap_or_default();
        let h = hyp_frames.get(&f).cloned().unwrap_or_default();
        let mut matches = Vec::new();
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        for (gi, gd) in g.iter().enumerate() {
            let Some(&hid) = previous.get(&gd.id) else { continue };
            if let Some(hi) = h.iter().position(|d| d.id == hid) {
                let iou = gd.bbox.iou(&h[hi].bbox);
                if !h_used[hi] && iou >= iou_threshold && iou > 0.0 {
                    matches.push(Correspondence { gt: gi, hyp: hi, iou });
                    g_used[gi] = true;
                    h_used[hi] = true;
                }
            }
        }
        let g_free: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let h_free: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        matches.extend(optimal_pairs(&g, &h, &g_free, &h_free, iou_threshold));
        matches.sort_by_key(|m| m.gt);
        previous.clear();
        for m in &matches {
            previous.insert(g[m.gt].id, h[m.hyp].id);
        }
        out.push(FrameMatches {
            frame: f,
            gt: g,
            hyp: h,
            matches,
        });
    }
    out
}

/// Truth-to-hypothesis identity matching maximizing the number of frames in
/// which the paired boxes overlap by at least the threshold.
fn identity_true_positives(gt: &[Detection], hyp: &[Detection], thr: f64) -> f64 {
    let gt_ids: Vec<i64> = gt.iter().map(|d| d.id).collect::<BTreeSet<_>>().into_iter().collect();
    let hyp_ids: Vec<i64> = hyp.iter().map(|d| d.id).collect::<BTreeSet<_>>().into_iter().collect();
    if gt_ids.is_empty() || hyp_ids.is_empty() {
        return 0.0;
    }
    let gi: HashMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let hi: HashMap<i64, usize> = hyp_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = vec![0.0f64; gt_ids.len() * hyp_ids.len()];
    let gt_frames = group_by_frame(gt);
    let hyp_frames = group_by_frame(hyp);
    for (f, gs) in &gt_frames {
        let Some(hs) = hyp_frames.get(f) else { continue };
        for g in gs {
            for h in hs {
                if g.bbox.iou(&h.bbox) >= thr {
                    overlap[gi[&g.id] * hyp_ids.len() + hi[&h.id]] += 1.0;
                }
            }
        }
    }
    // Pad with zero-score columns so any truth id may stay unmatched.
    let (r, c) = (gt_ids.len(), hyp_ids.len() + gt_ids.len());
    let mut scores = vec![0.0; r * c];
    for i in 0..r {
        scores[i * c..i * c + hyp_ids.len()].copy_from_slice(&overlap[i * hyp_ids.len()..(i + 1) * hyp_ids.len()]);
    }
    let p = AssignmentProblem::new(r, c, scores).expect("finite overlap counts");
    max_total_assignment(&p).total
}

/// Evaluates a hypothesis against ground truth, also returning the event log.
pub fn evaluate_with_events(gt: &[Detection], hyp: &[Detection], iou_threshold: f64) -> Result<(EvalResult, Vec<Event>)> {
    if gt.is_empty() {
        return Err(DanError::EmptyGroundTruth);
    }
    let frames = match_frames(gt, hyp, iou_threshold);
    let mut r = EvalResult::default();
    let mut events = Vec::new();
    let mut motal_penalty = 0.0f64;
    let mut iou_sum = 0.0f64;
    let mut last_hyp: HashMap<i64, i64> = HashMap::new();
    // per gt id: (frames present, frames matched, was matched at last presence, ever matched)
    let mut coverage: BTreeMap<i64, (usize, usize, bool, bool)> = BTreeMap::new();

    for fm in &frames {
        let matched = fm.matches.len();
        let fp_t = fm.hyp.len() - matched;
        let fn_t = fm.gt.len() - matched;
        let mut sw_t = 0usize;
        let mut gt_matched = vec![false; fm.gt.len()];
        let mut hyp_matched = vec![false; fm.hyp.len()];
        for m in &fm.matches {
            let (g, h) = (&fm.gt[m.gt], &fm.hyp[m.hyp]);
            gt_matched[m.gt] = true;
            hyp_matched[m.hyp] = true;
            iou_sum += m.iou;
            events.push(Event {
                frame: fm.frame,
                kind: EventKind::Match,
                gt_id: g.id,
                hyp_id: h.id,
                iou: m.iou,
            });
            if let Some(prev) = last_hyp.insert(g.id, h.id) {
                if prev != h.id {
                    sw_t += 1;
                    events.push(Event {
                        frame: fm.frame,
                        kind: EventKind::Switch,
                        gt_id: g.id,
                        hyp_id: h.id,
                        iou: m.iou,
                    });
                }
            }
        }
        for (i, g) in fm.gt.iter().enumerate() {
            let entry = coverage.entry(g.id).or_insert((0, 0, false, false));
            entry.0 += 1;
            if gt_matched[i] {
                entry.1 += 1;
                if !entry.2 && entry.3 {
                    r.frag += 1;
                }
                entry.3 = true;
            } else {
                events.push(Event {
                    frame: fm.frame,
                    kind: EventKind::Miss,
                    gt_id: g.id,
                    hyp_id: -1,
                    iou: f64::NAN,
                });
            }
            entry.2 = gt_matched[i];
        }
        for (i, h) in fm.hyp.iter().enumerate() {
            if !hyp_matched[i] {
                events.push(Event {
                    frame: fm.frame,
                    kind: EventKind::FalsePositive,
                    gt_id: -1,
                    hyp_id: h.id,
                    iou: f64::NAN,
                });
            }
        }
        r.num_gt += fm.gt.len();
        r.num_hyp += fm.hyp.len();
        r.num_matches += matched;
        r.fp += fp_t;
        r.fn_ += fn_t;
        r.id_sw += sw_t;
        motal_penalty += (fp_t + fn_t) as f64 + ((sw_t + 1) as f64).log10();
    }

    let n_gt = r.num_gt as f64;
    r.mota = 100.0 * (1.0 - (r.fp + r.fn_ + r.id_sw) as f64 / n_gt);
    r.motal = 100.0 * (1.0 - motal_penalty / n_gt);
    r.motp = if r.num_matches > 0 {
        100.0 * iou_sum / r.num_matches as f64
    } else {
        0.0
    };
    r.rcll = 100.0 * r.num_matches as f64 / n_gt;
    r.prcn = if r.num_hyp > 0 {
        100.0 * r.num_matches as f64 / r.num_hyp as f64
    } else {
        0.0
    };
    r.gt_tracks = coverage.len();
    for (present, matched, _, _) in coverage.values() {
        let ratio = *matched as f64 / *present as f64;
        if ratio >= 0.8 {
            r.mt_count += 1;
        }
        if ratio <= 0.2 {
            r.ml_count += 1;
        }
    }
    r.mt = 100.0 * r.mt_count as f64 / r.gt_tracks as f64;
    r.ml = 100.0 * r.ml_count as f64 / r.gt_tracks as f64;
    r.idtp = identity_true_positives(gt, hyp, iou_threshold);
    r.idf1 = 100.0 * 2.0 * r.idtp / (r.num_gt + r.num_hyp) as f64;
    Ok((r, events))
}

pub fn evaluate(gt: &[Detection], hyp: &[Detection], iou_threshold: f64) -> Result<EvalResult> {
    evaluate_with_events(gt, hyp, iou_threshold).map(|(r, _)| r)
}

/// Per-frame event log as CSV (`frame,event,gt_id,hyp_id,iou`).
pub fn format_events(events: &[Event]) -> String {
    let mut s = String::from("frame,event,gt_id,hyp_id,iou\n");
    for e in events {
        let iou = if e.iou.is_nan() { String::new() } else { format!("{:.6}", e.iou) };
        let _ = writeln!(s, "{},{},{},{},{}", e.frame, e.kind.as_str(), e.gt_id, e.hyp_id, iou);
    }
    s
}
