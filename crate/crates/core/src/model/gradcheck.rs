//! Finite-difference verification of the full training loss on small random
//! networks.
//!
//! Each trainable tensor is probed along random ±1 directions and along a few
//! single coordinates. A probe whose stencil crosses a kink (a ReLU sign, a
//! pooling argmax, a `max` choice or an `abs` sign changes) says nothing about
//! the analytic gradient and is redrawn.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{self, AssembleMode, DanConfig, LayerSpec};
use super::{DanModel, Mode};
use crate::error::Result;
use crate::label::AssociationLabel;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub directions: usize,
    pub coordinates: usize,
    /// Test hook: scales the analytic gradient of every compression weight.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 100,
            directions: 2,
            coordinates: 2,
            corrupt: None,
        }
    }
}

/// Worst relative error seen per layer (tensor name without its suffix).
#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub layers: BTreeMap<String, LayerError>,
    pub probes: usize,
    /// Probes redrawn because their stencil crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerError {
    pub max_rel: f64,
    pub probes: usize,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.layers.values().fold(0.0, |m, l| m.max(l.max_rel))
    }

    pub fn passed(&self) -> bool {
        self.max_rel() <= TOLERANCE && self.probes > 0
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>12}\n", "layer", "probes", "max_rel_err");
        for (name, l) in &self.layers {
            s.push_str(&format!("{name:<24} {:>8} {:>12.3e}\n", l.probes, l.max_rel));
        }
        s.push_str(&format!(
            "overall max relative error {:.3e} over {} probes ({} redrawn at kinks)\n",
            self.max_rel(),
            self.probes,
            self.skipped
        ));
        s
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// A small network exercising every layer type: convolutions with stride and
/// padding, batch norm, pooling, two extension layers and a batch-normed
/// compression stack.
pub fn check_config(n_m: usize) -> DanConfig {
    let mut backbone = config::conv_block(3, 4, 3, 1, 1, true, true);
    backbone.push(LayerSpec::maxpool(4, 2, 2, 0));
    backbone.extend(config::conv_block(4, 6, 3, 1, 1, true, true));
    let extension = config::conv_block(6, 4, 3, 2, 1, true, true);
    DanConfig {
        input_h: 16,
        input_w: 16,
        n_m,
        gamma: 1.0,
        backbone,
        extension,
        reduction_plan: config::parse_plan("b2:3,b5:3,e2:2").expect("static plan"),
        compression_widths: vec![8, 4, 1],
        compression_bn: 2,
        final_relu: false,
        assemble_mode: AssembleMode::Max,
        mean_pixel: [0; 3],
    }
}

struct Problem {
    images: Tensor<f64>,
    centers: Vec<Vec<(f32, f32)>>,
    labels: Vec<AssociationLabel>,
    counts: Vec<(usize, usize)>,
}

fn random_problem(cfg: &DanConfig, pairs: usize, rng: &mut ChaCha8Rng) -> Problem {
    let n = cfg.n_m;
    let len = 2 * pairs * 3 * cfg.input_h * cfg.input_w;
    let images = Tensor::new(
        &[2 * pairs, 3, cfg.input_h, cfg.input_w],
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape product");
    let mut centers = Vec::new();
    let mut labels = Vec::new();
    let mut counts = Vec::new();
    for _ in 0..pairs {
        let (np, nc) = (rng.random_range(1..=n), rng.random_range(1..=n));
        let ids_prev: Vec<i64> = (0..np as i64).collect();
        let ids_cur: Vec<i64> = (0..nc).map(|_| rng.random_range(0..n as i64 + 1)).collect();
        let mut ids_cur_unique = Vec::new();
        for id in ids_cur {
            if !ids_cur_unique.contains(&id) {
                ids_cur_unique.push(id);
            }
        }
        for k in [np, ids_cur_unique.len()] {
            centers.push((0..k).map(|_| (rng.random::<f32>(), rng.random::<f32>())).collect());
        }
        counts.push((np, ids_cur_unique.len()));
        labels.push(AssociationLabel::build(&ids_prev, &ids_cur_unique, n).expect("ids unique and within n_m"));
    }
    Problem {
        images,
        centers,
        labels,
        counts,
    }
}

fn loss_and_grads(model: &DanModel<f64>, p: &Problem, grads: bool) -> Result<(f64, u64, Vec<Option<Tensor<f64>>>)> {
    let mut pass = model.begin(Mode::Train, grads);
    let f = model.features(&mut pass, p.images.clone(), &p.centers)?;
    let pairs: Vec<(usize, usize)> = (0..p.labels.len()).map(|k| (2 * k, 2 * k + 1)).collect();
    let m = model.similarity(&mut pass, f, &pairs)?;
    let h = model.heads(&mut pass, m, &p.counts)?;
    let refs: Vec<&AssociationLabel> = p.labels.iter().collect();
    let lv = model.losses(&mut pass, &h, &refs)?;
    let value = pass.graph.value(lv.total).data()[0];
    let sig = pass.graph.kink_signature();
    let mut out = Vec::new();
    if grads {
        pass.graph.backward(lv.total)?;
        for i in 0..model.tensors().len() {
            out.push(if model.is_trainable(i) {
                Some(
                    pass.graph
                        .grad(pass.var(i))
                        .unwrap_or_else(|| Tensor::zeros(model.tensors()[i].shape())),
                )
            } else {
                None
            });
        }
    }
    Ok((value, sig, out))
}

fn layer_of(name: &str) -> String {
    match name.rfind('.') {
        Some(k) => name[..k].to_string(),
        None => name.to_string(),
    }
}

/// Checks one random model on one random problem, merging into `report`.
pub fn check_instance(seed: u64, opts: &GradcheckOptions, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = check_config(3);
    let mut model = DanModel::<f64>::new(cfg.clone(), &mut rng)?;
    // Non-trivial affine batch-norm parameters.
    for i in model.trainable_indices() {
        let name = model.names()[i].clone();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in model.tensors_mut()[i].data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let problem = random_problem(&cfg, 2, &mut rng);
    let (_, base_sig, grads) = loss_and_grads(&model, &problem, true)?;

    for i in model.trainable_indices() {
        let name = model.names()[i].clone();
        let mut analytic_grad = grads[i].clone().expect("trainable tensors have gradients");
        if let Some(c) = opts.corrupt {
            if name.starts_with("compress.") && name.ends_with(".weight") {
                analytic_grad.data_mut().iter_mut().for_each(|g| *g *= c);
            }
        }
        let len = model.tensors()[i].len();
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for _ in 0..opts.directions {
            probes.push((0..len).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect());
        }
        for _ in 0..opts.coordinates {
            let mut d = vec![0.0; len];
            d[rng.random_range(0..len)] = 1.0;
            probes.push(d);
        }
        for mut dir in probes {
            let mut attempts = 0;
            loop {
                let original = model.tensors()[i].clone();
                let shifted = |s: f64| {
                    let mut t = original.clone();
                    for (v, d) in t.data_mut().iter_mut().zip(&dir) {
                        *v += s * d;
                    }
                    t
                };
                model.tensors_mut()[i] = shifted(STEP);
                let (fp, sp, _) = loss_and_grads(&model, &problem, false)?;
                model.tensors_mut()[i] = shifted(-STEP);
                let (fm, sm, _) = loss_and_grads(&model, &problem, false)?;
                model.tensors_mut()[i] = original;
                if sp != base_sig || sm != base_sig {
                    report.skipped += 1;
                    attempts += 1;
                    if attempts >= 8 {
                        break;
                    }
                    dir = (0..len).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * STEP);
                let analytic: f64 = analytic_grad.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
                let e = rel_err(analytic, numeric);
                let entry = report.layers.entry(layer_of(&name)).or_default();
                entry.max_rel = entry.max_rel.max(e);
                entry.probes += 1;
                report.probes += 1;
                break;
            }
        }
    }
    Ok(())
}

/// Runs `opts.instances` random instantiations derived from `seed`.
pub fn run_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..opts.instances {
        check_instance(seeds.random(), opts, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let opts = GradcheckOptions {
            instances: 3,
            ..GradcheckOptions::default()
        };
        let r = run_gradcheck(1, &opts).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert!(r.layers.contains_key("compress.0"));
        assert!(r.layers.contains_key("backbone.0"));
        assert!(r.layers.contains_key("reduce.2"));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let opts = GradcheckOptions {
            instances: 2,
            corrupt: Some(1.5),
            ..GradcheckOptions::default()
        };
        let r = run_gradcheck(1, &opts).unwrap();
        assert!(!r.passed());
    }
}
