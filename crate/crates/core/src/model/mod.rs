//! The affinity network: a convolutional feature extractor sampled at object
//! centers, and an affinity estimator over every pair of objects.
//!
//! Forward passes are recorded on a [`Graph`]. A [`Pass`] binds the model's
//! tensors to graph variables (trainable ones as parameters when gradients
//! are wanted) and collects batch-norm statistics in training mode.

pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod train;

use std::path::Path;

use rand::Rng;

pub use config::{AssembleMode, DanConfig, LayerKind, LayerSpec, Reduction, RunConfig, Stage, TrackConfig, TrainConfig};
pub use loss::{bundle_from_similarity, bundle_losses, AffinityBundle, Losses};

use crate::data::frame::{frame_to_input, Frame};
use crate::error::{shape_err, DanError, Result};
use crate::label::AssociationLabel;
use crate::tensor::{read_container, write_container, Graph, NamedTensor, Scalar, Tensor, Var};
use loss::{backward_valid, forward_valid};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// `D × n_m` features of one frame; columns from `n_real` on are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub data: Tensor<T>,
    pub n_real: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    Bn { gamma: usize, beta: usize, mean: usize, var: usize },
    Relu,
    Pool { k: usize, stride: usize, pad: usize },
}

#[derive(Clone, Debug)]
pub struct DanModel<T> {
    config: DanConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    backbone: Vec<Unit>,
    extension: Vec<Unit>,
    reduce: Vec<(usize, usize)>,
    compression: Vec<Unit>,
}

/// One recorded forward pass.
pub struct Pass<T> {
    pub graph: Graph<T>,
    pub mode: Mode,
    vars: Vec<Var>,
    /// `(running mean index, running var index, batch stats)` per BN layer.
    stats: Vec<(usize, usize, crate::tensor::BatchStats)>,
}

impl<T: Scalar> Pass<T> {
    /// Graph variable bound to model tensor `idx`.
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Graph variables of the heads for a batch of pairs.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub m: Var,
    pub a1: Var,
    pub a2: Var,
    pub a1_hat: Var,
    pub a2_hat: Var,
    pub assembled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub forward: Var,
    pub backward: Var,
    pub consistency: Var,
    pub assemble: Var,
    pub total: Var,
}

/// Grid cell `(row, col)` holding normalized center `(cx, cy)` on an
/// `s_h × s_w` map. Centers must lie in `[0, 1]`; 1 maps to the last cell.
pub fn grid_cell(cx: f32, cy: f32, s_h: usize, s_w: usize) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(DanError::Contract(format!("center ({cx}, {cy}) outside the unit square")));
    }
    let r = ((cy as f64 * s_h as f64).floor() as usize).min(s_h - 1);
    let c = ((cx as f64 * s_w as f64).floor() as usize).min(s_w - 1);
    Ok((r, c))
}

/// `Ψ[:, i, j] = [F_prev[:, i]; F_cur[:, j]]`, shape `2D × n_m × n_m`.
pub fn build_permutation_tensor<T: Scalar>(prev: &FeatureMatrix<T>, cur: &FeatureMatrix<T>) -> Result<Tensor<T>> {
    if prev.data.shape() != cur.data.shape() || prev.data.rank() != 2 {
        return shape_err(format!(
            "feature matrices {:?} and {:?} differ",
            prev.data.shape(),
            cur.data.shape()
        ));
    }
    let (d, n) = (prev.data.rows(), prev.data.cols());
    let mut out = vec![T::zero(); 2 * d * n * n];
    for c in 0..2 * d {
        for i in 0..n {
            for j in 0..n {
                out[(c * n + i) * n + j] = if c < d { prev.data.at2(c, i) } else { cur.data.at2(c - d, j) };
            }
        }
    }
    Tensor::new(&[2 * d, n, n], out)
}

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape product")
}

struct Builder<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, t: Tensor<T>, trainable: bool) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    fn units<R: Rng + ?Sized>(&mut self, prefix: &str, layers: &[LayerSpec], rng: &mut R) -> Vec<Unit> {
        layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l.kind {
                LayerKind::Conv2d => {
                    let (o, c, k) = (l.out_channels, l.in_channels, l.kernel);
                    let bound = 1.0 / ((c * k * k) as f64).sqrt();
                    let w = self.add(format!("{prefix}.{i}.weight"), uniform_tensor(&[o, c, k, k], bound, rng), true);
                    let b = self.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[o]), true);
                    Unit::Conv {
                        w,
                        b,
                        stride: l.stride,
                        pad: l.padding,
                    }
                }
                LayerKind::BatchNorm2d => {
                    let c = l.out_channels;
                    Unit::Bn {
                        gamma: self.add(format!("{prefix}.{i}.gamma"), Tensor::full(&[c], T::one()), true),
                        beta: self.add(format!("{prefix}.{i}.beta"), Tensor::zeros(&[c]), true),
                        mean: self.add(format!("{prefix}.{i}.running_mean"), Tensor::zeros(&[c]), false),
                        var: self.add(format!("{prefix}.{i}.running_var"), Tensor::full(&[c], T::one()), false),
                    }
                }
                LayerKind::Relu => Unit::Relu,
                LayerKind::MaxPool2d => Unit::Pool {
                    k: l.kernel,
                    stride: l.stride,
                    pad: l.padding,
                },
            })
            .collect()
    }
}

impl<T: Scalar> DanModel<T> {
    /// Fresh model: convolution weights uniform in `±1/√fan_in`, zero biases,
    /// unit batch-norm scales.
    pub fn new<R: Rng + ?Sized>(config: DanConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        };
        let backbone = b.units("backbone", &config.backbone, rng);
        let extension = b.units("extension", &config.extension, rng);
        let mut reduce = Vec::new();
        for (k, r) in config.reduction_plan.iter().enumerate() {
            let c = config.tap_shape(r)?.channels;
            let bound = 1.0 / (c as f64).sqrt();
            let w = b.add(format!("reduce.{k}.weight"), uniform_tensor(&[r.out_channels, c, 1, 1], bound, rng), true);
            let bias = b.add(format!("reduce.{k}.bias"), Tensor::zeros(&[r.out_channels]), true);
            reduce.push((w, bias));
        }
        let compression = b.units("compress", &config.compression(), rng);
        Ok(DanModel {
            config,
            names: b.names,
            tensors: b.tensors,
            trainable: b.trainable,
            backbone,
            extension,
            reduce,
            compression,
        })
    }

    pub fn config(&self) -> &DanConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.trainable[idx]
    }

    /// Indices of trainable tensors.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.trainable[i]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> DanModel<U> {
        DanModel {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            backbone: self.backbone.clone(),
            extension: self.extension.clone(),
            reduce: self.reduce.clone(),
            compression: self.compression.clone(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                tensor: t.cast(),
            })
            .collect()
    }

    /// Rebuilds a model for `config` from named tensors; every expected
    /// tensor must be present with the right shape and nothing else.
    pub fn from_named(config: DanConfig, named: Vec<NamedTensor>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        if named.len() != model.names.len() {
            return Err(DanError::Container(format!(
                "model file holds {} tensors, configuration expects {}",
                named.len(),
                model.names.len()
            )));
        }
        for nt in named {
            let idx = model
                .index_of(&nt.name)
                .ok_or_else(|| DanError::Container(format!("unexpected tensor {:?}", nt.name)))?;
            if nt.tensor.shape() != model.tensors[idx].shape() {
                return Err(DanError::Container(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    nt.name,
                    nt.tensor.shape(),
                    model.tensors[idx].shape()
                )));
            }
            model.tensors[idx] = nt.tensor.cast();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_named())
    }

    pub fn load(path: &Path, config: DanConfig) -> Result<Self> {
        Self::from_named(config, read_container(path)?)
    }

    /// Starts a pass. With `grad`, trainable tensors become parameters.
    pub fn begin(&self, mode: Mode, grad: bool) -> Pass<T> {
        let mut graph = Graph::new();
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| {
                if grad && tr {
                    graph.param(t.clone())
                } else {
                    graph.input(t.clone())
                }
            })
            .collect();
        Pass {
            graph,
            mode,
            vars,
            stats: Vec::new(),
        }
    }

    fn run_units(&self, pass: &mut Pass<T>, mut x: Var, units: &[Unit], taps: &[usize]) -> Result<(Var, Vec<Var>)> {
        let mut tapped = Vec::with_capacity(taps.len());
        for (i, u) in units.iter().enumerate() {
            x = match *u {
                Unit::Conv { w, b, stride, pad } => pass.graph.conv2d(x, pass.vars[w], pass.vars[b], stride, pad)?,
                Unit::Bn { gamma, beta, mean, var } => {
                    let running = match pass.mode {
                        Mode::Train => None,
                        Mode::Eval => Some((self.tensors[mean].data(), self.tensors[var].data())),
                    };
                    let (y, stats) = pass.graph.batch_norm(x, pass.vars[gamma], pass.vars[beta], running)?;
                    if let Some(s) = stats {
                        pass.stats.push((mean, var, s));
                    }
                    y
                }
                Unit::Relu => pass.graph.relu(x),
                Unit::Pool { k, stride, pad } => pass.graph.maxpool2d(x, k, stride, pad)?,
            };
            for (t, &idx) in taps.iter().enumerate() {
                if idx == i {
                    while tapped.len() <= t {
                        tapped.push(x);
                    }
                    tapped[t] = x;
                }
            }
        }
        Ok((x, tapped))
    }

    /// Features for a batch of images `[N, 3, H, W]`, one center list per
    /// image. Returns `[N, D, n_m, 1]` with zero dummy columns.
    pub fn features(&self, pass: &mut Pass<T>, images: Tensor<T>, centers: &[Vec<(f32, f32)>]) -> Result<Var> {
        let cfg = &self.config;
        let n_m = cfg.n_m;
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_h || s[3] != cfg.input_w {
            return shape_err(format!(
                "expected images [N, 3, {}, {}], got {s:?}",
                cfg.input_h, cfg.input_w
            ));
        }
        if centers.len() != s[0] {
            return shape_err(format!("{} center lists for {} images", centers.len(), s[0]));
        }
        if let Some(c) = centers.iter().find(|c| c.len() > n_m) {
            return Err(DanError::Capacity { got: c.len(), max: n_m });
        }
        let n_img = s[0];
        let x = pass.graph.input(images);
        let plan = &cfg.reduction_plan;
        let b_taps: Vec<usize> = plan.iter().filter(|r| r.stage == Stage::Backbone).map(|r| r.index).collect();
        let e_taps: Vec<usize> = plan.iter().filter(|r| r.stage == Stage::Extension).map(|r| r.index).collect();
        let (top, b_out) = self.run_units(pass, x, &self.backbone, &b_taps)?;
        let e_out = if e_taps.is_empty() {
            Vec::new()
        } else {
            self.run_units(pass, top, &self.extension, &e_taps)?.1
        };

        let mut parts = Vec::with_capacity(plan.len());
        let (mut bi, mut ei) = (0, 0);
        for (k, r) in plan.iter().enumerate() {
            let map = match r.stage {
                Stage::Backbone => {
                    bi += 1;
                    b_out[bi - 1]
                }
                Stage::Extension => {
                    ei += 1;
                    e_out[ei - 1]
                }
            };
            let ms = pass.graph.shape(map).to_vec();
            let (c, sh, sw) = (ms[1], ms[2], ms[3]);
            let mut src = vec![None; n_img * c * n_m];
            for (img, list) in centers.iter().enumerate() {
                for (obj, &(cx, cy)) in list.iter().enumerate() {
                    let (row, col) = grid_cell(cx, cy, sh, sw)?;
                    for ch in 0..c {
                        src[(img * c + ch) * n_m + obj] = Some(((img * c + ch) * sh + row) * sw + col);
                    }
                }
            }
            let sampled = pass.graph.gather(map, &[n_img, c, n_m, 1], src)?;
            let (w, b) = self.reduce[k];
            let reduced = pass.graph.conv2d(sampled, pass.vars[w], pass.vars[b], 1, 0)?;
            let mut mask = vec![T::zero(); n_img * r.out_channels * n_m];
            for (img, list) in centers.iter().enumerate() {
                for ch in 0..r.out_channels {
                    for obj in 0..list.len() {
                        mask[(img * r.out_channels + ch) * n_m + obj] = T::one();
                    }
                }
            }
            parts.push(pass.graph.mul_const(reduced, mask)?);
        }
        pass.graph.concat(&parts, 1)
    }

    /// Raw similarities `[B, n_m, n_m]` for feature pairs `(prev, cur)` of a
    /// `[N, D, n_m, 1]` feature batch.
    pub fn similarity(&self, pass: &mut Pass<T>, feats: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let fs = pass.graph.shape(feats).to_vec();
        let d = self.config.feature_dim();
        let n = self.config.n_m;
        if fs.len() != 4 || fs[1] != d || fs[2] != n || fs[3] != 1 {
            return shape_err(format!("features must be [N, {d}, {n}, 1], got {fs:?}"));
        }
        if let Some(&(p, q)) = pairs.iter().find(|&&(p, q)| p >= fs[0] || q >= fs[0]) {
            return shape_err(format!("pair ({p}, {q}) outside a batch of {}", fs[0]));
        }
        let b = pairs.len();
        let mut src = Vec::with_capacity(b * 2 * d * n * n);
        for &(p, q) in pairs {
            for c in 0..2 * d {
                for i in 0..n {
                    for j in 0..n {
                        src.push(Some(if c < d {
                            (p * d + c) * n + i
                        } else {
                            (q * d + c - d) * n + j
                        }));
                    }
                }
            }
        }
        let psi = pass.graph.gather(feats, &[b, 2 * d, n, n], src)?;
        let (out, _) = self.run_units(pass, psi, &self.compression, &[])?;
        pass.graph.reshape(out, &[b, n, n])
    }

    /// Softmax heads for similarities `[B, n_m, n_m]` given per-pair real
    /// object counts.
    pub fn heads(&self, pass: &mut Pass<T>, m: Var, counts: &[(usize, usize)]) -> Result<Heads> {
        let n = self.config.n_m;
        let gamma = T::from_f64(self.config.gamma as f64);
        let b = counts.len();
        if pass.graph.shape(m) != [b, n, n] {
            return shape_err(format!("similarities {:?} for {b} pairs", pass.graph.shape(m)));
        }
        let m1 = pass.graph.append_const(m, 2, gamma)?;
        let m2 = pass.graph.append_const(m, 1, gamma)?;
        let mut mask1 = Vec::with_capacity(b * n * (n + 1));
        let mut mask2 = Vec::with_capacity(b * (n + 1) * n);
        for &(np, nc) in counts {
            for i in 0..n {
                for j in 0..=n {
                    mask1.push(forward_valid(i, j, n, np, nc));
                }
            }
            for i in 0..=n {
                for j in 0..n {
                    mask2.push(backward_valid(i, j, n, np, nc));
                }
            }
        }
        let a1 = pass.graph.softmax(m1, 2, Some(mask1))?;
        let a2 = pass.graph.softmax(m2, 1, Some(mask2))?;
        let a1_hat = pass.graph.drop_last(a1, 2)?;
        let a2_hat = pass.graph.drop_last(a2, 1)?;
        let assembled = match self.config.assemble_mode {
            AssembleMode::Max => pass.graph.maximum(a1_hat, a2_hat)?,
            AssembleMode::Mean => {
                let s = pass.graph.add(a1_hat, a2_hat)?;
                pass.graph.scale(s, T::from_f64(0.5))
            }
        };
        Ok(Heads {
            m,
            a1,
            a2,
            a1_hat,
            a2_hat,
            assembled,
        })
    }

    /// Batch-mean losses. Each sub-loss of a pair is normalized by its label
    /// mass; a pair without any mass contributes zero.
    pub fn losses(&self, pass: &mut Pass<T>, h: &Heads, labels: &[&AssociationLabel]) -> Result<LossVars> {
        let n = self.config.n_m;
        let b = labels.len();
        if pass.graph.shape(h.m)[0] != b {
            return shape_err("one label per pair required");
        }
        if let Some(l) = labels.iter().find(|l| l.n_m() != n) {
            return shape_err(format!("label for n_m = {} in a model with n_m = {n}", l.n_m()));
        }
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        let mut w3 = Vec::new();
        let mut inv = [Vec::new(), Vec::new(), Vec::new()];
        let mut real = Vec::new();
        for l in labels {
            let (l1, l2, l3) = l.trims::<T>();
            for (k, t) in [&l1, &l2, &l3].into_iter().enumerate() {
                let s = t.data().iter().fold(T::zero(), |a, &v| a + v);
                inv[k].push(if s > T::zero() { T::one() / s } else { T::zero() });
            }
            w1.extend_from_slice(l1.data());
            w2.extend_from_slice(l2.data());
            w3.extend_from_slice(l3.data());
            for i in 0..n {
                for j in 0..n {
                    real.push(i < l.n_real_prev() && j < l.n_real_cur());
                }
            }
        }
        let [inv1, inv2, inv3] = inv;
        let batch_scale = T::one() / T::from_f64(b.max(1) as f64);
        let g = &mut pass.graph;
        let mean = |g: &mut Graph<T>, per_pair: Var, scale: Option<Vec<T>>| -> Result<Var> {
            let v = match scale {
                Some(s) => g.mul_const(per_pair, s)?,
                None => per_pair,
            };
            let s = g.sum(v);
            Ok(g.scale(s, batch_scale))
        };
        let nll1 = g.weighted_nll(h.a1, w1)?;
        let forward = mean(g, nll1, Some(inv1))?;
        let nll2 = g.weighted_nll(h.a2, w2)?;
        let backward = mean(g, nll2, Some(inv2))?;
        let l1 = g.abs_diff_sum(h.a1_hat, h.a2_hat, real)?;
        let consistency = mean(g, l1, None)?;
        let nll3 = g.weighted_nll(h.assembled, w3)?;
        let assemble = mean(g, nll3, Some(inv3))?;
        let s1 = g.add(forward, backward)?;
        let s2 = g.add(consistency, assemble)?;
        let s = g.add(s1, s2)?;
        let total = g.scale(s, T::from_f64(0.25));
        Ok(LossVars {
            forward,
            backward,
            consistency,
            assemble,
            total,
        })
    }

    /// Applies the batch statistics gathered by a training pass to the
    /// running averages (unbiased variance).
    pub fn update_running_stats(&mut self, pass: &Pass<T>) {
        let m = BN_MOMENTUM;
        for (mean_idx, var_idx, s) in &pass.stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, &b) in self.tensors[*mean_idx].data_mut().iter_mut().zip(&s.mean) {
                *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
            }
            for (r, &b) in self.tensors[*var_idx].data_mut().iter_mut().zip(&s.var) {
                *r = T::from_f64((1.0 - m) * r.as_f64() + m * b * unbias);
            }
        }
    }

    /// Stacks frames into a `[N, 3, H, W]` input, resizing when needed.
    pub fn input_batch(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        let (h, w) = (self.config.input_h, self.config.input_w);
        let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            let vals = if f.width() as usize == w && f.height() as usize == h {
                frame_to_input(f, self.config.mean_pixel)
            } else {
                let r = image::imageops::resize(*f, w as u32, h as u32, image::imageops::FilterType::Triangle);
                frame_to_input(&r, self.config.mean_pixel)
            };
            data.extend(vals.into_iter().map(|v| T::from_f64(v as f64)));
        }
        Tensor::new(&[frames.len(), 3, h, w], data)
    }

    /// Inference-mode feature matrices, one per frame.
    pub fn extract_features(&self, frames: &[&Frame], centers: &[Vec<(f32, f32)>]) -> Result<Vec<FeatureMatrix<T>>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let mut pass = self.begin(Mode::Eval, false);
        let input = self.input_batch(frames)?;
        let f = self.features(&mut pass, input, centers)?;
        let (d, n) = (self.config.feature_dim(), self.config.n_m);
        let vals = pass.graph.value(f).data();
        centers
            .iter()
            .enumerate()
            .map(|(k, c)| {
                Ok(FeatureMatrix {
                    data: Tensor::new(&[d, n], vals[k * d * n..(k + 1) * d * n].to_vec())?,
                    n_real: c.len(),
                })
            })
            .collect()
    }

    /// Inference-mode bundles of each earlier feature matrix against `cur`.
    pub fn estimate_affinities(&self, prevs: &[&FeatureMatrix<T>], cur: &FeatureMatrix<T>) -> Result<Vec<AffinityBundle<T>>> {
        if prevs.is_empty() {
            return Ok(Vec::new());
        }
        let (d, n) = (self.config.feature_dim(), self.config.n_m);
        let mut data = Vec::with_capacity((prevs.len() + 1) * d * n);
        for f in prevs.iter().copied().chain(std::iter::once(cur)) {
            if f.data.shape() != [d, n] {
                return shape_err(format!("feature matrix {:?}, expected [{d}, {n}]", f.data.shape()));
            }
            data.extend_from_slice(f.data.data());
        }
        let k = prevs.len();
        let mut pass = self.begin(Mode::Eval, false);
        let feats = pass.graph.input(Tensor::new(&[k + 1, d, n, 1], data)?);
        let pairs: Vec<(usize, usize)> = (0..k).map(|i| (i, k)).collect();
        let m = self.similarity(&mut pass, feats, &pairs)?;
        let mv = pass.graph.value(m).data();
        (0..k)
            .map(|i| {
                let mi = Tensor::new(&[n, n], mv[i * n * n..(i + 1) * n * n].to_vec())?;
                bundle_from_similarity(
                    &mi,
                    self.config.gamma as f64,
                    prevs[i].n_real,
                    cur.n_real,
                    self.config.assemble_mode,
                )
            })
            .collect()
    }

    pub fn estimate_affinity(&self, prev: &FeatureMatrix<T>, cur: &FeatureMatrix<T>) -> Result<AffinityBundle<T>> {
        Ok(self.estimate_affinities(&[prev], cur)?.remove(0))
    }
}
