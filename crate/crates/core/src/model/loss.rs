//! Affinity bundles and the four association losses, evaluated directly on
//! arrays. The network computes the same quantities on its tape; these
//! versions serve inference, reporting and cross-checks.

use super::config::AssembleMode;
use crate::error::{shape_err, Result};
use crate::label::AssociationLabel;
use crate::tensor::{Scalar, Tensor};

/// Affinities between `n_prev` real objects of an earlier frame and `n_cur`
/// of a later one, padded to `n_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityBundle<T> {
    pub n_prev: usize,
    pub n_cur: usize,
    /// `n_m × n_m` raw similarities.
    pub m: Tensor<T>,
    /// `n_m × (n_m + 1)`, row-stochastic over valid entries.
    pub a1: Tensor<T>,
    /// `(n_m + 1) × n_m`, column-stochastic over valid entries.
    pub a2: Tensor<T>,
    pub a1_hat: Tensor<T>,
    pub a2_hat: Tensor<T>,
    /// `n_m × (n_m + 1)`: assembled real block plus the last column of `a1`.
    pub a: Tensor<T>,
}

/// Whether entry `(i, j)` of the forward matrix (`n_m × (n_m+1)`) takes part
/// in its row softmax.
pub fn forward_valid(i: usize, j: usize, n_m: usize, n_prev: usize, n_cur: usize) -> bool {
    i < n_prev && (j < n_cur || j == n_m)
}

/// Whether entry `(i, j)` of the backward matrix (`(n_m+1) × n_m`) takes
/// part in its column softmax.
pub fn backward_valid(i: usize, j: usize, n_m: usize, n_prev: usize, n_cur: usize) -> bool {
    j < n_cur && (i < n_prev || i == n_m)
}

fn masked_softmax(vals: &mut [f64], valid: &[bool]) {
    let max = vals
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
    if max == f64::NEG_INFINITY {
        vals.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (x, &v) in vals.iter_mut().zip(valid) {
        *x = if v { (*x - max).exp() } else { 0.0 };
        sum += *x;
    }
    vals.iter_mut().for_each(|x| *x /= sum);
}

/// Builds the full bundle from a raw similarity matrix.
pub fn bundle_from_similarity<T: Scalar>(
    m: &Tensor<T>,
    gamma: f64,
    n_prev: usize,
    n_cur: usize,
    mode: AssembleMode,
) -> Result<AffinityBundle<T>> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return shape_err(format!("similarity must be square, got {:?}", m.shape()));
    }
    let n = m.rows();
    if n_prev > n || n_cur > n {
        return shape_err(format!("{n_prev}/{n_cur} real objects exceed n_m = {n}"));
    }
    let s = n + 1;
    let mv = |i: usize, j: usize| m.at2(i, j).as_f64();
    let mut a1 = vec![0.0; n * s];
    for i in 0..n {
        let mut row: Vec<f64> = (0..s).map(|j| if j < n { mv(i, j) } else { gamma }).collect();
        let valid: Vec<bool> = (0..s).map(|j| forward_valid(i, j, n, n_prev, n_cur)).collect();
        masked_softmax(&mut row, &valid);
        a1[i * s..(i + 1) * s].copy_from_slice(&row);
    }
    let mut a2 = vec![0.0; s * n];
    for j in 0..n {
        let mut col: Vec<f64> = (0..s).map(|i| if i < n { mv(i, j) } else { gamma }).collect();
        let valid: Vec<bool> = (0..s).map(|i| backward_valid(i, j, n, n_prev, n_cur)).collect();
        masked_softmax(&mut col, &valid);
        for i in 0..s {
            a2[i * n + j] = col[i];
        }
    }
    let mut a1_hat = vec![0.0; n * n];
    let mut a2_hat = vec![0.0; n * n];
    let mut a = vec![0.0; n * s];
    for i in 0..n {
        for j in 0..n {
            a1_hat[i * n + j] = a1[i * s + j];
            a2_hat[i * n + j] = a2[i * n + j];
            a[i * s + j] = match mode {
                AssembleMode::Max => a1[i * s + j].max(a2[i * n + j]),
                AssembleMode::Mean => 0.5 * (a1[i * s + j] + a2[i * n + j]),
            };
        }
        a[i * s + n] = a1[i * s + n];
    }
    let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape, v.into_iter().map(T::from_f64).collect());
    Ok(AffinityBundle {
        n_prev,
        n_cur,
        m: m.clone(),
        a1: t(&[n, s], a1)?,
        a2: t(&[s, n], a2)?,
        a1_hat: t(&[n, n], a1_hat)?,
        a2_hat: t(&[n, n], a2_hat)?,
        a: t(&[n, s], a)?,
    })
}

/// The four sub-losses and their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub forward: f64,
    pub backward: f64,
    pub consistency: f64,
    pub assemble: f64,
    pub total: f64,
}

impl Losses {
    pub fn mean_of(items: &[Losses]) -> Losses {
        let n = items.len().max(1) as f64;
        let mut out = Losses::default();
        for l in items {
            out.forward += l.forward / n;
            out.backward += l.backward / n;
            out.consistency += l.consistency / n;
            out.assemble += l.assemble / n;
            out.total += l.total / n;
        }
        out
    }
}

fn weighted_nll<T: Scalar>(x: &Tensor<T>, w: &Tensor<f64>) -> f64 {
    let den: f64 = w.data().iter().sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = x
        .data()
        .iter()
        .zip(w.data())
        .filter(|(_, &wv)| wv != 0.0)
        .map(|(&xv, &wv)| -wv * xv.as_f64().max(f64::MIN_POSITIVE).ln())
        .sum();
    num / den
}

/// Losses of one bundle against its label. Entries outside the real block
/// never contribute: the label is zero there and both predictions vanish.
pub fn bundle_losses<T: Scalar>(b: &AffinityBundle<T>, label: &AssociationLabel, mode: AssembleMode) -> Result<Losses> {
    let n = label.n_m();
    if b.m.shape() != [n, n] {
        return shape_err(format!("bundle for n_m = {} against label for n_m = {n}", b.m.rows()));
    }
    let (l1, l2, l3) = label.trims::<f64>();
    let forward = weighted_nll(&b.a1, &l1);
    let backward = weighted_nll(&b.a2, &l2);
    let mut consistency = 0.0;
    let mut assembled = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (p, q) = (b.a1_hat.at2(i, j).as_f64(), b.a2_hat.at2(i, j).as_f64());
            if i < b.n_prev && j < b.n_cur {
                consistency += (p - q).abs();
            }
            assembled.push(match mode {
                AssembleMode::Max => p.max(q),
                AssembleMode::Mean => 0.5 * (p + q),
            });
        }
    }
    let assemble = weighted_nll(&Tensor::new(&[n, n], assembled)?, &l3);
    Ok(Losses {
        forward,
        backward,
        consistency,
        assemble,
        total: (forward + backward + consistency + assemble) / 4.0,
    })
}

/// Fraction of real earlier-frame objects whose row argmax over the valid
/// columns of `a` hits the labeled target; `(hits, total)`.
pub fn association_hits<T: Scalar>(b: &AffinityBundle<T>, label: &AssociationLabel) -> (usize, usize) {
    let n = label.n_m();
    let mut hits = 0;
    for i in 0..b.n_prev {
        let best = (0..=n)
            .filter(|&j| j < b.n_cur || j == n)
            .max_by(|&x, &y| {
                b.a.at2(i, x)
                    .partial_cmp(&b.a.at2(i, y))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(y.cmp(&x))
            })
            .unwrap_or(n);
        if label.target_of(i) == Some(best) {
            hits += 1;
        }
    }
    (hits, b.n_prev)
}
