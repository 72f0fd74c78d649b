//! Ground-truth data association matrices.
//!
//! For two frames padded to `n_m` objects each, the label is an
//! `(n_m + 1) × (n_m + 1)` binary matrix. Rows index objects of the earlier
//! frame, columns objects of the later one. The extra last column marks
//! earlier objects that left; the extra last row marks later objects that
//! entered. Real objects occupy the leading indices, dummies the tail.

use std::collections::HashSet;

use crate::error::{DanError, Result};
use crate::tensor::{Scalar, Tensor};

/// Objects whose visible fraction is below this are treated as fully occluded.
pub const VISIBILITY_THRESHOLD: f32 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssociationLabel {
    n_m: usize,
    n_real_prev: usize,
    n_real_cur: usize,
    cells: Vec<u8>,
}

fn check_unique(ids: &[i64], which: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
        return Err(DanError::Contract(format!("duplicate identity {dup} in {which} frame")));
    }
    Ok(())
}

impl AssociationLabel {
    /// Builds the label for identity lists of the earlier and later frame.
    pub fn build(ids_prev: &[i64], ids_cur: &[i64], n_m: usize) -> Result<Self> {
        for ids in [ids_prev, ids_cur] {
            if ids.len() > n_m {
                return Err(DanError::Capacity { got: ids.len(), max: n_m });
            }
        }
        check_unique(ids_prev, "earlier")?;
        check_unique(ids_cur, "later")?;
        let side = n_m + 1;
        let mut cells = vec![0u8; side * side];
        let mut cur_matched = vec![false; ids_cur.len()];
        for (i, id) in ids_prev.iter().enumerate() {
            match ids_cur.iter().position(|c| c == id) {
                Some(j) => {
                    cells[i * side + j] = 1;
                    cur_matched[j] = true;
                }
                None => cells[i * side + n_m] = 1,
            }
        }
        for (j, matched) in cur_matched.iter().enumerate() {
            if !matched {
                cells[n_m * side + j] = 1;
            }
        }
        Ok(AssociationLabel {
            n_m,
            n_real_prev: ids_prev.len(),
            n_real_cur: ids_cur.len(),
            cells,
        })
    }

    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn n_real_prev(&self) -> usize {
        self.n_real_prev
    }

    pub fn n_real_cur(&self) -> usize {
        self.n_real_cur
    }

    /// Side length `n_m + 1`.
    pub fn side(&self) -> usize {
        self.n_m + 1
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cells[i * self.side() + j]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Column of the later frame matched by earlier object `i`, or `n_m`
    /// when it left. `None` for dummy rows.
    pub fn target_of(&self, i: usize) -> Option<usize> {
        if i >= self.n_real_prev {
            return None;
        }
        (0..self.side()).find(|&j| self.get(i, j) == 1)
    }

    pub fn matched_pairs(&self) -> usize {
        (0..self.n_m)
            .map(|i| (0..self.n_m).filter(|&j| self.get(i, j) == 1).count())
            .sum()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let side = self.side();
        let data = self.cells.iter().map(|&c| T::from_f64(c as f64)).collect();
        Tensor::new(&[side, side], data).expect("label shape")
    }

    fn slice<T: Scalar>(&self, rows: usize, cols: usize) -> Tensor<T> {
        let side = self.side();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(T::from_f64(self.cells[i * side + j] as f64));
            }
        }
        Tensor::new(&[rows, cols], data).expect("trim shape")
    }

    /// `(L1, L2, L3)`: without the last row, without the last column, and
    /// without both.
    pub fn trims<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (n, s) = (self.n_m, self.side());
        (self.slice(n, s), self.slice(s, n), self.slice(n, n))
    }
}

/// Drops objects with visibility strictly below [`VISIBILITY_THRESHOLD`].
pub fn filter_occluded<B>(objects: impl IntoIterator<Item = (B, f32)>) -> Vec<(B, f32)> {
    objects
        .into_iter()
        .filter(|(_, vis)| *vis >= VISIBILITY_THRESHOLD)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise-equality construction, independent of `build`.
    fn oracle(prev: &[i64], cur: &[i64], n_m: usize) -> Vec<u8> {
        let side = n_m + 1;
        let mut out = vec![0u8; side * side];
        for i in 0..prev.len() {
            for j in 0..cur.len() {
                if prev[i] == cur[j] {
                    out[i * side + j] = 1;
                }
            }
        }
        for i in 0..prev.len() {
            if !cur.contains(&prev[i]) {
                out[i * side + n_m] = 1;
            }
        }
        for j in 0..cur.len() {
            if !prev.contains(&cur[j]) {
                out[n_m * side + j] = 1;
            }
        }
        out
    }

    #[test]
    fn departing_and_entering_objects() {
        let l = AssociationLabel::build(&[1, 2, 3, 4], &[1, 2, 3, 5], 5).unwrap();
        let ones: Vec<(usize, usize)> = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .filter(|&(i, j)| l.get(i, j) == 1)
            .collect();
        assert_eq!(ones, vec![(0, 0), (1, 1), (2, 2), (3, 5), (5, 3)]);
        assert_eq!(l.get(5, 5), 0);

        let (l1, l2, l3) = l.trims::<f32>();
        assert_eq!(l1.shape(), &[5, 6]);
        assert_eq!(l2.shape(), &[6, 5]);
        assert_eq!(l3.shape(), &[5, 5]);
        assert_eq!(l1.data().iter().sum::<f32>(), 4.0);
        assert_eq!(l1.at2(3, 5), 1.0);
    }

    #[test]
    fn empty_frames_give_zero_label() {
        for n_m in [0, 1, 4] {
            let l = AssociationLabel::build(&[], &[], n_m).unwrap();
            assert!(l.cells().iter().all(|&c| c == 0));
            let (l1, l2, l3) = l.trims::<f64>();
            assert!(l1.data().iter().chain(l2.data()).chain(l3.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn over_capacity_is_rejected() {
        let err = AssociationLabel::build(&[1, 2, 3], &[], 2).unwrap_err();
        assert!(matches!(err, DanError::Capacity { got: 3, max: 2 }));
    }

    #[test]
    fn duplicate_identity_is_rejected() {
        assert!(AssociationLabel::build(&[1, 1], &[], 4).is_err());
    }

    #[test]
    fn visibility_boundary() {
        let kept = filter_occluded(vec![("a", 0.29f32), ("b", 1.0), ("c", 0.3)]);
        let names: Vec<&str> = kept.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["b", "c"]);
    }

    fn id_lists() -> impl Strategy<Value = (Vec<i64>, Vec<i64>, usize)> {
        (0usize..7, 0usize..7, 0usize..3).prop_flat_map(|(a, b, extra)| {
            let n_m = a.max(b) + extra;
            (
                proptest::sample::subsequence((0..10i64).collect::<Vec<_>>(), a).prop_shuffle(),
                proptest::sample::subsequence((0..10i64).collect::<Vec<_>>(), b).prop_shuffle(),
                Just(n_m),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_equality_oracle((prev, cur, n_m) in id_lists()) {
            let l = AssociationLabel::build(&prev, &cur, n_m).unwrap();
            let want = oracle(&prev, &cur, n_m);
            prop_assert_eq!(l.cells(), want.as_slice());
        }

        #[test]
        fn label_invariants((prev, cur, n_m) in id_lists()) {
            let l = AssociationLabel::build(&prev, &cur, n_m).unwrap();
            let side = n_m + 1;
            for i in 0..n_m {
                let row: u32 = (0..side).map(|j| l.get(i, j) as u32).sum();
                prop_assert!(row <= 1);
                prop_assert_eq!(row == 1, i < prev.len());
            }
            for j in 0..n_m {
                let col: u32 = (0..side).map(|i| l.get(i, j) as u32).sum();
                prop_assert!(col <= 1);
                prop_assert_eq!(col == 1, j < cur.len());
            }
            prop_assert_eq!(l.get(n_m, n_m), 0);
            let matched = prev.iter().filter(|p| cur.contains(p)).count();
            prop_assert_eq!(l.matched_pairs(), matched);
            let total: usize = l.cells().iter().map(|&c| c as usize).sum();
            prop_assert_eq!(total, (prev.len() - matched) + (cur.len() - matched) + matched);
        }

        #[test]
        fn swapping_frames_transposes((prev, cur, n_m) in id_lists()) {
            let a = AssociationLabel::build(&prev, &cur, n_m).unwrap();
            let b = AssociationLabel::build(&cur, &prev, n_m).unwrap();
            let side = n_m + 1;
            for i in 0..side {
                for j in 0..side {
                    prop_assert_eq!(a.get(i, j), b.get(j, i));
                }
            }
        }

        #[test]
        fn trims_are_slices((prev, cur, n_m) in id_lists()) {
            let l = AssociationLabel::build(&prev, &cur, n_m).unwrap();
            let (l1, l2, l3) = l.trims::<f64>();
            for i in 0..n_m + 1 {
                for j in 0..n_m + 1 {
                    let v = l.get(i, j) as f64;
                    if i < n_m { prop_assert_eq!(l1.at2(i, j), v); }
                    if j < n_m { prop_assert_eq!(l2.at2(i, j), v); }
                    if i < n_m && j < n_m { prop_assert_eq!(l3.at2(i, j), v); }
                }
            }
        }
    }
}
