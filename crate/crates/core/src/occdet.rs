//! Stage two: label-free occlusion scores from forward–backward consistency.

use crate::grid::CellGrid;
use crate::tensor::{bilinear_taps, Real, Result, Tensor, TensorError};

/// Scores at 1/8 resolution below which a cell counts as non-occluded.
pub const NON_OCCLUDED_BELOW: f64 = 1.0 / 8.0;

/// Nonnegative per-cell occlusion score `[h, w]`; 0 means non-occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMap<T> {
    pub om: Tensor<T>,
}

/// Binary `[h, w]` mask, 1 = non-occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct NonOccludedMask<T> {
    pub mask: Tensor<T>,
}

impl<T: Real> NonOccludedMask<T> {
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > T::zero()).count()
    }
}

/// `om(p) = |fwd(p) + bwd(p + fwd(p))|`, with `bwd` sampled bilinearly.
/// Cells warped out of bounds get `max(in-bounds om) + 1`.
pub fn estimate_occlusion<T: Real>(flow_fwd: &Tensor<T>, flow_bwd: &Tensor<T>) -> Result<OcclusionMap<T>> {
    let s = flow_fwd.shape();
    if s.len() != 3 || s[0] != 2 || flow_bwd.shape() != s {
        return Err(TensorError::Dimension {
            op: "estimate_occlusion",
            lhs: s.to_vec(),
            rhs: flow_bwd.shape().to_vec(),
        });
    }
    let cells = CellGrid::new(s[1], s[2]);
    let n = cells.cells();
    let (fwd, bwd) = (flow_fwd.data(), flow_bwd.data());
    let mut om = vec![T::zero(); n];
    let mut outside = vec![false; n];
    let mut max_in = T::zero();
    for i in 0..n {
        let (x, y) = cells.coord(i);
        let (fx, fy) = (fwd[i], fwd[n + i]);
        let (taps, valid) = bilinear_taps(cells.h, cells.w, T::of(x as f64) + fx, T::of(y as f64) + fy);
        if !valid {
            outside[i] = true;
            continue;
        }
        let bx: T = taps.iter().map(|&(j, w)| bwd[j] * w).sum();
        let by: T = taps.iter().map(|&(j, w)| bwd[n + j] * w).sum();
        let (ex, ey) = (fx + bx, fy + by);
        om[i] = (ex * ex + ey * ey).sqrt();
        max_in = max_in.max(om[i]);
    }
    let sentinel = max_in + T::one();
    for (v, &o) in om.iter_mut().zip(&outside) {
        if o {
            *v = sentinel;
        }
    }
    Ok(OcclusionMap {
        om: Tensor::new(vec![cells.h, cells.w], om).unwrap(),
    })
}

/// `om_n(p) = 1` iff `om(p) < 1/8`.
pub fn non_occluded_mask<T: Real>(om: &OcclusionMap<T>) -> NonOccludedMask<T> {
    let threshold = T::of(NON_OCCLUDED_BELOW);
    NonOccludedMask {
        mask: om.om.map(|v| if v < threshold { T::one() } else { T::zero() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_flows_score_zero() {
        let zero = Tensor::<f64>::zeros(&[2, 4, 4]);
        let om = estimate_occlusion(&zero, &zero).unwrap();
        assert!(om.om.data().iter().all(|&v| v == 0.0));
        assert_eq!(non_occluded_mask(&om).count(), 16);

        // constant (0.5, 0.25): in-bounds targets except the last row/column
        let fwd = Tensor::<f64>::from_fn(&[2, 4, 4], |i| if i < 16 { 0.5 } else { 0.25 });
        let om = estimate_occlusion(&fwd, &fwd.map(|v| -v)).unwrap();
        for i in 0..16 {
            let inside = i % 4 < 3 && i / 4 < 3;
            assert_eq!(om.om.data()[i], if inside { 0.0 } else { 1.0 }, "cell {i}");
        }
    }

    #[test]
    fn border_cell_pushed_out_gets_sentinel() {
        let mut fwd = Tensor::<f64>::zeros(&[2, 3, 3]);
        fwd.data_mut()[2] = 1.0; // cell (2, 0) moves right, off the grid
        fwd.data_mut()[4] = 0.1; // cell (1, 1) is inconsistent by 0.1
        let bwd = Tensor::<f64>::zeros(&[2, 3, 3]);
        let om = estimate_occlusion(&fwd, &bwd).unwrap();
        assert!((om.om.data()[4] - 0.1).abs() < 1e-12);
        assert!((om.om.data()[2] - 1.1).abs() < 1e-12);
        let mask = non_occluded_mask(&om);
        assert_eq!(mask.mask.data()[2], 0.0);
        assert_eq!(mask.mask.data()[4], 1.0);
    }

    #[test]
    fn threshold_is_strict() {
        let om = OcclusionMap {
            om: Tensor::new(vec![1, 3], vec![0.0, 0.125, 0.124_999]).unwrap(),
        };
        assert_eq!(non_occluded_mask(&om).mask.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(estimate_occlusion(&a, &b).is_err());
    }
}
