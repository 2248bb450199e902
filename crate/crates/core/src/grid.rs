//! 1/8-resolution cell grids and flow-field resampling.

use crate::tensor::{bilinear_taps, Real, Tensor};

/// Downsampling factor between pixels and attention cells.
pub const CELL: usize = 8;

/// Dimensions of the 1/8-resolution cell grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellGrid {
    pub h: usize,
    pub w: usize,
}

impl CellGrid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    /// Grid for a full-resolution image; `None` unless both sides divide by 8.
    pub fn for_image(height: usize, width: usize) -> Option<Self> {
        (height > 0 && width > 0 && height % CELL == 0 && width % CELL == 0)
            .then(|| Self::new(height / CELL, width / CELL))
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// `(x, y)` of cell `i`.
    pub fn coord(&self, i: usize) -> (usize, usize) {
        (i % self.w, i / self.w)
    }
}

/// Cell-center coordinates `[N, 2]`, row `i` = `(i mod w, i div w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalGrid<T> {
    pub grid: Tensor<T>,
}

impl<T: Real> NormalGrid<T> {
    pub fn new(cells: CellGrid) -> Self {
        let n = cells.cells();
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (x, y) = cells.coord(i);
            data.push(T::of(x as f64));
            data.push(T::of(y as f64));
        }
        Self {
            grid: Tensor::new(vec![n, 2], data).unwrap(),
        }
    }

    /// Channel-first layout `[2, N]`: all x, then all y.
    pub fn channel_first(&self) -> Vec<T> {
        let n = self.grid.shape()[0];
        let d = self.grid.data();
        (0..n).map(|i| d[2 * i]).chain((0..n).map(|i| d[2 * i + 1])).collect()
    }
}

/// Average-pools a full-resolution `[2, H, W]` pixel flow over 8×8 blocks
/// and converts it to cell units.
pub fn downsample_flow<T: Real>(flow: &Tensor<f32>) -> Tensor<T> {
    let s = flow.shape();
    let (hh, ww) = (s[1], s[2]);
    let cells = CellGrid::for_image(hh, ww).expect("flow size must be a multiple of 8");
    let mut out = vec![0f64; 2 * cells.cells()];
    let d = flow.data();
    for c in 0..2 {
        for y in 0..hh {
            for x in 0..ww {
                out[c * cells.cells() + (y / CELL) * cells.w + x / CELL] += d[(c * hh + y) * ww + x] as f64;
            }
        }
    }
    let norm = (CELL * CELL * CELL) as f64;
    Tensor::new(
        vec![2, cells.h, cells.w],
        out.into_iter().map(|v| T::of(v / norm)).collect(),
    )
    .unwrap()
}

/// Enlarges a `[2, h, w]` cell-unit flow by 8 with bilinear interpolation
/// between cell centers, returning pixel units.
pub fn upsample_flow<T: Real>(flow: &Tensor<T>) -> Tensor<f32> {
    let s = flow.shape();
    let (h, w) = (s[1], s[2]);
    let (hh, ww) = (h * CELL, w * CELL);
    let plane = h * w;
    let d = flow.data();
    let mut out = vec![0f32; 2 * hh * ww];
    let half = (CELL as f64 - 1.0) / 2.0;
    for y in 0..hh {
        let cy = (y as f64 - half) / CELL as f64;
        for x in 0..ww {
            let cx = (x as f64 - half) / CELL as f64;
            let (taps, _) = bilinear_taps(h, w, T::of(cx), T::of(cy));
            for c in 0..2 {
                let v: T = taps.iter().map(|&(i, wt)| d[c * plane + i] * wt).sum();
                out[(c * hh + y) * ww + x] = v.to_f32().unwrap() * CELL as f32;
            }
        }
    }
    Tensor::new(vec![2, hh, ww], out).unwrap()
}
