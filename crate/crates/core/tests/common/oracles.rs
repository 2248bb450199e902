//! Brute-force loop references, written independently of the library. Each
//! takes plain slices and returns plain vectors.

#![allow(dead_code)]

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let e: Vec<f64> = row.iter().map(|v| (v / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn standardize(x: &[f64], channels: usize, eps: f64) -> Vec<f64> {
    let plane = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let vals: Vec<f64> = (0..channels).map(|c| x[c * plane + p]).collect();
        let mean = vals.iter().sum::<f64>() / channels as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / channels as f64;
        for c in 0..channels {
            out[c * plane + p] = (vals[c] - mean) / (var + eps).sqrt();
        }
    }
    out
}

/// Direct convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias[o];
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += wt[((o * ci + c) * kh + ky) * kw + kx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Bilinear value at `(x, y)` after clamping into the grid, as a tent-kernel
/// sum over every grid point.
pub fn bilinear(field: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let mut s = 0.0;
    for j in 0..h {
        for i in 0..w {
            let kx = (1.0 - (cx - i as f64).abs()).max(0.0);
            let ky = (1.0 - (cy - j as f64).abs()).max(0.0);
            s += kx * ky * field[j * w + i];
        }
    }
    s
}

pub fn in_bounds(h: usize, w: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

pub fn l1(pred: &[f64], target: &[f64], mask: Option<&[f64]>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pred.len() {
        let wgt = mask.map_or(1.0, |m| m[i % m.len()]);
        num += wgt * (pred[i] - target[i]).abs();
        den += wgt;
    }
    num / den
}

fn coord(i: usize, w: usize) -> (f64, f64) {
    ((i % w) as f64, (i / w) as f64)
}

pub fn moa(m: &[f64], n: usize, on: &[bool], query: &[bool]) -> Option<f64> {
    let rows: Vec<usize> = (0..n).filter(|&i| query[i]).collect();
    if rows.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &rows {
        for j in 0..n {
            if on[j] {
                total += m[i * n + j];
            }
        }
    }
    Some(100.0 * total / rows.len() as f64)
}

pub fn mrd(m: &[f64], h: usize, w: usize, query: &[bool]) -> Option<f64> {
    let n = h * w;
    let mut total = 0.0;
    let mut rows = 0;
    for i in 0..n {
        if !query[i] {
            continue;
        }
        let (xi, yi) = coord(i, w);
        for j in 0..n {
            let (xj, yj) = coord(j, w);
            total += m[i * n + j] * ((xj - xi).powi(2) + (yj - yi).powi(2)).sqrt();
        }
        rows += 1;
    }
    (rows > 0).then(|| total / rows as f64)
}

pub fn mma(m: &[f64], n: usize, query: &[bool]) -> Option<f64> {
    let mut total = 0.0;
    let mut rows = 0;
    for i in 0..n {
        if query[i] {
            let mut best = f64::NEG_INFINITY;
            for j in 0..n {
                best = best.max(m[i * n + j]);
            }
            total += best;
            rows += 1;
        }
    }
    (rows > 0).then(|| 100.0 * total / rows as f64)
}

/// Mean end-point error over the pixels selected by `keep`.
pub fn aepe(pred: &[f32], gt: &[f32], plane: usize, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..plane {
        if keep(i) {
            let dx = pred[i] as f64 - gt[i] as f64;
            let dy = pred[plane + i] as f64 - gt[plane + i] as f64;
            total += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// `[2, h, w]` flow with occluded cells zeroed.
pub fn masked_flow(flow: &[f64], keep: &[bool]) -> Vec<f64> {
    let n = keep.len();
    (0..2 * n).map(|i| if keep[i % n] { flow[i] } else { 0.0 }).collect()
}

pub fn rectify(m: &[f64], flow: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n];
    for c in 0..2 {
        for i in 0..n {
            for j in 0..n {
                out[c * n + i] += m[i * n + j] * flow[c * n + j];
            }
        }
    }
    out
}

pub fn attraction(m: &[f64], h: usize, w: usize, keep: &[bool]) -> Option<f64> {
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        let (xi, yi) = coord(i, w);
        let (mut ex, mut ey) = (0.0, 0.0);
        for j in 0..n {
            let (xj, yj) = coord(j, w);
            ex += m[i * n + j] * xj;
            ey += m[i * n + j] * yj;
        }
        total += (ex - xi).abs() + (ey - yi).abs();
        count += 2;
    }
    (count > 0).then(|| total / count as f64)
}

/// Within 1e-10, relative to the larger magnitude when above one.
pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

pub fn all_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| close(x, y))
}
