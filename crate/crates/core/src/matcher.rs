//! Stage one: 1/8-resolution features and soft-argmax global matching.

use crate::grid::{CellGrid, NormalGrid, CELL};
use crate::params::{conv_specs, Bound, Init, ParamSpec};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Features at 1/8 resolution, `[channels, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub cells: CellGrid,
    /// Pixels per cell; always [`CELL`].
    pub scale: usize,
}

impl FeatureMap {
    fn check(&self, op: &'static str) -> Result<()> {
        if self.scale != CELL {
            return Err(TensorError::Shape {
                op,
                msg: format!("features must be at 1/{CELL} resolution, got 1/{}", self.scale),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GlobalMatch {
    /// `[2, h, w]`, cell units.
    pub flow_gm: Var,
    /// Scaled correlation `<F0_i, F1_j> / sqrt(C)`, `[N, N]`.
    pub correlation: Var,
    /// Row-softmaxed correlation.
    pub probabilities: Var,
    pub match_confidence: Vec<f64>,
}

const FEATURE_EPS: f64 = 1e-5;

/// `kernel` must be even; each block pads by `(kernel - 2) / 2` so every
/// stride-2 step halves the size exactly.
pub fn encoder_specs(channels: &[usize; 3], kernel: usize) -> Vec<ParamSpec> {
    let mut c_in = 3;
    let mut specs = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        specs.extend(conv_specs(
            &format!("matcher.conv{}", i + 1),
            c,
            c_in,
            kernel,
            2f64.sqrt(),
        ));
        c_in = c;
    }
    specs.push(ParamSpec::new("matcher.norm.gain", &[channels[2]], Init::Constant(1.0)));
    specs
}

/// Three stride-2 convolutions; ReLU after the first two, per-cell channel
/// standardization and a learned gain after the last. The kernel size is
/// read from the bound weights.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, frame: Var) -> Result<FeatureMap> {
    let s = g.shape(frame).to_vec();
    let cells = match (
        s.len(),
        CellGrid::for_image(s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)),
    ) {
        (3, Some(c)) if s[0] == 3 => c,
        _ => {
            return Err(TensorError::Shape {
                op: "encode",
                msg: format!("expected a [3, H, W] frame with H, W multiples of 8, got {:?}", s),
            })
        }
    };
    let k = g.shape(p.get("matcher.conv1.weight")?).get(3).copied().unwrap_or(0);
    if k < 2 || k % 2 != 0 {
        return Err(TensorError::Parameter {
            op: "encode",
            msg: format!("encoder kernel must be even and >= 2, got {k}"),
        });
    }
    let pad = (k - 2) / 2;
    let x = p.conv(g, "matcher.conv1", frame, 2, pad)?;
    let x = g.relu(x);
    let x = p.conv(g, "matcher.conv2", x, 2, pad)?;
    let x = g.relu(x);
    let x = p.conv(g, "matcher.conv3", x, 2, pad)?;
    let x = g.standardize_channels(x, T::of(FEATURE_EPS))?;
    let x = scale_channels(g, x, p.get("matcher.norm.gain")?)?;
    Ok(FeatureMap {
        var: x,
        channels: g.shape(x)[0],
        cells,
        scale: CELL,
    })
}

/// `x[c, ..] * gain[c]` for `x: [C, ...]`.
fn scale_channels<T: Real>(g: &mut Graph<T>, x: Var, gain: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = g.shape(gain).iter().product::<usize>();
    let len: usize = shape.iter().product();
    if c != shape[0] {
        return Err(TensorError::Dimension {
            op: "scale_channels",
            lhs: shape,
            rhs: g.shape(gain).to_vec(),
        });
    }
    let plane = len / c;
    let taps = (0..len)
        .map(|i| [(i / plane, T::one()), (0, T::zero()), (0, T::zero()), (0, T::zero())])
        .collect();
    let expanded = g.gather(gain, &shape, taps)?;
    g.mul(x, expanded)
}

/// Flattens `[C, h, w]` features to `[N, C]` rows.
pub(crate) fn cell_rows<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Soft-argmax flow `Σ_j P(i, j) grid(j) - grid(i)` from `[N, N]` row
/// probabilities.
pub(crate) fn expected_flow<T: Real>(g: &mut Graph<T>, prob: Var, cells: CellGrid) -> Result<Var> {
    let grid = NormalGrid::<T>::new(cells);
    let gv = g.constant(grid.grid.clone());
    let expected = g.matmul(prob, gv)?;
    let expected = g.transpose(expected)?;
    let neg: Vec<T> = grid.channel_first().into_iter().map(|v| -v).collect();
    let flow = g.add_const(expected, &neg)?;
    g.reshape(flow, &[2, cells.h, cells.w])
}

pub fn global_match<T: Real>(
    g: &mut Graph<T>,
    f0: &FeatureMap,
    f1: &FeatureMap,
    temperature: T,
) -> Result<GlobalMatch> {
    f0.check("global_match")?;
    f1.check("global_match")?;
    if g.shape(f0.var) != g.shape(f1.var) {
        return Err(TensorError::Dimension {
            op: "global_match",
            lhs: g.shape(f0.var).to_vec(),
            rhs: g.shape(f1.var).to_vec(),
        });
    }
    let n = f0.cells.cells();
    let rows0 = cell_rows(g, f0.var)?;
    let cols1 = g.reshape(f1.var, &[f1.channels, n])?;
    let raw = g.matmul(rows0, cols1)?;
    let correlation = g.scale(raw, T::one() / T::of(f0.channels as f64).sqrt());
    let probabilities = g.softmax_rows(correlation, temperature)?;
    let flow_gm = expected_flow(g, probabilities, f0.cells)?;
    let match_confidence = g
        .data(probabilities)
        .chunks(n)
        .map(|r| r.iter().fold(0f64, |m, v| m.max(v.to_f64().unwrap())))
        .collect();
    Ok(GlobalMatch {
        flow_gm,
        correlation,
        probabilities,
        match_confidence,
    })
}

/// Hard-argmax flow from row probabilities `[N, N]`, for debugging.
pub fn argmax_flow<T: Real>(probabilities: &Tensor<T>, cells: CellGrid) -> Tensor<T> {
    let n = cells.cells();
    let mut out = vec![T::zero(); 2 * n];
    for (i, row) in probabilities.data().chunks(n).enumerate() {
        let best = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            .0;
        let (bx, by) = cells.coord(best);
        let (ix, iy) = cells.coord(i);
        out[i] = T::of(bx as f64 - ix as f64);
        out[n + i] = T::of(by as f64 - iy as f64);
    }
    Tensor::new(vec![2, cells.h, cells.w], out).unwrap()
}

/// Forward-only matching on detached feature values.
pub fn match_values<T: Real>(f0: &Tensor<T>, f1: &Tensor<T>, cells: CellGrid, temperature: T) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let a = g.constant(f0.clone());
    let b = g.constant(f1.clone());
    let fm = |var| FeatureMap {
        var,
        channels: f0.shape()[0],
        cells,
        scale: CELL,
    };
    let m = global_match(&mut g, &fm(a), &fm(b), temperature)?;
    Ok(g.detach(m.flow_gm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn distinct_features(c: usize, cells: CellGrid) -> Tensor<f64> {
        // One-hot-like codes scaled so that self correlation dominates.
        let n = cells.cells();
        Tensor::from_fn(&[c, cells.h, cells.w], |idx| {
            let (ch, i) = (idx / n, idx % n);
            if ch == i % c {
                40.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn self_match_gives_zero_flow() {
        let cells = CellGrid::new(4, 4);
        let f = distinct_features(16, cells);
        let flow = match_values(&f, &f, cells, 1.0).unwrap();
        assert!(flow.data().iter().all(|v| v.abs() < 1e-6), "{:?}", flow.data());
    }

    #[test]
    fn shifted_features_recover_shift() {
        let cells = CellGrid::new(4, 4);
        let f0 = distinct_features(16, cells);
        // F1 cell (x+1) mod w carries F0 cell x: true match one cell right.
        let f1 = Tensor::from_fn(&[16, 4, 4], |idx| {
            let (ch, i) = (idx / 16, idx % 16);
            let (x, y) = cells.coord(i);
            let src = y * 4 + (x + 3) % 4;
            f0.data()[ch * 16 + src]
        });
        let flow = match_values(&f0, &f1, cells, 1.0).unwrap();
        for i in 0..16 {
            let (x, _) = cells.coord(i);
            let want = if x == 3 { -3.0 } else { 1.0 };
            assert!((flow.data()[i] - want).abs() < 0.1, "cell {i}: {}", flow.data()[i]);
            assert!(flow.data()[16 + i].abs() < 0.1);
        }
        let mut g = Graph::no_grad();
        let (a, b) = (g.constant(f0), g.constant(f1));
        let fm = |var| FeatureMap {
            var,
            channels: 16,
            cells,
            scale: CELL,
        };
        let m = global_match(&mut g, &fm(a), &fm(b), 1.0).unwrap();
        let hard = argmax_flow(g.value(m.probabilities), cells);
        assert_eq!(hard.data()[0], 1.0);
        assert_eq!(hard.data()[3], -3.0);
    }

    #[test]
    fn encoder_rejects_bad_sizes_and_is_pure() {
        let specs = encoder_specs(&[8, 8, 8], 4);
        let store = ParamStore::<f64>::init(&specs, 3);
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let bad = g.constant(Tensor::zeros(&[3, 12, 16]));
        assert!(matches!(encode(&mut g, &p, bad), Err(TensorError::Shape { .. })));
        let frame = Tensor::from_fn(&[3, 16, 16], |i| (i as f64 * 0.37).sin());
        let a = g.constant(frame.clone());
        let b = g.constant(frame);
        let fa = encode(&mut g, &p, a).unwrap();
        let fb = encode(&mut g, &p, b).unwrap();
        assert_eq!(g.data(fa.var), g.data(fb.var));
        assert_eq!(g.shape(fa.var), &[8, 2, 2]);
    }
}
