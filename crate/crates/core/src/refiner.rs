//! Stage four: gated recurrent refinement at 1/8 resolution, with global
//! motion aggregation driven by the attention matrix.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMatrix;
use crate::grid::{upsample_flow, CellGrid};
use crate::params::{conv_specs, Bound, ParamSpec};
use crate::tensor::{bilinear_taps, Graph, Real, Result, Tap, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub hidden: usize,
    pub context: usize,
    pub motion: usize,
    pub radius: usize,
    pub head: usize,
    pub iters: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            hidden: 96,
            context: 64,
            motion: 64,
            radius: 3,
            head: 64,
            iters: 6,
        }
    }
}

impl RefinerConfig {
    pub fn lookup_channels(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }
}

/// `hidden` stays in (−1, 1); `flow` is the detached current estimate.
#[derive(Clone, Debug)]
pub struct RefinerState<T> {
    pub hidden: Var,
    pub flow: Tensor<T>,
    pub context: Var,
}

pub fn param_specs(cfg: &RefinerConfig, feature_channels: usize) -> Vec<ParamSpec> {
    let r2 = 2f64.sqrt();
    let (h, c, m) = (cfg.hidden, cfg.context, cfg.motion);
    let gru_in = h + c + 2 * m;
    let mut s = Vec::new();
    s.extend(conv_specs("refiner.ctx1", h + c, feature_channels, 3, r2));
    s.extend(conv_specs("refiner.ctx2", h + c, h + c, 3, 1.0));
    s.extend(conv_specs("refiner.menc_corr", 48, cfg.lookup_channels(), 1, r2));
    s.extend(conv_specs("refiner.menc_flow", 16, 2, 3, r2));
    s.extend(conv_specs("refiner.menc_out", m - 2, 64, 3, r2));
    s.extend(conv_specs("refiner.gru_z", h, gru_in, 3, 1.0));
    s.extend(conv_specs("refiner.gru_r", h, gru_in, 3, 1.0));
    s.extend(conv_specs("refiner.gru_q", h, gru_in, 3, 1.0));
    s.extend(conv_specs("refiner.head1", cfg.head, h, 3, r2));
    s.extend(conv_specs("refiner.head2", 2, cfg.head, 3, 0.1));
    s
}

/// Bilinear samples of each cell's correlation row at the `(2r+1)²` offsets
/// around its current target `grid(i) + flow(i)`. Channel index is
/// `(dy + r)(2r + 1) + (dx + r)`. Gradients flow to `correlation` only.
pub fn lookup_correlation<T: Real>(
    g: &mut Graph<T>,
    correlation: Var,
    flow: &Tensor<T>,
    cells: CellGrid,
    radius: usize,
) -> Result<Var> {
    let n = cells.cells();
    if g.shape(correlation) != [n, n] || flow.shape() != [2, cells.h, cells.w] {
        return Err(TensorError::Dimension {
            op: "lookup_correlation",
            lhs: g.shape(correlation).to_vec(),
            rhs: flow.shape().to_vec(),
        });
    }
    let side = 2 * radius + 1;
    let r = radius as f64;
    let fd = flow.data();
    let mut taps: Vec<Tap<T>> = Vec::with_capacity(side * side * n);
    for dy in 0..side {
        for dx in 0..side {
            let (ox, oy) = (T::of(dx as f64 - r), T::of(dy as f64 - r));
            for i in 0..n {
                let (x, y) = cells.coord(i);
                let tx = T::of(x as f64) + fd[i] + ox;
                let ty = T::of(y as f64) + fd[n + i] + oy;
                let (t, _) = bilinear_taps(cells.h, cells.w, tx, ty);
                taps.push(t.map(|(j, w)| (i * n + j, w)));
            }
        }
    }
    g.gather(correlation, &[side * side, cells.h, cells.w], taps)
}

/// GMA-style global aggregation: channel `c` of the output is `M · motion_c`.
pub fn aggregate_motion<T: Real>(g: &mut Graph<T>, m: &AttentionMatrix, motion: Var) -> Result<Var> {
    let s = g.shape(motion).to_vec();
    let n = m.cells.cells();
    if s.len() != 3 || s[1] * s[2] != n {
        return Err(TensorError::Dimension {
            op: "aggregate_motion",
            lhs: g.shape(m.var).to_vec(),
            rhs: s,
        });
    }
    let flat = g.reshape(motion, &[s[0], n])?;
    let mt = g.transpose(m.var)?;
    let out = g.matmul(flat, mt)?;
    g.reshape(out, &s)
}

/// Two convolutions on F0, split into `tanh` hidden state and `relu` context.
pub fn context<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &RefinerConfig,
    f0: Var,
    init_flow: Tensor<T>,
) -> Result<RefinerState<T>> {
    let x = p.conv(g, "refiner.ctx1", f0, 1, 1)?;
    let x = g.relu(x);
    let x = p.conv(g, "refiner.ctx2", x, 1, 1)?;
    let h = g.narrow(x, 0, cfg.hidden)?;
    let c = g.narrow(x, cfg.hidden, cfg.context)?;
    Ok(RefinerState {
        hidden: g.tanh(h),
        flow: init_flow,
        context: g.relu(c),
    })
}

/// Local motion features from the correlation lookup and current flow;
/// the flow itself rides along as the last two channels.
pub fn encode_motion<T: Real>(g: &mut Graph<T>, p: &Bound, lookup: Var, flow: &Tensor<T>) -> Result<Var> {
    let fv = g.constant(flow.clone());
    let c = p.conv(g, "refiner.menc_corr", lookup, 1, 0)?;
    let c = g.relu(c);
    let f = p.conv(g, "refiner.menc_flow", fv, 1, 1)?;
    let f = g.relu(f);
    let cf = g.concat(&[c, f])?;
    let out = p.conv(g, "refiner.menc_out", cf, 1, 1)?;
    let out = g.relu(out);
    g.concat(&[out, fv])
}

/// One gated update of the hidden state from `[context, motion, aggregated]`,
/// decoding a flow increment. Returns the new state and the new flow variable.
pub fn refine_step<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    state: &RefinerState<T>,
    motion: Var,
    aggregated: Option<Var>,
) -> Result<(RefinerState<T>, Var, Var)> {
    let mut parts = vec![state.context, motion];
    match aggregated {
        Some(a) => parts.push(a),
        None => {
            let zeros = g.constant(Tensor::zeros(g.shape(motion)));
            parts.push(zeros);
        }
    }
    let x = g.concat(&parts)?;
    let hx = g.concat(&[state.hidden, x])?;
    let z = p.conv(g, "refiner.gru_z", hx, 1, 1)?;
    let z = g.sigmoid(z);
    let r = p.conv(g, "refiner.gru_r", hx, 1, 1)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, state.hidden)?;
    let rhx = g.concat(&[rh, x])?;
    let q = p.conv(g, "refiner.gru_q", rhx, 1, 1)?;
    let q = g.tanh(q);
    // h' = h + z (q - h)
    let dq = g.sub(q, state.hidden)?;
    let zdq = g.mul(z, dq)?;
    let hidden = g.add(state.hidden, zdq)?;

    let d = p.conv(g, "refiner.head1", hidden, 1, 1)?;
    let d = g.tanh(d);
    let delta = p.conv(g, "refiner.head2", d, 1, 1)?;
    let base = g.constant(state.flow.clone());
    let flow_var = g.add(base, delta)?;
    let next = RefinerState {
        hidden,
        flow: g.detach(flow_var),
        context: state.context,
    };
    Ok((next, delta, flow_var))
}

/// Inputs shared by every refinement iteration.
#[derive(Clone, Copy, Debug)]
pub struct RefineInputs<'a, T> {
    pub f0: Var,
    pub correlation: Var,
    pub attention: Option<&'a AttentionMatrix>,
    pub cells: CellGrid,
    /// Pins the detached flow entering iterations `1..iters` instead of
    /// taking it from the previous iteration.
    pub pinned_states: Option<&'a [Tensor<T>]>,
}

/// Runs `cfg.iters` updates from `init_flow`, returning every intermediate
/// flow (cell units) for sequence supervision. The flow is detached between
/// iterations.
pub fn run_refinement<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &RefinerConfig,
    init_flow: Tensor<T>,
    inputs: RefineInputs<'_, T>,
) -> Result<Vec<Var>> {
    if cfg.iters == 0 {
        return Err(TensorError::Parameter {
            op: "run_refinement",
            msg: "iters must be at least 1".into(),
        });
    }
    let mut state = context(g, p, cfg, inputs.f0, init_flow)?;
    let mut flows = Vec::with_capacity(cfg.iters);
    for k in 0..cfg.iters {
        if let Some(pinned) = inputs.pinned_states.filter(|_| k > 0) {
            state.flow = pinned[k - 1].clone();
        }
        let lookup = lookup_correlation(g, inputs.correlation, &state.flow, inputs.cells, cfg.radius)?;
        let motion = encode_motion(g, p, lookup, &state.flow)?;
        let aggregated = match inputs.attention {
            Some(m) => Some(aggregate_motion(g, m, motion)?),
            None => None,
        };
        let (next, _, flow) = refine_step(g, p, &state, motion, aggregated)?;
        flows.push(flow);
        state = next;
    }
    Ok(flows)
}

/// Full-resolution pixel flow from a cell-unit estimate.
pub fn final_flow<T: Real>(g: &Graph<T>, flow: Var) -> Tensor<f32> {
    upsample_flow(g.value(flow))
}
