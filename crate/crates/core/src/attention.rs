//! Stage three: occlusion-extended features, the trustworthy attention
//! matrix, masked and rectified flow, and the repulsion / attraction
//! constraints.

use crate::grid::{CellGrid, NormalGrid};
use crate::matcher::{cell_rows, FeatureMap};
use crate::occdet::{NonOccludedMask, OcclusionMap};
use crate::params::{conv_specs, Bound, Init, ParamSpec};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// `[C + C_om, h, w]`; the first `C` channels are the untouched image features.
#[derive(Clone, Copy, Debug)]
pub struct ExtendedFeatures {
    pub var: Var,
    pub image_channels: usize,
    pub occ_channels: usize,
    pub cells: CellGrid,
}

/// Row-stochastic `[N, N]` reference weights over cells.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMatrix {
    pub var: Var,
    pub cells: CellGrid,
}

pub fn occlusion_encoder_specs(occ_channels: usize) -> Vec<ParamSpec> {
    let mut s = conv_specs("tsa.occ1", occ_channels, 1, 3, 2f64.sqrt()).to_vec();
    s.extend(conv_specs("tsa.occ2", occ_channels, occ_channels, 3, 1.0));
    s
}

/// Query/key projections `[in_dim, dim]` under `prefix`.
pub fn projection_specs(prefix: &str, in_dim: usize, dim: usize) -> Vec<ParamSpec> {
    let init = Init::FanIn {
        fan_in: in_dim,
        gain: 1.0,
    };
    vec![
        ParamSpec::new(format!("{prefix}.query"), &[in_dim, dim], init),
        ParamSpec::new(format!("{prefix}.key"), &[in_dim, dim], init),
    ]
}

/// Concatenates F0 with OM passed through conv(3×3) → ReLU → conv(3×3).
pub fn extend_features<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    f0: &FeatureMap,
    om: &OcclusionMap<T>,
) -> Result<ExtendedFeatures> {
    let os = om.om.shape();
    if os != [f0.cells.h, f0.cells.w] {
        return Err(TensorError::Dimension {
            op: "extend_features",
            lhs: vec![f0.cells.h, f0.cells.w],
            rhs: os.to_vec(),
        });
    }
    let om_var = g.constant(om.om.clone().reshape(&[1, os[0], os[1]])?);
    let x = p.conv(g, "tsa.occ1", om_var, 1, 1)?;
    let x = g.relu(x);
    let occ = p.conv(g, "tsa.occ2", x, 1, 1)?;
    let occ_channels = g.shape(occ)[0];
    let var = g.concat(&[f0.var, occ])?;
    Ok(ExtendedFeatures {
        var,
        image_channels: f0.channels,
        occ_channels,
        cells: f0.cells,
    })
}

/// `softmax_rows(Q Kᵀ / sqrt(d), temperature)` over flattened cells of
/// `features: [C, h, w]`, projections under `prefix`.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    features: Var,
    temperature: T,
) -> Result<AttentionMatrix> {
    let s = g.shape(features).to_vec();
    let cells = CellGrid::new(s[1], s[2]);
    let rows = cell_rows(g, features)?;
    let q = g.matmul(rows, p.get(&format!("{prefix}.query"))?)?;
    let k = g.matmul(rows, p.get(&format!("{prefix}.key"))?)?;
    let d = g.shape(q)[1];
    attention_from_projections(g, q, k, d, cells, temperature)
}

pub fn attention_from_projections<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    dim: usize,
    cells: CellGrid,
    temperature: T,
) -> Result<AttentionMatrix> {
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / T::of(dim as f64).sqrt());
    let var = g.softmax_rows(logits, temperature)?;
    Ok(AttentionMatrix { var, cells })
}

/// Zeroes the flow of occluded cells: `flow · om_n` broadcast over channels.
pub fn masked_flow<T: Real>(g: &mut Graph<T>, flow_gm: Var, om_n: &NonOccludedMask<T>) -> Result<Var> {
    let s = g.shape(flow_gm).to_vec();
    if s.len() != 3 || s[1..] != *om_n.mask.shape() {
        return Err(TensorError::Dimension {
            op: "masked_flow",
            lhs: s,
            rhs: om_n.mask.shape().to_vec(),
        });
    }
    g.mul_const(flow_gm, om_n.mask.data())
}

/// `rect(i) = Σ_j m(i, j) · flow(j)` per flow channel.
pub fn rectify<T: Real>(g: &mut Graph<T>, m: &AttentionMatrix, flow: Var) -> Result<Var> {
    let n = m.cells.cells();
    let s = g.shape(flow).to_vec();
    if s.iter().product::<usize>() != 2 * n {
        return Err(TensorError::Dimension {
            op: "rectify",
            lhs: g.shape(m.var).to_vec(),
            rhs: s,
        });
    }
    let flat = g.reshape(flow, &[2, n])?;
    let mt = g.transpose(m.var)?;
    let out = g.matmul(flat, mt)?;
    g.reshape(out, &[2, m.cells.h, m.cells.w])
}

/// L1 between the rectified flow and 1/8-resolution ground truth, every cell.
pub fn repulsion_loss<T: Real>(g: &mut Graph<T>, rect: Var, flow_gt_ds: &Tensor<T>) -> Result<Var> {
    if g.shape(rect) != flow_gt_ds.shape() {
        return Err(TensorError::Dimension {
            op: "repulsion_loss",
            lhs: g.shape(rect).to_vec(),
            rhs: flow_gt_ds.shape().to_vec(),
        });
    }
    g.l1_loss(rect, flow_gt_ds.data(), None)
}

/// For non-occluded query rows, L1 between the attention-expected grid
/// coordinate and the query's own coordinate. `None` when `om_n` is empty.
pub fn attraction_loss<T: Real>(
    g: &mut Graph<T>,
    m: &AttentionMatrix,
    om_n: &NonOccludedMask<T>,
    grid: &NormalGrid<T>,
) -> Result<Option<Var>> {
    if om_n.count() == 0 {
        log::warn!("attraction term skipped: no non-occluded cells");
        return Ok(None);
    }
    let gv = g.constant(grid.grid.clone());
    let expected = g.matmul(m.var, gv)?;
    let expected = g.transpose(expected)?;
    g.l1_loss(expected, &grid.channel_first(), Some(om_n.mask.data()))
        .map(Some)
}
