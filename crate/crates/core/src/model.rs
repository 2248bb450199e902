//! The four-stage pipeline: matching, occlusion scoring, trustworthy
//! attention with flow rectification, and refinement.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention, extend_features, masked_flow, occlusion_encoder_specs, projection_specs, rectify, AttentionMatrix,
};
use crate::grid::CellGrid;
use crate::matcher::{encode, encoder_specs, global_match, match_values, GlobalMatch};
use crate::occdet::{estimate_occlusion, non_occluded_mask, NonOccludedMask, OcclusionMap};
use crate::params::{Bound, ParamSpec};
use crate::refiner::{self, run_refinement, RefineInputs, RefinerConfig};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 3],
    /// Even kernel size of the encoder's stride-2 convolutions; 2 makes each
    /// cell's feature depend on its own 8×8 block only.
    pub encoder_kernel: usize,
    pub occ_channels: usize,
    pub attention_dim: usize,
    pub match_temperature: f64,
    pub attention_temperature: f64,
    pub refiner: RefinerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [32, 48, 64],
            encoder_kernel: 2,
            occ_channels: 16,
            attention_dim: 64,
            match_temperature: 1.0,
            attention_temperature: 1.0,
            refiner: RefinerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.encoder_kernel < 2 || self.encoder_kernel % 2 != 0 {
            return Err(format!(
                "encoder_kernel must be even and >= 2, got {}",
                self.encoder_kernel
            ));
        }
        if self.encoder_channels.contains(&0) || self.attention_dim == 0 {
            return Err("channel counts must be positive".into());
        }
        if !(self.match_temperature > 0.0) || !(self.attention_temperature > 0.0) {
            return Err("temperatures must be positive".into());
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[2]
    }
}

/// Independent switches; the ablation grid is built from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Feed OM-derived channels into the attention features.
    pub use_ext_features: bool,
    pub use_repulsion: bool,
    pub use_attraction: bool,
    /// Aggregate motion features with the attention matrix in the refiner.
    pub use_gma_baseline: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            use_ext_features: true,
            use_repulsion: true,
            use_attraction: true,
            use_gma_baseline: true,
        }
    }

    pub fn baseline() -> Self {
        Self {
            use_ext_features: false,
            use_repulsion: false,
            use_attraction: false,
            use_gma_baseline: true,
        }
    }

    /// Rows (a)–(d): baseline, then each ingredient stacked on the previous.
    pub fn grid() -> [(char, Ablation); 4] {
        let a = Self::baseline();
        let b = Self {
            use_ext_features: true,
            ..a
        };
        let c = Self {
            use_repulsion: true,
            ..b
        };
        let d = Self {
            use_attraction: true,
            ..c
        };
        [('a', a), ('b', b), ('c', c), ('d', d)]
    }
}

pub fn param_specs(cfg: &ModelConfig, ablation: &Ablation) -> Vec<ParamSpec> {
    let c = cfg.feature_channels();
    let mut specs = encoder_specs(&cfg.encoder_channels, cfg.encoder_kernel);
    let mut attn_in = c;
    if ablation.use_ext_features {
        specs.extend(occlusion_encoder_specs(cfg.occ_channels));
        attn_in += cfg.occ_channels;
    }
    specs.extend(projection_specs("tsa", attn_in, cfg.attention_dim));
    specs.extend(refiner::param_specs(&cfg.refiner, c));
    specs
}

/// Values that enter the graph as constants cut from their computation:
/// the occlusion scores, the initial flow and each iteration's input flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached<T> {
    pub om: OcclusionMap<T>,
    pub init_flow: Option<Tensor<T>>,
    pub states: Option<Vec<Tensor<T>>>,
}

impl<T> Detached<T> {
    /// Only the occlusion map pinned; everything else computed.
    pub fn occlusion(om: OcclusionMap<T>) -> Self {
        Self {
            om,
            init_flow: None,
            states: None,
        }
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub cells: CellGrid,
    pub matching: GlobalMatch,
    pub om: OcclusionMap<T>,
    pub om_n: NonOccludedMask<T>,
    pub attention: AttentionMatrix,
    pub rectified: Var,
    /// One flow per refinement iteration, cell units.
    pub flows: Vec<Var>,
}

impl<T: Real> Forward<T> {
    /// The detached values this pass used, for replaying it with
    /// [`forward`]'s `pinned` argument.
    pub fn detached(&self, g: &Graph<T>) -> Detached<T> {
        let n = self.flows.len();
        Detached {
            om: self.om.clone(),
            init_flow: Some(g.detach(self.rectified)),
            states: Some(self.flows[..n - 1].iter().map(|&f| g.detach(f)).collect()),
        }
    }
}

impl<T> Forward<T> {
    pub fn final_flow(&self) -> Var {
        *self.flows.last().expect("refinement returns at least one flow")
    }
}

/// Runs the pipeline on one frame pair. `pinned` replaces detached values:
/// the online occlusion scores (e.g. with ground truth) and optionally the
/// flows entering refinement.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ablation: &Ablation,
    frame0: &Tensor<T>,
    frame1: &Tensor<T>,
    pinned: Option<&Detached<T>>,
) -> Result<Forward<T>> {
    if frame0.shape() != frame1.shape() {
        return Err(TensorError::Dimension {
            op: "forward",
            lhs: frame0.shape().to_vec(),
            rhs: frame1.shape().to_vec(),
        });
    }
    let x0 = g.constant(frame0.clone());
    let x1 = g.constant(frame1.clone());
    let f0 = encode(g, p, x0)?;
    let f1 = encode(g, p, x1)?;
    let cells = f0.cells;
    let temp = T::of(cfg.match_temperature);
    let matching = global_match(g, &f0, &f1, temp)?;

    let om = match pinned {
        Some(d) => d.om.clone(),
        None => {
            let fwd = g.detach(matching.flow_gm);
            let bwd = match_values(g.value(f1.var), g.value(f0.var), cells, temp)?;
            estimate_occlusion(&fwd, &bwd)?
        }
    };
    let om_n = non_occluded_mask(&om);

    let features = if ablation.use_ext_features {
        extend_features(g, p, &f0, &om)?.var
    } else {
        f0.var
    };
    let m = attention(g, p, "tsa", features, T::of(cfg.attention_temperature))?;
    let masked = masked_flow(g, matching.flow_gm, &om_n)?;
    let rectified = rectify(g, &m, masked)?;

    let inputs = RefineInputs {
        f0: f0.var,
        correlation: matching.correlation,
        attention: ablation.use_gma_baseline.then_some(&m),
        cells,
        pinned_states: pinned.and_then(|d| d.states.as_deref()),
    };
    let init = match pinned.and_then(|d| d.init_flow.clone()) {
        Some(f) => f,
        None => g.detach(rectified),
    };
    let flows = run_refinement(g, p, &cfg.refiner, init, inputs)?;
    Ok(Forward {
        cells,
        matching,
        om,
        om_n,
        attention: m,
        rectified,
        flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_channels: [4, 6, 8],
            occ_channels: 3,
            attention_dim: 5,
            refiner: RefinerConfig {
                hidden: 6,
                context: 4,
                motion: 5,
                radius: 1,
                head: 4,
                iters: 2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn spec_keys_follow_ablation() {
        let cfg = tiny();
        let full = param_specs(&cfg, &Ablation::full());
        let base = param_specs(&cfg, &Ablation::baseline());
        assert!(full.iter().any(|s| s.key == "tsa.occ1.weight"));
        assert!(!base.iter().any(|s| s.key.starts_with("tsa.occ")));
        let q = |specs: &[ParamSpec]| specs.iter().find(|s| s.key == "tsa.query").unwrap().shape.clone();
        assert_eq!(q(&full), vec![11, 5]);
        assert_eq!(q(&base), vec![8, 5]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        for (_, ab) in Ablation::grid() {
            let store = ParamStore::<f64>::init(&param_specs(&cfg, &ab), 1);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let f0 = Tensor::from_fn(&[3, 16, 24], |i| ((i * 37) % 17) as f64 / 17.0);
            let f1 = Tensor::from_fn(&[3, 16, 24], |i| ((i * 41) % 19) as f64 / 19.0);
            let out = forward(&mut g, &p, &cfg, &ab, &f0, &f1, None).unwrap();
            assert_eq!(out.cells, CellGrid::new(2, 3));
            assert_eq!(out.flows.len(), 2);
            assert_eq!(g.shape(out.final_flow()), &[2, 2, 3]);
            assert_eq!(g.shape(out.attention.var), &[6, 6]);
            for row in g.data(out.attention.var).chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
