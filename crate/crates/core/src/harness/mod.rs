//! Training, evaluation, checkpoints and the ablation grid.

mod checkpoint;
mod eval;
mod optim;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attraction_loss, repulsion_loss};
use crate::grid::NormalGrid;
use crate::io::FormatError;
use crate::metrics::MetricError;
use crate::model::{Ablation, Forward, ModelConfig};
use crate::tensor::{Graph, Real, Result as TensorResult, Tensor, TensorError, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};
pub use eval::{ablate, dump_attention, evaluate, evaluate_sample, write_eval_csvs, AblationRow, AttentionDump};
pub use optim::AdamW;
pub use train::{init_checkpoint, train, write_log_csv, LogRow, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("non-finite value at step {step} ({diagnostic}); last good checkpoint is from step {}", last_good.step)]
    NonFinite {
        step: usize,
        last_good: Box<Checkpoint>,
        diagnostic: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight λ on the sum of both constraint terms.
    pub constraint_weight: f64,
    pub repulsion_weight: f64,
    pub attraction_weight: f64,
    /// Sequence decay γ.
    pub gamma: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: Ablation,
    pub model: ModelConfig,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            constraint_weight: 0.6,
            repulsion_weight: 1.0,
            attraction_weight: 1.0,
            gamma: 0.8,
            lr: 2e-4,
            warmup_steps: 200,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            flags: Ablation::default(),
            model: ModelConfig::default(),
            train_data: None,
            val_data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.constraint_weight >= 0.0) {
            return Err(HarnessError::Config("constraint_weight must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HarnessError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        self.model.validate().map_err(HarnessError::Config)?;
        if self.model.refiner.iters == 0 {
            return Err(HarnessError::Config("iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of every loss term; `None` for gated or skipped terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub sequence: f64,
    pub repulsion: Option<f64>,
    pub attraction: Option<f64>,
}

/// `Σ_k γ^(N-1-k) L1(flow_k, gt)` over `flow_seq`.
pub fn sequence_loss<T: Real>(
    g: &mut Graph<T>,
    flow_seq: &[Var],
    flow_gt_ds: &Tensor<T>,
    gamma: f64,
) -> TensorResult<Var> {
    let n = flow_seq.len();
    if n == 0 {
        return Err(TensorError::Parameter {
            op: "sequence_loss",
            msg: "empty flow sequence".into(),
        });
    }
    let mut total: Option<Var> = None;
    for (k, &f) in flow_seq.iter().enumerate() {
        let l = g.l1_loss(f, flow_gt_ds.data(), None)?;
        let l = g.scale(l, T::of(gamma.powi((n - 1 - k) as i32)));
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

/// Sequence loss over `[flow_gm, refined...]` plus `λ (w_r repulsion +
/// w_a attraction)`, each constraint gated by its flag.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &Forward<T>,
    flow_gt_ds: &Tensor<T>,
    grid: &NormalGrid<T>,
    cfg: &TrainConfig,
) -> TensorResult<(Var, LossValues)> {
    let mut seq = vec![out.matching.flow_gm];
    seq.extend(&out.flows);
    let mut total = sequence_loss(g, &seq, flow_gt_ds, cfg.gamma)?;
    let mut values = LossValues {
        sequence: g.value(total).item().to_f64().unwrap(),
        ..Default::default()
    };
    let lambda = cfg.constraint_weight;
    if cfg.flags.use_repulsion {
        let r = repulsion_loss(g, out.rectified, flow_gt_ds)?;
        values.repulsion = Some(g.value(r).item().to_f64().unwrap());
        let r = g.scale(r, T::of(lambda * cfg.repulsion_weight));
        total = g.add(total, r)?;
    }
    if cfg.flags.use_attraction {
        if let Some(a) = attraction_loss(g, &out.attention, &out.om_n, grid)? {
            values.attraction = Some(g.value(a).item().to_f64().unwrap());
            let a = g.scale(a, T::of(lambda * cfg.attraction_weight));
            total = g.add(total, a)?;
        }
    }
    values.total = g.value(total).item().to_f64().unwrap();
    Ok((total, values))
}
