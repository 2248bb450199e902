use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, AdamW};
use super::{total_loss, Checkpoint, HarnessError, LossValues, TrainConfig};
use crate::grid::{downsample_flow, CellGrid, NormalGrid};
use crate::model::{forward, param_specs};
use crate::params::ParamStore;
use crate::scenegen::SceneSample;
use crate::tensor::{Graph, Tensor};

/// One row of the per-step training log, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub sequence: f64,
    pub repulsion: Option<f64>,
    pub attraction: Option<f64>,
    pub grad_norm: f64,
    pub non_occluded: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Step-0 checkpoint: parameters drawn from `cfg.seed`.
pub fn init_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    let specs = param_specs(&cfg.model, &cfg.flags);
    Checkpoint {
        config: cfg.clone(),
        step: 0,
        params: ParamStore::init(&specs, cfg.seed),
    }
}

struct Prepared<'a> {
    sample: &'a SceneSample,
    flow_ds: Tensor<f32>,
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains from [`init_checkpoint`] for `cfg.steps` steps. Deterministic for
/// a given config and dataset.
pub fn train(cfg: &TrainConfig, data: &[SceneSample]) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let mut ckpt = init_checkpoint(cfg);
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            checkpoint: ckpt,
            log: Vec::new(),
        });
    }
    if data.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    log::info!(
        "training {} parameters for {} steps",
        ckpt.params.parameter_count(),
        cfg.steps
    );
    let prepared: Vec<Prepared> = data
        .iter()
        .map(|s| Prepared {
            sample: s,
            flow_ds: downsample_flow(&s.flow_gt),
        })
        .collect();
    let mut grids: BTreeMap<(usize, usize), NormalGrid<f32>> = BTreeMap::new();
    let mut opt = AdamW::new(
        cfg.lr,
        (cfg.beta1, cfg.beta2),
        cfg.adam_eps,
        cfg.weight_decay,
        cfg.warmup_steps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut losses: Vec<LossValues> = Vec::with_capacity(cfg.batch_size);
        let mut non_occ = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let item = &prepared[order.pop().unwrap()];
            let s = item.sample;
            let cells = CellGrid::for_image(s.height, s.width)
                .ok_or_else(|| HarnessError::Config("image size must be a multiple of 8".into()))?;
            let grid = grids
                .entry((cells.h, cells.w))
                .or_insert_with(|| NormalGrid::new(cells));

            let mut g = Graph::<f32>::new();
            let bound = ckpt.params.bind(&mut g);
            let out = forward(&mut g, &bound, &cfg.model, &cfg.flags, &s.frame0, &s.frame1, None)?;
            let (loss, values) = total_loss(&mut g, &out, &item.flow_ds, grid, cfg)?;
            non_occ += out.om_n.count() as f64;
            losses.push(values);
            if !values.total.is_finite() {
                return Err(abort(step, &ckpt, format!("loss {:?}", values)));
            }
            g.backward(loss)?;
            for (k, gr) in ckpt.params.grads(&g, &bound) {
                match grads.get_mut(&k) {
                    Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(k, gr);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grads.values_mut().flatten().for_each(|v| *v *= inv);
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(abort(step, &ckpt, format!("gradient norm {grad_norm}")));
        }
        let lr = opt.current_lr();
        opt.step(&mut ckpt.params, &grads);
        ckpt.step = step + 1;

        let nb = losses.len() as f64;
        let row = LogRow {
            step,
            lr,
            total: losses.iter().map(|l| l.total).sum::<f64>() / nb,
            sequence: losses.iter().map(|l| l.sequence).sum::<f64>() / nb,
            repulsion: mean_of(&losses.iter().map(|l| l.repulsion).collect::<Vec<_>>()),
            attraction: mean_of(&losses.iter().map(|l| l.attraction).collect::<Vec<_>>()),
            grad_norm,
            non_occluded: non_occ / nb,
        };
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: loss {:.4} seq {:.4} |g| {:.3}",
                row.total,
                row.sequence,
                row.grad_norm
            );
        }
        log.push(row);
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

fn abort(step: usize, last_good: &Checkpoint, diagnostic: String) -> HarnessError {
    log::error!("non-finite value at step {step}: {diagnostic}");
    HarnessError::NonFinite {
        step,
        last_good: Box::new(last_good.clone()),
        diagnostic,
    }
}

pub fn write_log_csv(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    let mut out = String::from("step,lr,total,sequence,repulsion,attraction,grad_norm,non_occluded_cells\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{},{},{:.9},{:.3}",
            r.step,
            r.lr,
            r.total,
            r.sequence,
            opt(r.repulsion),
            opt(r.attraction),
            r.grad_norm,
            r.non_occluded
        );
    }
    out
}
