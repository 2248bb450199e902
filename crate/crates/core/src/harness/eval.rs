use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{save_checkpoint, train, write_log_csv, Checkpoint, HarnessError, LogRow, TrainConfig};
use crate::grid::{upsample_flow, CellGrid};
use crate::metrics::{
    aepe_partitioned, aggregate, attention_metrics, downsample_occ_gt, per_image_csv, scatter_csv, summary_csv,
    MetricsRecord, Summary,
};
use crate::model::{forward, Ablation, Forward};
use crate::scenegen::SceneSample;
use crate::tensor::{Graph, Tensor};

fn run_forward(ckpt: &Checkpoint, s: &SceneSample) -> Result<(Graph<f32>, Forward<f32>), HarnessError> {
    let mut g = Graph::<f32>::no_grad();
    let p = ckpt.params.bind(&mut g);
    let cfg = &ckpt.config;
    let out = forward(&mut g, &p, &cfg.model, &cfg.flags, &s.frame0, &s.frame1, None)?;
    Ok((g, out))
}

/// All metrics for one image: attention statistics against downsampled
/// occlusion ground truth, and partitioned error of the matching, rectified
/// and final flows at full resolution.
pub fn evaluate_sample(ckpt: &Checkpoint, s: &SceneSample, image: usize) -> Result<MetricsRecord, HarnessError> {
    let (g, out) = run_forward(ckpt, s)?;
    let occ = downsample_occ_gt(&s.occ_gt, s.height, s.width)?;
    let m: Tensor<f64> = g.value(out.attention.var).cast();
    let aepe =
        |flow: &Tensor<f32>| aepe_partitioned(&upsample_flow(flow), &s.flow_gt, &s.occ_gt, &s.occ_in, &s.occ_out);
    Ok(MetricsRecord {
        image,
        attention: attention_metrics(&m, &occ)?,
        aepe: aepe(g.value(out.final_flow()))?,
        rectified: aepe(g.value(out.rectified))?,
        matching: aepe(g.value(out.matching.flow_gm))?,
    })
}

/// Per-image records in input order. Images are independent and run in
/// parallel.
pub fn evaluate(ckpt: &Checkpoint, data: &[SceneSample]) -> Result<Vec<MetricsRecord>, HarnessError> {
    ckpt.check()?;
    data.par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(ckpt, s, i))
        .collect()
}

/// Writes `<prefix>_per_image.csv`, `<prefix>_summary.csv` and
/// `<prefix>_scatter.csv`; returns the summary.
pub fn write_eval_csvs(dir: &Path, prefix: &str, records: &[MetricsRecord]) -> Result<Summary, HarnessError> {
    let summary = aggregate(records)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{prefix}_per_image.csv")), per_image_csv(records))?;
    fs::write(dir.join(format!("{prefix}_summary.csv")), summary_csv(&summary))?;
    fs::write(dir.join(format!("{prefix}_scatter.csv")), scatter_csv(records))?;
    Ok(summary)
}

/// One attention row reshaped to the cell grid, plus the online OM.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub cells: CellGrid,
    pub query: (usize, usize),
    pub weights: Vec<f64>,
    pub om: Vec<f64>,
}

impl AttentionDump {
    pub fn argmax(&self) -> (usize, usize) {
        let best = self
            .weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        self.cells.coord(best)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("cell_x,cell_y,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            let (x, y) = self.cells.coord(i);
            out.push_str(&format!("{x},{y},{w:.9}\n"));
        }
        out
    }
}

pub fn dump_attention(
    ckpt: &Checkpoint,
    s: &SceneSample,
    query: (usize, usize),
) -> Result<AttentionDump, HarnessError> {
    ckpt.check()?;
    let (g, out) = run_forward(ckpt, s)?;
    let cells = out.cells;
    if query.0 >= cells.w || query.1 >= cells.h {
        return Err(HarnessError::Config(format!(
            "query {:?} outside the {}x{} cell grid",
            query, cells.w, cells.h
        )));
    }
    let n = cells.cells();
    let row = query.1 * cells.w + query.0;
    let m = g.data(out.attention.var);
    Ok(AttentionDump {
        cells,
        query,
        weights: m[row * n..(row + 1) * n].iter().map(|&v| v as f64).collect(),
        om: out.om.om.data().iter().map(|&v| v as f64).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: char,
    pub flags: Ablation,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

/// Trains and evaluates each row of the ablation grid with `base` otherwise
/// unchanged. With `out_dir`, writes checkpoints, logs and CSVs per row.
pub fn ablate(
    base: &TrainConfig,
    train_data: &[SceneSample],
    val_data: &[SceneSample],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, HarnessError> {
    Ablation::grid()
        .into_par_iter()
        .map(|(label, flags)| {
            let cfg = TrainConfig { flags, ..base.clone() };
            let outcome = train(&cfg, train_data)?;
            let records = evaluate(&outcome.checkpoint, val_data)?;
            let summary = aggregate(&records)?;
            if let Some(dir) = out_dir {
                let prefix = format!("row_{label}");
                write_eval_csvs(dir, &prefix, &records)?;
                fs::write(dir.join(format!("{prefix}_train_log.csv")), write_log_csv(&outcome.log))?;
                save_checkpoint(&outcome.checkpoint, &dir.join(format!("{prefix}.tsac")))?;
            }
            Ok(AblationRow {
                label,
                flags,
                checkpoint: outcome.checkpoint,
                log: outcome.log,
                records,
                summary,
            })
        })
        .collect()
}
