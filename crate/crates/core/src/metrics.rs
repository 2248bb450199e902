//! Attention trustworthiness metrics (MOA, MRD, MMA), occlusion ground
//! truth at cell resolution, and partitioned end-point error.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::{CellGrid, CELL};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0}: empty query mask")]
    EmptyMask(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no records to aggregate")]
    NoRecords,
}

/// Confirmed classes of the 8×8-block ground truth. Cells may be neither.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampledOccGt {
    pub cells: CellGrid,
    pub om_o: Vec<bool>,
    pub om_n: Vec<bool>,
}

impl DownsampledOccGt {
    pub fn not_occluded(&self) -> Vec<bool> {
        self.om_o.iter().map(|&o| !o).collect()
    }
}

/// A block is quasi-occluded when more than half its pixels are occluded
/// and quasi-non-occluded when fewer than half are. A quasi cell is
/// confirmed when every existing 4-neighbor has the same quasi class;
/// exact-half blocks belong to neither class.
pub fn downsample_occ_gt(occ: &[u8], height: usize, width: usize) -> Result<DownsampledOccGt, MetricError> {
    let cells = CellGrid::for_image(height, width)
        .ok_or_else(|| MetricError::Shape(format!("{height}x{width} is not a multiple of {CELL}")))?;
    if occ.len() != height * width {
        return Err(MetricError::Shape(format!("{} labels for {height}x{width}", occ.len())));
    }
    let n = cells.cells();
    let mut count = vec![0usize; n];
    for y in 0..height {
        for x in 0..width {
            if occ[y * width + x] != 0 {
                count[(y / CELL) * cells.w + x / CELL] += 1;
            }
        }
    }
    let half = CELL * CELL / 2;
    let quasi_occ: Vec<bool> = count.iter().map(|&c| c > half).collect();
    let quasi_non: Vec<bool> = count.iter().map(|&c| c < half).collect();
    let confirm = |quasi: &[bool]| -> Vec<bool> {
        (0..n)
            .map(|i| {
                let (x, y) = cells.coord(i);
                let mut ok = quasi[i];
                if x > 0 {
                    ok &= quasi[i - 1];
                }
                if x + 1 < cells.w {
                    ok &= quasi[i + 1];
                }
                if y > 0 {
                    ok &= quasi[i - cells.w];
                }
                if y + 1 < cells.h {
                    ok &= quasi[i + cells.w];
                }
                ok
            })
            .collect()
    };
    Ok(DownsampledOccGt {
        cells,
        om_o: confirm(&quasi_occ),
        om_n: confirm(&quasi_non),
    })
}

fn check_square<T: Real>(m: &Tensor<T>, masks: &[&[bool]]) -> Result<usize, MetricError> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] || masks.iter().any(|k| k.len() != s[0]) {
        return Err(MetricError::Shape(format!(
            "attention {:?} against masks of {:?}",
            s,
            masks.iter().map(|k| k.len()).collect::<Vec<_>>()
        )));
    }
    Ok(s[0])
}

/// Mean over `query_mask` rows of the attention mass on `on_mask` cells, ×100.
pub fn moa<T: Real>(m: &Tensor<T>, on_mask: &[bool], query_mask: &[bool]) -> Result<f64, MetricError> {
    let n = check_square(m, &[on_mask, query_mask])?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for (row, _) in m.data().chunks(n).zip(query_mask).filter(|(_, &q)| q) {
        total += row
            .iter()
            .zip(on_mask)
            .filter(|(_, &on)| on)
            .map(|(v, _)| v.to_f64().unwrap())
            .sum::<f64>();
        rows += 1;
    }
    if rows == 0 {
        return Err(MetricError::EmptyMask("moa"));
    }
    Ok(100.0 * total / rows as f64)
}

/// Mean over non-occluded queries of the attention-weighted distance to
/// every reference cell, in cell units.
pub fn mrd<T: Real>(m: &Tensor<T>, om_n: &[bool], cells: CellGrid) -> Result<f64, MetricError> {
    let n = check_square(m, &[om_n])?;
    if n != cells.cells() {
        return Err(MetricError::Shape(format!("{n} rows for {} cells", cells.cells())));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for (i, row) in m.data().chunks(n).enumerate() {
        if !om_n[i] {
            continue;
        }
        let (xi, yi) = cells.coord(i);
        let mut d = 0.0;
        for (j, v) in row.iter().enumerate() {
            let (xj, yj) = cells.coord(j);
            let (dx, dy) = (xj as f64 - xi as f64, yj as f64 - yi as f64);
            d += v.to_f64().unwrap() * (dx * dx + dy * dy).sqrt();
        }
        total += d;
        rows += 1;
    }
    if rows == 0 {
        return Err(MetricError::EmptyMask("mrd"));
    }
    Ok(total / rows as f64)
}

/// Mean over masked rows of the row maximum, ×100.
pub fn mma<T: Real>(m: &Tensor<T>, mask: &[bool]) -> Result<f64, MetricError> {
    let n = check_square(m, &[mask])?;
    let maxima: Vec<f64> = m
        .data()
        .chunks(n)
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(row, _)| row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_f64().unwrap())))
        .collect();
    if maxima.is_empty() {
        return Err(MetricError::EmptyMask("mma"));
    }
    Ok(100.0 * maxima.iter().sum::<f64>() / maxima.len() as f64)
}

/// Mean end-point error per partition; `None` for empty partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AepeRecord {
    pub all: Option<f64>,
    pub noc: Option<f64>,
    pub occ: Option<f64>,
    pub occ_in: Option<f64>,
    pub occ_out: Option<f64>,
}

pub fn aepe_partitioned(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    occ_gt: &[u8],
    occ_in: &[u8],
    occ_out: &[u8],
) -> Result<AepeRecord, MetricError> {
    let s = gt.shape();
    let n = s.iter().skip(1).product::<usize>();
    if pred.shape() != s || s.len() != 3 || s[0] != 2 || [occ_gt.len(), occ_in.len(), occ_out.len()] != [n; 3] {
        return Err(MetricError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            s
        )));
    }
    let (p, q) = (pred.data(), gt.data());
    let mut acc = [(0.0f64, 0usize); 5];
    for i in 0..n {
        let dx = p[i] as f64 - q[i] as f64;
        let dy = p[n + i] as f64 - q[n + i] as f64;
        let e = (dx * dx + dy * dy).sqrt();
        let member = [true, occ_gt[i] == 0, occ_gt[i] != 0, occ_in[i] != 0, occ_out[i] != 0];
        for (a, &m) in acc.iter_mut().zip(&member) {
            if m {
                a.0 += e;
                a.1 += 1;
            }
        }
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    Ok(AepeRecord {
        all: mean(acc[0]),
        noc: mean(acc[1]),
        occ: mean(acc[2]),
        occ_in: mean(acc[3]),
        occ_out: mean(acc[4]),
    })
}

/// Attention statistics of one image; `None` when the query set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub moa_noc: Option<f64>,
    pub moa_occ: Option<f64>,
    pub mrd_noc: Option<f64>,
    pub mma_noc: Option<f64>,
    pub mma_occ: Option<f64>,
}

/// `moa_noc`: mass non-occluded queries put on occluded cells.
/// `moa_occ`: mass occluded queries put on occluded cells.
pub fn attention_metrics<T: Real>(m: &Tensor<T>, gt: &DownsampledOccGt) -> Result<AttentionRecord, MetricError> {
    let defined = |r: Result<f64, MetricError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::EmptyMask(what)) => {
            log::debug!("{what} undefined for this image");
            Ok(None)
        }
        Err(e) => Err(e),
    };
    Ok(AttentionRecord {
        moa_noc: defined(moa(m, &gt.om_o, &gt.om_n))?,
        moa_occ: defined(moa(m, &gt.om_o, &gt.om_o))?,
        mrd_noc: defined(mrd(m, &gt.om_n, gt.cells))?,
        mma_noc: defined(mma(m, &gt.om_n))?,
        mma_occ: defined(mma(m, &gt.om_o))?,
    })
}

/// Everything measured on one evaluation image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub image: usize,
    pub attention: AttentionRecord,
    /// Final refined flow.
    pub aepe: AepeRecord,
    pub rectified: AepeRecord,
    pub matching: AepeRecord,
}

const AEPE_PARTS: [&str; 5] = ["all", "noc", "occ", "occ_in", "occ_out"];

impl MetricsRecord {
    pub fn columns() -> Vec<String> {
        let mut c: Vec<String> = ["moa_noc", "moa_occ", "mrd_noc", "mma_noc", "mma_occ"]
            .map(String::from)
            .to_vec();
        for stage in ["aepe", "rect_aepe", "gm_aepe"] {
            c.extend(AEPE_PARTS.iter().map(|p| format!("{stage}_{p}")));
        }
        c
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        let a = &self.attention;
        let mut v = vec![a.moa_noc, a.moa_occ, a.mrd_noc, a.mma_noc, a.mma_occ];
        for r in [&self.aepe, &self.rectified, &self.matching] {
            v.extend([r.all, r.noc, r.occ, r.occ_in, r.occ_out]);
        }
        v
    }
}

/// Lower median: the `(n - 1) / 2`-th smallest value.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Per-column lower median over images where the value is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub columns: Vec<String>,
    pub medians: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl Summary {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.columns
            .iter()
            .position(|c| c == column)
            .and_then(|i| self.medians[i])
    }
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary, MetricError> {
    if records.is_empty() {
        return Err(MetricError::NoRecords);
    }
    let columns = MetricsRecord::columns();
    let rows: Vec<Vec<Option<f64>>> = records.iter().map(MetricsRecord::values).collect();
    let mut medians = Vec::with_capacity(columns.len());
    let mut counts = Vec::with_capacity(columns.len());
    for c in 0..columns.len() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
        counts.push(vals.len());
        medians.push(lower_median(&vals));
    }
    Ok(Summary {
        columns,
        medians,
        counts,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn per_image_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("image,");
    out.push_str(&MetricsRecord::columns().join(","));
    out.push('\n');
    for r in records {
        let vals: Vec<String> = r.values().into_iter().map(cell).collect();
        let _ = writeln!(out, "{},{}", r.image, vals.join(","));
    }
    out
}

pub fn summary_csv(s: &Summary) -> String {
    let mut out = String::from("metric,median,images\n");
    for ((c, m), n) in s.columns.iter().zip(&s.medians).zip(&s.counts) {
        let _ = writeln!(out, "{c},{},{n}", cell(*m));
    }
    out
}

/// Per-image attention statistics against final error, for scatter plots.
pub fn scatter_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("image,moa_occ,moa_noc,mrd_noc,mma_noc,aepe_all,aepe_occ\n");
    for r in records {
        let a = &r.attention;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.image,
            cell(a.moa_occ),
            cell(a.moa_noc),
            cell(a.mrd_noc),
            cell(a.mma_noc),
            cell(r.aepe.all),
            cell(r.aepe.occ)
        );
    }
    out
}
