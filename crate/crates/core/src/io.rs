//! CSV plus JSON-sidecar storage for datasets, gains and predictor sets.
//!
//! A dataset `data.csv` has one row per `(traj, t)` with columns
//! `traj,t,y_*,v_*,x_*,u_*` and, when noise was recorded, `xi_*,eta_*`.
//! The final step of each trajectory leaves the input columns empty. The
//! metadata lives next to it in `data.meta.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::PredictorSetLinear;
use crate::lti::{DatasetMeta, FeedbackGain, NoiseRecord, Trajectory, TrajectoryDataset};
use crate::numkit::Mat;

pub const DATASET_FORMAT: &str = "pil-dataset";
pub const MATRIX_FORMAT: &str = "pil-matrices";
pub const FORMAT_VERSION: u32 = 1;

/// Sidecar path for a CSV file: `x.csv` maps to `x.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    format: String,
    version: u32,
    has_noise: bool,
    meta: DatasetMeta,
}

fn header(meta: &DatasetMeta, has_noise: bool) -> Vec<String> {
    let mut h = vec!["traj".to_string(), "t".to_string()];
    let mut block = |p: &str, k: usize| h.extend((0..k).map(|i| format!("{p}_{i}")));
    block("y", meta.obs_dim);
    block("v", meta.m);
    block("x", meta.n);
    block("u", meta.m);
    if has_noise {
        block("xi", meta.n);
        block("eta", meta.m);
    }
    h
}

fn push_row(row: &mut Vec<String>, vals: Option<&Vec<f64>>, width: usize) {
    match vals {
        Some(v) => row.extend(v.iter().map(|x| x.to_string())),
        None => row.extend(std::iter::repeat_n(String::new(), width)),
    }
}

pub fn write_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    ds.validate()?;
    let has_noise = !ds.trajectories.is_empty() && ds.trajectories.iter().all(|t| t.noise.is_some());
    let meta = &ds.meta;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(meta, has_noise))?;
    for (k, tr) in ds.trajectories.iter().enumerate() {
        for t in 0..=tr.len() {
            let mut row = vec![k.to_string(), t.to_string()];
            push_row(&mut row, Some(&tr.y[t]), meta.obs_dim);
            push_row(&mut row, tr.v.get(t), meta.m);
            push_row(&mut row, Some(&tr.x[t]), meta.n);
            push_row(&mut row, tr.u.get(t), meta.m);
            if has_noise {
                let nr = tr.noise.as_ref().unwrap();
                push_row(&mut row, Some(&nr.xi[t]), meta.n);
                push_row(&mut row, nr.eta.get(t), meta.m);
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let side = DatasetSidecar {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        has_noise,
        meta: meta.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

fn parse_block(rec: &csv::StringRecord, at: usize, width: usize, line: u64) -> Result<Option<Vec<f64>>> {
    let cells: Vec<&str> = (at..at + width).map(|i| rec.get(i).unwrap_or("")).collect();
    if cells.iter().all(|c| c.is_empty()) {
        return Ok(None);
    }
    cells
        .iter()
        .map(|c| {
            c.parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {line}: cannot read {c:?} as a number")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let side: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if side.format != DATASET_FORMAT || side.version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported dataset format {} v{}",
            side.format, side.version
        )));
    }
    let meta = side.meta;
    let expected = header(&meta, side.has_noise);
    let mut rdr = csv::Reader::from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(Error::Dimension(format!(
            "CSV columns {found:?} do not match metadata (n={}, m={}, obs_dim={})",
            meta.n, meta.m, meta.obs_dim
        )));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let idx = |i: usize| -> Result<usize> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: bad index column")))
        };
        let (k, t) = (idx(0)?, idx(1)?);
        if k == trajectories.len() && t == 0 {
            trajectories.push(Trajectory {
                x: vec![],
                u: vec![],
                y: vec![],
                v: vec![],
                noise: side.has_noise.then(|| NoiseRecord { xi: vec![], eta: vec![] }),
            });
        }
        let count = trajectories.len();
        let tr = match trajectories.last_mut() {
            Some(tr) if k + 1 == count && t == tr.y.len() => tr,
            _ => return Err(Error::Parse(format!("line {line}: rows out of order at traj {k}, t {t}"))),
        };
        let mut at = 2;
        let mut next = |w: usize| -> Result<Option<Vec<f64>>> {
            let b = parse_block(&rec, at, w, line);
            at += w;
            b
        };
        let y = next(meta.obs_dim)?;
        let v = next(meta.m)?;
        let x = next(meta.n)?;
        let u = next(meta.m)?;
        let (xi, eta) = if side.has_noise { (next(meta.n)?, next(meta.m)?) } else { (None, None) };
        let missing = || Error::Parse(format!("line {line}: missing state columns"));
        tr.y.push(y.ok_or_else(missing)?);
        tr.x.push(x.ok_or_else(missing)?);
        let last = t == meta.horizon;
        if last != (u.is_none() && v.is_none()) {
            return Err(Error::Dimension(format!(
                "line {line}: inputs must be present exactly for t < {}",
                meta.horizon
            )));
        }
        if let (Some(u), Some(v)) = (u, v) {
            tr.u.push(u);
            tr.v.push(v);
        }
        if let Some(nr) = tr.noise.as_mut() {
            nr.xi.push(xi.ok_or_else(missing)?);
            if let Some(e) = eta {
                nr.eta.push(e);
            }
        }
    }
    let ds = TrajectoryDataset { trajectories, meta };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct MatrixSidecar {
    format: String,
    version: u32,
    kind: String,
    rows: usize,
    cols: usize,
    count: usize,
}

/// Stores equally shaped matrices as rows `matrix,row,c_0..c_{k-1}`.
pub fn write_matrices(path: &Path, kind: &str, mats: &[Mat]) -> Result<()> {
    let (rows, cols) = mats.first().map_or((0, 0), Mat::shape);
    if mats.iter().any(|m| m.shape() != (rows, cols)) {
        return Err(Error::Dimension("matrices in one file must share a shape".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["matrix".to_string(), "row".to_string()];
    head.extend((0..cols).map(|j| format!("c_{j}")));
    w.write_record(&head)?;
    for (k, m) in mats.iter().enumerate() {
        for i in 0..rows {
            let mut rec = vec![k.to_string(), i.to_string()];
            rec.extend(m.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let side = MatrixSidecar {
        format: MATRIX_FORMAT.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        rows,
        cols,
        count: mats.len(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Reads matrices written by [`write_matrices`], checking the kind tag.
pub fn read_matrices(path: &Path, kind: &str) -> Result<Vec<Mat>> {
    let side: MatrixSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if side.format != MATRIX_FORMAT || side.version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported matrix format {} v{}", side.format, side.version)));
    }
    if side.kind != kind {
        return Err(Error::Parse(format!("expected {kind} file, found {}", side.kind)));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.len() != side.cols + 2 {
        return Err(Error::Dimension(format!(
            "matrix CSV has {} value columns, metadata says {}",
            rdr.headers()?.len().saturating_sub(2),
            side.cols
        )));
    }
    let mut data = Vec::with_capacity(side.count * side.rows * side.cols);
    let mut n_rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for c in rec.iter().skip(2) {
            data.push(c.parse::<f64>().map_err(|_| Error::Parse(format!("cannot read {c:?} as a number")))?);
        }
        n_rows += 1;
    }
    if n_rows != side.count * side.rows {
        return Err(Error::Dimension(format!(
            "expected {} rows for {} matrices of {}x{}, found {n_rows}",
            side.count * side.rows,
            side.count,
            side.rows,
            side.cols
        )));
    }
    let per = side.rows * side.cols;
    (0..side.count)
        .map(|k| Ok(Mat::from_vec(side.rows, side.cols, data[k * per..(k + 1) * per].to_vec())))
        .collect()
}

pub fn write_gain(path: &Path, gain: &FeedbackGain) -> Result<()> {
    write_matrices(path, "gain", std::slice::from_ref(gain.matrix()))
}

pub fn read_gain(path: &Path) -> Result<FeedbackGain> {
    let mut mats = read_matrices(path, "gain")?;
    if mats.len() != 1 {
        return Err(Error::Dimension(format!("gain file holds {} matrices", mats.len())));
    }
    Ok(FeedbackGain::new(mats.pop().unwrap()))
}

/// Stores `G_1..G_H` (the identity `G_0` is implied).
pub fn write_predictors(path: &Path, preds: &PredictorSetLinear) -> Result<()> {
    write_matrices(path, "predictors", preds.matrices())
}

pub fn read_predictors(path: &Path) -> Result<PredictorSetLinear> {
    PredictorSetLinear::new(read_matrices(path, "predictors")?)
}
