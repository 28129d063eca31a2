//! CSV files for learning curves, compression points and analysis results.
//! Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::analysis::{CompressionPoint, ConvergenceRow, ErrorStats, Frontier, TargetCrossing};
use crate::error::{Error, Result};
use crate::train::CurvePoint;

pub const CURVE_HEADER: [&str; 6] = ["step", "flops", "seconds", "val_loss", "val_ppl", "lr"];
pub const FRONTIER_HEADER: [&str; 5] = ["label", "memory_bits", "nonzero_params", "accuracy", "on_frontier"];
pub const ERROR_STATS_HEADER: [&str; 4] = ["group", "mean", "variance", "count"];
pub const SWEEP_HEADER: [&str; 4] = ["label", "steps_to_target", "flops_to_target", "seconds_to_target"];
pub const CONVERGENCE_HEADER: [&str; 5] = ["fraction", "bits", "acc_full", "acc_quantized", "drop"];
/// Marks a target the run never reached.
pub const UNREACHED: &str = "unreached";

fn writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

fn finish<W: Write>(w: csv::Writer<W>) -> Result<W> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn reader<R: Read>(input: R, required: &[&str]) -> Result<(csv::Reader<R>, Vec<usize>, csv::StringRecord)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    let idx = required
        .iter()
        .map(|&h| {
            header
                .iter()
                .position(|c| c == h)
                .ok_or_else(|| Error::Csv(format!("missing column `{h}`")))
        })
        .collect::<Result<_>>()?;
    Ok((r, idx, header))
}

fn field<V: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, row: usize) -> Result<V> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Csv(format!("row {row}: column `{name}` has invalid value `{raw}`")))
}

pub fn write_curve<W: Write>(out: W, points: &[CurvePoint], header: bool) -> Result<W> {
    let mut w = if header {
        writer(out, &CURVE_HEADER)?
    } else {
        csv::WriterBuilder::new().has_headers(false).from_writer(out)
    };
    for p in points {
        w.write_record([
            p.step.to_string(),
            p.flops.to_string(),
            p.seconds.to_string(),
            p.val_loss.to_string(),
            p.val_ppl.to_string(),
            p.lr.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    write_file(path.as_ref(), write_curve(Vec::new(), points, true)?)
}

/// Appends rows to an existing curve file, creating it with a header when
/// missing.
pub fn append_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    let exists = path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    write_curve(file, points, !exists)?;
    Ok(())
}

pub fn read_curve<R: Read>(input: R) -> Result<Vec<CurvePoint>> {
    let (mut r, idx, _) = reader(input, &CURVE_HEADER)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        out.push(CurvePoint {
            step: field(&rec, idx[0], "step", row)?,
            flops: field(&rec, idx[1], "flops", row)?,
            seconds: field(&rec, idx[2], "seconds", row)?,
            val_loss: field(&rec, idx[3], "val_loss", row)?,
            val_ppl: field(&rec, idx[4], "val_ppl", row)?,
            lr: field(&rec, idx[5], "lr", row)?,
        });
    }
    Ok(out)
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    read_curve(std::fs::File::open(path)?)
}

/// Compression points with their metadata keys as extra columns, in the
/// order the keys first appear.
pub fn write_points<W: Write>(out: W, points: &[CompressionPoint]) -> Result<W> {
    let mut extra: Vec<&str> = Vec::new();
    for p in points {
        for k in p.metadata.keys() {
            if !extra.contains(&k.as_str()) {
                extra.push(k);
            }
        }
    }
    let mut header = vec!["label", "memory_bits", "nonzero_params", "accuracy"];
    header.extend(&extra);
    let mut w = writer(out, &header)?;
    for p in points {
        let mut rec = vec![
            p.label.clone(),
            p.memory_bits.to_string(),
            p.nonzero_params.to_string(),
            p.accuracy.to_string(),
        ];
        rec.extend(extra.iter().map(|k| p.metadata.get(*k).cloned().unwrap_or_default()));
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn write_points_csv(path: impl AsRef<Path>, points: &[CompressionPoint]) -> Result<()> {
    write_file(path.as_ref(), write_points(Vec::new(), points)?)
}

/// Reads compression points; columns other than the four core ones land in
/// `metadata`.
pub fn read_points<R: Read>(input: R) -> Result<Vec<CompressionPoint>> {
    let core = ["label", "memory_bits", "nonzero_params", "accuracy"];
    let (mut r, idx, header) = reader(input, &core)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let metadata: BTreeMap<String, String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| !idx.contains(i))
            .map(|(i, h)| (h.to_string(), rec.get(i).unwrap_or("").to_string()))
            .collect();
        out.push(CompressionPoint {
            label: rec.get(idx[0]).unwrap_or("").to_string(),
            memory_bits: field(&rec, idx[1], "memory_bits", row)?,
            nonzero_params: field(&rec, idx[2], "nonzero_params", row)?,
            accuracy: field(&rec, idx[3], "accuracy", row)?,
            metadata,
        });
    }
    Ok(out)
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<CompressionPoint>> {
    read_points(std::fs::File::open(path)?)
}

/// Every point, frontier first (by memory), then dominated points in their
/// input order.
pub fn write_frontier<W: Write>(out: W, frontier: &Frontier) -> Result<W> {
    let mut w = writer(out, &FRONTIER_HEADER)?;
    let rows = frontier
        .frontier
        .iter()
        .map(|p| (p, true))
        .chain(frontier.dominated.iter().map(|p| (p, false)));
    for (p, on) in rows {
        w.write_record([
            p.label.clone(),
            p.memory_bits.to_string(),
            p.nonzero_params.to_string(),
            p.accuracy.to_string(),
            on.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_frontier_csv(path: impl AsRef<Path>, frontier: &Frontier) -> Result<()> {
    write_file(path.as_ref(), write_frontier(Vec::new(), frontier)?)
}

pub fn write_error_stats<W: Write>(out: W, stats: &[ErrorStats]) -> Result<W> {
    let mut w = writer(out, &ERROR_STATS_HEADER)?;
    for s in stats {
        w.write_record([
            s.group.clone(),
            s.mean.to_string(),
            s.variance.to_string(),
            s.count.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_error_stats_csv(path: impl AsRef<Path>, stats: &[ErrorStats]) -> Result<()> {
    write_file(path.as_ref(), write_error_stats(Vec::new(), stats)?)
}

pub fn write_sweep<W: Write>(out: W, rows: &[TargetCrossing]) -> Result<W> {
    let mut w = writer(out, &SWEEP_HEADER)?;
    let cell = |v: Option<f64>| v.map_or_else(|| UNREACHED.to_string(), |x| x.to_string());
    for r in rows {
        w.write_record([r.label.clone(), cell(r.steps), cell(r.flops), cell(r.seconds)])?;
    }
    finish(w)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[TargetCrossing]) -> Result<()> {
    write_file(path.as_ref(), write_sweep(Vec::new(), rows)?)
}

pub fn write_convergence<W: Write>(out: W, rows: &[ConvergenceRow]) -> Result<W> {
    let mut w = writer(out, &CONVERGENCE_HEADER)?;
    for r in rows {
        w.write_record([
            r.fraction.to_string(),
            r.bits.to_string(),
            r.acc_full.to_string(),
            r.acc_quantized.to_string(),
            r.drop.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_convergence_csv(path: impl AsRef<Path>, rows: &[ConvergenceRow]) -> Result<()> {
    write_file(path.as_ref(), write_convergence(Vec::new(), rows)?)
}

/// Writes a header and string rows; for ad-hoc experiment summaries.
pub fn write_table_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(Vec::new(), header)?;
    for r in rows {
        w.write_record(r)?;
    }
    write_file(path.as_ref(), finish(w)?)
}
