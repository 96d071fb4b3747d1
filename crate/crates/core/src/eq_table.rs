//! EQ tables: one row of eight dB gains per IR, comma separated.
//!
//! ```text
//! id,62.5,125,250,500,1000,2000,4000,8000
//! room-01/mic-3,4.1,2.7,-0.8,0.3,0,-1.2,-3.4,-9.9
//! ```

use std::path::Path;

use rayon::prelude::*;

use crate::audio_io::read_canonical;
use crate::dataset::Manifest;
use crate::spectral::{extract_subband_eq, ImpulseResponse, SubBandEq, EQ_FREQUENCIES_HZ};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct EqRow {
    pub id: String,
    pub eq: SubBandEq,
}

fn header() -> Vec<String> {
    std::iter::once("id".to_string())
        .chain(EQ_FREQUENCIES_HZ.iter().map(|f| f.to_string()))
        .collect()
}

pub fn write_eq_table<W: std::io::Write>(rows: &[EqRow], out: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    let bad = |e: csv::Error| Error::Batch(format!("writing EQ table: {e}"));
    w.write_record(header()).map_err(bad)?;
    for r in rows {
        let mut rec = vec![r.id.clone()];
        rec.extend(r.eq.gains_db().iter().map(|g| g.to_string()));
        w.write_record(&rec).map_err(bad)?;
    }
    w.flush().map_err(|e| Error::io("<eq table>", e))
}

pub fn save_eq_table(rows: &[EqRow], path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_eq_table(rows, std::io::BufWriter::new(f))
}

pub fn read_eq_table<R: std::io::Read>(input: R) -> Result<Vec<EqRow>, Error> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let head = r
        .headers()
        .map_err(|e| Error::Batch(format!("EQ table header: {e}")))?;
    if head.len() != 9 {
        return Err(Error::Batch(format!(
            "EQ table header has {} columns, expected 9",
            head.len()
        )));
    }
    for (i, (col, f)) in head.iter().skip(1).zip(EQ_FREQUENCIES_HZ).enumerate() {
        if col.trim().parse::<f64>().ok() != Some(f) {
            return Err(Error::Batch(format!(
                "EQ table column {} is {col:?}, expected {f}",
                i + 2
            )));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Batch(format!("EQ table: {e}")))?;
        let bad = |detail: String| Error::Batch(format!("EQ table row {}: {detail}", line + 1));
        if rec.len() != 9 {
            return Err(bad(format!("{} columns", rec.len())));
        }
        let mut gains = [0.0; 8];
        for (g, field) in gains.iter_mut().zip(rec.iter().skip(1)) {
            *g = field
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("{field:?} is not a number")))?;
            if !g.is_finite() {
                return Err(bad(format!("{field:?} is not finite")));
            }
        }
        rows.push(EqRow {
            id: rec[0].to_string(),
            eq: SubBandEq::from_absolute(gains),
        });
    }
    Ok(rows)
}

pub fn load_eq_table(path: impl AsRef<Path>) -> Result<Vec<EqRow>, Error> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_eq_table(std::io::BufReader::new(f))
}

/// `(id, error message)` for each item that could not be processed.
pub type Failures = Vec<(String, String)>;

/// Measure the sub-band EQ of every IR in the manifest. Unreadable or silent
/// IRs are logged and returned as failures.
pub fn analyze_manifest(
    manifest: &Manifest,
    workers: usize,
) -> Result<(Vec<EqRow>, Failures), Error> {
    let pool = crate::compensate::thread_pool(workers)?;
    let results: Vec<Result<EqRow, Error>> = pool.install(|| {
        manifest
            .entries()
            .par_iter()
            .map(|e| {
                let ir = ImpulseResponse::new(&e.id, read_canonical(manifest.resolve(e))?)?;
                Ok(EqRow {
                    id: e.id.clone(),
                    eq: extract_subband_eq(&ir)?,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in manifest.entries().iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(err) => {
                log::error!("{}: {err}", e.id);
                failures.push((e.id.clone(), err.to_string()));
            }
        }
    }
    Ok((rows, failures))
}
