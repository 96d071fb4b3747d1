//! EQ compensation of simulated IRs.
//!
//! For every IR: measure its sub-band EQ, draw a target from the mixture,
//! design the difference filter and apply it without adding delay.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{read_canonical, write_audio, SampleFormat};
use crate::dataset::{output_file_name, Manifest, ManifestEntry};
use crate::eq_model::{sample_eq, EqGmm};
use crate::fir_design::{apply_fir, design_eq_filter};
use crate::seed::{item_rng, item_seed};
use crate::spectral::{extract_subband_eq, ImpulseResponse, SubBandEq};
use crate::Error;

/// Extra design passes that feed the measured EQ error back.
const REFINE_STEPS: usize = 4;
const REFINE_TOL_DB: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationRecord {
    pub ir_id: String,
    pub original_eq: SubBandEq,
    pub target_eq: SubBandEq,
    pub gain_diff: [f64; 8],
    pub achieved_eq: SubBandEq,
    pub seed: u64,
}

/// Compensate one IR. The target is drawn from `item_rng(seed, ir_id)`; the
/// output is `n + 255` samples long.
pub fn compensate_ir(
    ir: &ImpulseResponse,
    model: &EqGmm,
    seed: u64,
) -> Result<(ImpulseResponse, CompensationRecord), Error> {
    let mut rng = item_rng(seed, ir.id());
    let target = sample_eq(model, &mut rng);
    compensate_to(ir, target, seed)
}

/// Compensate towards a fixed target EQ.
pub fn compensate_to(
    ir: &ImpulseResponse,
    target: SubBandEq,
    seed: u64,
) -> Result<(ImpulseResponse, CompensationRecord), Error> {
    let original = extract_subband_eq(ir)?;
    let diff = target.minus(&original);
    // A 511-tap filter spans a whole analysis frame, so its effect on the
    // measured EQ of a long IR is not exactly its effect on a delta. Feed the
    // residual back into the design gains a few times.
    let mut gains = diff;
    let mut out = None;
    for step in 0..=REFINE_STEPS {
        let filter = design_eq_filter(&gains)?;
        if filter.clamped() {
            log::warn!("{}: gain difference clamped", ir.id());
        }
        let candidate = ImpulseResponse::new(ir.id(), apply_fir(ir.buffer(), &filter, true)?)?;
        let achieved = extract_subband_eq(&candidate)?;
        let residual = target.minus(&achieved);
        out = Some((candidate, achieved));
        if step == REFINE_STEPS || residual.iter().all(|r| r.abs() <= REFINE_TOL_DB) {
            break;
        }
        for (g, r) in gains.iter_mut().zip(residual) {
            *g += r;
        }
    }
    let (out, achieved) = out.expect("loop runs at least once");
    let record = CompensationRecord {
        ir_id: ir.id().to_string(),
        original_eq: original,
        target_eq: target,
        gain_diff: diff,
        achieved_eq: achieved,
        seed,
    };
    Ok((out, record))
}

/// Report line: the record plus where the IR went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    #[serde(flatten)]
    pub record: CompensationRecord,
    pub output_path: String,
}

#[derive(Debug, Serialize)]
struct FailureLine<'a> {
    ir_id: &'a str,
    error: &'a str,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub lines: Vec<ReportLine>,
    pub failures: Vec<(String, String)>,
}

impl BatchReport {
    /// One JSON object per manifest entry, in manifest order. Failed items
    /// carry `ir_id` and `error` only.
    pub fn to_jsonl(&self, manifest: &Manifest) -> String {
        let mut ok = self.lines.iter().peekable();
        let mut bad = self.failures.iter().peekable();
        let mut out = String::new();
        for e in manifest.entries() {
            if let Some(l) = ok.next_if(|l| l.record.ir_id == e.id) {
                out.push_str(&serde_json::to_string(l).expect("record serializes"));
            } else if let Some((id, msg)) = bad.next_if(|(id, _)| *id == e.id) {
                let f = FailureLine {
                    ir_id: id,
                    error: msg,
                };
                out.push_str(&serde_json::to_string(&f).expect("failure serializes"));
            } else {
                continue;
            }
            out.push('\n');
        }
        out
    }

    pub fn all_failed(&self) -> bool {
        self.lines.is_empty() && !self.failures.is_empty()
    }

    /// Manifest of the compensated IRs.
    pub fn output_manifest(&self) -> Result<Manifest, Error> {
        let entries = self
            .lines
            .iter()
            .map(|l| {
                ManifestEntry::new(
                    &l.record.ir_id,
                    &l.output_path,
                    crate::dataset::EntryKind::Ir,
                )
            })
            .collect();
        Ok(Manifest::new(entries)?)
    }
}

/// Rayon pool with `workers` threads (0 means available parallelism).
pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Batch(format!("cannot start worker pool: {e}")))
}

fn compensate_entry(
    manifest: &Manifest,
    entry: &ManifestEntry,
    model: &EqGmm,
    master_seed: u64,
    out_dir: &Path,
) -> Result<ReportLine, Error> {
    let buf = read_canonical(manifest.resolve(entry))?;
    let ir = ImpulseResponse::new(&entry.id, buf)?;
    let (out, record) = compensate_ir(&ir, model, item_seed(master_seed, &entry.id))?;
    let path: PathBuf = out_dir.join(output_file_name(&entry.id));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_audio(&path, out.buffer(), SampleFormat::Float32)?;
    Ok(ReportLine {
        record,
        output_path: path.to_string_lossy().into_owned(),
    })
}

/// Compensate every IR in `manifest` into `out_dir` (float32 WAVE).
///
/// Item seeds are `item_seed(master_seed, ir_id)`, so outputs do not depend
/// on `workers`. Failures are logged and kept in the report.
pub fn batch_compensate(
    manifest: &Manifest,
    model: &EqGmm,
    out_dir: &Path,
    master_seed: u64,
    workers: usize,
) -> Result<BatchReport, Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = thread_pool(workers)?;
    let results: Vec<Result<ReportLine, Error>> = pool.install(|| {
        manifest
            .entries()
            .par_iter()
            .map(|e| compensate_entry(manifest, e, model, master_seed, out_dir))
            .collect()
    });
    let mut report = BatchReport {
        lines: Vec::new(),
        failures: Vec::new(),
    };
    for (entry, r) in manifest.entries().iter().zip(results) {
        match r {
            Ok(line) => report.lines.push(line),
            Err(e) => {
                log::error!("{}: {e}", entry.id);
                report.failures.push((entry.id.clone(), e.to_string()));
            }
        }
    }
    Ok(report)
}
