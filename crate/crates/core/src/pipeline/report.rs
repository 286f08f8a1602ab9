//! JSON-lines run reports.
//!
//! Every line is one JSON object carrying `"schema"` and `"record"` keys.
//! Record kinds: `config`, `stage`, `subband`, `metric`, and `iteration`
//! (the latter only in the separate trace file).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FusionConfig;
use crate::error::{Error, Result};
use crate::wavelet::Orientation;
use crate::wdst::{IterationRecord, LossTerms, Termination, TransferReport};

pub const REPORT_SCHEMA: u32 = 1;

/// Wall time and notes of one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub notes: Vec<String>,
}

/// One restyled sub-band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubbandTrace {
    /// Plane the band came from (`y`, or `r`/`g`/`b`).
    pub channel: String,
    pub level: usize,
    pub orientation: Orientation,
    pub report: TransferReport,
}

impl SubbandTrace {
    pub fn band(&self) -> String {
        format!("{}{}", self.orientation.name(), self.level)
    }
}

/// Quality numbers for one image. Fields are absent when they do not apply
/// (no ground truth, image too small for SSIM, no external score).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean chi-squared distance between detail-band histograms.
    pub hist_distance: Option<f64>,
    /// What `hist_distance` was measured against (`gt` or `style`).
    pub hist_reference: Option<String>,
    /// Score supplied from outside (e.g. a learned perceptual metric).
    pub external_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    pub config: Option<FusionConfig>,
    pub stages: Vec<StageTiming>,
    pub subbands: Vec<SubbandTrace>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record<'a> {
    Config {
        command: &'a str,
        config: &'a FusionConfig,
    },
    Stage(&'a StageTiming),
    Subband {
        channel: &'a str,
        band: String,
        level: usize,
        orientation: Orientation,
        iterations: usize,
        evaluations: usize,
        termination: Termination,
        warning: &'a Option<String>,
        uphill_steps: usize,
        initial: LossTerms,
        #[serde(rename = "final")]
        final_terms: LossTerms,
        grad_inf: f64,
        seconds: f64,
    },
    Metric(&'a MetricRow),
    Iteration {
        channel: &'a str,
        band: String,
        #[serde(flatten)]
        it: &'a IterationRecord,
    },
}

#[derive(Serialize)]
struct Line<'a> {
    schema: u32,
    #[serde(flatten)]
    record: Record<'a>,
}

fn push(out: &mut String, record: Record<'_>) {
    let line = serde_json::to_string(&Line {
        schema: REPORT_SCHEMA,
        record,
    })
    .expect("report records serialize");
    let _ = writeln!(out, "{line}");
}

impl FusionReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub(crate) fn add_stage(&mut self, stage: &str, seconds: f64, notes: Vec<String>) {
        match self.stages.iter_mut().find(|s| s.stage == stage) {
            Some(s) => {
                s.seconds += seconds;
                s.notes.extend(notes);
            }
            None => self.stages.push(StageTiming {
                stage: stage.into(),
                seconds,
                notes,
            }),
        }
    }

    /// Fills `external_score` for rows whose image name appears in `scores`.
    pub fn attach_external_scores(&mut self, scores: &BTreeMap<String, f64>) {
        for row in &mut self.metrics {
            if let Some(s) = scores.get(&row.image) {
                row.external_score = Some(*s);
            }
        }
    }

    /// Config, stage, sub-band and metric records, one per line.
    pub fn to_jsonl(&self, command: &str) -> String {
        let mut out = String::new();
        if let Some(cfg) = &self.config {
            push(
                &mut out,
                Record::Config {
                    command,
                    config: cfg,
                },
            );
        }
        for s in &self.stages {
            push(&mut out, Record::Stage(s));
        }
        for t in &self.subbands {
            let r = &t.report;
            push(
                &mut out,
                Record::Subband {
                    channel: &t.channel,
                    band: t.band(),
                    level: t.level,
                    orientation: t.orientation,
                    iterations: r.iterations,
                    evaluations: r.evaluations,
                    termination: r.termination,
                    warning: &r.warning,
                    uphill_steps: r.uphill_steps,
                    initial: r.initial,
                    final_terms: r.final_terms,
                    grad_inf: r.grad_inf,
                    seconds: r.seconds,
                },
            );
        }
        for m in &self.metrics {
            push(&mut out, Record::Metric(m));
        }
        out
    }

    /// Per-iteration optimizer records for every sub-band.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.subbands {
            for it in &t.report.history {
                push(
                    &mut out,
                    Record::Iteration {
                        channel: &t.channel,
                        band: t.band(),
                        it,
                    },
                );
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>, command: &str) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl(command)).map_err(|e| Error::io(path, e))
    }

    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.trace_jsonl()).map_err(|e| Error::io(path, e))
    }
}
