//! Metrics emission: an append-only CSV with a single header line, one
//! row per training/search event, plus an optional per-candidate CSV from
//! the bit-allocation search. Fields that do not apply to a phase hold
//! the literal `nan`.

use crate::bitalloc::CandidateEval;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

pub const METRICS_HEADER: &str = "phase,round,index,objective,accuracy,h1_mb,h2,sigma,wall_time_s";
pub const CANDIDATES_HEADER: &str = "round,step,eval,loss,h1_mb,h2,objective,v,bits_w,bits_x";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    Pretrain,
    GfStep,
    GbEpoch,
    Eval,
}

impl PhaseTag {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseTag::Pretrain => "pretrain",
            PhaseTag::GfStep => "gf-step",
            PhaseTag::GbEpoch => "gb-epoch",
            PhaseTag::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<PhaseTag> {
        match s {
            "pretrain" => Ok(PhaseTag::Pretrain),
            "gf-step" => Ok(PhaseTag::GfStep),
            "gb-epoch" => Ok(PhaseTag::GbEpoch),
            "eval" => Ok(PhaseTag::Eval),
            other => Err(Error::Value(format!("unknown phase tag {other:?}"))),
        }
    }
}

/// One metrics row. `objective` carries the loss for training phases and
/// the penalty objective for search/eval phases.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub phase: PhaseTag,
    pub round: u64,
    pub index: u64,
    pub objective: f64,
    pub accuracy: f64,
    pub h1_mb: f64,
    pub h2: f64,
    pub sigma: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn new(phase: PhaseTag, round: u64, index: u64) -> MetricsRow {
        MetricsRow {
            phase,
            round,
            index,
            objective: f64::NAN,
            accuracy: f64::NAN,
            h1_mb: f64::NAN,
            h2: f64::NAN,
            sigma: f64::NAN,
            wall_time_s: f64::NAN,
        }
    }
}

fn fmt_field(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.9e}")
    }
}

/// Receiver for metrics rows and per-candidate records.
pub trait MetricsSink {
    fn metrics_row(&mut self, row: &MetricsRow) -> Result<()>;
    fn candidate(&mut self, round: u64, step: u64, eval_idx: u64, e: &CandidateEval)
        -> Result<()>;
}

/// Swallows everything; for library use without files.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn metrics_row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn candidate(&mut self, _: u64, _: u64, _: u64, _: &CandidateEval) -> Result<()> {
        Ok(())
    }
}

/// Accumulates rows in memory; used by tests.
#[derive(Default)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
    pub candidates: Vec<(u64, u64, u64, CandidateEval)>,
}

impl MetricsSink for MemorySink {
    fn metrics_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
    fn candidate(&mut self, round: u64, step: u64, eval_idx: u64, e: &CandidateEval) -> Result<()> {
        self.candidates.push((round, step, eval_idx, e.clone()));
        Ok(())
    }
}

/// Writes `metrics.csv` (and `candidates.csv`) under the run directory.
/// The first line echoes the resolved config (newlines escaped) so the
/// report command can recover run parameters; the second line is the
/// column header.
pub struct FileSink {
    metrics: BufWriter<File>,
    candidates: BufWriter<File>,
    start: Instant,
}

impl FileSink {
    pub fn create(dir: &Path, config_echo: &str, append: bool) -> Result<FileSink> {
        std::fs::create_dir_all(dir)?;
        let metrics_path = dir.join("metrics.csv");
        let fresh = !append || !metrics_path.exists();
        let mut metrics = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)?,
        );
        let mut candidates = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("candidates.csv"))?,
        );
        if fresh {
            writeln!(metrics, "# config={}", escape_echo(config_echo))?;
            writeln!(metrics, "{METRICS_HEADER}")?;
            writeln!(candidates, "{CANDIDATES_HEADER}")?;
        }
        Ok(FileSink {
            metrics,
            candidates,
            start: Instant::now(),
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.candidates.flush()?;
        Ok(())
    }
}

fn escape_echo(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_echo(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl MetricsSink for FileSink {
    fn metrics_row(&mut self, row: &MetricsRow) -> Result<()> {
        let wall = if row.wall_time_s.is_nan() {
            self.start.elapsed().as_secs_f64()
        } else {
            row.wall_time_s
        };
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{},{},{}",
            row.phase.name(),
            row.round,
            row.index,
            fmt_field(row.objective),
            fmt_field(row.accuracy),
            fmt_field(row.h1_mb),
            fmt_field(row.h2),
            fmt_field(row.sigma),
            fmt_field(wall),
        )?;
        Ok(())
    }

    fn candidate(&mut self, round: u64, step: u64, eval_idx: u64, e: &CandidateEval) -> Result<()> {
        let mut v = String::new();
        for (i, x) in e.v.iter().enumerate() {
            if i > 0 {
                v.push(';');
            }
            let _ = write!(v, "{x:.6}");
        }
        let bits = |b: &[u32]| {
            b.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(
            self.candidates,
            "{round},{step},{eval_idx},{},{},{},{},{v},{},{}",
            fmt_field(e.loss),
            fmt_field(e.h1_mb),
            fmt_field(e.h2),
            fmt_field(e.objective),
            bits(&e.r_w),
            bits(&e.r_x),
        )?;
        Ok(())
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Parsed metrics file: the config echo (if present) plus all rows.
#[derive(Debug)]
pub struct MetricsFile {
    pub config_echo: Option<String>,
    pub rows: Vec<MetricsRow>,
}

/// Reads a metrics CSV, validating structure. Errors carry 1-based line
/// numbers.
pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut config_echo = None;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(echo) = line.strip_prefix("# config=") {
            config_echo = Some(unescape_echo(echo));
            continue;
        }
        if !saw_header {
            if line != METRICS_HEADER {
                return Err(Error::Value(format!(
                    "line {line_no}: expected header {METRICS_HEADER:?}, got {line:?}"
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Value(format!(
                "line {line_no}: expected 9 fields, got {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            let f = fields[i];
            if f == "nan" {
                return Ok(f64::NAN);
            }
            f.parse::<f64>()
                .map_err(|_| Error::Value(format!("line {line_no}: bad number {f:?}")))
        };
        let int = |i: usize| -> Result<u64> {
            fields[i]
                .parse::<u64>()
                .map_err(|_| Error::Value(format!("line {line_no}: bad integer {:?}", fields[i])))
        };
        rows.push(MetricsRow {
            phase: PhaseTag::parse(fields[0])
                .map_err(|e| Error::Value(format!("line {line_no}: {e}")))?,
            round: int(1)?,
            index: int(2)?,
            objective: num(3)?,
            accuracy: num(4)?,
            h1_mb: num(5)?,
            h2: num(6)?,
            sigma: num(7)?,
            wall_time_s: num(8)?,
        });
    }
    if !saw_header {
        return Err(Error::Value("metrics file has no header line".into()));
    }
    Ok(MetricsFile { config_echo, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_sink_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut sink = FileSink::create(dir.path(), "seed = 7\n[dataset]\n", false).unwrap();
            let mut row = MetricsRow::new(PhaseTag::Pretrain, 0, 0);
            row.objective = 1.5;
            row.accuracy = 0.25;
            sink.metrics_row(&row).unwrap();
            let mut row2 = MetricsRow::new(PhaseTag::GfStep, 1, 0);
            row2.objective = 0.75;
            row2.sigma = 0.5;
            sink.metrics_row(&row2).unwrap();
        }
        let parsed = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.config_echo.as_deref(), Some("seed = 7\n[dataset]\n"));
        assert_eq!(parsed.rows[0].phase, PhaseTag::Pretrain);
        assert_eq!(parsed.rows[0].objective, 1.5);
        assert!(parsed.rows[0].h1_mb.is_nan());
        assert_eq!(parsed.rows[1].sigma, 0.5);
        assert!(parsed.rows[1].wall_time_s >= parsed.rows[0].wall_time_s);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(
            &path,
            format!("{METRICS_HEADER}\npretrain,0,0,1.0,nan,nan,nan,nan\n"),
        )
        .unwrap();
        let err = read_metrics(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(
            &path,
            format!("{METRICS_HEADER}\nbadphase,0,0,1.0,nan,nan,nan,nan,0.1\n"),
        )
        .unwrap();
        let err = read_metrics(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn header_only_is_valid_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, format!("{METRICS_HEADER}\n")).unwrap();
        let parsed = read_metrics(&path).unwrap();
        assert!(parsed.rows.is_empty());
        assert!(parsed.config_echo.is_none());
    }
}
