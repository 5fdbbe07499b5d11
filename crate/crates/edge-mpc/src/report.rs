//! Per-step run logs, their aggregate summary, and the CSV/JSON export.
//!
//! The CSV schema is a fixed-order contract:
//!
//! ```text
//! t,px,py,pz,vx,vy,vz,phi,theta,
//! ref_px,ref_py,ref_pz,ref_vx,ref_vy,ref_vz,ref_phi,ref_theta,
//! u_thrust,u_phi_d,u_theta_d,flagged,error,in_tol,
//! d1,exec,downlink,d2,d3,solve_ms
//! ```
//!
//! Ticks on which the controller produced no command leave the last six
//! columns empty. Floats are written in shortest round-trip form, so
//! re-importing a CSV reproduces every value bit-exactly and the recomputed
//! summary matches the one written at run time byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

/// Fraction of solver-flagged steps above which a run is marked failed.
pub const MAX_FLAGGED_FRACTION: f64 = 0.10;

pub const CSV_HEADER: &str = "t,px,py,pz,vx,vy,vz,phi,theta,ref_px,ref_py,ref_pz,ref_vx,ref_vy,ref_vz,ref_phi,ref_theta,u_thrust,u_phi_d,u_theta_d,flagged,error,in_tol,d1,exec,downlink,d2,d3,solve_ms";

const CSV_COLUMNS: usize = 29;

/// Delay decomposition plus solve time for the command produced on a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLedger {
    pub d1: f64,
    pub exec: f64,
    pub downlink: f64,
    pub d2: f64,
    pub d3: f64,
    /// Controller solve time, milliseconds.
    pub solve_ms: f64,
}

/// One control-loop tick.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    /// Tick time, an exact multiple of the sampling time.
    pub t: f64,
    pub state: [f64; STATE_DIM],
    pub reference: [f64; STATE_DIM],
    pub input: [f64; INPUT_DIM],
    /// Solver failed on this tick; the plant held the previous command.
    pub flagged: bool,
    /// Euclidean position error against the reference, m.
    pub error: f64,
    pub in_tolerance: bool,
    /// Present exactly when the controller consumed a state this tick.
    pub ledger: Option<StepLedger>,
}

/// Full log of one closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub rows: Vec<StepRow>,
    /// Euclidean error tolerance used for the in-tolerance flags, m.
    pub tolerance: f64,
    /// Initial window excluded from tolerance accounting, s.
    pub transient_s: f64,
    /// The run ended early (lost connection).
    pub aborted: bool,
    /// Timestamps came from wall clocks rather than the simulated clock;
    /// one-way delay figures are then sensitive to clock skew.
    pub wall_clock: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub avg: f64,
    pub max: f64,
}

/// Average and maximum per delay column, over the steps that produced a
/// command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DelaySummary {
    /// Number of steps carrying a ledger entry.
    pub solves: usize,
    pub d1: ColumnStats,
    pub exec: ColumnStats,
    pub downlink: ColumnStats,
    pub d2: ColumnStats,
    pub d3: ColumnStats,
    pub solve_ms: ColumnStats,
}

/// Aggregates recomputable from the rows alone (plus the tolerance and
/// transient settings echoed for context).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub error_mean: f64,
    pub error_max: f64,
    pub pct_in_tolerance: f64,
    pub pct_in_tolerance_after_transient: f64,
    pub transient_s: f64,
    pub tolerance: f64,
    pub flagged_steps: usize,
    pub failed: bool,
    pub delays: DelaySummary,
}

impl RunReport {
    pub fn new(tolerance: f64, transient_s: f64) -> Self {
        Self {
            rows: Vec::new(),
            tolerance,
            transient_s,
            aborted: false,
            wall_clock: false,
        }
    }

    pub fn summary(&self) -> RunSummary {
        let steps = self.rows.len();
        let mut error_sum = 0.0;
        let mut error_max = 0.0f64;
        let mut in_tol = 0usize;
        let mut post_total = 0usize;
        let mut post_in_tol = 0usize;
        let mut flagged = 0usize;
        for row in &self.rows {
            error_sum += row.error;
            error_max = error_max.max(row.error);
            if row.in_tolerance {
                in_tol += 1;
            }
            if row.t >= self.transient_s {
                post_total += 1;
                if row.in_tolerance {
                    post_in_tol += 1;
                }
            }
            if row.flagged {
                flagged += 1;
            }
        }
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        RunSummary {
            steps,
            error_mean: if steps == 0 { 0.0 } else { error_sum / steps as f64 },
            error_max,
            pct_in_tolerance: pct(in_tol, steps),
            pct_in_tolerance_after_transient: pct(post_in_tol, post_total),
            transient_s: self.transient_s,
            tolerance: self.tolerance,
            flagged_steps: flagged,
            failed: steps > 0 && (flagged as f64) > MAX_FLAGGED_FRACTION * steps as f64,
            delays: self.delay_summary(),
        }
    }

    fn delay_summary(&self) -> DelaySummary {
        let mut out = DelaySummary::default();
        let mut sums = [0.0f64; 6];
        let mut maxs = [0.0f64; 6];
        for row in &self.rows {
            if let Some(l) = &row.ledger {
                out.solves += 1;
                for (i, v) in [l.d1, l.exec, l.downlink, l.d2, l.d3, l.solve_ms]
                    .into_iter()
                    .enumerate()
                {
                    sums[i] += v;
                    maxs[i] = maxs[i].max(v);
                }
            }
        }
        if out.solves > 0 {
            let n = out.solves as f64;
            let stat = |i: usize| ColumnStats {
                avg: sums[i] / n,
                max: maxs[i],
            };
            out.d1 = stat(0);
            out.exec = stat(1);
            out.downlink = stat(2);
            out.d2 = stat(3);
            out.d3 = stat(4);
            out.solve_ms = stat(5);
        }
        out
    }

    /// Delay statistics over the run. Errors on an empty report.
    pub fn delay_stats(&self) -> Result<DelaySummary> {
        if self.rows.is_empty() {
            return Err(Error::invalid("delay_stats: empty report"));
        }
        Ok(self.delay_summary())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let mut fields: Vec<String> = Vec::with_capacity(CSV_COLUMNS);
            fields.push(fmt_f64(row.t));
            fields.extend(row.state.iter().map(|v| fmt_f64(*v)));
            fields.extend(row.reference.iter().map(|v| fmt_f64(*v)));
            fields.extend(row.input.iter().map(|v| fmt_f64(*v)));
            fields.push(if row.flagged { "1" } else { "0" }.to_string());
            fields.push(fmt_f64(row.error));
            fields.push(if row.in_tolerance { "1" } else { "0" }.to_string());
            match &row.ledger {
                Some(l) => {
                    for v in [l.d1, l.exec, l.downlink, l.d2, l.d3, l.solve_ms] {
                        fields.push(fmt_f64(v));
                    }
                }
                None => fields.extend(std::iter::repeat(String::new()).take(6)),
            }
            debug_assert_eq!(fields.len(), CSV_COLUMNS);
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Parse a CSV produced by [`Self::to_csv_string`]. The header must match
    /// the documented schema exactly.
    pub fn from_csv_str(text: &str, tolerance: f64, transient_s: f64) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            Some(h) => {
                return Err(Error::invalid(format!(
                    "csv schema mismatch: expected header `{CSV_HEADER}`, got `{h}`"
                )))
            }
            None => return Err(Error::invalid("csv schema mismatch: empty file")),
        }
        let mut report = RunReport::new(tolerance, transient_s);
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != CSV_COLUMNS {
                return Err(Error::invalid(format!(
                    "csv line {}: expected {CSV_COLUMNS} fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i].parse::<f64>().map_err(|_| {
                    Error::invalid(format!(
                        "csv line {}: field {} is not a number: `{}`",
                        lineno + 2,
                        i + 1,
                        fields[i]
                    ))
                })
            };
            let flag = |i: usize| -> Result<bool> {
                match fields[i] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::invalid(format!(
                        "csv line {}: field {} is not a 0/1 flag: `{}`",
                        lineno + 2,
                        i + 1,
                        other
                    ))),
                }
            };
            let mut state = [0.0; STATE_DIM];
            let mut reference = [0.0; STATE_DIM];
            let mut input = [0.0; INPUT_DIM];
            for i in 0..STATE_DIM {
                state[i] = num(1 + i)?;
                reference[i] = num(9 + i)?;
            }
            for i in 0..INPUT_DIM {
                input[i] = num(17 + i)?;
            }
            let ledger_fields = &fields[23..29];
            let ledger = if ledger_fields.iter().all(|f| f.is_empty()) {
                None
            } else if ledger_fields.iter().all(|f| !f.is_empty()) {
                Some(StepLedger {
                    d1: num(23)?,
                    exec: num(24)?,
                    downlink: num(25)?,
                    d2: num(26)?,
                    d3: num(27)?,
                    solve_ms: num(28)?,
                })
            } else {
                return Err(Error::invalid(format!(
                    "csv line {}: partially filled ledger columns",
                    lineno + 2
                )));
            };
            report.rows.push(StepRow {
                t: num(0)?,
                state,
                reference,
                input,
                flagged: flag(20)?,
                error: num(21)?,
                in_tolerance: flag(22)?,
                ledger,
            });
        }
        Ok(report)
    }

    /// Write `run.csv` and `summary.json` into `dir`, creating it if needed.
    /// Returns the two paths.
    pub fn export(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join("run.csv");
        let json_path = dir.join("summary.json");
        fs::write(&csv_path, self.to_csv_string())?;
        fs::write(&json_path, summary_json(&self.summary()))?;
        Ok((csv_path, json_path))
    }
}

/// Shortest round-trip decimal form; parsing it back yields the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// The canonical JSON rendering of a summary, shared by the exporter and the
/// `report` subcommand so the two outputs are byte-identical.
pub fn summary_json(summary: &RunSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(t: f64, with_ledger: bool) -> StepRow {
        StepRow {
            t,
            state: [0.1, 0.2, 2.0, 0.0, 0.8, 0.0, 0.01, -0.02],
            reference: [0.0, 0.25, 2.0, 0.0, 0.8, 0.0, 0.0, 0.0],
            input: [9.81, 0.01, -0.01],
            flagged: false,
            error: 0.111803398875,
            in_tolerance: true,
            ledger: with_ledger.then_some(StepLedger {
                d1: 0.0089,
                exec: 0.0141,
                downlink: 0.0161,
                d2: 0.023,
                d3: 0.0391,
                solve_ms: 1.5,
            }),
        }
    }

    #[test]
    fn empty_report_exports_header_only() {
        let report = RunReport::new(0.8246211251235321, 3.0);
        let csv = report.to_csv_string();
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
        let s = report.summary();
        assert_eq!(s.steps, 0);
        assert_eq!(s.error_mean, 0.0);
        assert!(!s.failed);
        assert!(report.delay_stats().is_err());
    }

    #[test]
    fn csv_roundtrip_reproduces_summary() {
        let mut report = RunReport::new(0.8246211251235321, 3.0);
        for k in 0..200 {
            let mut row = sample_row(k as f64 * 0.02, k % 3 != 0);
            row.error = 0.05 + (k as f64) * 1e-4;
            row.in_tolerance = row.error <= report.tolerance;
            report.rows.push(row);
        }
        let csv = report.to_csv_string();
        let re = RunReport::from_csv_str(&csv, report.tolerance, report.transient_s).unwrap();
        assert_eq!(re.rows, report.rows);
        assert_eq!(summary_json(&re.summary()), summary_json(&report.summary()));
    }

    #[test]
    fn shuffled_columns_rejected() {
        let bad = CSV_HEADER.replace("t,px", "px,t");
        assert!(RunReport::from_csv_str(&bad, 0.8, 3.0).is_err());
        assert!(RunReport::from_csv_str("", 0.8, 3.0).is_err());
    }

    #[test]
    fn short_rows_rejected() {
        let text = format!("{CSV_HEADER}\n1.0,2.0\n");
        assert!(RunReport::from_csv_str(&text, 0.8, 3.0).is_err());
    }

    #[test]
    fn partial_ledger_rejected() {
        let mut report = RunReport::new(0.8, 3.0);
        report.rows.push(sample_row(0.0, true));
        let csv = report.to_csv_string();
        // Blank out just one of the six ledger fields.
        let line = csv.lines().nth(1).unwrap();
        let mut fields: Vec<&str> = line.split(',').collect();
        fields[24] = "";
        let tampered = format!("{CSV_HEADER}\n{}\n", fields.join(","));
        assert!(RunReport::from_csv_str(&tampered, 0.8, 3.0).is_err());
    }

    #[test]
    fn delay_stats_arithmetic() {
        let mut report = RunReport::new(0.8, 0.0);
        let mut row_a = sample_row(0.0, true);
        row_a.ledger = Some(StepLedger {
            d1: 0.01,
            exec: 0.0,
            downlink: 0.0,
            d2: 0.01,
            d3: 0.01,
            solve_ms: 1.0,
        });
        let mut row_b = sample_row(0.02, true);
        row_b.ledger = Some(StepLedger {
            d1: 0.03,
            exec: 0.0,
            downlink: 0.0,
            d2: 0.03,
            d3: 0.03,
            solve_ms: 2.0,
        });
        report.rows.push(row_a);
        report.rows.push(row_b);
        let stats = report.delay_stats().unwrap();
        assert_eq!(stats.solves, 2);
        assert!((stats.d1.avg - 0.02).abs() < 1e-15);
        assert_eq!(stats.d1.max, 0.03);
        assert!((stats.solve_ms.avg - 1.5).abs() < 1e-15);
    }

    #[test]
    fn all_zero_delays_give_zero_stats() {
        let mut report = RunReport::new(0.8, 0.0);
        let mut row = sample_row(0.0, true);
        row.ledger = Some(StepLedger {
            d1: 0.0,
            exec: 0.0,
            downlink: 0.0,
            d2: 0.0,
            d3: 0.0,
            solve_ms: 0.0,
        });
        report.rows.push(row);
        let stats = report.delay_stats().unwrap();
        assert_eq!(stats.d1.avg, 0.0);
        assert_eq!(stats.d3.max, 0.0);
    }

    #[test]
    fn failure_threshold_is_ten_percent() {
        let mut report = RunReport::new(0.8, 0.0);
        for k in 0..100 {
            let mut row = sample_row(k as f64 * 0.02, false);
            row.flagged = k < 10;
            report.rows.push(row);
        }
        assert!(!report.summary().failed, "exactly 10% is still a pass");
        report.rows[10].flagged = true;
        assert!(report.summary().failed, "11% must fail");
    }

    #[test]
    fn transient_exclusion_window() {
        let mut report = RunReport::new(0.8, 3.0);
        for k in 0..300 {
            let t = k as f64 * 0.02; // 6 s total, transient covers the first half
            let mut row = sample_row(t, false);
            row.in_tolerance = t >= 3.0;
            report.rows.push(row);
        }
        let s = report.summary();
        assert!((s.pct_in_tolerance - 50.0).abs() < 1e-9);
        assert_eq!(s.pct_in_tolerance_after_transient, 100.0);
    }

    #[test]
    fn exported_files_land_in_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = RunReport::new(0.8, 3.0);
        report.rows.push(sample_row(0.0, true));
        let (csv_path, json_path) = report.export(dir.path()).unwrap();
        assert!(csv_path.exists());
        assert!(json_path.exists());
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let re = RunReport::from_csv_str(&text, 0.8, 3.0).unwrap();
        assert_eq!(re.rows, report.rows);
        let json = std::fs::read_to_string(&json_path).unwrap();
        assert_eq!(json, summary_json(&report.summary()));
    }
}
