//! Trace files: one estimator run as CSV with a `#`-prefixed JSON header
//! line, or as JSON lines (header object first, then one object per row).
//!
//! Numbers are written in Rust's shortest round-trip form, so parsing a
//! written file gives back the same bits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::EstimateTrace;
use crate::groundtruth::{ErrorSeries, StateBlock};
use crate::statmath::{packed_len, CovMatrix};

pub const TRACE_SCHEMA: &str = "covcal-trace";
pub const TRACE_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    /// State dimension.
    pub n: usize,
    /// Measurement dimension (0 when unknown).
    pub m: usize,
    pub dt: f64,
    #[serde(default)]
    pub blocks: Vec<StateBlock>,
    /// Whether `x_hat` carries the estimator state (usable as a network
    /// input) rather than placeholder values.
    #[serde(default = "default_true")]
    pub state_features: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TraceHeader {
    pub fn new(n: usize, m: usize, dt: f64) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            n,
            m,
            dt,
            blocks: Vec::new(),
            state_features: true,
            system: None,
            sequence: None,
            run: None,
            seed: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.schema != TRACE_SCHEMA {
            return Err(Error::invalid(format!(
                "unknown trace schema {:?}",
                self.schema
            )));
        }
        if self.version != TRACE_VERSION {
            return Err(Error::invalid(format!(
                "unsupported trace version {}",
                self.version
            )));
        }
        if self.n == 0 {
            return Err(Error::invalid("trace state dimension must be positive"));
        }
        StateBlock::validate_all(&self.blocks, self.n)
    }

    /// Number of values in a row.
    pub fn row_width(&self) -> usize {
        2 + 2 * self.n + packed_len(self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub t: f64,
    pub x_true: Vec<f64>,
    pub x_hat: Vec<f64>,
    /// Upper triangle of `P̂`, row by row.
    pub p_hat: Vec<f64>,
}

impl TraceRow {
    pub fn covariance(&self, n: usize) -> Result<CovMatrix> {
        CovMatrix::from_upper(n, self.p_hat.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub rows: Vec<TraceRow>,
}

impl TraceFile {
    pub fn new(header: TraceHeader, rows: Vec<TraceRow>) -> Result<Self> {
        let t = Self { header, rows };
        t.validate()?;
        Ok(t)
    }

    pub fn from_estimate(trace: &EstimateTrace, m: usize) -> Result<Self> {
        let n = trace
            .records
            .first()
            .ok_or(Error::EmptyInput("estimate trace"))?
            .x_hat
            .len();
        let rows = trace
            .records
            .iter()
            .map(|r| TraceRow {
                k: r.k,
                t: r.t,
                x_true: r.x_true.as_slice().to_vec(),
                x_hat: r.x_hat.as_slice().to_vec(),
                p_hat: r.p_hat.upper().to_vec(),
            })
            .collect();
        Self::new(TraceHeader::new(n, m, trace.dt), rows)
    }

    fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let n = self.header.n;
        let p = packed_len(n);
        for (i, r) in self.rows.iter().enumerate() {
            if r.x_true.len() != n || r.x_hat.len() != n || r.p_hat.len() != p {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("row does not match n = {n}"),
                });
            }
            if i > 0 && r.k <= self.rows[i - 1].k {
                return Err(Error::Parse {
                    line: i + 2,
                    message: "k must be strictly increasing".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.n
    }

    /// Errors `x_true − x_hat` under the header's block difference rules.
    pub fn errors(&self) -> Result<ErrorSeries> {
        let blocks = &self.header.blocks;
        let errors = self
            .rows
            .iter()
            .map(|r| {
                StateBlock::state_error(
                    blocks,
                    &DVector::from_column_slice(&r.x_true),
                    &DVector::from_column_slice(&r.x_hat),
                )
            })
            .collect();
        ErrorSeries::new(self.rows.iter().map(|r| r.k).collect(), errors)
    }

    pub fn covariances(&self) -> Result<Vec<CovMatrix>> {
        self.rows
            .iter()
            .map(|r| r.covariance(self.header.n))
            .collect()
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        self.rows
            .iter()
            .map(|r| DVector::from_column_slice(&r.x_hat))
            .collect()
    }

    /// Copy with every `p_hat` replaced.
    pub fn with_covariances(&self, covs: &[CovMatrix]) -> Result<Self> {
        if covs.len() != self.rows.len() || covs.iter().any(|c| c.dim() != self.header.n) {
            return Err(Error::invalid(
                "one covariance of the trace dimension is required per row",
            ));
        }
        let rows = self
            .rows
            .iter()
            .zip(covs)
            .map(|(r, c)| TraceRow {
                p_hat: c.upper().to_vec(),
                ..r.clone()
            })
            .collect();
        Ok(Self {
            header: self.header.clone(),
            rows,
        })
    }

    pub fn column_names(&self) -> Vec<String> {
        let n = self.header.n;
        let mut names = vec!["k".to_string(), "t".to_string()];
        names.extend((0..n).map(|i| format!("x_true{i}")));
        names.extend((0..n).map(|i| format!("x_hat{i}")));
        for i in 0..n {
            for j in i..n {
                names.push(format!("p{i}_{j}"));
            }
        }
        names
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        out.push('#');
        out.push_str(&serde_json::to_string(&self.header)?);
        out.push('\n');
        out.push_str(&self.column_names().join(","));
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:?}", r.k, r.t).expect("string write");
            for v in r.x_true.iter().chain(&r.x_hat).chain(&r.p_hat) {
                write!(out, ",{v:?}").expect("string write");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::EmptyInput("trace file"))?;
        let json = first.strip_prefix('#').ok_or_else(|| Error::Parse {
            line: 1,
            message: "expected a '#' JSON header line".into(),
        })?;
        let header: TraceHeader = serde_json::from_str(json).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        header.validate()?;
        let n = header.n;
        let width = header.row_width();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('k') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {width} columns, found {}", fields.len()),
                });
            }
            let k = fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("k: {e}"),
                })?;
            let values = fields[1..]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            rows.push(TraceRow {
                k,
                t: values[0],
                x_true: values[1..1 + n].to_vec(),
                x_hat: values[1 + n..1 + 2 * n].to_vec(),
                p_hat: values[1 + 2 * n..].to_vec(),
            });
        }
        Self::new(header, rows)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::EmptyInput("trace file"))?;
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let rows = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<TraceRow>>>()?;
        Self::new(header, rows)
    }

    /// JSON lines when the text starts with `{`, CSV otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::parse_jsonl(text)
        } else {
            Self::parse_csv(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes JSON lines for a `.jsonl` extension and CSV otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "jsonl") {
            self.to_jsonl()?
        } else {
            self.to_csv()?
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::DiffRule;
    use proptest::prelude::*;

    fn sample(n: usize, rows: usize) -> TraceFile {
        let mut header = TraceHeader::new(n, 2, 0.1);
        header.system = Some("test".into());
        let rows = (0..rows)
            .map(|k| TraceRow {
                k,
                t: k as f64 * 0.1,
                x_true: (0..n).map(|i| (k * n + i) as f64 / 7.0).collect(),
                x_hat: (0..n).map(|i| -((k + i) as f64) / 3.0).collect(),
                p_hat: CovMatrix::identity(n).scaled(1.0 / 3.0).upper().to_vec(),
            })
            .collect();
        TraceFile::new(header, rows).unwrap()
    }

    #[test]
    fn csv_layout() {
        let csv = sample(2, 1).to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("#{\"schema\":\"covcal-trace\""));
        assert_eq!(lines[1], "k,t,x_true0,x_true1,x_hat0,x_hat1,p0_0,p0_1,p1_1");
        assert_eq!(lines[2].split(',').count(), 9);
    }

    #[test]
    fn both_formats_round_trip() {
        let t = sample(3, 20);
        assert_eq!(TraceFile::parse(&t.to_csv().unwrap()).unwrap(), t);
        assert_eq!(TraceFile::parse(&t.to_jsonl().unwrap()).unwrap(), t);
        assert_eq!(
            TraceFile::parse(&t.to_csv().unwrap())
                .unwrap()
                .to_csv()
                .unwrap(),
            t.to_csv().unwrap()
        );
    }

    #[test]
    fn malformed_input_reports_lines() {
        let csv = sample(2, 3).to_csv().unwrap();
        let broken = csv.replacen("\n1,", "\n1,0.1,", 1);
        assert!(matches!(
            TraceFile::parse(&broken),
            Err(Error::Parse { line: 4, .. })
        ));
        let unsorted = csv.replacen("\n2,", "\n0,", 1);
        assert!(matches!(
            TraceFile::parse(&unsorted),
            Err(Error::Parse { .. })
        ));
        assert!(TraceFile::parse("k,t\n").is_err());
        assert!(TraceFile::parse(&csv.replace("covcal-trace", "other")).is_err());
    }

    #[test]
    fn errors_use_block_rules() {
        let mut t = sample(3, 2);
        t.header.blocks = vec![StateBlock::new("rot", 0, 3, DiffRule::RotationVector)];
        t.rows[0].x_true = vec![0.0, 0.0, 3.0];
        t.rows[0].x_hat = vec![0.0, 0.0, -3.0];
        let e = t.errors().unwrap();
        // 6 rad apart along z wraps to 6 − 2π
        assert!((e.errors()[0][2] - (6.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 9 * 5)) {
            let n = 2;
            let rows = vals
                .chunks(9)
                .enumerate()
                .map(|(k, c)| TraceRow { k, t: c[0], x_true: c[1..3].to_vec(), x_hat: c[3..5].to_vec(), p_hat: c[5..8].to_vec() })
                .collect();
            let t = TraceFile::new(TraceHeader::new(n, 0, c_dt(&vals)), rows).unwrap();
            let csv = TraceFile::parse(&t.to_csv().unwrap()).unwrap();
            let jsonl = TraceFile::parse(&t.to_jsonl().unwrap()).unwrap();
            for back in [csv, jsonl] {
                for (a, b) in back.rows.iter().zip(&t.rows) {
                    let bits = |r: &TraceRow| -> Vec<u64> {
                        std::iter::once(r.t).chain(r.x_true.clone()).chain(r.x_hat.clone()).chain(r.p_hat.clone()).map(f64::to_bits).collect()
                    };
                    prop_assert_eq!(bits(a), bits(b));
                }
                prop_assert_eq!(back.header.dt.to_bits(), t.header.dt.to_bits());
            }
        }
    }

    fn c_dt(vals: &[f64]) -> f64 {
        vals[8].abs().max(1e-300)
    }
}
