//! `evaluate` and `report`: NEES statistics of traces and comparison tables
//! rebuilt from evaluation directories.

use std::path::{Path, PathBuf};

use covcal_core::report::{
    compare_methods, divergence_stats, evaluate, parse_nees_csv, EvaluateOptions, GroundTruthMode,
    Protocol, ReportTable, ESTIMATOR_ROW, GROUND_TRUTH_ROW,
};
use covcal_core::statmath::Binning;

use crate::error::{CliError, CliResult};
use crate::io;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const NEES_CSV: &str = "nees.csv";
pub const OVERLAY_CSV: &str = "overlay.csv";
pub const OVERLAY_GT_CSV: &str = "overlay_gt.csv";

pub struct EvaluateArgs {
    pub traces: Vec<PathBuf>,
    pub ground_truth: GroundTruthMode,
    pub dof: Option<u32>,
    pub per_sequence: bool,
    pub groups: usize,
    pub group_size: usize,
    pub bins: Option<usize>,
    pub seed: u64,
}

pub fn binning(bins: Option<usize>) -> Binning {
    bins.map_or(Binning::SqrtN, Binning::Count)
}

/// Writes the report, overlays and per-step NEES into `out` and returns the table.
pub fn run(args: &EvaluateArgs, out: &Path) -> CliResult<ReportTable> {
    let traces = io::load_traces(&io::trace_paths(&args.traces)?)?;
    let n = traces[0].dim() as u32;
    if let Some(dof) = args.dof {
        if dof != n {
            return Err(CliError::usage(format!(
                "--dof {dof} does not match the trace state dimension {n}"
            )));
        }
    }
    let protocol = if args.per_sequence {
        Protocol::PerSequence
    } else {
        if args.groups == 0 || args.group_size == 0 {
            return Err(CliError::usage(
                "--groups and --group-size must be positive",
            ));
        }
        Protocol::Resampled {
            groups: args.groups,
            group_size: args.group_size,
        }
    };
    let opts = EvaluateOptions {
        ground_truth: args.ground_truth,
        binning: binning(args.bins),
        protocol,
        seed: args.seed,
    };
    let ev = evaluate(&traces, &opts)?;
    io::create_dir(out)?;
    io::write_json(&out.join(REPORT_JSON), &ev.report)?;
    io::write_text(&out.join(REPORT_TEXT), &ev.report.to_text())?;
    io::write_text(&out.join(OVERLAY_CSV), &ev.overlay.to_csv())?;
    if let Some(o) = &ev.ground_truth_overlay {
        io::write_text(&out.join(OVERLAY_GT_CSV), &o.to_csv())?;
    }
    io::write_text(&out.join(NEES_CSV), &ev.nees_csv(&traces))?;
    Ok(ev.report)
}

/// Reloads an evaluation directory, recomputing the divergence columns from
/// its NEES file. σ-counts need the raw errors and are taken as written.
pub fn reload(dir: &Path) -> CliResult<ReportTable> {
    let json = io::read_text(&dir.join(REPORT_JSON))?;
    let mut table: ReportTable =
        serde_json::from_str(&json).map_err(|e| CliError::from(e).at(&dir.join(REPORT_JSON)))?;
    let nees_path = dir.join(NEES_CSV);
    let (hat, gt) = parse_nees_csv(&io::read_text(&nees_path)?, table.dof)
        .map_err(|e| CliError::from(e).at(&nees_path))?;
    let o = table.options;
    for row in &mut table.rows {
        let series = match row.name.as_str() {
            ESTIMATOR_ROW => &hat,
            GROUND_TRUTH_ROW => &gt,
            _ => continue,
        };
        if series.is_empty() {
            return Err(CliError::usage(format!(
                "{}: no NEES values for row {:?}",
                nees_path.display(),
                row.name
            )));
        }
        row.divergence = divergence_stats(series, o.binning, o.protocol, o.seed)?;
    }
    Ok(table)
}

/// Comparison table of adjusted methods against a baseline evaluation.
pub fn report(
    baseline: &Path,
    methods: &[(String, PathBuf)],
    out: Option<&Path>,
) -> CliResult<ReportTable> {
    let base = reload(baseline)?;
    let others = methods
        .iter()
        .map(|(name, dir)| Ok((name.clone(), reload(dir)?)))
        .collect::<CliResult<Vec<_>>>()?;
    if base.row(GROUND_TRUTH_ROW).is_none() {
        log::warn!("baseline has no ground-truth row; percent decrease is left empty");
    }
    let table = compare_methods(&base, &others)?;
    if let Some(out) = out {
        io::create_dir(out)?;
        io::write_json(&out.join(REPORT_JSON), &table)?;
        io::write_text(&out.join(REPORT_TEXT), &table.to_text())?;
    }
    Ok(table)
}

/// `NAME=DIR`
pub fn parse_method(text: &str) -> Result<(String, PathBuf), String> {
    match text.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => {
            Ok((name.to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected NAME=DIR, got {text:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_arguments() {
        assert_eq!(
            parse_method("nn=out/nn").unwrap(),
            ("nn".into(), PathBuf::from("out/nn"))
        );
        assert!(parse_method("nn").is_err());
        assert!(parse_method("=x").is_err());
    }
}
