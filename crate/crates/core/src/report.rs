//! Evaluation of trace sets: NEES under the estimator's covariance and under
//! a ground-truth covariance, σ-interval counts, divergence summaries, plot
//! overlays and method comparison tables.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::calmaps::{percent_decrease, CalibrationMap, TrainingSample, TrainingSet};
use crate::error::{Error, Result};
use crate::groundtruth::{
    ergodic_ground_truth, ground_truth_nees, mc_ground_truth, ErrorSeries, GroundTruthCovSeries,
};
use crate::statmath::{
    build_density, chi2_pdf, count_sigma_intervals, l2_divergence, mean_std, nees_divergence,
    nees_regularized, resampled_divergence, sigma_coordinates, Binning, CovMatrix,
    EmpiricalDensity, NeesSeries,
};
use crate::trace::TraceFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "window")]
pub enum GroundTruthMode {
    /// Sample covariance across runs of the same sequence.
    MonteCarlo,
    /// Sliding window of odd length within each trace.
    Ergodic(usize),
    None,
}

impl FromStr for GroundTruthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(GroundTruthMode::MonteCarlo),
            "none" => Ok(GroundTruthMode::None),
            _ => {
                let k = s
                    .strip_prefix("ergodic:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "ground truth must be mc, ergodic:K or none, got {s:?}"
                        ))
                    })?;
                Ok(GroundTruthMode::Ergodic(k))
            }
        }
    }
}

/// How the spread of the divergence is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Random groups drawn without replacement from the pooled NEES.
    Resampled { groups: usize, group_size: usize },
    /// One divergence per trace.
    PerSequence,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Resampled {
            groups: 50,
            group_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub ground_truth: GroundTruthMode,
    pub binning: Binning,
    pub protocol: Protocol,
    pub seed: u64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            ground_truth: GroundTruthMode::None,
            binning: Binning::SqrtN,
            protocol: Protocol::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    /// Divergence of all NEES values pooled.
    pub pooled: f64,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

/// Divergence of the pooled series plus mean and spread under `protocol`.
pub fn divergence_stats(
    series: &[NeesSeries],
    binning: Binning,
    protocol: Protocol,
    seed: u64,
) -> Result<DivergenceStats> {
    let pooled = NeesSeries::pooled(series)?;
    let full = nees_divergence(&pooled, binning)?;
    let (mean, std) = match protocol {
        Protocol::Resampled { groups, group_size } => {
            let r = resampled_divergence(&pooled, groups, group_size, binning, seed)?;
            (r.mean, r.std)
        }
        Protocol::PerSequence => {
            let d = series
                .iter()
                .map(|s| nees_divergence(s, binning))
                .collect::<Result<Vec<_>>>()?;
            mean_std(&d)
        }
    };
    Ok(DivergenceStats {
        pooled: full,
        mean,
        std,
        samples: pooled.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    #[serde(default)]
    pub percent_decrease: Option<f64>,
    pub divergence: DivergenceStats,
    /// 1σ/2σ/3σ percentages per state dimension.
    pub sigma: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub dof: u32,
    pub options: EvaluateOptions,
    pub rows: Vec<MethodRow>,
}

pub const ESTIMATOR_ROW: &str = "estimator";
pub const GROUND_TRUTH_ROW: &str = "ground truth";

impl ReportTable {
    pub fn row(&self, name: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let spread = match self.options.protocol {
            Protocol::Resampled { groups, group_size } => {
                format!("{groups} groups of {group_size}")
            }
            Protocol::PerSequence => "per sequence".into(),
        };
        writeln!(
            out,
            "{:<16} {:>8} {:>20} {:>9}  sigma % (1/2/3) per dimension",
            "method",
            "% dec",
            format!("D ({spread})"),
            "D pooled"
        )
        .expect("string write");
        for r in &self.rows {
            let dec = r
                .percent_decrease
                .map_or("-".to_string(), |p| format!("{p:.1}"));
            let sig: Vec<String> = r
                .sigma
                .iter()
                .map(|s| format!("{:.1}/{:.1}/{:.1}", s[0], s[1], s[2]))
                .collect();
            writeln!(
                out,
                "{:<16} {:>8} {:>20} {:>9.4}  {}",
                r.name,
                dec,
                format!("{:.4} ± {:.4}", r.divergence.mean, r.divergence.std),
                r.divergence.pooled,
                sig.join("  ")
            )
            .expect("string write");
        }
        out
    }
}

/// `(x, empirical, chi2, abs-diff)` rows at the histogram bin centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub dof: u32,
    pub bin_edges: Vec<f64>,
    pub x: Vec<f64>,
    pub empirical: Vec<f64>,
    pub chi2: Vec<f64>,
}

impl Overlay {
    pub fn from_density(d: &EmpiricalDensity, dof: u32) -> Self {
        let x = d.centers();
        let chi2 = x.iter().map(|&v| chi2_pdf(v, dof)).collect();
        Self {
            dof,
            bin_edges: d.bin_edges.clone(),
            x,
            empirical: d.bin_heights.clone(),
            chi2,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,empirical,chi2,abs_diff\n");
        for i in 0..self.x.len() {
            writeln!(
                out,
                "{:?},{:?},{:?},{:?}",
                self.x[i],
                self.empirical[i],
                self.chi2[i],
                (self.empirical[i] - self.chi2[i]).abs()
            )
            .expect("string write");
        }
        out
    }
}

/// Everything `evaluate` computes, including the intermediates the report
/// is derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ReportTable,
    pub estimator_nees: Vec<NeesSeries>,
    /// Per trace, `(step index, NEES)` at steps with a ground truth.
    pub ground_truth_nees: Option<Vec<Vec<(usize, f64)>>>,
    pub overlay: Overlay,
    pub ground_truth_overlay: Option<Overlay>,
}

impl Evaluation {
    /// `trace,k,nees_hat,nees_gt` with an empty last column where no ground truth exists.
    pub fn nees_csv(&self, traces: &[TraceFile]) -> String {
        let mut out = String::from("trace,k,nees_hat,nees_gt\n");
        for (ti, (trace, hat)) in traces.iter().zip(&self.estimator_nees).enumerate() {
            let mut gt = self
                .ground_truth_nees
                .as_ref()
                .map(|g| g[ti].iter().peekable());
            for (i, (row, v)) in trace.rows.iter().zip(hat.values()).enumerate() {
                let g = gt
                    .as_mut()
                    .and_then(|it| it.next_if(|(idx, _)| *idx == i).map(|(_, g)| *g));
                let g = g.map_or(String::new(), |g| format!("{g:?}"));
                writeln!(out, "{ti},{},{v:?},{g}", row.k).expect("string write");
            }
        }
        out
    }
}

/// σ-interval percentages; steps with a singular covariance are skipped with
/// a warning rather than failing the whole evaluation.
fn sigma_counts(errors: &[&DVector<f64>], covs: &[&CovMatrix]) -> Result<Vec<[f64; 3]>> {
    let zero = DVector::zeros(errors[0].len());
    let mut nus = Vec::with_capacity(errors.len());
    let mut skipped = 0;
    for (e, p) in errors.iter().zip(covs) {
        match sigma_coordinates(e, &zero, p) {
            Ok(nu) => nus.push(nu),
            Err(Error::SingularCovariance { .. }) => skipped += 1,
            Err(err) => return Err(err),
        }
    }
    if skipped > 0 {
        log::warn!(
            "{skipped} of {} steps have a singular covariance and are left out of the sigma counts",
            errors.len()
        );
    }
    if nus.is_empty() {
        return Err(Error::SingularCovariance {
            min_eigenvalue: 0.0,
        });
    }
    Ok(count_sigma_intervals(&nus)?.per_dim)
}

fn check_consistent(traces: &[TraceFile]) -> Result<usize> {
    let first = traces
        .first()
        .ok_or(Error::EmptyInput("no traces to evaluate"))?;
    let n = first.dim();
    if traces.iter().any(|t| t.dim() != n) {
        return Err(Error::invalid("traces differ in state dimension"));
    }
    if traces.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyInput("trace without rows"));
    }
    Ok(n)
}

/// Ground truth per trace under `mode`. Monte-Carlo ground truth groups
/// traces by their header's sequence id.
pub fn ground_truth_for(
    traces: &[TraceFile],
    errors: &[ErrorSeries],
    mode: GroundTruthMode,
) -> Result<Option<Vec<GroundTruthCovSeries>>> {
    match mode {
        GroundTruthMode::None => Ok(None),
        GroundTruthMode::Ergodic(window) => errors
            .iter()
            .map(|e| ergodic_ground_truth(e, window))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        GroundTruthMode::MonteCarlo => {
            let mut out: Vec<Option<GroundTruthCovSeries>> = vec![None; traces.len()];
            let mut ids: Vec<Option<usize>> = traces.iter().map(|t| t.header.sequence).collect();
            ids.sort_unstable();
            ids.dedup();
            for id in ids {
                let members: Vec<usize> = (0..traces.len())
                    .filter(|&i| traces[i].header.sequence == id)
                    .collect();
                let runs: Vec<ErrorSeries> = members.iter().map(|&i| errors[i].clone()).collect();
                let gt = mc_ground_truth(&runs)?;
                for i in members {
                    out[i] = Some(gt.clone());
                }
            }
            Ok(Some(
                out.into_iter()
                    .map(|g| g.expect("every trace has a group"))
                    .collect(),
            ))
        }
    }
}

pub fn evaluate(traces: &[TraceFile], opts: &EvaluateOptions) -> Result<Evaluation> {
    let n = check_consistent(traces)?;
    let dof = n as u32;
    let errors = traces
        .iter()
        .map(TraceFile::errors)
        .collect::<Result<Vec<_>>>()?;
    let covs = traces
        .iter()
        .map(TraceFile::covariances)
        .collect::<Result<Vec<_>>>()?;
    let gts = ground_truth_for(traces, &errors, opts.ground_truth)?;

    let estimator_nees = errors
        .iter()
        .zip(&covs)
        .map(|(e, c)| {
            let v = e
                .errors()
                .iter()
                .zip(c)
                .map(|(e, p)| nees_regularized(e, p))
                .collect::<Result<Vec<_>>>()?;
            NeesSeries::new(v, dof)
        })
        .collect::<Result<Vec<_>>>()?;
    let all_e: Vec<&DVector<f64>> = errors.iter().flat_map(|e| e.errors()).collect();
    let all_p: Vec<&CovMatrix> = covs.iter().flatten().collect();
    let mut rows = vec![MethodRow {
        name: ESTIMATOR_ROW.into(),
        percent_decrease: None,
        divergence: divergence_stats(&estimator_nees, opts.binning, opts.protocol, opts.seed)?,
        sigma: sigma_counts(&all_e, &all_p)?,
    }];
    let pooled = NeesSeries::pooled(&estimator_nees)?;
    let overlay = Overlay::from_density(&build_density(&pooled, opts.binning)?, dof);

    let mut gt_nees = None;
    let mut gt_overlay = None;
    if let Some(gts) = gts {
        let mut per_trace = Vec::with_capacity(traces.len());
        let mut series = Vec::with_capacity(traces.len());
        let (mut ge, mut gp) = (Vec::new(), Vec::new());
        for (e, gt) in errors.iter().zip(&gts) {
            let s = ground_truth_nees(e, gt)?;
            per_trace.push(
                gt.valid()
                    .map(|(k, _)| k)
                    .zip(s.values().iter().copied())
                    .collect::<Vec<_>>(),
            );
            for (k, p) in gt.valid() {
                ge.push(&e.errors()[k]);
                gp.push(p);
            }
            series.push(s);
        }
        rows.push(MethodRow {
            name: GROUND_TRUTH_ROW.into(),
            percent_decrease: None,
            divergence: divergence_stats(&series, opts.binning, opts.protocol, opts.seed)?,
            sigma: sigma_counts(&ge, &gp)?,
        });
        let pooled = NeesSeries::pooled(&series)?;
        gt_overlay = Some(Overlay::from_density(
            &build_density(&pooled, opts.binning)?,
            dof,
        ));
        gt_nees = Some(per_trace);
    }
    Ok(Evaluation {
        report: ReportTable {
            dof,
            options: *opts,
            rows,
        },
        estimator_nees,
        ground_truth_nees: gt_nees,
        overlay,
        ground_truth_overlay: gt_overlay,
    })
}

/// Pairs every timestep that has a ground truth with the trace's `P̂` (and
/// `x̂` when every trace carries state features). The sample's sequence is
/// the header's sequence id, or the trace index when there is none.
pub fn training_set_from_traces(
    traces: &[TraceFile],
    mode: GroundTruthMode,
) -> Result<TrainingSet> {
    if mode == GroundTruthMode::None {
        return Err(Error::invalid(
            "fitting needs a ground truth (mc or ergodic:K)",
        ));
    }
    check_consistent(traces)?;
    let errors = traces
        .iter()
        .map(TraceFile::errors)
        .collect::<Result<Vec<_>>>()?;
    let gts = ground_truth_for(traces, &errors, mode)?.expect("mode is not None");
    let with_state = traces.iter().all(|t| t.header.state_features);
    let mut samples = Vec::new();
    for (ti, (trace, gt)) in traces.iter().zip(&gts).enumerate() {
        for (k, p) in gt.valid() {
            let row = &trace.rows[k];
            samples.push(TrainingSample {
                p_hat: row.covariance(trace.dim())?,
                x_hat: with_state.then(|| row.x_hat.clone()),
                p_target: p.clone(),
                sequence: trace.header.sequence.unwrap_or(ti),
                step: row.k,
            });
        }
    }
    TrainingSet::new(samples)
}

/// Copy of `trace` with every `P̂` replaced by the map's output.
pub fn apply_map(map: &CalibrationMap, trace: &TraceFile) -> Result<TraceFile> {
    if map.needs_state() && !trace.header.state_features {
        return Err(Error::invalid(
            "this map needs state estimates, but the trace has none",
        ));
    }
    let states = trace.states();
    let adjusted = map.apply_all(
        &trace.covariances()?,
        map.needs_state().then_some(&states[..]),
    )?;
    trace.with_covariances(&adjusted)
}

/// Parses the NEES CSV written by [`Evaluation::nees_csv`] back into
/// per-trace estimator and ground-truth series.
pub fn parse_nees_csv(text: &str, dof: u32) -> Result<(Vec<NeesSeries>, Vec<NeesSeries>)> {
    let mut hat: Vec<Vec<f64>> = Vec::new();
    let mut gt: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let t: usize = f[0].parse().map_err(|_| bad("bad trace index"))?;
        if t >= hat.len() {
            hat.resize(t + 1, Vec::new());
            gt.resize(t + 1, Vec::new());
        }
        hat[t].push(f[2].parse().map_err(|_| bad("bad NEES value"))?);
        if !f[3].is_empty() {
            gt[t].push(f[3].parse().map_err(|_| bad("bad NEES value"))?);
        }
    }
    let to_series = |v: Vec<Vec<f64>>| -> Result<Vec<NeesSeries>> {
        v.into_iter()
            .filter(|s| !s.is_empty())
            .map(|s| NeesSeries::new(s, dof))
            .collect()
    };
    Ok((to_series(hat)?, to_series(gt)?))
}

/// Comparison table: the unadjusted estimator, each adjusted method, and the
/// ground truth, with percent decrease computed from the divergence means.
pub fn compare_methods(
    unadjusted: &ReportTable,
    methods: &[(String, ReportTable)],
) -> Result<ReportTable> {
    let base = unadjusted
        .row(ESTIMATOR_ROW)
        .ok_or_else(|| Error::invalid("unadjusted report has no estimator row"))?;
    let gt = unadjusted.row(GROUND_TRUTH_ROW);
    let mut rows = vec![MethodRow {
        name: "unadjusted".into(),
        percent_decrease: None,
        ..base.clone()
    }];
    for (name, table) in methods {
        if table.dof != unadjusted.dof {
            return Err(Error::invalid(format!(
                "report {name:?} has dof {} instead of {}",
                table.dof, unadjusted.dof
            )));
        }
        let row = table
            .row(ESTIMATOR_ROW)
            .ok_or_else(|| Error::invalid(format!("report {name:?} has no estimator row")))?;
        let dec = gt
            .map(|g| percent_decrease(base.divergence.mean, row.divergence.mean, g.divergence.mean))
            .transpose()?;
        rows.push(MethodRow {
            name: name.clone(),
            percent_decrease: dec,
            ..row.clone()
        });
    }
    if let Some(g) = gt {
        rows.push(g.clone());
    }
    Ok(ReportTable {
        dof: unadjusted.dof,
        options: unadjusted.options,
        rows,
    })
}

/// Divergence of an overlay's histogram; lets a report be checked against
/// the emitted overlay file.
pub fn overlay_divergence(o: &Overlay, samples: usize) -> Result<f64> {
    let d = EmpiricalDensity {
        bin_edges: o.bin_edges.clone(),
        bin_heights: o.empirical.clone(),
        sample_count: samples,
    };
    l2_divergence(&d, o.dof)
}
