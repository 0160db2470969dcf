//! `simulate`: benchmark traces from a TOML config.

use std::path::Path;

use covcal_core::experiments::{run_seed, DubinsExperiment};
use covcal_core::filters::{simulate, SystemModel};
use covcal_core::synthetic::{MiscalibratedVio, SlowlyVaryingCov};
use covcal_core::systems::{
    dubins_model, generate_sequences, spring_mass_config, spring_mass_input, DubinsNoise,
    SpringMassParams, DUBINS_BEACONS,
};
use covcal_core::trace::TraceFile;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    SpringMass,
    Dubins,
    SyntheticVio,
}

impl System {
    fn name(self) -> &'static str {
        match self {
            System::SpringMass => "spring-mass",
            System::Dubins => "dubins",
            System::SyntheticVio => "synthetic-vio",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpringMassSection {
    pub mass: Option<f64>,
    pub spring: Option<f64>,
    pub damping: Option<f64>,
    pub dt: Option<f64>,
    pub process_std: Option<f64>,
    pub measurement_std: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DubinsSection {
    /// Sequence indices to simulate; all of them when absent.
    pub sequences: Option<Vec<usize>>,
    /// Process noise diagonals `[x, y, v, θ]` of the simulated vehicle and of the filter.
    pub truth_process: Option<[f64; 4]>,
    pub filter_process: Option<[f64; 4]>,
    pub range_std: Option<f64>,
    pub bearing_std: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VioSection {
    /// Time index of the first trace; trace `r` starts at `start + r·spacing`.
    pub start: Option<usize>,
    pub spacing: Option<usize>,
    pub correlation: Option<f64>,
    pub amplitude: Option<f64>,
    pub period: Option<f64>,
    pub gamma: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub system: System,
    pub runs: Option<usize>,
    pub steps: Option<usize>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub spring_mass: SpringMassSection,
    #[serde(default)]
    pub dubins: DubinsSection,
    #[serde(default)]
    pub synthetic_vio: VioSection,
}

impl SimulateConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("bad config: {e}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sequence: usize,
    pub run: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub system: System,
    pub seed: u64,
    pub config: SimulateConfig,
    pub files: Vec<ManifestEntry>,
}

fn spring_mass(
    cfg: &SimulateConfig,
    seed: u64,
    runs: usize,
) -> CliResult<Vec<(TraceFile, usize, usize, u64)>> {
    let s = &cfg.spring_mass;
    let d = SpringMassParams::default();
    let params = SpringMassParams {
        mass: s.mass.unwrap_or(d.mass),
        spring: s.spring.unwrap_or(d.spring),
        damping: s.damping.unwrap_or(d.damping),
        dt: s.dt.unwrap_or(d.dt),
        process_std: s.process_std.unwrap_or(d.process_std),
        measurement_std: s.measurement_std.unwrap_or(d.measurement_std),
    };
    if !(params.mass > 0.0) || !(params.dt > 0.0) {
        return Err(CliError::usage("spring-mass mass and dt must be positive"));
    }
    let model = params.model();
    let steps = cfg.steps.unwrap_or(5000);
    let out: Result<Vec<_>, covcal_core::Error> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let rs = run_seed(seed, 0, r);
            let mut sim = spring_mass_config(rs, steps);
            sim.dt = params.dt;
            sim.inputs = spring_mass_input(steps, params.dt);
            let trace =
                TraceFile::from_estimate(&simulate(&model, &sim)?, model.measurement_dim())?;
            Ok((trace, 0, r, rs))
        })
        .collect();
    Ok(out?)
}

fn dubins(
    cfg: &SimulateConfig,
    seed: u64,
    runs: usize,
) -> CliResult<Vec<(TraceFile, usize, usize, u64)>> {
    let s = &cfg.dubins;
    let mut exp = DubinsExperiment::new(seed);
    exp.mc_runs = runs;
    if let Some(steps) = cfg.steps {
        exp.sequences = generate_sequences(exp.sequences.len(), steps, seed);
    }
    let d = DubinsNoise::default();
    let range = s.range_std.unwrap_or(d.measurement.get(0, 0).sqrt());
    let bearing = s.bearing_std.unwrap_or(d.measurement.get(1, 1).sqrt());
    let noise = |diag: Option<[f64; 4]>, base: &DubinsNoise| {
        let diag = diag.unwrap_or(std::array::from_fn(|i| base.process.get(i, i)));
        DubinsNoise::new(diag, range, bearing, DUBINS_BEACONS.len())
    };
    exp.truth_noise = noise(s.truth_process, &exp.truth_noise);
    exp.filter_noise = noise(s.filter_process, &exp.filter_noise);
    let sequences = s
        .sequences
        .clone()
        .unwrap_or_else(|| (0..exp.sequences.len()).collect());
    if let Some(&bad) = sequences.iter().find(|&&q| q >= exp.sequences.len()) {
        return Err(CliError::usage(format!(
            "no Dubins sequence {bad} (there are {})",
            exp.sequences.len()
        )));
    }
    let m = dubins_model(exp.filter_noise.clone())?.measurement_dim();
    let mut out = Vec::new();
    for q in sequences {
        for (r, est) in exp.simulate_sequence(q)?.iter().enumerate() {
            out.push((TraceFile::from_estimate(est, m)?, q, r, exp.run_seed(q, r)));
        }
    }
    Ok(out)
}

fn synthetic_vio(
    cfg: &SimulateConfig,
    seed: u64,
    runs: usize,
) -> CliResult<Vec<(TraceFile, usize, usize, u64)>> {
    let s = &cfg.synthetic_vio;
    let d = MiscalibratedVio::default();
    let truth = SlowlyVaryingCov::new(
        d.truth.std.clone(),
        s.correlation.unwrap_or(d.truth.correlation),
        s.amplitude.unwrap_or(d.truth.amplitude),
        s.period.unwrap_or(d.truth.period),
    )?;
    let gen = MiscalibratedVio {
        truth,
        gamma: s.gamma.unwrap_or(d.gamma),
        gain: s.gain.unwrap_or(d.gain),
        dt: d.dt,
    };
    let (start, spacing) = (s.start.unwrap_or(0), s.spacing.unwrap_or(997));
    let steps = cfg.steps.unwrap_or(2000);
    let out: Result<Vec<_>, covcal_core::Error> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let rs = seed.wrapping_add(r as u64);
            let mut trace = gen.trace(start + r * spacing, steps, rs)?;
            trace.header.sequence = Some(r);
            trace.header.run = Some(0);
            Ok((trace, r, 0, rs))
        })
        .collect();
    Ok(out?)
}

pub fn run(config: &Path, seed: u64, runs: Option<usize>, out: &Path) -> CliResult<Manifest> {
    let cfg = SimulateConfig::parse(&io::read_text(config)?).map_err(|e| e.at(config))?;
    let runs = runs.or(cfg.runs).unwrap_or(match cfg.system {
        System::SyntheticVio => 1,
        _ => 50,
    });
    if runs == 0 || cfg.steps == Some(0) {
        return Err(CliError::usage("runs and steps must be positive"));
    }
    let traces = match cfg.system {
        System::SpringMass => spring_mass(&cfg, seed, runs)?,
        System::Dubins => dubins(&cfg, seed, runs)?,
        System::SyntheticVio => synthetic_vio(&cfg, seed, runs)?,
    };
    io::create_dir(out)?;
    let ext = match cfg.format {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    };
    let mut files = Vec::with_capacity(traces.len());
    for (mut trace, sequence, run, rs) in traces {
        trace.header.system = Some(cfg.system.name().into());
        trace.header.sequence = Some(sequence);
        trace.header.run = Some(run);
        trace.header.seed = Some(rs);
        let file = format!("{}_s{sequence:02}_r{run:03}.{ext}", cfg.system.name());
        io::save_trace(&trace, &out.join(&file))?;
        files.push(ManifestEntry {
            file,
            sequence,
            run,
            seed: rs,
        });
    }
    let manifest = Manifest {
        system: cfg.system,
        seed,
        config: cfg,
        files,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full_configs() {
        let c = SimulateConfig::parse("system = \"spring-mass\"").unwrap();
        assert_eq!(c.system, System::SpringMass);
        assert_eq!(c.format, Format::Csv);
        let c = SimulateConfig::parse(
            "system = \"synthetic-vio\"\nsteps = 100\nformat = \"jsonl\"\n[synthetic_vio]\nstart = 5\ngamma = 2.0\n",
        )
        .unwrap();
        assert_eq!(c.synthetic_vio.start, Some(5));
        assert_eq!(c.format, Format::Jsonl);
    }

    #[test]
    fn rejects_unknown_systems_and_keys() {
        assert!(SimulateConfig::parse("system = \"pendulum\"").is_err());
        assert!(SimulateConfig::parse("system = \"dubins\"\nbogus = 1").is_err());
        assert!(SimulateConfig::parse("[dubins]\nsequences = [1]").is_err());
    }
}
