//! `align` and `window-search`: bringing external ground truth into the
//! estimator frame and choosing the ergodic window.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covcal_core::groundtruth::{
    backdifference_velocity, horn_align, interpolate_positions, interpolate_rotations,
    window_search, AlignmentTransform, DiffRule, WindowSearch,
};
use covcal_core::trace::TraceFile;
use covcal_core::Error;
use nalgebra::{UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::evaluate::binning;
use crate::io;

/// Ground-truth poses: `t,px,py,pz` with optional rotation vector `rx,ry,rz`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLog {
    pub t: Vec<f64>,
    pub position: Vec<Vector3<f64>>,
    pub rotation: Option<Vec<Vector3<f64>>>,
}

impl GroundTruthLog {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| CliError::usage("empty ground-truth file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let need = |name: &str| {
            find(name)
                .ok_or_else(|| CliError::usage(format!("ground truth lacks a {name:?} column")))
        };
        let (it, ipos) = (need("t")?, [need("px")?, need("py")?, need("pz")?]);
        let irot = match (find("rx"), find("ry"), find("rz")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            (None, None, None) => None,
            _ => return Err(CliError::usage("rotation needs all of rx, ry, rz")),
        };
        let mut log = GroundTruthLog {
            t: Vec::new(),
            position: Vec::new(),
            rotation: irot.map(|_| Vec::new()),
        };
        for (i, line) in lines {
            let bad = |m: &str| {
                CliError::from(Error::Parse {
                    line: i + 1,
                    message: m.into(),
                })
            };
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("not a number"))?;
            if f.len() != cols.len() {
                return Err(bad("wrong number of columns"));
            }
            if log.t.last().is_some_and(|&last| f[it] <= last) {
                return Err(bad("timestamps must be strictly increasing"));
            }
            log.t.push(f[it]);
            log.position
                .push(Vector3::new(f[ipos[0]], f[ipos[1]], f[ipos[2]]));
            if let (Some(r), Some(idx)) = (log.rotation.as_mut(), irot) {
                r.push(Vector3::new(f[idx[0]], f[idx[1]], f[idx[2]]));
            }
        }
        if log.t.len() < 2 {
            return Err(CliError::usage("ground truth needs at least 2 poses"));
        }
        Ok(log)
    }
}

/// Sidecar written next to an aligned trace.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    /// `R·gt + t ≈ estimate`; rotation row by row.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub points: usize,
    /// Mean of `estimate − aligned ground truth` over the aligned positions.
    pub mean_residual: [f64; 3],
    pub rms_residual: f64,
}

impl AlignmentReport {
    fn new(tf: &AlignmentTransform, gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Self {
        let res: Vec<Vector3<f64>> = gt.iter().zip(est).map(|(g, e)| e - tf.apply(g)).collect();
        let mean = res.iter().sum::<Vector3<f64>>() / res.len() as f64;
        let rms = (res.iter().map(|r| r.norm_squared()).sum::<f64>() / res.len() as f64).sqrt();
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| tf.rotation[(i, j)])),
            translation: [tf.translation.x, tf.translation.y, tf.translation.z],
            points: gt.len(),
            mean_residual: [mean.x, mean.y, mean.z],
            rms_residual: rms,
        }
    }
}

fn block_offset(trace: &TraceFile, name: &str, rule: DiffRule) -> CliResult<Option<usize>> {
    match trace.header.blocks.iter().find(|b| b.name == name) {
        None => Ok(None),
        Some(b) if b.len == 3 && b.rule == rule => Ok(Some(b.offset)),
        Some(_) => Err(CliError::usage(format!(
            "trace block {name:?} must have 3 components of the expected kind"
        ))),
    }
}

fn get3(v: &[f64], o: usize) -> Vector3<f64> {
    Vector3::new(v[o], v[o + 1], v[o + 2])
}

fn set3(v: &mut [f64], o: usize, x: &Vector3<f64>) {
    v[o..o + 3].copy_from_slice(x.as_slice());
}

/// Aligns the ground truth onto the estimate's timestamps and frame and
/// returns the trace with `x_true` replaced. Rows outside the ground-truth
/// time span are dropped.
pub fn align(
    gt: &GroundTruthLog,
    est: &TraceFile,
    backdiff_velocity: bool,
) -> CliResult<(TraceFile, AlignmentReport)> {
    let pos = block_offset(est, "position", DiffRule::Euclidean)?
        .ok_or_else(|| CliError::usage("the estimate trace has no \"position\" block"))?;
    let rot = block_offset(est, "orientation", DiffRule::RotationVector)?;
    let vel = block_offset(est, "velocity", DiffRule::Euclidean)?;
    let (t0, t1) = (gt.t[0], gt.t[gt.t.len() - 1]);
    let rows: Vec<_> = est
        .rows
        .iter()
        .filter(|r| r.t >= t0 && r.t <= t1)
        .cloned()
        .collect();
    if rows.len() < 3 {
        return Err(Error::DegenerateAlignment(format!(
            "{} common timestamps, need at least 3",
            rows.len()
        ))
        .into());
    }
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let gt_pos = interpolate_positions(&gt.t, &gt.position, &times)?;
    let est_pos: Vec<Vector3<f64>> = rows.iter().map(|r| get3(&r.x_hat, pos)).collect();
    let tf = horn_align(&gt_pos, &est_pos)?;
    let report = AlignmentReport::new(&tf, &gt_pos, &est_pos);

    let mapped: Vec<Vector3<f64>> = gt_pos.iter().map(|p| tf.apply(p)).collect();
    let rotations = match (rot, &gt.rotation) {
        (Some(_), Some(r)) => {
            let frame = UnitQuaternion::from_matrix(&tf.rotation);
            let r = interpolate_rotations(&gt.t, r, &times)?;
            Some(
                r.iter()
                    .map(|v| (frame * UnitQuaternion::from_scaled_axis(*v)).scaled_axis())
                    .collect::<Vec<_>>(),
            )
        }
        (Some(_), None) => {
            log::warn!("ground truth has no rotation; orientation truth is left as in the trace");
            None
        }
        _ => None,
    };
    let velocities = match (vel, backdiff_velocity) {
        (Some(_), true) => Some(backdifference_velocity(&mapped, est.header.dt)?),
        (None, true) => {
            return Err(CliError::usage(
                "--backdiff-velocity needs a \"velocity\" block in the trace",
            ))
        }
        (Some(_), false) => {
            log::warn!(
                "velocity truth is left as in the trace; pass --backdiff-velocity to derive it"
            );
            None
        }
        (None, false) => None,
    };
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            set3(&mut r.x_true, pos, &mapped[i]);
            if let (Some(o), Some(rv)) = (rot, &rotations) {
                set3(&mut r.x_true, o, &rv[i]);
            }
            if let (Some(o), Some(v)) = (vel, &velocities) {
                set3(&mut r.x_true, o, &v[i]);
            }
            r
        })
        .collect();
    Ok((TraceFile::new(est.header.clone(), rows)?, report))
}

pub fn run_align(
    gt_path: &Path,
    est_path: &Path,
    backdiff_velocity: bool,
    out: &Path,
) -> CliResult<AlignmentReport> {
    let gt = GroundTruthLog::parse(&io::read_text(gt_path)?).map_err(|e| e.at(gt_path))?;
    let est = io::load_traces(&[est_path.to_path_buf()])?.remove(0);
    let (aligned, report) = align(&gt, &est, backdiff_velocity)?;
    io::ensure_parent(out)?;
    io::save_trace(&aligned, out)?;
    io::write_json(&io::sibling(out, ".transform.json"), &report)?;
    Ok(report)
}

pub struct WindowArgs {
    pub traces: Vec<PathBuf>,
    pub range: (usize, usize, usize),
    pub dof: Option<u32>,
    pub bins: Option<usize>,
}

/// Candidate windows `lo, lo + step, …` up to `hi`; `lo` odd and `step` even.
pub fn windows((lo, hi, step): (usize, usize, usize)) -> CliResult<Vec<usize>> {
    if lo % 2 == 0 || step == 0 || step % 2 == 1 || lo < 3 || hi < lo {
        return Err(CliError::usage(
            "window range needs odd lo ≥ 3, hi ≥ lo and an even step",
        ));
    }
    Ok((lo..=hi).step_by(step).collect())
}

pub fn run_window_search(args: &WindowArgs, out: &Path) -> CliResult<WindowSearch> {
    let traces = io::load_traces(&io::trace_paths(&args.traces)?)?;
    let n = traces[0].dim() as u32;
    if let Some(dof) = args.dof.filter(|&d| d != n) {
        return Err(CliError::usage(format!(
            "--dof {dof} does not match the trace state dimension {n}"
        )));
    }
    let errors = traces
        .iter()
        .map(TraceFile::errors)
        .collect::<Result<Vec<_>, _>>()?;
    let longest = errors.iter().map(|e| e.len()).max().unwrap_or(0);
    let all = windows(args.range)?;
    let usable: Vec<usize> = all.iter().copied().filter(|&w| w <= longest).collect();
    if usable.is_empty() {
        return Err(Error::InvalidWindow {
            window: all[0],
            len: longest,
        }
        .into());
    }
    if usable.len() < all.len() {
        log::warn!(
            "{} windows longer than the longest trace ({longest} steps) are skipped",
            all.len() - usable.len()
        );
    }
    let search = window_search(&errors, &usable, binning(args.bins))?;
    let mut csv = String::from("window,divergence,samples\n");
    for s in &search.table {
        writeln!(csv, "{},{:?},{}", s.window, s.divergence, s.samples).expect("string write");
    }
    io::ensure_parent(out)?;
    io::write_text(out, &csv)?;
    Ok(search)
}

#[cfg(test)]
mod tests {
    use super::*;
    use covcal_core::groundtruth::StateBlock;
    use covcal_core::trace::{TraceHeader, TraceRow};

    #[test]
    fn parses_ground_truth_with_and_without_rotation() {
        let g = GroundTruthLog::parse("# comment\nt,px,py,pz\n0,1,2,3\n1,4,5,6\n").unwrap();
        assert_eq!(g.position[1], Vector3::new(4.0, 5.0, 6.0));
        assert!(g.rotation.is_none());
        let g = GroundTruthLog::parse("px,py,pz,t,rx,ry,rz\n1,2,3,0,0,0,0.1\n1,2,3,1,0,0,0.2\n")
            .unwrap();
        assert_eq!(g.t, [0.0, 1.0]);
        assert_eq!(g.rotation.unwrap()[1].z, 0.2);
        assert!(GroundTruthLog::parse("t,px,py\n0,1,2\n").is_err());
        assert!(GroundTruthLog::parse("t,px,py,pz\n1,0,0,0\n0,0,0,0\n").is_err());
    }

    #[test]
    fn window_ranges() {
        assert_eq!(windows((27, 33, 2)).unwrap(), [27, 29, 31, 33]);
        assert_eq!(windows((5, 5, 2)).unwrap(), [5]);
        assert!(windows((26, 33, 2)).is_err());
        assert!(windows((27, 33, 3)).is_err());
    }

    fn helix_trace(tf: &AlignmentTransform, len: usize) -> (GroundTruthLog, TraceFile) {
        let t: Vec<f64> = (0..len).map(|k| k as f64 * 0.1).collect();
        let gt_pos: Vec<Vector3<f64>> = t
            .iter()
            .map(|&s| Vector3::new(s.cos(), s.sin(), 0.2 * s))
            .collect();
        let gt_rot: Vec<Vector3<f64>> =
            t.iter().map(|&s| Vector3::new(0.0, 0.0, 0.1 * s)).collect();
        let mut h = TraceHeader::new(9, 0, 0.1);
        h.blocks = vec![
            StateBlock::new("position", 0, 3, DiffRule::Euclidean),
            StateBlock::new("orientation", 3, 3, DiffRule::RotationVector),
            StateBlock::new("velocity", 6, 3, DiffRule::Euclidean),
        ];
        let frame = UnitQuaternion::from_matrix(&tf.rotation);
        let rows = (0..len)
            .map(|k| {
                let mut x = vec![0.0; 9];
                set3(&mut x, 0, &tf.apply(&gt_pos[k]));
                set3(
                    &mut x,
                    3,
                    &(frame * UnitQuaternion::from_scaled_axis(gt_rot[k])).scaled_axis(),
                );
                let p = covcal_core::statmath::CovMatrix::identity(9)
                    .upper()
                    .to_vec();
                TraceRow {
                    k,
                    t: t[k],
                    x_true: vec![0.0; 9],
                    x_hat: x,
                    p_hat: p,
                }
            })
            .collect();
        (
            GroundTruthLog {
                t,
                position: gt_pos,
                rotation: Some(gt_rot),
            },
            TraceFile::new(h, rows).unwrap(),
        )
    }

    #[test]
    fn recovers_a_rigid_transform() {
        let tf = AlignmentTransform {
            rotation: *nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.3, -0.5, 1.1)).matrix(),
            translation: Vector3::new(2.0, -1.0, 0.5),
        };
        let (gt, est) = helix_trace(&tf, 60);
        let (aligned, rep) = align(&gt, &est, true).unwrap();
        for i in 0..3 {
            assert!((rep.translation[i] - tf.translation[i]).abs() < 1e-9);
            for j in 0..3 {
                assert!((rep.rotation[i][j] - tf.rotation[(i, j)]).abs() < 1e-9);
            }
        }
        assert!(rep.rms_residual < 1e-9);
        // position and orientation truth now coincide with the estimate
        let e = aligned.errors().unwrap();
        assert!(e.errors().iter().all(|v| v.rows(0, 6).norm() < 1e-9));
        // backdifferenced velocity of the mapped helix
        let r = &aligned.rows[10];
        let v = (get3(&r.x_true, 0) - get3(&aligned.rows[9].x_true, 0)) / 0.1;
        assert!((get3(&r.x_true, 6) - v).norm() < 1e-12);
    }

    #[test]
    fn identity_frames_give_identity_transform() {
        let (gt, est) = helix_trace(&AlignmentTransform::identity(), 30);
        let (_, rep) = align(&gt, &est, false).unwrap();
        assert!((rep.rotation[0][0] - 1.0).abs() < 1e-12 && rep.translation[0].abs() < 1e-12);
    }

    #[test]
    fn too_few_common_timestamps() {
        let (mut gt, est) = helix_trace(&AlignmentTransform::identity(), 30);
        gt.t = vec![100.0, 101.0];
        gt.position.truncate(2);
        gt.rotation = None;
        let err = align(&gt, &est, false).unwrap_err();
        assert!(matches!(err, CliError::Core(Error::DegenerateAlignment(_))));
        assert_eq!(err.exit_code(), 3);
    }
}
