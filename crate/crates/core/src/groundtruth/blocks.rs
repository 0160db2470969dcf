use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::align::rotation_difference;
use super::ErrorSeries;
use crate::error::{Error, Result};

pub const ZERO_MEAN_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffRule {
    Euclidean,
    /// Three components holding a rotation vector; the error is the rotation
    /// vector of the relative rotation.
    RotationVector,
}

/// A named slice of the state vector and how errors are formed on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    #[serde(default = "default_rule")]
    pub rule: DiffRule,
}

fn default_rule() -> DiffRule {
    DiffRule::Euclidean
}

impl StateBlock {
    pub fn new(name: &str, offset: usize, len: usize, rule: DiffRule) -> Self {
        Self {
            name: name.into(),
            offset,
            len,
            rule,
        }
    }

    /// Checks that blocks lie inside an `n`-dim state and rotation blocks have 3 components.
    pub fn validate_all(blocks: &[StateBlock], n: usize) -> Result<()> {
        for b in blocks {
            if b.len == 0 || b.offset + b.len > n {
                return Err(Error::invalid(format!(
                    "block {} does not fit a {n}-dim state",
                    b.name
                )));
            }
            if b.rule == DiffRule::RotationVector && b.len != 3 {
                return Err(Error::invalid(format!(
                    "rotation block {} must have 3 components",
                    b.name
                )));
            }
        }
        Ok(())
    }

    /// `truth − estimate` with each block's difference rule; components not
    /// covered by a block use plain subtraction.
    pub fn state_error(
        blocks: &[StateBlock],
        truth: &DVector<f64>,
        estimate: &DVector<f64>,
    ) -> DVector<f64> {
        let mut e = truth - estimate;
        for b in blocks.iter().filter(|b| b.rule == DiffRule::RotationVector) {
            let o = b.offset;
            let t = Vector3::new(truth[o], truth[o + 1], truth[o + 2]);
            let h = Vector3::new(estimate[o], estimate[o + 1], estimate[o + 2]);
            e.rows_mut(o, 3).copy_from(&rotation_difference(&t, &h));
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMean {
    pub block: String,
    pub mean_error_norm: f64,
    pub mean_gt_norm: f64,
    pub ratio: f64,
    pub flagged: bool,
}

/// Norm of the mean error per block over all sequences, relative to the mean
/// ground-truth norm of that block. Blocks above `threshold` are flagged.
pub fn zero_mean_report(
    sequences: &[ErrorSeries],
    blocks: &[StateBlock],
    gt_norms: &[f64],
    threshold: f64,
) -> Result<Vec<BlockMean>> {
    if blocks.len() != gt_norms.len() {
        return Err(Error::invalid("one reference norm is required per block"));
    }
    let first = sequences
        .first()
        .ok_or(Error::EmptyInput("zero-mean report sequences"))?;
    StateBlock::validate_all(blocks, first.dim())?;
    if sequences.iter().any(|s| s.dim() != first.dim()) {
        return Err(Error::invalid("sequences differ in dimension"));
    }
    let count: usize = sequences.iter().map(ErrorSeries::len).sum();
    let sum: DVector<f64> = sequences
        .iter()
        .flat_map(|s| s.errors())
        .fold(DVector::zeros(first.dim()), |acc, e| acc + e);
    let mean = sum / count as f64;
    Ok(blocks
        .iter()
        .zip(gt_norms)
        .map(|(b, &gt)| {
            let m = mean.rows(b.offset, b.len).norm();
            let ratio = if gt > 0.0 { m / gt } else { f64::INFINITY };
            BlockMean {
                block: b.name.clone(),
                mean_error_norm: m,
                mean_gt_norm: gt,
                ratio,
                flagged: ratio > threshold,
            }
        })
        .collect())
}
