//! Early-bird detection over the per-epoch mask sequence.
//!
//! Masks arrive once per epoch starting at epoch 1. From epoch 2 on, the
//! detector records the distance between the new mask and the previous one.
//! It fires at the first epoch `t` whose trailing `window` distances (epochs
//! `t - window + 1 ..= t`, all at least 2) are strictly below `epsilon`, and
//! the mask observed at `t` becomes the ticket. Once found, the outcome never
//! changes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{mask_distance, PruneMask};

pub const VISION_EPSILON: f64 = 0.1;
pub const TEXT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    pub max_epochs: usize,
}

fn default_window() -> usize {
    1
}

impl DetectorConfig {
    pub fn new(epsilon: f64, window: usize, max_epochs: usize) -> Result<Self> {
        let c = DetectorConfig {
            epsilon,
            window,
            max_epochs,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn vision(max_epochs: usize) -> Self {
        DetectorConfig {
            epsilon: VISION_EPSILON,
            window: 1,
            max_epochs,
        }
    }

    pub fn text(max_epochs: usize) -> Self {
        DetectorConfig {
            epsilon: TEXT_EPSILON,
            window: 1,
            max_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Searching,
    Found {
        ticket_epoch: usize,
        ticket: PruneMask,
    },
}

impl Outcome {
    pub fn ticket_epoch(&self) -> Option<usize> {
        match self {
            Outcome::Searching => None,
            Outcome::Found { ticket_epoch, .. } => Some(*ticket_epoch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorState {
    config: DetectorConfig,
    masks: Vec<PruneMask>,
    distances: Vec<f64>,
    outcome: Outcome,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(DetectorState {
            config,
            masks: Vec::new(),
            distances: Vec::new(),
            outcome: Outcome::Searching,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn outcome(&self) -> &Outcome {
        &self.outcome
    }

    /// Masks observed so far; index `i` holds epoch `i + 1`.
    pub fn masks(&self) -> &[PruneMask] {
        &self.masks
    }

    /// Distances so far; index `i` holds epoch `i + 2`.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// `(epoch, distance)` pairs.
    pub fn distance_series(&self) -> Vec<(usize, f64)> {
        self.distances
            .iter()
            .enumerate()
            .map(|(i, &d)| (i + 2, d))
            .collect()
    }

    pub fn epochs_observed(&self) -> usize {
        self.masks.len()
    }

    pub fn observe(&mut self, epoch: usize, mask: PruneMask) -> Result<&Outcome> {
        let expected = self.masks.len() + 1;
        if epoch != expected || epoch > self.config.max_epochs {
            return Err(Error::Sequencing {
                expected,
                got: epoch,
            });
        }
        if let Some(prev) = self.masks.last() {
            let d = mask_distance(prev, &mask)?.value();
            self.distances.push(d);
        }
        let fires = matches!(self.outcome, Outcome::Searching)
            && trailing_window_below(&self.distances, &self.config);
        self.masks.push(mask);
        if fires {
            self.outcome = Outcome::Found {
                ticket_epoch: epoch,
                ticket: self.masks[epoch - 1].clone(),
            };
        }
        Ok(&self.outcome)
    }

    /// Pairwise distances over every mask observed so far.
    pub fn heatmap(&self) -> Result<Vec<Vec<f64>>> {
        heatmap(&self.masks)
    }
}

fn trailing_window_below(distances: &[f64], config: &DetectorConfig) -> bool {
    let k = config.window;
    distances.len() >= k
        && distances[distances.len() - k..]
            .iter()
            .all(|&d| d < config.epsilon)
}

/// Batch form of the detection rule. `distances[i]` belongs to epoch `i + 2`;
/// epochs past `max_epochs` are ignored.
pub fn detect_offline(distances: &[f64], config: &DetectorConfig) -> Option<usize> {
    let usable = config.max_epochs.saturating_sub(1).min(distances.len());
    let mut run = 0usize;
    for (i, &d) in distances[..usable].iter().enumerate() {
        run = if d < config.epsilon { run + 1 } else { 0 };
        if run >= config.window {
            return Some(i + 2);
        }
    }
    None
}

/// `D[i][j] = mask_distance(masks[i], masks[j])`.
pub fn heatmap(masks: &[PruneMask]) -> Result<Vec<Vec<f64>>> {
    if masks.is_empty() {
        return Err(Error::Mask("heatmap needs at least one mask".into()));
    }
    let n = masks.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = mask_distance(&masks[i], &masks[j])?.value();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Heatmap as CSV: a header `epoch,<e1>,<e2>,...` then one row per epoch.
pub fn heatmap_csv(epochs: &[usize], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("epoch");
    for e in epochs {
        write!(out, ",{e}").unwrap();
    }
    out.push('\n');
    for (e, row) in epochs.iter().zip(matrix) {
        write!(out, "{e}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn distances_csv(series: &[(usize, f64)]) -> String {
    let mut out = String::from("epoch,distance\n");
    for (e, d) in series {
        writeln!(out, "{e},{d}").unwrap();
    }
    out
}
