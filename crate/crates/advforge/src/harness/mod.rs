//! Experiment orchestration: robustness sweeps over an attack-strength
//! grid, checkpoint persistence, and CSV/SVG report emission.

pub mod checkpoint;
pub mod report;

use crate::attack::{craft_dataset, AttackConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::train::{evaluate_accuracy, evaluate_ensemble_accuracy, Ensemble};

/// What a sweep evaluates.
pub enum EvalTarget<'a> {
    Single(&'a Network),
    Ensemble(&'a Ensemble),
}

/// Which model crafts the attack inputs for each sweep point.
pub enum CraftModel<'a> {
    /// White-box against the evaluated network (single models only).
    WhiteBox,
    /// A fixed substitute model; required for ensembles, whose combined
    /// vote has no single white-box gradient.
    Substitute(&'a Network),
}

/// Test accuracy per attack strength plus its arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub attack_grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub average: f64,
    pub model_id: String,
    pub config_digest: String,
}

impl RobustnessCurve {
    pub fn validate(&self) -> Result<()> {
        if self.attack_grid.len() != self.accuracy.len() {
            return Err(Error::InvalidArg(
                "curve grid and accuracy lengths differ".into(),
            ));
        }
        let mean = self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64;
        if (mean - self.average).abs() > 1e-12 {
            return Err(Error::InvalidArg(format!(
                "curve average {} does not match mean {mean}",
                self.average
            )));
        }
        Ok(())
    }
}

/// Craft the full test set at each grid strength and record accuracy.
/// The grid must ascend and start at 0; the zero point uses the clean
/// test set unmodified.
pub fn evaluate_robustness(
    target: &EvalTarget,
    test: &LabeledDataset,
    attack_grid: &[f64],
    craft: &CraftModel,
    model_id: &str,
    config_digest: &str,
) -> Result<RobustnessCurve> {
    if attack_grid.is_empty() {
        return Err(Error::InvalidArg("empty attack grid".into()));
    }
    if attack_grid[0] != 0.0 {
        return Err(Error::InvalidArg("attack grid must start at 0".into()));
    }
    for w in attack_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArg("attack grid must ascend".into()));
        }
    }
    let crafter: &Network = match (target, craft) {
        (EvalTarget::Single(net), CraftModel::WhiteBox) => net,
        (_, CraftModel::Substitute(net)) => net,
        (EvalTarget::Ensemble(_), CraftModel::WhiteBox) => {
            return Err(Error::InvalidArg(
                "ensembles must be attacked via a substitute model".into(),
            ))
        }
    };
    let mut accuracy = Vec::with_capacity(attack_grid.len());
    for &eps in attack_grid {
        let attacked = if eps == 0.0 {
            test.clone()
        } else {
            craft_dataset(crafter, test, &AttackConfig::new(eps))?
        };
        accuracy.push(match target {
            EvalTarget::Single(net) => evaluate_accuracy(net, &attacked)?,
            EvalTarget::Ensemble(ens) => evaluate_ensemble_accuracy(ens, &attacked)?,
        });
    }
    let average = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    Ok(RobustnessCurve {
        attack_grid: attack_grid.to_vec(),
        accuracy,
        average,
        model_id: model_id.to_string(),
        config_digest: config_digest.to_string(),
    })
}
