use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vm::Histogram;

/// Per-class cycle weights. Untaken branches cost like an ALU op, and
/// `jal`/`jalr` cost like a taken branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleModel {
    pub name: String,
    pub alu: u64,
    pub bld: u64,
    pub untaken_branch: u64,
    pub taken_branch: u64,
    pub jump: u64,
    pub load_store: u64,
    pub ecall: u64,
    pub brl: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown cycle model `{0}` (expected brl<N>, e.g. brl3)")]
    Unknown(String),
    #[error("weight `{0}` must be at least 1")]
    ZeroWeight(&'static str),
}

impl CycleModel {
    /// Default weights with `brl` costing `brl` cycles.
    pub fn with_brl(brl: u64) -> Self {
        CycleModel {
            name: format!("brl{brl}"),
            alu: 1,
            bld: 1,
            untaken_branch: 1,
            taken_branch: 2,
            jump: 2,
            load_store: 3,
            ecall: 10,
            brl,
        }
    }

    /// The optimistic, realistic and conservative `brl` costs.
    pub fn standard() -> Vec<CycleModel> {
        [3, 5, 10].into_iter().map(CycleModel::with_brl).collect()
    }

    /// Parses `brl<N>`.
    pub fn named(name: &str) -> Result<Self, ModelError> {
        let w = name
            .strip_prefix("brl")
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| ModelError::Unknown(name.to_string()))?;
        let m = CycleModel::with_brl(w);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let weights = [
            ("alu", self.alu),
            ("bld", self.bld),
            ("untaken_branch", self.untaken_branch),
            ("taken_branch", self.taken_branch),
            ("jump", self.jump),
            ("load_store", self.load_store),
            ("ecall", self.ecall),
            ("brl", self.brl),
        ];
        match weights.iter().find(|(_, w)| *w == 0) {
            Some((name, _)) => Err(ModelError::ZeroWeight(name)),
            None => Ok(()),
        }
    }
}

pub fn weighted_cycles(h: &Histogram, cm: &CycleModel) -> u64 {
    h.alu * cm.alu
        + h.bld * cm.bld
        + h.untaken_branch * cm.untaken_branch
        + h.taken_branch * cm.taken_branch
        + h.jump * cm.jump
        + h.load_store * cm.load_store
        + h.ecall * cm.ecall
        + h.brl * cm.brl
}

/// `(bld + brl) / retired`, in percent.
pub fn cfi_density(h: &Histogram) -> f64 {
    match h.total() {
        0 => 0.0,
        n => 100.0 * (h.bld + h.brl) as f64 / n as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("baseline has zero weighted cycles")]
pub struct ZeroBaseline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub model: String,
    pub baseline_cycles: u64,
    pub instrumented_cycles: u64,
    pub overhead_pct: f64,
}

pub fn overhead_pct(base_cycles: u64, inst_cycles: u64) -> Result<f64, ZeroBaseline> {
    if base_cycles == 0 {
        return Err(ZeroBaseline);
    }
    Ok(100.0 * (inst_cycles as f64 - base_cycles as f64) / base_cycles as f64)
}

pub fn overhead(base: &Histogram, inst: &Histogram, cm: &CycleModel) -> Result<OverheadRow, ZeroBaseline> {
    let baseline_cycles = weighted_cycles(base, cm);
    let instrumented_cycles = weighted_cycles(inst, cm);
    Ok(OverheadRow {
        model: cm.name.clone(),
        baseline_cycles,
        instrumented_cycles,
        overhead_pct: overhead_pct(baseline_cycles, instrumented_cycles)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub cfi_density_pct: f64,
    pub models: Vec<OverheadRow>,
}

pub fn overhead_report(
    base: &Histogram,
    inst: &Histogram,
    models: &[CycleModel],
) -> Result<OverheadReport, ZeroBaseline> {
    Ok(OverheadReport {
        cfi_density_pct: cfi_density(inst),
        models: models.iter().map(|m| overhead(base, inst, m)).collect::<Result<_, _>>()?,
    })
}
