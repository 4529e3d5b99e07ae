use std::fmt;

use serde::{Deserialize, Serialize};

/// Dynamic instruction counts per cycle-weight class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub alu: u64,
    pub load_store: u64,
    pub taken_branch: u64,
    pub untaken_branch: u64,
    pub jump: u64,
    pub ecall: u64,
    pub bld: u64,
    pub brl: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.alu
            + self.load_store
            + self.taken_branch
            + self.untaken_branch
            + self.jump
            + self.ecall
            + self.bld
            + self.brl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    CfpInvalid,
    CfpUnauthorized,
    CfpMissingLanding,
    PermViolation,
    IllegalInstruction,
    MisalignedAccess,
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::CfpInvalid => "cfp_invalid",
            FaultKind::CfpUnauthorized => "cfp_unauthorized",
            FaultKind::CfpMissingLanding => "cfp_missing_landing",
            FaultKind::PermViolation => "perm_violation",
            FaultKind::IllegalInstruction => "illegal_instruction",
            FaultKind::MisalignedAccess => "misaligned_access",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub kind: FaultKind,
    pub pc: u64,
    /// `function.block+index` of the faulting pc, when it lies in text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sid_src: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sid_t: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BrlOutcome {
    Pass,
    Skip,
    Fail,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrlOutcomes {
    pub pass: u64,
    pub skip: u64,
    pub fail: u64,
}

impl BrlOutcomes {
    pub fn record(&mut self, o: BrlOutcome) {
        match o {
            BrlOutcome::Pass => self.pass += 1,
            BrlOutcome::Skip => self.skip += 1,
            BrlOutcome::Fail => self.fail += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.pass + self.skip + self.fail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub schema: String,
    pub histogram: Histogram,
    pub brl_outcomes: BrlOutcomes,
    pub probe_reads: u64,
    pub retired: u64,
    pub fault: Option<FaultRecord>,
    pub exit_code: Option<i64>,
    /// Values printed through ecall 1.
    pub output: Vec<i64>,
    pub goal_reached: bool,
}

/// One committed (or faulting) instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub pc: u64,
    pub mnemonic: &'static str,
    pub bld: Option<u32>,
    /// `(SID_T, BRState.sid at check, outcome)`.
    pub brl: Option<(u32, u32, BrlOutcome)>,
    pub fault: Option<FaultKind>,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x} {}", self.pc, self.mnemonic)?;
        if let Some((_, _, o)) = self.brl {
            let tag = match o {
                BrlOutcome::Pass => "PASS",
                BrlOutcome::Skip => "SKIP",
                BrlOutcome::Fail => "FAIL",
            };
            write!(f, " brl:{tag}")?;
        }
        if let Some(k) = self.fault {
            write!(f, " fault:{k}")?;
        }
        Ok(())
    }
}
