//! bld/brl insertion and metadata attachment.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::bloom::{build_image, ImageError, MetadataImage};
use crate::ir::{BlockRef, DataBlob, Instruction, Program, Sid, SiteId, ValidationError, META_SYMBOL};
use crate::policy::{
    assign_sids, build_cfg_policy, build_func_policy, AuthorizationPolicy, Granularity, LandingSite, PolicyError,
    PolicyKind, SidMap,
};

pub const DEFAULT_FP: f64 = 1e-3;
pub const DEFAULT_SEEDS: (u64, u64) = (0x243F_6A88_85A3_08D3, 0x1319_8A2E_0370_7344);
/// Nominal encoded size of every instruction.
pub const INSTR_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error("protected site `{0}` is not an annotated jalr")]
    NoSite(SiteId),
    #[error("protected site `{0}` has no region SID")]
    NoRegion(SiteId),
    #[error("landing site `{0}` does not exist or has no SID")]
    NoLanding(LandingSite),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("instrumented program is invalid: {0}")]
    Invalid(#[from] ValidationError),
    #[error("metadata blob: {0}")]
    Metadata(#[from] ImageError),
    #[error("metadata blob `{META_SYMBOL}` missing or not read-only bytes")]
    MissingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentedProgram {
    pub program: Program,
    pub metadata: MetadataImage,
    /// bld SID in front of each instrumented jalr.
    pub site_index: BTreeMap<SiteId, Sid>,
    /// brl SID_T at each protected landing site.
    pub landing_index: BTreeMap<LandingSite, Sid>,
}

impl InstrumentedProgram {
    /// Recovers the indexes from an already-instrumented program (for
    /// example one read back from its textual form).
    pub fn from_program(program: Program) -> Result<Self, InstrumentError> {
        let blob = program.rodata.iter().find(|b| b.symbol == META_SYMBOL).ok_or(InstrumentError::MissingMetadata)?;
        let bytes = blob.plain_bytes().ok_or(InstrumentError::MissingMetadata)?;
        let metadata = MetadataImage::parse(&bytes)?;
        let mut site_index = BTreeMap::new();
        let mut landing_index = BTreeMap::new();
        for f in &program.functions {
            for b in &f.blocks {
                if let Some(Instruction::Brl { sid }) = b.instructions.first() {
                    landing_index.insert(BlockRef::new(&f.name, &b.label), *sid);
                }
                for w in b.instructions.windows(2) {
                    if let (Instruction::Bld { sid }, Instruction::Jalr { site: Some(_), .. }) = (&w[0], &w[1]) {
                        site_index.insert(SiteId::new(&f.name, &b.label), *sid);
                    }
                }
            }
        }
        Ok(InstrumentedProgram { program, metadata, site_index, landing_index })
    }

    pub fn metadata_bytes(&self) -> Vec<u8> {
        self.metadata.to_bytes()
    }
}

/// Inserts `bld` before every protected jalr, prepends `brl SID_T` to every
/// protected landing block and attaches the metadata image as `__brl_meta`.
pub fn instrument(
    p: &Program,
    sm: &SidMap,
    policy: &AuthorizationPolicy,
    fp_target: f64,
    seeds: (u64, u64),
) -> Result<InstrumentedProgram, InstrumentError> {
    if p.is_instrumented() {
        return Err(InstrumentError::AlreadyInstrumented);
    }
    let mut out = p.clone();
    let mut site_index = BTreeMap::new();
    for site in &policy.sites {
        let sid = sm.source_sid(&site.site).ok_or_else(|| InstrumentError::NoRegion(site.site.clone()))?;
        let block = block_mut(&mut out, &site.site).ok_or_else(|| InstrumentError::NoSite(site.site.clone()))?;
        let idx = block
            .instructions
            .iter()
            .position(|i| i.site().is_some())
            .ok_or_else(|| InstrumentError::NoSite(site.site.clone()))?;
        block.instructions.insert(idx, Instruction::Bld { sid });
        site_index.insert(site.site.clone(), sid);
    }
    let mut landing_index = BTreeMap::new();
    for t in &policy.targets {
        if sm.target_sid(&t.landing) != Some(t.sid_t) {
            return Err(InstrumentError::NoLanding(t.landing.clone()));
        }
        let block = block_mut(&mut out, &t.landing).ok_or_else(|| InstrumentError::NoLanding(t.landing.clone()))?;
        block.instructions.insert(0, Instruction::Brl { sid: t.sid_t });
        landing_index.insert(t.landing.clone(), t.sid_t);
    }
    let metadata = build_image(&policy.allowed_sources(), fp_target, seeds);
    out.rodata.push(DataBlob::from_bytes(META_SYMBOL, &metadata.to_bytes(), false));
    out.validate()?;
    Ok(InstrumentedProgram { program: out, metadata, site_index, landing_index })
}

fn block_mut<'a>(p: &'a mut Program, r: &BlockRef) -> Option<&'a mut crate::ir::BasicBlock> {
    p.functions.iter_mut().find(|f| f.name == r.function)?.blocks.iter_mut().find(|b| b.label == r.label)
}

/// Everything needed to go from a plain program to an instrumented one.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub policy: PolicyKind,
    pub granularity: Granularity,
    pub fp_target: f64,
    pub seeds: (u64, u64),
}

impl Config {
    pub fn new(policy: PolicyKind, granularity: Granularity) -> Self {
        Config { policy, granularity, fp_target: DEFAULT_FP, seeds: DEFAULT_SEEDS }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub sid_map: SidMap,
    pub policy: AuthorizationPolicy,
    pub instrumented: InstrumentedProgram,
}

/// SID assignment, policy construction and instrumentation in one call.
pub fn run_pipeline(p: &Program, cfg: &Config) -> Result<Pipeline, InstrumentError> {
    let sid_map = assign_sids(p, &cfg.granularity)?;
    let policy = match cfg.policy {
        PolicyKind::FuncType => build_func_policy(p, &sid_map)?,
        PolicyKind::Cfg => build_cfg_policy(p, &sid_map)?,
    };
    let instrumented = instrument(p, &sid_map, &policy, cfg.fp_target, cfg.seeds)?;
    Ok(Pipeline { sid_map, policy, instrumented })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub base_text_instrs: usize,
    pub inst_text_instrs: usize,
    pub text_overhead_pct: f64,
    pub rodata_meta_bytes: usize,
    /// Growth of text bytes plus rodata bytes.
    pub total_overhead_pct: f64,
}

fn rodata_bytes(p: &Program) -> usize {
    p.rodata.iter().map(DataBlob::size).sum()
}

fn pct(base: usize, inst: usize) -> f64 {
    if base == 0 {
        0.0
    } else {
        100.0 * (inst as f64 - base as f64) / base as f64
    }
}

pub fn size_report(base: &Program, inst: &InstrumentedProgram) -> SizeReport {
    let base_text_instrs = base.instruction_count();
    let inst_text_instrs = inst.program.instruction_count();
    let base_total = base_text_instrs * INSTR_BYTES + rodata_bytes(base);
    let inst_total = inst_text_instrs * INSTR_BYTES + rodata_bytes(&inst.program);
    SizeReport {
        base_text_instrs,
        inst_text_instrs,
        text_overhead_pct: pct(base_text_instrs, inst_text_instrs),
        rodata_meta_bytes: inst.metadata.byte_len(),
        total_overhead_pct: pct(base_total, inst_total),
    }
}
