//! In-order interpreter with BRState, landing checks and page permissions.
//!
//! Address map: text at [`TEXT_BASE`] (4 bytes per instruction, read and
//! execute), read-only data at [`RODATA_BASE`], writable data at
//! [`DATA_BASE`], and a stack ending at [`STACK_TOP`]. Blobs are 8-byte
//! aligned in declaration order. BRState is not memory-mapped.
//!
//! Syscalls use `a7`: 0 halts with exit code `a0`, 1 prints `a0`, 2 marks
//! the attacker goal and halts.

mod memory;
mod report;

use std::collections::HashMap;

use thiserror::Error;

pub use memory::{MemError, Memory, Perm, Region};
pub use report::{BrlOutcome, BrlOutcomes, ExecutionReport, FaultKind, FaultRecord, Histogram, TraceEntry};

use crate::bloom::{ImageError, ImageView};
use crate::instrument::InstrumentedProgram;
use crate::ir::{AluImmOp, AluOp, BlockRef, BranchOp, DataBlob, DataItem, Instruction, Program, Reg, Sid, META_SYMBOL};

pub const TEXT_BASE: u64 = 0x1_0000;
pub const RODATA_BASE: u64 = 0x10_0000;
pub const DATA_BASE: u64 = 0x20_0000;
pub const STACK_TOP: u64 = 0x8000_0000;
pub const STACK_SIZE: usize = 64 * 1024;
pub const DEFAULT_MAX_STEPS: u64 = 100_000_000;

pub const ECALL_EXIT: u64 = 0;
pub const ECALL_PRINT: u64 = 1;
pub const ECALL_GOAL: u64 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BrState {
    pub valid: bool,
    pub sid: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LastTransfer {
    #[default]
    None,
    Direct,
    Indirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapPolicy {
    SaveRestore,
    ClearOnTrap,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("metadata blob rejected: {0}")]
    Metadata(#[from] ImageError),
    #[error("unresolved symbol `{0}`")]
    Unresolved(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("step budget of {0} exhausted")]
    StepBudget(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CorruptError {
    #[error("target is read-only")]
    ReadOnly,
    #[error("target is not mapped")]
    Unmapped,
}

#[derive(Debug, Clone)]
enum Op {
    Alu { op: AluOp, rd: Reg, rs1: Reg, rs2: Reg },
    AluImm { op: AluImmOp, rd: Reg, rs1: Reg, imm: i64 },
    Ld { rd: Reg, base: Reg, offset: i64 },
    Sd { src: Reg, base: Reg, offset: i64 },
    Branch { op: BranchOp, rs1: Reg, rs2: Reg, target: u64 },
    Jal { rd: Reg, target: u64 },
    Jalr { rd: Reg, base: Reg, offset: i64, indirect: bool },
    Ecall,
    Bld(Sid),
    Brl(Sid),
    La { rd: Reg, addr: u64 },
}

#[derive(Debug, Clone)]
pub struct Machine {
    ops: Vec<Op>,
    mnemonics: Vec<&'static str>,
    locations: Vec<String>,
    symbols: HashMap<String, u64>,
    regs: [u64; 32],
    pc: u64,
    mem: Memory,
    brstate: BrState,
    last_transfer: LastTransfer,
    after_bld: bool,
    pending_landing: bool,
    halted: bool,
    fault: Option<FaultRecord>,
    exit_code: Option<i64>,
    meta: Option<(usize, usize)>,
    histogram: Histogram,
    outcomes: BrlOutcomes,
    probe_reads: u64,
    retired: u64,
    output: Vec<i64>,
    goal_reached: bool,
    trace: Option<Vec<TraceEntry>>,
}

fn layout_blobs(blobs: &[DataBlob], base: u64, symbols: &mut HashMap<String, u64>) -> u64 {
    let mut at = base;
    for b in blobs {
        symbols.insert(b.symbol.clone(), at);
        at += (b.size() as u64).next_multiple_of(8);
    }
    at - base
}

fn blob_bytes(blobs: &[DataBlob], len: u64, symbols: &HashMap<String, u64>) -> Result<Vec<u8>, LoadError> {
    let mut out = Vec::with_capacity(len as usize);
    for b in blobs {
        for item in &b.items {
            match item {
                DataItem::Byte(v) => out.push(*v),
                DataItem::Word(w) => out.extend_from_slice(&w.to_le_bytes()),
                DataItem::Addr(s) => {
                    let a = symbols.get(s).ok_or_else(|| LoadError::Unresolved(s.clone()))?;
                    out.extend_from_slice(&a.to_le_bytes());
                }
            }
        }
        out.resize(out.len().next_multiple_of(8), 0);
    }
    Ok(out)
}

impl Machine {
    /// Maps a validated program. The `__brl_meta` blob, when present, is
    /// validated here and consulted in place at every checked `brl`.
    pub fn load(p: &Program) -> Result<Machine, LoadError> {
        let mut symbols = HashMap::new();
        let mut block_addrs: HashMap<BlockRef, u64> = HashMap::new();
        let mut at = TEXT_BASE;
        for f in &p.functions {
            for (i, b) in f.blocks.iter().enumerate() {
                if i == 0 {
                    symbols.insert(f.name.clone(), at);
                }
                symbols.insert(format!("{}.{}", f.name, b.label), at);
                block_addrs.insert(BlockRef::new(&f.name, &b.label), at);
                at += 4 * b.instructions.len() as u64;
            }
        }
        let text_len = at - TEXT_BASE;
        let ro_len = layout_blobs(&p.rodata, RODATA_BASE, &mut symbols);
        let rw_len = layout_blobs(&p.data, DATA_BASE, &mut symbols);

        let mut ops = Vec::new();
        let mut mnemonics = Vec::new();
        let mut locations = Vec::new();
        for f in &p.functions {
            let local = |name: &str| -> Result<u64, LoadError> {
                block_addrs
                    .get(&BlockRef::new(&f.name, name))
                    .or_else(|| symbols.get(name).filter(|_| p.function(name).is_some()))
                    .copied()
                    .ok_or_else(|| LoadError::Unresolved(name.to_string()))
            };
            for b in &f.blocks {
                for (idx, ins) in b.instructions.iter().enumerate() {
                    let op = match ins {
                        Instruction::Alu { op, rd, rs1, rs2 } => Op::Alu { op: *op, rd: *rd, rs1: *rs1, rs2: *rs2 },
                        Instruction::AluImm { op, rd, rs1, imm } => {
                            Op::AluImm { op: *op, rd: *rd, rs1: *rs1, imm: *imm }
                        }
                        Instruction::Ld { rd, base, offset } => Op::Ld { rd: *rd, base: *base, offset: *offset },
                        Instruction::Sd { src, base, offset } => Op::Sd { src: *src, base: *base, offset: *offset },
                        Instruction::Branch { op, rs1, rs2, target } => {
                            Op::Branch { op: *op, rs1: *rs1, rs2: *rs2, target: local(target)? }
                        }
                        Instruction::Jal { rd, target } => Op::Jal { rd: *rd, target: local(target)? },
                        Instruction::Jalr { rd, base, offset, site } => {
                            Op::Jalr { rd: *rd, base: *base, offset: *offset, indirect: site.is_some() }
                        }
                        Instruction::Ecall => Op::Ecall,
                        Instruction::Bld { sid } => Op::Bld(*sid),
                        Instruction::Brl { sid } => Op::Brl(*sid),
                        Instruction::La { rd, symbol } => Op::La {
                            rd: *rd,
                            addr: *symbols.get(symbol).ok_or_else(|| LoadError::Unresolved(symbol.clone()))?,
                        },
                    };
                    ops.push(op);
                    mnemonics.push(ins.mnemonic());
                    locations.push(format!("{}.{}+{}", f.name, b.label, idx));
                }
            }
        }

        let text: Vec<u8> = (0..text_len / 4).flat_map(|i| (i as u32).to_le_bytes()).collect();
        let rodata = blob_bytes(&p.rodata, ro_len, &symbols)?;
        let data = blob_bytes(&p.data, rw_len, &symbols)?;
        let meta = match symbols.get(META_SYMBOL) {
            Some(&addr) if p.rodata.iter().any(|b| b.symbol == META_SYMBOL) => {
                let off = (addr - RODATA_BASE) as usize;
                let len = p.blob(META_SYMBOL).map(DataBlob::size).unwrap_or(0);
                ImageView::new(&rodata[off..off + len])?;
                Some((off, len))
            }
            _ => None,
        };
        let mem = Memory::new(vec![
            Region { name: "text", base: TEXT_BASE, bytes: text, perm: Perm::RX },
            Region { name: "rodata", base: RODATA_BASE, bytes: rodata, perm: Perm::R },
            Region { name: "data", base: DATA_BASE, bytes: data, perm: Perm::RW },
            Region { name: "stack", base: STACK_TOP - STACK_SIZE as u64, bytes: vec![0; STACK_SIZE], perm: Perm::RW },
        ]);
        let mut regs = [0u64; 32];
        regs[Reg::SP.index()] = STACK_TOP;
        let pc = symbols[&p.entry];
        Ok(Machine {
            ops,
            mnemonics,
            locations,
            symbols,
            regs,
            pc,
            mem,
            brstate: BrState::default(),
            last_transfer: LastTransfer::None,
            after_bld: false,
            pending_landing: false,
            halted: false,
            fault: None,
            exit_code: None,
            meta,
            histogram: Histogram::default(),
            outcomes: BrlOutcomes::default(),
            probe_reads: 0,
            retired: 0,
            output: Vec::new(),
            goal_reached: false,
            trace: None,
        })
    }

    pub fn load_instrumented(ip: &InstrumentedProgram) -> Result<Machine, LoadError> {
        Machine::load(&ip.program)
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn pc(&self) -> u64 {
        self.pc
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        if r != Reg::ZERO {
            self.regs[r.index()] = v;
        }
    }

    pub fn brstate(&self) -> BrState {
        self.brstate
    }

    pub fn last_transfer(&self) -> LastTransfer {
        self.last_transfer
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    /// Address of a function, `function.label` or data blob.
    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).copied()
    }

    pub fn block_addr(&self, b: &BlockRef) -> Option<u64> {
        self.symbol(&b.to_string())
    }

    /// `function.block+index` for a text address.
    pub fn location(&self, pc: u64) -> Option<&str> {
        self.index_of(pc).map(|i| self.locations[i].as_str())
    }

    pub fn is_stopped(&self) -> bool {
        self.halted || self.fault.is_some()
    }

    pub fn fault(&self) -> Option<&FaultRecord> {
        self.fault.as_ref()
    }

    pub fn outcomes(&self) -> BrlOutcomes {
        self.outcomes
    }

    pub fn histogram(&self) -> Histogram {
        self.histogram
    }

    fn index_of(&self, pc: u64) -> Option<usize> {
        if pc < TEXT_BASE || !(pc - TEXT_BASE).is_multiple_of(4) {
            return None;
        }
        let i = ((pc - TEXT_BASE) / 4) as usize;
        (i < self.ops.len()).then_some(i)
    }

    fn raise(&mut self, kind: FaultKind, pc: u64, sid_src: Option<u32>, sid_t: Option<u32>) {
        self.fault = Some(FaultRecord { kind, pc, location: self.location(pc).map(str::to_string), sid_src, sid_t });
    }

    fn push_trace(&mut self, e: TraceEntry) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    /// Attacker write. Succeeds only on writable memory; BRState has no
    /// address and is therefore out of reach.
    pub fn corrupt(&mut self, addr: u64, value: u64) -> Result<(), CorruptError> {
        self.corrupt_bytes(addr, &value.to_le_bytes())
    }

    pub fn corrupt_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), CorruptError> {
        self.mem.write_bytes(addr, bytes).map_err(|e| match e {
            MemError::Unmapped => CorruptError::Unmapped,
            _ => CorruptError::ReadOnly,
        })
    }

    /// Redirects control as if a corrupted indirect transfer (with no
    /// preceding `bld` of its own) had just committed.
    pub fn hijack(&mut self, target: u64) {
        self.pc = target;
        self.last_transfer = LastTransfer::Indirect;
        self.pending_landing = self.brstate.valid;
        self.after_bld = false;
    }

    /// A trap taken between two instructions, followed by a return to the
    /// same point.
    pub fn trap_roundtrip(&mut self, policy: TrapPolicy) {
        if policy == TrapPolicy::ClearOnTrap {
            self.brstate = BrState::default();
        }
    }

    /// Executes one instruction. No-op once halted or faulted.
    pub fn step(&mut self) {
        if self.is_stopped() {
            return;
        }
        let pc = self.pc;
        let pending = std::mem::take(&mut self.pending_landing);
        let sid_src = self.brstate.valid.then_some(self.brstate.sid);
        let Some(idx) = self.index_of(pc) else {
            let kind = if pending { FaultKind::CfpMissingLanding } else { FaultKind::PermViolation };
            self.raise(kind, pc, sid_src, None);
            return;
        };
        let op = self.ops[idx].clone();
        let mnemonic = self.mnemonics[idx];
        if pending && !matches!(op, Op::Brl(_)) {
            self.raise(FaultKind::CfpMissingLanding, pc, sid_src, None);
            self.push_trace(TraceEntry {
                pc,
                mnemonic,
                bld: None,
                brl: None,
                fault: Some(FaultKind::CfpMissingLanding),
            });
            return;
        }
        if self.after_bld && !matches!(op, Op::Jalr { indirect: true, .. }) {
            self.brstate.valid = false;
        }
        self.after_bld = false;

        let r = |m: &Machine, reg: Reg| m.regs[reg.index()];
        let mut next = pc + 4;
        let mut transfer = LastTransfer::None;
        let mut entry = TraceEntry { pc, mnemonic, bld: None, brl: None, fault: None };
        match op {
            Op::Alu { op, rd, rs1, rs2 } => {
                let (a, b) = (r(self, rs1), r(self, rs2));
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Xor => a ^ b,
                };
                self.set_reg(rd, v);
                self.histogram.alu += 1;
            }
            Op::AluImm { op, rd, rs1, imm } => {
                let a = r(self, rs1);
                let v = match op {
                    AluImmOp::Addi => a.wrapping_add(imm as u64),
                    AluImmOp::Slli => a << (imm & 63),
                    AluImmOp::Srli => a >> (imm & 63),
                };
                self.set_reg(rd, v);
                self.histogram.alu += 1;
            }
            Op::La { rd, addr } => {
                self.set_reg(rd, addr);
                self.histogram.alu += 1;
            }
            Op::Ld { rd, base, offset } => match self.mem.load(r(self, base).wrapping_add(offset as u64)) {
                Ok(v) => {
                    self.set_reg(rd, v);
                    self.histogram.load_store += 1;
                }
                Err(e) => return self.mem_fault(e, entry),
            },
            Op::Sd { src, base, offset } => {
                match self.mem.store(r(self, base).wrapping_add(offset as u64), r(self, src)) {
                    Ok(()) => self.histogram.load_store += 1,
                    Err(e) => return self.mem_fault(e, entry),
                }
            }
            Op::Branch { op, rs1, rs2, target } => {
                let (a, b) = (r(self, rs1), r(self, rs2));
                let taken = match op {
                    BranchOp::Beq => a == b,
                    BranchOp::Bne => a != b,
                    BranchOp::Blt => (a as i64) < (b as i64),
                };
                if taken {
                    next = target;
                    transfer = LastTransfer::Direct;
                    self.histogram.taken_branch += 1;
                } else {
                    self.histogram.untaken_branch += 1;
                }
            }
            Op::Jal { rd, target } => {
                self.set_reg(rd, pc + 4);
                next = target;
                transfer = LastTransfer::Direct;
                self.histogram.jump += 1;
            }
            Op::Jalr { rd, base, offset, indirect } => {
                next = r(self, base).wrapping_add(offset as u64) & !1;
                self.set_reg(rd, pc + 4);
                if indirect {
                    transfer = LastTransfer::Indirect;
                    self.pending_landing = self.brstate.valid;
                } else {
                    transfer = LastTransfer::Direct;
                }
                self.histogram.jump += 1;
            }
            Op::Ecall => {
                let a0 = r(self, Reg::A0);
                match r(self, Reg::A7) {
                    ECALL_EXIT => {
                        self.halted = true;
                        self.exit_code = Some(a0 as i64);
                    }
                    ECALL_PRINT => self.output.push(a0 as i64),
                    ECALL_GOAL => {
                        self.halted = true;
                        self.goal_reached = true;
                        self.exit_code = Some(a0 as i64);
                    }
                    _ => {
                        self.raise(FaultKind::IllegalInstruction, pc, None, None);
                        entry.fault = Some(FaultKind::IllegalInstruction);
                        self.push_trace(entry);
                        return;
                    }
                }
                self.histogram.ecall += 1;
            }
            Op::Bld(sid) => {
                self.brstate = BrState { valid: true, sid: sid.get() };
                self.after_bld = true;
                entry.bld = Some(sid.get());
                self.histogram.bld += 1;
            }
            Op::Brl(sid_t) => {
                self.histogram.brl += 1;
                let held = self.brstate.sid;
                let (outcome, fault) = self.check_landing(sid_t);
                self.outcomes.record(outcome);
                entry.brl = Some((sid_t.get(), held, outcome));
                if let Some(kind) = fault {
                    self.retired += 1;
                    self.raise(kind, pc, (kind != FaultKind::CfpInvalid).then_some(held), Some(sid_t.get()));
                    entry.fault = Some(kind);
                    self.push_trace(entry);
                    return;
                }
            }
        }
        self.regs[0] = 0;
        self.last_transfer = transfer;
        self.pc = next;
        self.retired += 1;
        self.push_trace(entry);
    }

    fn mem_fault(&mut self, e: MemError, mut entry: TraceEntry) {
        let kind = match e {
            MemError::Misaligned => FaultKind::MisalignedAccess,
            MemError::Unmapped | MemError::ReadOnly => FaultKind::PermViolation,
        };
        self.raise(kind, entry.pc, None, None);
        entry.fault = Some(kind);
        self.push_trace(entry);
    }

    fn check_landing(&mut self, sid_t: Sid) -> (BrlOutcome, Option<FaultKind>) {
        if self.last_transfer != LastTransfer::Indirect {
            return (BrlOutcome::Skip, None);
        }
        if !self.brstate.valid {
            return (BrlOutcome::Fail, Some(FaultKind::CfpInvalid));
        }
        self.brstate.valid = false;
        let src = Sid::new(self.brstate.sid).expect("bld immediates are valid SIDs");
        let Some((off, len)) = self.meta else {
            return (BrlOutcome::Fail, Some(FaultKind::CfpUnauthorized));
        };
        let rodata = &self.mem.region("rodata").expect("rodata mapped").bytes;
        let view = ImageView::trusted(&rodata[off..off + len]);
        let Some(d) = view.lookup(sid_t.get()) else {
            return (BrlOutcome::Fail, Some(FaultKind::CfpUnauthorized));
        };
        let (member, reads) = view.probe(&d, src);
        self.probe_reads += u64::from(reads);
        if member {
            (BrlOutcome::Pass, None)
        } else {
            (BrlOutcome::Fail, Some(FaultKind::CfpUnauthorized))
        }
    }

    /// Steps until halt, fault or budget exhaustion.
    pub fn run(&mut self, max_steps: u64) -> Result<ExecutionReport, RunError> {
        let mut steps = 0;
        while !self.is_stopped() {
            if steps == max_steps {
                return Err(RunError::StepBudget(max_steps));
            }
            self.step();
            steps += 1;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> ExecutionReport {
        ExecutionReport {
            schema: "report-v1".to_string(),
            histogram: self.histogram,
            brl_outcomes: self.outcomes,
            probe_reads: self.probe_reads,
            retired: self.retired,
            fault: self.fault.clone(),
            exit_code: self.exit_code,
            output: self.output.clone(),
            goal_reached: self.goal_reached,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;
    use crate::bloom::build_image;
    use crate::ir::parse_program;

    fn sid(v: u32) -> Sid {
        Sid::new(v).unwrap()
    }

    /// Parses `src` and attaches metadata authorizing `allowed`.
    fn with_meta(src: &str, allowed: &[(u32, &[u32])]) -> Program {
        let mut p = parse_program(src).unwrap();
        let map: BTreeMap<Sid, BTreeSet<Sid>> =
            allowed.iter().map(|(t, s)| (sid(*t), s.iter().map(|&x| sid(x)).collect())).collect();
        let img = build_image(&map, 1e-3, (11, 22));
        p.rodata.push(DataBlob::from_bytes(META_SYMBOL, &img.to_bytes(), false));
        p.validate().unwrap();
        p
    }

    const CALL: &str = "\
.func main() -> void
a:
    la t0, g
    bld 5
    jalr ra, t0, 0 @indirect kind=call sig=()->void targets=[g]
b:
    jal ra, g
c:
    addi a7, zero, 0
    ecall
.func g() -> void
e:
    brl 7
    jalr zero, ra, 0
";

    #[test]
    fn pass_then_skip() {
        let p = with_meta(CALL, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        assert!(!m.brstate().valid);
        m.step();
        m.step();
        assert_eq!(m.brstate(), BrState { valid: true, sid: 5 });
        let r = m.run(100).unwrap();
        assert_eq!(r.fault, None);
        assert_eq!(r.brl_outcomes, BrlOutcomes { pass: 1, skip: 1, fail: 0 });
        let meta = p.blob(META_SYMBOL).unwrap().plain_bytes().unwrap();
        assert_eq!(r.probe_reads, u64::from(ImageView::new(&meta).unwrap().k()));
        assert!(!m.brstate().valid);
        assert_eq!(r.exit_code, Some(0));
        assert_eq!(r.histogram.total(), r.retired);
    }

    #[test]
    fn direct_entry_leaves_state() {
        let src = CALL.replace(
            "    la t0, g\n    bld 5\n    jalr ra, t0, 0 @indirect kind=call sig=()->void targets=[g]\n",
            "    la t0, g\n    jal ra, g\n",
        );
        let p = with_meta(&src, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        let r = m.run(100).unwrap();
        assert_eq!(r.brl_outcomes.skip, 2);
        assert_eq!(m.brstate(), BrState::default());
    }

    #[test]
    fn unauthorized_source() {
        let p = with_meta(CALL, &[(7, &[6])]);
        let r = Machine::load(&p).unwrap().run(100).unwrap();
        let f = r.fault.unwrap();
        assert_eq!(f.kind, FaultKind::CfpUnauthorized);
        assert_eq!((f.sid_src, f.sid_t), (Some(5), Some(7)));
        assert_eq!(r.brl_outcomes.fail, 1);
        assert_eq!(r.histogram.brl, 1);
    }

    #[test]
    fn unknown_target_sid() {
        let p = with_meta(CALL, &[(8, &[5])]);
        let r = Machine::load(&p).unwrap().run(100).unwrap();
        assert_eq!(r.fault.unwrap().kind, FaultKind::CfpUnauthorized);
        assert_eq!(r.probe_reads, 0);
    }

    #[test]
    fn intervening_instruction_disarms() {
        let src = CALL.replace("    bld 5\n    jalr", "    bld 5\n    addi t1, t1, 1\n    jalr");
        let p = with_meta(&src, &[(7, &[5])]);
        let r = Machine::load(&p).unwrap().run(100).unwrap();
        assert_eq!(r.fault.unwrap().kind, FaultKind::CfpInvalid);
    }

    #[test]
    fn armed_transfer_must_land_on_brl() {
        let src = CALL.replace("    brl 7\n", "");
        let p = with_meta(&src, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        let g = m.symbol("g").unwrap();
        let r = m.run(100).unwrap();
        let f = r.fault.unwrap();
        assert_eq!((f.kind, f.pc), (FaultKind::CfpMissingLanding, g));
        assert_eq!(f.sid_src, Some(5));
    }

    #[test]
    fn bypass_faults_invalid() {
        let p = with_meta(CALL, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        m.hijack(m.symbol("g").unwrap());
        let r = m.run(100).unwrap();
        assert_eq!(r.fault.unwrap().kind, FaultKind::CfpInvalid);
    }

    #[test]
    fn trap_policies() {
        let p = with_meta(CALL, &[(7, &[5])]);
        let mut save = Machine::load(&p).unwrap();
        save.step();
        save.step();
        let mut clear = save.clone();
        save.trap_roundtrip(TrapPolicy::SaveRestore);
        clear.trap_roundtrip(TrapPolicy::ClearOnTrap);
        assert_eq!(save.run(100).unwrap().fault, None);
        assert_eq!(clear.run(100).unwrap().fault.unwrap().kind, FaultKind::CfpInvalid);

        let mut a = Machine::load(&p).unwrap();
        let mut b = a.clone();
        a.trap_roundtrip(TrapPolicy::SaveRestore);
        b.trap_roundtrip(TrapPolicy::ClearOnTrap);
        assert_eq!(a.run(100).unwrap(), b.run(100).unwrap());
    }

    #[test]
    fn permissions_and_corrupt() {
        let src = "\
.func main() -> void
a:
    la t0, ro
    ld t1, 0(t0)
    la t2, rw
    sd t1, 0(t2)
    sd t1, 0(t0)
.rodata ro
    .word 0x55
.data rw
    .word 0
";
        let p = parse_program(src).unwrap();
        let mut m = Machine::load(&p).unwrap();
        let ro = m.symbol("ro").unwrap();
        let rw = m.symbol("rw").unwrap();
        assert_eq!(m.corrupt(ro, 1), Err(CorruptError::ReadOnly));
        assert_eq!(m.corrupt(TEXT_BASE, 1), Err(CorruptError::ReadOnly));
        assert_eq!(m.corrupt(0x10, 1), Err(CorruptError::Unmapped));
        let r = m.run(100).unwrap();
        assert_eq!(m.memory().load(rw).unwrap(), 0x55);
        let f = r.fault.unwrap();
        assert_eq!(f.kind, FaultKind::PermViolation);
        assert_eq!(f.location.as_deref(), Some("main.a+4"));
        assert_eq!(r.brl_outcomes, BrlOutcomes::default());
    }

    #[test]
    fn metadata_is_mapped_read_only() {
        let p = with_meta(CALL, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        let at = m.symbol(META_SYMBOL).unwrap();
        assert_eq!(&m.memory().read_bytes(at, 4).unwrap(), b"BRLF");
        assert_eq!(m.corrupt(at + 30, 0xff), Err(CorruptError::ReadOnly));
    }

    #[test]
    fn malformed_metadata_refused_at_load() {
        let mut p = with_meta(CALL, &[(7, &[5])]);
        let blob = p.rodata.iter_mut().find(|b| b.symbol == META_SYMBOL).unwrap();
        blob.items[0] = DataItem::Byte(b'X');
        assert!(matches!(Machine::load(&p), Err(LoadError::Metadata(_))));
    }

    #[test]
    fn x0_and_misaligned() {
        let src = "\
.func main() -> void
a:
    addi zero, zero, 5
    add a0, zero, zero
    addi t0, sp, -4
    ld t1, 0(t0)
";
        let p = parse_program(src).unwrap();
        let mut m = Machine::load(&p).unwrap();
        let r = m.run(100).unwrap();
        assert_eq!(m.reg(Reg::ZERO), 0);
        assert_eq!(m.reg(Reg::A0), 0);
        assert_eq!(r.fault.unwrap().kind, FaultKind::MisalignedAccess);
    }

    #[test]
    fn ecall_codes_and_budget() {
        let src = "\
.func main() -> void
a:
    addi a0, zero, 42
    addi a7, zero, 1
    ecall
    addi a7, zero, 9
    ecall
";
        let p = parse_program(src).unwrap();
        let r = Machine::load(&p).unwrap().run(100).unwrap();
        assert_eq!(r.output, vec![42]);
        assert_eq!(r.fault.unwrap().kind, FaultKind::IllegalInstruction);

        let spin = parse_program(".func main() -> void\na:\n    jal zero, a\n").unwrap();
        assert_eq!(Machine::load(&spin).unwrap().run(50), Err(RunError::StepBudget(50)));
    }

    #[test]
    fn trace_format() {
        let p = with_meta(CALL, &[(7, &[5])]);
        let mut m = Machine::load(&p).unwrap();
        m.enable_trace();
        m.run(100).unwrap();
        let lines: Vec<String> = m.trace().unwrap().iter().map(ToString::to_string).collect();
        assert_eq!(lines[0], format!("{:#010x} la", TEXT_BASE));
        assert!(lines[3].ends_with("brl brl:PASS"));
        assert!(lines.iter().any(|l| l.ends_with("brl:SKIP")));
    }
}
