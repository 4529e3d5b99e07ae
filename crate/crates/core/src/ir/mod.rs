//! Program representation for the toy RV64-flavoured ISA.
//!
//! A [`Program`] is a list of functions made of basic blocks, plus read-only
//! and writable data blobs. Indirect `jalr` sites carry an
//! [`IndirectSiteInfo`] annotation naming the targets they may reach; these
//! annotations stand in for a pointer analysis and drive policy
//! construction.
//!
//! The textual dialect (`.brl.s`) is handled by [`parse`] and
//! [`serialize`]; the call-graph summary lives in [`callgraph`].

pub mod callgraph;
pub mod parse;
pub mod serialize;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use callgraph::{build_callgraph, CallGraphSummary, IndirectSite, SiteId};
pub use parse::{parse_program, ParseError};
pub use serialize::serialize_program;

/// Name of the rodata blob holding the serialized authorization metadata.
pub const META_SYMBOL: &str = "__brl_meta";

/// Section identifier. Valid values are `1..=2^31 - 1`; zero means "no SID".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Sid(u32);

impl Sid {
    pub const MAX: u32 = (1 << 31) - 1;

    pub fn new(raw: u32) -> Option<Sid> {
        (1..=Self::MAX).contains(&raw).then_some(Sid(raw))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for Sid {
    type Error = String;

    fn try_from(raw: u32) -> Result<Self, Self::Error> {
        Sid::new(raw).ok_or_else(|| format!("SID {raw} outside [1, 2^31 - 1]"))
    }
}

impl From<Sid> for u32 {
    fn from(s: Sid) -> u32 {
        s.0
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Integer register `x0`..`x31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Reg(u8);

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7", "s2",
    "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
];

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const RA: Reg = Reg(1);
    pub const SP: Reg = Reg(2);
    pub const T0: Reg = Reg(5);
    pub const A0: Reg = Reg(10);
    pub const A7: Reg = Reg(17);

    pub fn new(index: u8) -> Option<Reg> {
        (index < 32).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        if let Some(n) = name.strip_prefix('x') {
            if let Ok(i) = n.parse::<u8>() {
                return Reg::new(i);
            }
        }
        if name == "fp" {
            return Some(Reg(8));
        }
        ABI_NAMES.iter().position(|&a| a == name).map(|i| Reg(i as u8))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(ABI_NAMES[self.0 as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Int,
    Ptr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnKind {
    Void,
    Int,
}

/// Function type. Two signatures are compatible iff they are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypeSignature {
    pub return_kind: ReturnKind,
    pub param_kinds: Vec<ValueKind>,
}

impl TypeSignature {
    pub fn new(param_kinds: Vec<ValueKind>, return_kind: ReturnKind) -> Self {
        TypeSignature { return_kind, param_kinds }
    }
}

impl fmt::Display for TypeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, p) in self.param_kinds.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(match p {
                ValueKind::Int => "int",
                ValueKind::Ptr => "ptr",
            })?;
        }
        f.write_str(")->")?;
        f.write_str(match self.return_kind {
            ReturnKind::Void => "void",
            ReturnKind::Int => "int",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    IndirectCall,
    IndirectJump,
}

impl SiteKind {
    pub fn keyword(self) -> &'static str {
        match self {
            SiteKind::IndirectCall => "call",
            SiteKind::IndirectJump => "jump",
        }
    }
}

/// Annotation carried by an indirect `jalr`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndirectSiteInfo {
    pub kind: SiteKind,
    pub declared_signature: Option<TypeSignature>,
    /// Function names or block labels of the enclosing function.
    pub possible_targets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluImmOp {
    Addi,
    Slli,
    Srli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchOp {
    Beq,
    Bne,
    Blt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    Alu {
        op: AluOp,
        rd: Reg,
        rs1: Reg,
        rs2: Reg,
    },
    AluImm {
        op: AluImmOp,
        rd: Reg,
        rs1: Reg,
        imm: i64,
    },
    /// 8-byte load.
    Ld {
        rd: Reg,
        base: Reg,
        offset: i64,
    },
    /// 8-byte store.
    Sd {
        src: Reg,
        base: Reg,
        offset: i64,
    },
    Branch {
        op: BranchOp,
        rs1: Reg,
        rs2: Reg,
        target: String,
    },
    /// `target` is a block label in the same function or a function name.
    Jal {
        rd: Reg,
        target: String,
    },
    Jalr {
        rd: Reg,
        base: Reg,
        offset: i64,
        site: Option<Box<IndirectSiteInfo>>,
    },
    Ecall,
    Bld {
        sid: Sid,
    },
    Brl {
        sid: Sid,
    },
    /// Load-address pseudo. `symbol` is a function, a data blob or
    /// `function.label`.
    La {
        rd: Reg,
        symbol: String,
    },
}

impl Instruction {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::Alu { op, .. } => match op {
                AluOp::Add => "add",
                AluOp::Sub => "sub",
                AluOp::And => "and",
                AluOp::Or => "or",
                AluOp::Xor => "xor",
            },
            Instruction::AluImm { op, .. } => match op {
                AluImmOp::Addi => "addi",
                AluImmOp::Slli => "slli",
                AluImmOp::Srli => "srli",
            },
            Instruction::Ld { .. } => "ld",
            Instruction::Sd { .. } => "sd",
            Instruction::Branch { op, .. } => match op {
                BranchOp::Beq => "beq",
                BranchOp::Bne => "bne",
                BranchOp::Blt => "blt",
            },
            Instruction::Jal { .. } => "jal",
            Instruction::Jalr { .. } => "jalr",
            Instruction::Ecall => "ecall",
            Instruction::Bld { .. } => "bld",
            Instruction::Brl { .. } => "brl",
            Instruction::La { .. } => "la",
        }
    }

    /// Branches and jumps. Only these are restricted to the end of a block.
    pub fn is_control_transfer(&self) -> bool {
        matches!(self, Instruction::Branch { .. } | Instruction::Jal { .. } | Instruction::Jalr { .. })
    }

    pub fn is_cfi(&self) -> bool {
        matches!(self, Instruction::Bld { .. } | Instruction::Brl { .. })
    }

    /// `jalr x0, ra, 0` without annotation.
    pub fn is_plain_return(&self) -> bool {
        matches!(
            self,
            Instruction::Jalr { rd, base, offset: 0, site: None } if *rd == Reg::ZERO && *base == Reg::RA
        )
    }

    pub fn site(&self) -> Option<&IndirectSiteInfo> {
        match self {
            Instruction::Jalr { site: Some(s), .. } => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub signature: TypeSignature,
    pub blocks: Vec<BasicBlock>,
    /// Derived: the function's address appears as a `la` or `.addr` operand.
    pub address_taken: bool,
}

impl Function {
    pub fn entry_label(&self) -> &str {
        &self.blocks[0].label
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataItem {
    Byte(u8),
    /// 64-bit little-endian word.
    Word(u64),
    /// 64-bit address of a function, `function.label` or data blob.
    Addr(String),
}

impl DataItem {
    pub fn size(&self) -> usize {
        match self {
            DataItem::Byte(_) => 1,
            DataItem::Word(_) | DataItem::Addr(_) => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlob {
    pub symbol: String,
    pub items: Vec<DataItem>,
    pub writable: bool,
}

impl DataBlob {
    pub fn from_bytes(symbol: impl Into<String>, bytes: &[u8], writable: bool) -> Self {
        DataBlob { symbol: symbol.into(), items: bytes.iter().map(|&b| DataItem::Byte(b)).collect(), writable }
    }

    pub fn size(&self) -> usize {
        self.items.iter().map(DataItem::size).sum()
    }

    /// Raw bytes, if the blob holds no relocations.
    pub fn plain_bytes(&self) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(self.size());
        for item in &self.items {
            match item {
                DataItem::Byte(b) => out.push(*b),
                DataItem::Word(w) => out.extend_from_slice(&w.to_le_bytes()),
                DataItem::Addr(_) => return None,
            }
        }
        Some(out)
    }
}

/// Refers to a block: `(function, label)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub function: String,
    pub label: String,
}

impl BlockRef {
    pub fn new(function: impl Into<String>, label: impl Into<String>) -> Self {
        BlockRef { function: function.into(), label: label.into() }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.function, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub rodata: Vec<DataBlob>,
    pub data: Vec<DataBlob>,
    pub entry: String,
}

/// Position of an instruction inside a program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub function: String,
    pub block: String,
    pub index: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}[{}]", self.function, self.block, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("duplicate label `{label}` in function `{function}`")]
    DuplicateLabel { function: String, label: String },
    #[error("duplicate data symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("entry function `{0}` not found")]
    MissingEntry(String),
    #[error("function `{0}` has no blocks")]
    EmptyFunction(String),
    #[error("block `{0}` is empty")]
    EmptyBlock(BlockRef),
    #[error("unresolved symbol `{symbol}` in {origin}")]
    UnresolvedSymbol { symbol: String, origin: Origin },
    #[error("control transfer before the end of block at {0}")]
    TransferNotLast(Location),
    #[error("jalr at {0} is neither annotated nor a plain return")]
    UnannotatedJalr(Location),
}

/// Where an unresolved reference was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Code(Location),
    Data(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Code(l) => write!(f, "{l}"),
            Origin::Data(s) => write!(f, "data `{s}`"),
        }
    }
}

impl ValidationError {
    pub fn location(&self) -> Option<&Location> {
        match self {
            ValidationError::TransferNotLast(l) | ValidationError::UnannotatedJalr(l) => Some(l),
            ValidationError::UnresolvedSymbol { origin: Origin::Code(l), .. } => Some(l),
            _ => None,
        }
    }
}

impl Program {
    /// Validates the program and recomputes every `address_taken` flag.
    pub fn new(
        functions: Vec<Function>,
        rodata: Vec<DataBlob>,
        data: Vec<DataBlob>,
        entry: impl Into<String>,
    ) -> Result<Program, ValidationError> {
        let mut p = Program { functions, rodata, data, entry: entry.into() };
        p.validate()?;
        p.recompute_address_taken();
        Ok(p)
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn blobs(&self) -> impl Iterator<Item = &DataBlob> {
        self.rodata.iter().chain(self.data.iter())
    }

    pub fn blob(&self, symbol: &str) -> Option<&DataBlob> {
        self.blobs().find(|b| b.symbol == symbol)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(Function::instruction_count).sum()
    }

    /// True once bld/brl or the metadata blob are present.
    pub fn is_instrumented(&self) -> bool {
        self.blob(META_SYMBOL).is_some()
            || self.functions.iter().flat_map(|f| &f.blocks).flat_map(|b| &b.instructions).any(Instruction::is_cfi)
    }

    /// Iterates `(function, block, index, instruction)` in layout order.
    pub fn instructions(&self) -> impl Iterator<Item = (&Function, &BasicBlock, usize, &Instruction)> {
        self.functions.iter().flat_map(|f| {
            f.blocks.iter().flat_map(move |b| b.instructions.iter().enumerate().map(move |(i, ins)| (f, b, i, ins)))
        })
    }

    pub fn recompute_address_taken(&mut self) {
        let taken = self.address_taken_set();
        for f in &mut self.functions {
            f.address_taken = taken.contains(&f.name);
        }
    }

    fn address_taken_set(&self) -> HashSet<String> {
        let names: HashSet<&str> = self.functions.iter().map(|f| f.name.as_str()).collect();
        let mut taken = HashSet::new();
        for (_, _, _, ins) in self.instructions() {
            if let Instruction::La { symbol, .. } = ins {
                if names.contains(symbol.as_str()) {
                    taken.insert(symbol.clone());
                }
            }
        }
        for blob in self.blobs() {
            for item in &blob.items {
                if let DataItem::Addr(sym) = item {
                    if names.contains(sym.as_str()) {
                        taken.insert(sym.clone());
                    }
                }
            }
        }
        taken
    }

    /// Checks every structural invariant of a well-formed program.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut fn_names = HashSet::new();
        let mut labels: HashMap<&str, HashSet<&str>> = HashMap::new();
        for f in &self.functions {
            if !fn_names.insert(f.name.as_str()) {
                return Err(ValidationError::DuplicateFunction(f.name.clone()));
            }
            if f.blocks.is_empty() {
                return Err(ValidationError::EmptyFunction(f.name.clone()));
            }
            let set = labels.entry(f.name.as_str()).or_default();
            for b in &f.blocks {
                if !set.insert(b.label.as_str()) {
                    return Err(ValidationError::DuplicateLabel { function: f.name.clone(), label: b.label.clone() });
                }
                if b.instructions.is_empty() {
                    return Err(ValidationError::EmptyBlock(BlockRef::new(&f.name, &b.label)));
                }
            }
        }
        if !fn_names.contains(self.entry.as_str()) {
            return Err(ValidationError::MissingEntry(self.entry.clone()));
        }

        let mut data_syms = HashSet::new();
        for blob in self.blobs() {
            if fn_names.contains(blob.symbol.as_str()) || !data_syms.insert(blob.symbol.as_str()) {
                return Err(ValidationError::DuplicateSymbol(blob.symbol.clone()));
            }
        }

        // Anything `la` / `.addr` may name.
        let resolves_symbol = |sym: &str| -> bool {
            if fn_names.contains(sym) || data_syms.contains(sym) {
                return true;
            }
            match sym.split_once('.') {
                Some((f, l)) => labels.get(f).is_some_and(|s| s.contains(l)),
                None => false,
            }
        };

        for f in &self.functions {
            let local = &labels[f.name.as_str()];
            for b in &f.blocks {
                let last = b.instructions.len() - 1;
                for (i, ins) in b.instructions.iter().enumerate() {
                    let loc = || Location { function: f.name.clone(), block: b.label.clone(), index: i };
                    if ins.is_control_transfer() && i != last {
                        return Err(ValidationError::TransferNotLast(loc()));
                    }
                    let unresolved = |symbol: &str| ValidationError::UnresolvedSymbol {
                        symbol: symbol.to_string(),
                        origin: Origin::Code(loc()),
                    };
                    match ins {
                        Instruction::Branch { target, .. } => {
                            if !local.contains(target.as_str()) {
                                return Err(unresolved(target));
                            }
                        }
                        Instruction::Jal { target, .. } => {
                            if !local.contains(target.as_str()) && !fn_names.contains(target.as_str()) {
                                return Err(unresolved(target));
                            }
                        }
                        Instruction::La { symbol, .. } => {
                            if !resolves_symbol(symbol) {
                                return Err(unresolved(symbol));
                            }
                        }
                        Instruction::Jalr { site, .. } => match site {
                            Some(info) => {
                                for t in &info.possible_targets {
                                    if !local.contains(t.as_str()) && !fn_names.contains(t.as_str()) {
                                        return Err(unresolved(t));
                                    }
                                }
                            }
                            None if ins.is_plain_return() => {}
                            None => return Err(ValidationError::UnannotatedJalr(loc())),
                        },
                        _ => {}
                    }
                }
            }
        }

        for blob in self.blobs() {
            for item in &blob.items {
                if let DataItem::Addr(sym) = item {
                    if !resolves_symbol(sym) {
                        return Err(ValidationError::UnresolvedSymbol {
                            symbol: sym.clone(),
                            origin: Origin::Data(blob.symbol.clone()),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves a possible-target name of a site in `function` to a block.
    /// Local labels shadow function names.
    pub fn resolve_target(&self, function: &str, name: &str) -> Option<BlockRef> {
        let f = self.function(function)?;
        if f.block(name).is_some() {
            return Some(BlockRef::new(function, name));
        }
        self.function(name).map(|g| BlockRef::new(&g.name, g.entry_label()))
    }

    /// Block labels targeted by any indirect jump site, in layout order.
    pub fn indirect_jump_targets(&self) -> BTreeSet<BlockRef> {
        let mut out = BTreeSet::new();
        for (f, _, _, ins) in self.instructions() {
            if let Some(info) = ins.site() {
                if info.kind == SiteKind::IndirectJump {
                    for t in &info.possible_targets {
                        if let Some(r) = self.resolve_target(&f.name, t) {
                            out.insert(r);
                        }
                    }
                }
            }
        }
        out
    }
}
