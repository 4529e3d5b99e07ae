//! Line-oriented parser for the `.brl.s` dialect.
//!
//! ```text
//! .entry main
//! .func main() -> void
//! bb0:
//!     la t0, table
//!     ld t1, 0(t0)
//!     @indirect kind=call sig=()->void targets=[work]
//!     jalr ra, t1, 0
//! .data table
//!     .addr work
//! ```
//!
//! `#` starts a comment. An `@indirect` annotation may trail the `jalr` on
//! the same line or sit alone on the line before it.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::{
    AluImmOp, AluOp, BasicBlock, BranchOp, DataBlob, DataItem, Function, IndirectSiteInfo, Instruction, Location,
    Origin, Program, Reg, ReturnKind, Sid, SiteKind, TypeSignature, ValidationError, ValueKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("unresolved symbol `{0}`")]
    UnresolvedSymbol(String),
    #[error("SID {0} outside [1, 2^31 - 1]")]
    SidOutOfRange(i64),
    #[error("{0}")]
    Invalid(ValidationError),
}

fn err(line: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, kind }
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    err(line, ParseErrorKind::Syntax(msg.into()))
}

enum Section {
    None,
    Code,
    Data { rodata: bool },
}

#[derive(Default)]
struct Builder {
    functions: Vec<Function>,
    rodata: Vec<DataBlob>,
    data: Vec<DataBlob>,
    entry: Option<(String, usize)>,
    pending_site: Option<(IndirectSiteInfo, usize)>,
    /// Instruction locations and block/function headers, for error mapping.
    lines: HashMap<(String, String, usize), usize>,
    headers: HashMap<String, usize>,
    symbols: HashSet<String>,
}

/// Parses and validates a program in the textual dialect.
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let mut b = Builder::default();
    let mut section = Section::None;

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix('.') {
            let (directive, args) = split_word(rest);
            match directive {
                "entry" => {
                    let name = ident(args, line_no)?;
                    if b.entry.is_some() {
                        return Err(syntax(line_no, "duplicate .entry"));
                    }
                    b.entry = Some((name.to_string(), line_no));
                }
                "func" => {
                    b.finish_block(line_no)?;
                    let (name, sig) = parse_func_header(args, line_no)?;
                    if !b.symbols.insert(name.clone()) {
                        return Err(err(line_no, ParseErrorKind::DuplicateSymbol(name)));
                    }
                    b.headers.insert(name.clone(), line_no);
                    b.functions.push(Function { name, signature: sig, blocks: Vec::new(), address_taken: false });
                    section = Section::Code;
                }
                "rodata" | "data" => {
                    b.finish_block(line_no)?;
                    let name = ident(args, line_no)?.to_string();
                    if !b.symbols.insert(name.clone()) {
                        return Err(err(line_no, ParseErrorKind::DuplicateSymbol(name)));
                    }
                    b.headers.insert(name.clone(), line_no);
                    let rodata = directive == "rodata";
                    let blob = DataBlob { symbol: name, items: Vec::new(), writable: !rodata };
                    if rodata {
                        b.rodata.push(blob);
                    } else {
                        b.data.push(blob);
                    }
                    section = Section::Data { rodata };
                }
                "byte" | "word" | "addr" => {
                    let Section::Data { rodata } = section else {
                        return Err(syntax(line_no, format!(".{directive} outside a data section")));
                    };
                    let blob =
                        if rodata { b.rodata.last_mut() } else { b.data.last_mut() }.expect("data section has a blob");
                    match directive {
                        "byte" => {
                            for v in args.split(',') {
                                let v = parse_imm(v.trim(), line_no)?;
                                let byte = u8::try_from(v)
                                    .map_err(|_| syntax(line_no, format!("byte value {v} out of range")))?;
                                blob.items.push(DataItem::Byte(byte));
                            }
                        }
                        "word" => {
                            for v in args.split(',') {
                                blob.items.push(DataItem::Word(parse_imm(v.trim(), line_no)? as u64));
                            }
                        }
                        _ => {
                            for v in args.split(',') {
                                blob.items.push(DataItem::Addr(symbol(v.trim(), line_no)?.to_string()));
                            }
                        }
                    }
                }
                other => return Err(syntax(line_no, format!("unknown directive .{other}"))),
            }
            continue;
        }

        if let Some(ann) = line.strip_prefix('@') {
            if !matches!(section, Section::Code) || b.pending_site.is_some() {
                return Err(syntax(line_no, "misplaced annotation"));
            }
            b.pending_site = Some((parse_annotation(ann, line_no)?, line_no));
            continue;
        }

        if let Some(label) = line.strip_suffix(':') {
            if !matches!(section, Section::Code) {
                return Err(syntax(line_no, "label outside a function"));
            }
            let label = ident(label, line_no)?;
            b.finish_block(line_no)?;
            let f = b.functions.last_mut().expect("code section has a function");
            if f.blocks.iter().any(|bb| bb.label == label) {
                return Err(err(line_no, ParseErrorKind::DuplicateLabel(label.to_string())));
            }
            b.headers.insert(format!("{}.{}", f.name, label), line_no);
            f.blocks.push(BasicBlock { label: label.to_string(), instructions: Vec::new() });
            continue;
        }

        if !matches!(section, Section::Code) {
            return Err(syntax(line_no, "instruction outside a function"));
        }
        let (text, inline_ann) = match line.split_once('@') {
            Some((ins, ann)) => (ins.trim(), Some(parse_annotation(ann, line_no)?)),
            None => (line, None),
        };
        let mut ins = parse_instruction(text, line_no)?;
        let site = match (inline_ann, b.pending_site.take()) {
            (Some(_), Some(_)) => return Err(syntax(line_no, "two annotations for one instruction")),
            (Some(s), None) | (None, Some((s, _))) => Some(s),
            (None, None) => None,
        };
        if let Some(s) = site {
            match &mut ins {
                Instruction::Jalr { site, .. } => *site = Some(Box::new(s)),
                _ => return Err(syntax(line_no, "@indirect annotates a non-jalr instruction")),
            }
        }
        let f = b.functions.last_mut().expect("code section has a function");
        let Some(block) = f.blocks.last_mut() else {
            return Err(syntax(line_no, "instruction before the first label"));
        };
        b.lines.insert((f.name.clone(), block.label.clone(), block.instructions.len()), line_no);
        block.instructions.push(ins);
    }
    b.finish_block(source.lines().count())?;

    let (entry, entry_line) = b.entry.clone().unwrap_or_else(|| ("main".to_string(), 1));
    let program = Program { functions: b.functions, rodata: b.rodata, data: b.data, entry };
    match program.validate() {
        Ok(()) => {
            let mut p = program;
            p.recompute_address_taken();
            Ok(p)
        }
        Err(e) => {
            let line = match &e {
                ValidationError::MissingEntry(_) => entry_line,
                ValidationError::EmptyFunction(f) => b.headers.get(f).copied().unwrap_or(0),
                ValidationError::EmptyBlock(r) => b.headers.get(&r.to_string()).copied().unwrap_or(0),
                ValidationError::UnresolvedSymbol { origin: Origin::Data(s), .. } => {
                    b.headers.get(s).copied().unwrap_or(0)
                }
                other => other
                    .location()
                    .and_then(|Location { function, block, index }| {
                        b.lines.get(&(function.clone(), block.clone(), *index)).copied()
                    })
                    .unwrap_or(0),
            };
            let kind = match e {
                ValidationError::UnresolvedSymbol { symbol, .. } => ParseErrorKind::UnresolvedSymbol(symbol),
                other => ParseErrorKind::Invalid(other),
            };
            Err(err(line, kind))
        }
    }
}

impl Builder {
    fn finish_block(&mut self, line: usize) -> Result<(), ParseError> {
        match self.pending_site.take() {
            Some((_, l)) => Err(syntax(l.min(line), "annotation not followed by jalr")),
            None => Ok(()),
        }
    }
}

fn split_word(s: &str) -> (&str, &str) {
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn ident(s: &str, line: usize) -> Result<&str, ParseError> {
    let s = s.trim();
    if is_ident(s) {
        Ok(s)
    } else {
        Err(syntax(line, format!("expected identifier, found `{s}`")))
    }
}

/// Identifier, or `function.label`.
fn symbol(s: &str, line: usize) -> Result<&str, ParseError> {
    let s = s.trim();
    let ok = match s.split_once('.') {
        Some((a, b)) => is_ident(a) && is_ident(b),
        None => is_ident(s),
    };
    if ok {
        Ok(s)
    } else {
        Err(syntax(line, format!("expected symbol, found `{s}`")))
    }
}

fn parse_imm(s: &str, line: usize) -> Result<i64, ParseError> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        body.replace('_', "").parse::<u64>()
    }
    .map_err(|_| syntax(line, format!("bad immediate `{s}`")))?;
    Ok(if neg { (magnitude as i64).wrapping_neg() } else { magnitude as i64 })
}

fn reg(s: &str, line: usize) -> Result<Reg, ParseError> {
    Reg::from_name(s.trim()).ok_or_else(|| syntax(line, format!("unknown register `{}`", s.trim())))
}

fn sid(s: &str, line: usize) -> Result<Sid, ParseError> {
    let v = parse_imm(s.trim(), line)?;
    u32::try_from(v).ok().and_then(Sid::new).ok_or_else(|| err(line, ParseErrorKind::SidOutOfRange(v)))
}

/// `offset(base)`
fn mem_operand(s: &str, line: usize) -> Result<(i64, Reg), ParseError> {
    let s = s.trim();
    let open = s.find('(').ok_or_else(|| syntax(line, format!("expected offset(reg), found `{s}`")))?;
    let inner =
        s[open + 1..].strip_suffix(')').ok_or_else(|| syntax(line, format!("expected offset(reg), found `{s}`")))?;
    let off = if open == 0 { 0 } else { parse_imm(s[..open].trim(), line)? };
    Ok((off, reg(inner, line)?))
}

fn parse_instruction(text: &str, line: usize) -> Result<Instruction, ParseError> {
    let (mnemonic, rest) = split_word(text);
    let ops: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
    let want = |n: usize| -> Result<(), ParseError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("`{mnemonic}` takes {n} operands, found {}", ops.len())))
        }
    };
    let alu = |op| -> Result<Instruction, ParseError> {
        want(3)?;
        Ok(Instruction::Alu { op, rd: reg(ops[0], line)?, rs1: reg(ops[1], line)?, rs2: reg(ops[2], line)? })
    };
    let alu_imm = |op| -> Result<Instruction, ParseError> {
        want(3)?;
        Ok(Instruction::AluImm { op, rd: reg(ops[0], line)?, rs1: reg(ops[1], line)?, imm: parse_imm(ops[2], line)? })
    };
    let branch = |op| -> Result<Instruction, ParseError> {
        want(3)?;
        Ok(Instruction::Branch {
            op,
            rs1: reg(ops[0], line)?,
            rs2: reg(ops[1], line)?,
            target: ident(ops[2], line)?.to_string(),
        })
    };
    match mnemonic {
        "add" => alu(AluOp::Add),
        "sub" => alu(AluOp::Sub),
        "and" => alu(AluOp::And),
        "or" => alu(AluOp::Or),
        "xor" => alu(AluOp::Xor),
        "addi" => alu_imm(AluImmOp::Addi),
        "slli" => alu_imm(AluImmOp::Slli),
        "srli" => alu_imm(AluImmOp::Srli),
        "beq" => branch(BranchOp::Beq),
        "bne" => branch(BranchOp::Bne),
        "blt" => branch(BranchOp::Blt),
        "ld" => {
            want(2)?;
            let (offset, base) = mem_operand(ops[1], line)?;
            Ok(Instruction::Ld { rd: reg(ops[0], line)?, base, offset })
        }
        "sd" => {
            want(2)?;
            let (offset, base) = mem_operand(ops[1], line)?;
            Ok(Instruction::Sd { src: reg(ops[0], line)?, base, offset })
        }
        "jal" => {
            want(2)?;
            Ok(Instruction::Jal { rd: reg(ops[0], line)?, target: ident(ops[1], line)?.to_string() })
        }
        "jalr" => {
            want(3)?;
            Ok(Instruction::Jalr {
                rd: reg(ops[0], line)?,
                base: reg(ops[1], line)?,
                offset: parse_imm(ops[2], line)?,
                site: None,
            })
        }
        "la" => {
            want(2)?;
            Ok(Instruction::La { rd: reg(ops[0], line)?, symbol: symbol(ops[1], line)?.to_string() })
        }
        "ecall" => {
            want(0)?;
            Ok(Instruction::Ecall)
        }
        "bld" => {
            want(1)?;
            Ok(Instruction::Bld { sid: sid(ops[0], line)? })
        }
        "brl" => {
            want(1)?;
            Ok(Instruction::Brl { sid: sid(ops[0], line)? })
        }
        other => Err(syntax(line, format!("unknown mnemonic `{other}`"))),
    }
}

/// `name(int, ptr) -> int`
fn parse_func_header(args: &str, line: usize) -> Result<(String, TypeSignature), ParseError> {
    let open = args.find('(').ok_or_else(|| syntax(line, "expected `name(params) -> ret`"))?;
    let name = ident(&args[..open], line)?.to_string();
    let sig = parse_signature(&args[open..], line)?;
    Ok((name, sig))
}

pub(crate) fn parse_signature(s: &str, line: usize) -> Result<TypeSignature, ParseError> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || syntax(line, format!("bad signature `{s}`"));
    let rest = compact.strip_prefix('(').ok_or_else(bad)?;
    let (params, ret) = rest.split_once(")->").ok_or_else(bad)?;
    let param_kinds = if params.is_empty() {
        Vec::new()
    } else {
        params
            .split(',')
            .map(|p| match p {
                "int" => Ok(ValueKind::Int),
                "ptr" => Ok(ValueKind::Ptr),
                _ => Err(bad()),
            })
            .collect::<Result<_, _>>()?
    };
    let return_kind = match ret {
        "void" => ReturnKind::Void,
        "int" => ReturnKind::Int,
        _ => return Err(bad()),
    };
    Ok(TypeSignature { return_kind, param_kinds })
}

/// `indirect kind=call sig=(int)->int targets=[a, b]`
fn parse_annotation(text: &str, line: usize) -> Result<IndirectSiteInfo, ParseError> {
    let body = text.trim().strip_prefix("indirect").ok_or_else(|| syntax(line, "expected `@indirect`"))?;
    let mut kind = None;
    let mut sig = None;
    let mut targets = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let eq = rest.find('=').ok_or_else(|| syntax(line, format!("bad annotation field `{rest}`")))?;
        let key = rest[..eq].trim();
        let after = rest[eq + 1..].trim_start();
        let (value, remaining) = if after.starts_with('[') {
            let close = after.find(']').ok_or_else(|| syntax(line, "unterminated target list"))?;
            (&after[..=close], &after[close + 1..])
        } else {
            split_word(after)
        };
        match key {
            "kind" => {
                kind = Some(match value {
                    "call" => SiteKind::IndirectCall,
                    "jump" => SiteKind::IndirectJump,
                    v => return Err(syntax(line, format!("unknown site kind `{v}`"))),
                })
            }
            "sig" => sig = Some(parse_signature(value, line)?),
            "targets" => {
                let inner = &value[1..value.len() - 1];
                let list = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| ident(t, line).map(str::to_string))
                    .collect::<Result<Vec<_>, _>>()?;
                targets = Some(list);
            }
            k => return Err(syntax(line, format!("unknown annotation key `{k}`"))),
        }
        rest = remaining.trim_start();
    }
    let kind = kind.unwrap_or(if sig.is_some() { SiteKind::IndirectCall } else { SiteKind::IndirectJump });
    Ok(IndirectSiteInfo { kind, declared_signature: sig, possible_targets: targets.unwrap_or_default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = ".func main() -> void\nbb0:\n    ecall\n";

    #[test]
    fn minimal_program() {
        let p = parse_program(MINIMAL).unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].blocks.len(), 1);
        assert_eq!(p.functions[0].blocks[0].instructions, vec![Instruction::Ecall]);
        assert_eq!(p.entry, "main");
    }

    #[test]
    fn annotation_targets_transcribed() {
        let src = "\
.func main() -> void
bb0:
    la t0, g1
    jalr x0, t0, 0 @indirect targets=[g1,g2]
.func g1() -> void
e:
    ecall
.func g2() -> void
e:
    ecall
";
        let p = parse_program(src).unwrap();
        let site = p.functions[0].blocks[0].instructions[1].site().unwrap();
        assert_eq!(site.possible_targets, vec!["g1".to_string(), "g2".to_string()]);
        assert_eq!(site.kind, SiteKind::IndirectJump);
    }

    #[test]
    fn undefined_label_is_named() {
        let src = ".func main() -> void\nbb0:\n    beq a0, a1, bbX\n";
        let e = parse_program(src).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnresolvedSymbol("bbX".into()));
        assert_eq!(e.line, 3);
    }

    #[test]
    fn sid_range_checked() {
        let src = ".func main() -> void\nbb0:\n    bld 0\n    ecall\n";
        assert_eq!(parse_program(src).unwrap_err().kind, ParseErrorKind::SidOutOfRange(0));
        let src = ".func main() -> void\nbb0:\n    brl 2147483648\n    ecall\n";
        assert_eq!(parse_program(src).unwrap_err().kind, ParseErrorKind::SidOutOfRange(1 << 31));
        let src = ".func main() -> void\nbb0:\n    brl 2147483647\n    ecall\n";
        assert!(parse_program(src).is_ok());
    }

    #[test]
    fn duplicate_label() {
        let src = ".func main() -> void\nbb0:\n    ecall\nbb0:\n    ecall\n";
        let e = parse_program(src).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicateLabel("bb0".into()));
        assert_eq!(e.line, 4);
    }

    #[test]
    fn syntax_error_carries_line() {
        let src = ".func main() -> void\nbb0:\n    frobnicate a0\n";
        let e = parse_program(src).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
    }

    #[test]
    fn unannotated_indirect_jalr_rejected() {
        let src = ".func main() -> void\nbb0:\n    jalr x0, t0, 0\n";
        let e = parse_program(src).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(matches!(e.kind, ParseErrorKind::Invalid(ValidationError::UnannotatedJalr(_))));
    }

    #[test]
    fn transfer_must_end_block() {
        let src = ".func main() -> void\nbb0:\n    jal x0, bb0\n    ecall\n";
        let e = parse_program(src).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Invalid(ValidationError::TransferNotLast(_))));
    }

    #[test]
    fn jop_gadget_shape_parses_verbatim() {
        let src = "\
.func main(ptr) -> void
gadget:
    ld    t0, 0(a0)      # load next gadget address
    addi  a0, a0, 8      # advance dispatcher pointer
    @indirect kind=jump targets=[main]
    jalr  zero, t0, 0    # indirect jump to next gadget
";
        let p = parse_program(src).unwrap();
        let ins = &p.functions[0].blocks[0].instructions;
        assert_eq!(ins.len(), 3);
        assert_eq!(ins[0], Instruction::Ld { rd: Reg::T0, base: Reg::A0, offset: 0 });
        assert_eq!(ins[1], Instruction::AluImm { op: AluImmOp::Addi, rd: Reg::A0, rs1: Reg::A0, imm: 8 });
        assert!(
            matches!(&ins[2], Instruction::Jalr { rd, base, offset: 0, site: Some(_) } if *rd == Reg::ZERO && *base == Reg::T0)
        );
    }

    #[test]
    fn data_directives_and_address_taken() {
        let src = "\
.entry main
.func main() -> int
bb0:
    la a0, tbl
    ecall
.func cb(int) -> int
e:
    jalr x0, ra, 0
.func other() -> void
e:
    ecall
.rodata tbl
    .addr cb
    .word 0x10, -1
    .byte 1, 2, 255
.data slot
    .addr main.bb0
";
        let p = parse_program(src).unwrap();
        assert!(p.function("cb").unwrap().address_taken);
        assert!(!p.function("other").unwrap().address_taken);
        assert!(!p.function("main").unwrap().address_taken);
        let tbl = p.blob("tbl").unwrap();
        assert!(!tbl.writable);
        assert_eq!(tbl.size(), 8 + 16 + 3);
        assert_eq!(tbl.items[2], DataItem::Word(u64::MAX));
        assert!(p.blob("slot").unwrap().writable);
    }

    #[test]
    fn missing_entry() {
        let src = ".entry start\n.func main() -> void\nbb0:\n    ecall\n";
        let e = parse_program(src).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(matches!(e.kind, ParseErrorKind::Invalid(ValidationError::MissingEntry(_))));
    }
}
