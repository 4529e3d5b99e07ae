//! Canonical text form. `parse_program(&serialize_program(p)) == p`.

use std::fmt::{self, Write};

use super::{DataBlob, DataItem, IndirectSiteInfo, Instruction, Program};

pub fn serialize_program(p: &Program) -> String {
    p.to_string()
}

impl fmt::Display for IndirectSiteInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@indirect kind={}", self.kind.keyword())?;
        if let Some(sig) = &self.declared_signature {
            write!(f, " sig={sig}")?;
        }
        write!(f, " targets=[{}]", self.possible_targets.join(","))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            Instruction::Alu { rd, rs1, rs2, .. } => write!(f, "{m} {rd}, {rs1}, {rs2}"),
            Instruction::AluImm { rd, rs1, imm, .. } => write!(f, "{m} {rd}, {rs1}, {imm}"),
            Instruction::Ld { rd, base, offset } => write!(f, "{m} {rd}, {offset}({base})"),
            Instruction::Sd { src, base, offset } => write!(f, "{m} {src}, {offset}({base})"),
            Instruction::Branch { rs1, rs2, target, .. } => write!(f, "{m} {rs1}, {rs2}, {target}"),
            Instruction::Jal { rd, target } => write!(f, "{m} {rd}, {target}"),
            Instruction::Jalr { rd, base, offset, .. } => write!(f, "{m} {rd}, {base}, {offset}"),
            Instruction::Ecall => f.write_str(m),
            Instruction::Bld { sid } | Instruction::Brl { sid } => write!(f, "{m} {sid}"),
            Instruction::La { rd, symbol } => write!(f, "{m} {rd}, {symbol}"),
        }
    }
}

fn write_blob(out: &mut String, section: &str, blob: &DataBlob) {
    let _ = writeln!(out, ".{section} {}", blob.symbol);
    let mut bytes: Vec<u8> = Vec::new();
    let flush = |out: &mut String, bytes: &mut Vec<u8>| {
        for chunk in bytes.chunks(16) {
            let list: Vec<String> = chunk.iter().map(u8::to_string).collect();
            let _ = writeln!(out, "    .byte {}", list.join(", "));
        }
        bytes.clear();
    };
    for item in &blob.items {
        match item {
            DataItem::Byte(b) => bytes.push(*b),
            DataItem::Word(w) => {
                flush(out, &mut bytes);
                let _ = writeln!(out, "    .word {:#x}", w);
            }
            DataItem::Addr(s) => {
                flush(out, &mut bytes);
                let _ = writeln!(out, "    .addr {s}");
            }
        }
    }
    flush(out, &mut bytes);
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(out, ".entry {}", self.entry);
        for func in &self.functions {
            let _ = writeln!(out);
            let sig = &func.signature;
            let params: Vec<String> = sig
                .param_kinds
                .iter()
                .map(|k| match k {
                    super::ValueKind::Int => "int".to_string(),
                    super::ValueKind::Ptr => "ptr".to_string(),
                })
                .collect();
            let ret = match sig.return_kind {
                super::ReturnKind::Void => "void",
                super::ReturnKind::Int => "int",
            };
            let _ = writeln!(out, ".func {}({}) -> {}", func.name, params.join(", "), ret);
            for block in &func.blocks {
                let _ = writeln!(out, "{}:", block.label);
                for ins in &block.instructions {
                    if let Some(site) = ins.site() {
                        let _ = writeln!(out, "    {site}");
                    }
                    let _ = writeln!(out, "    {ins}");
                }
            }
        }
        for blob in &self.rodata {
            let _ = writeln!(out);
            write_blob(&mut out, "rodata", blob);
        }
        for blob in &self.data {
            let _ = writeln!(out);
            write_blob(&mut out, "data", blob);
        }
        f.write_str(&out)
    }
}
