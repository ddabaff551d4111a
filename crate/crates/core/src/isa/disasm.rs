use std::fmt::Write;

use super::{BundleProgram, Instruction, Visibility};

/// Stable, tab-separated text rendering. Same program, same bytes.
pub fn disassemble(p: &BundleProgram) -> String {
    let mut s = String::new();
    if let Some(io) = &p.io {
        let d = io.input_dims;
        let _ = writeln!(
            s,
            ".io\tinput={}\t{}x{}x{}\toutput={}\t{}",
            io.input_region, d.c, d.h, d.w, io.output_region, io.output_len
        );
    }
    for r in &p.memory {
        let _ = writeln!(s, ".region\t{}\t{:#x}\t{}\tF={}", r.name, r.base, r.len, r.frac_bits);
    }
    for b in &p.bundles {
        let vis = match b.visibility {
            Visibility::Public => "public",
            Visibility::Private => "private",
        };
        let _ = writeln!(s, ".bundle\t{}\t{}\t{}\t{}", b.id, b.name, b.role.label(), vis);
        for c in &b.components {
            let _ = write!(s, "\t.component\t{}", c.op.mnemonic());
            for (slot, reg) in c.op.slots().iter().zip(&c.bindings) {
                let _ = write!(s, "\t{slot}=r{reg}");
            }
            s.push('\n');
        }
    }
    let mut offset = 0usize;
    for t in &p.stream {
        let _ = writeln!(s, ".stream\t{}\t{}\t{}", t.name, offset, t.len);
        offset += t.len;
    }
    for (i, inst) in p.instructions.iter().enumerate() {
        match *inst {
            Instruction::ParamSet { reg, value } => {
                let _ = writeln!(s, "{i:06}\tParamSet\tr{reg}\t{value}");
            }
            Instruction::ModuleExec { bundle } => {
                let name = p.bundle(bundle).map_or("?", |b| b.name.as_str());
                let _ = writeln!(s, "{i:06}\tModuleExec\t{bundle}\t{name}");
            }
        }
    }
    s
}
