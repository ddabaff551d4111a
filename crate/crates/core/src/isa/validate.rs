use std::collections::HashSet;
use std::fmt;

use super::{expand, BundleProgram, Instruction, RegisterFile, BUNDLE_TABLE_CAPACITY, NUM_REGISTERS};

/// A static problem found in a program. An empty list means runnable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    DuplicateBundle(u8),
    TableCapacity(usize),
    BadBinding {
        bundle: u8,
        reg: u8,
    },
    SlotCount {
        bundle: u8,
        component: usize,
    },
    BadRegister {
        instruction: usize,
        reg: u8,
    },
    UnknownBundle {
        instruction: usize,
        bundle: u8,
    },
    UninitializedRegister {
        instruction: usize,
        bundle: u8,
        reg: u8,
    },
    Expansion {
        instruction: usize,
        bundle: u8,
        message: String,
    },
    /// A job consumed a stream chunk whose length differs from the declared tensor.
    StreamMismatch {
        instruction: usize,
        tensor: Option<String>,
        expected: usize,
    },
    StreamAccounting {
        declared: usize,
        consumed: usize,
    },
    DuplicateStreamTensor(String),
    RegionOverlap(String, String),
    DuplicateRegion(String),
    MissingIoRegion(String),
    IoSize {
        region: String,
        expected: usize,
        actual: usize,
    },
    LongName(String),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Diagnostic::*;
        match self {
            DuplicateBundle(id) => write!(f, "bundle id {id} appears more than once"),
            TableCapacity(n) => write!(f, "bundle table has {n} entries, capacity is {BUNDLE_TABLE_CAPACITY}"),
            BadBinding { bundle, reg } => write!(f, "bundle {bundle} binds nonexistent register r{reg}"),
            SlotCount { bundle, component } => {
                write!(
                    f,
                    "bundle {bundle} component {component} has the wrong number of bindings"
                )
            }
            BadRegister { instruction, reg } => write!(f, "#{instruction}: ParamSet to nonexistent register r{reg}"),
            UnknownBundle { instruction, bundle } => write!(f, "#{instruction}: ModuleExec of unknown bundle {bundle}"),
            UninitializedRegister {
                instruction,
                bundle,
                reg,
            } => write!(
                f,
                "#{instruction}: bundle {bundle} reads r{reg} before any ParamSet initializes it"
            ),
            Expansion {
                instruction,
                bundle,
                message,
            } => write!(f, "#{instruction}: bundle {bundle} fails to expand: {message}"),
            StreamMismatch {
                instruction,
                tensor,
                expected,
            } => match tensor {
                Some(t) => write!(
                    f,
                    "#{instruction}: consumes {expected} parameters but stream tensor `{t}` differs"
                ),
                None => write!(
                    f,
                    "#{instruction}: consumes {expected} parameters past the end of the stream"
                ),
            },
            StreamAccounting { declared, consumed } => {
                write!(f, "stream declares {declared} parameters but jobs consume {consumed}")
            }
            DuplicateStreamTensor(n) => write!(f, "stream tensor `{n}` appears more than once"),
            RegionOverlap(a, b) => write!(f, "memory regions `{a}` and `{b}` overlap"),
            DuplicateRegion(n) => write!(f, "memory region `{n}` declared more than once"),
            MissingIoRegion(n) => write!(f, "io region `{n}` is not in the memory map"),
            IoSize {
                region,
                expected,
                actual,
            } => write!(f, "io region `{region}` holds {actual} elements, io needs {expected}"),
            LongName(n) => write!(f, "name `{n}...` does not fit the encoding"),
        }
    }
}

fn check_name(name: &str, out: &mut Vec<Diagnostic>) {
    if name.len() > u16::MAX as usize {
        out.push(Diagnostic::LongName(name.chars().take(16).collect()));
    }
}

fn check_static(p: &BundleProgram, out: &mut Vec<Diagnostic>) {
    if p.bundles.len() > BUNDLE_TABLE_CAPACITY {
        out.push(Diagnostic::TableCapacity(p.bundles.len()));
    }
    let mut ids = HashSet::new();
    for b in &p.bundles {
        check_name(&b.name, out);
        if !ids.insert(b.id) {
            out.push(Diagnostic::DuplicateBundle(b.id));
        }
        for (i, c) in b.components.iter().enumerate() {
            if c.bindings.len() != c.op.slots().len() {
                out.push(Diagnostic::SlotCount {
                    bundle: b.id,
                    component: i,
                });
            }
            for &reg in &c.bindings {
                if reg as usize >= NUM_REGISTERS {
                    out.push(Diagnostic::BadBinding { bundle: b.id, reg });
                }
            }
        }
    }

    let mut names = HashSet::new();
    for r in &p.memory {
        check_name(&r.name, out);
        if !names.insert(r.name.as_str()) {
            out.push(Diagnostic::DuplicateRegion(r.name.clone()));
        }
    }
    let mut regions: Vec<_> = p.memory.iter().filter(|r| r.len > 0).collect();
    regions.sort_by_key(|r| r.base);
    for pair in regions.windows(2) {
        if pair[0].end() > pair[1].base {
            out.push(Diagnostic::RegionOverlap(pair[0].name.clone(), pair[1].name.clone()));
        }
    }

    if let Some(io) = &p.io {
        for (name, expected) in [
            (&io.input_region, io.input_dims.len()),
            (&io.output_region, io.output_len),
        ] {
            check_name(name, out);
            match p.region(name) {
                None => out.push(Diagnostic::MissingIoRegion(name.clone())),
                Some(r) if r.len != expected => out.push(Diagnostic::IoSize {
                    region: name.clone(),
                    expected,
                    actual: r.len,
                }),
                Some(_) => {}
            }
        }
    }

    let mut seen = HashSet::new();
    for t in &p.stream {
        check_name(&t.name, out);
        if !seen.insert(t.name.as_str()) {
            out.push(Diagnostic::DuplicateStreamTensor(t.name.clone()));
        }
    }
}

/// Check every static invariant of `program`: register init-before-use by
/// linear scan, bundle references, stream accounting against expanded jobs,
/// and memory map fit.
pub fn validate(program: &BundleProgram) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    check_static(program, &mut out);

    let mut regs = RegisterFile::default();
    let mut cursor = 0usize;
    let mut consumed = 0usize;
    for (i, inst) in program.instructions.iter().enumerate() {
        match *inst {
            Instruction::ParamSet { reg, value } => {
                if regs.set(reg, value).is_err() {
                    out.push(Diagnostic::BadRegister { instruction: i, reg });
                }
            }
            Instruction::ModuleExec { bundle } => {
                let Some(entry) = program.bundle(bundle) else {
                    out.push(Diagnostic::UnknownBundle { instruction: i, bundle });
                    continue;
                };
                let missing: Vec<u8> = entry.registers().into_iter().filter(|&r| !regs.is_set(r)).collect();
                if !missing.is_empty() {
                    out.extend(missing.into_iter().map(|reg| Diagnostic::UninitializedRegister {
                        instruction: i,
                        bundle,
                        reg,
                    }));
                    continue;
                }
                let jobs = match expand(entry, &regs, &program.memory) {
                    Ok(jobs) => jobs,
                    Err(e) => {
                        out.push(Diagnostic::Expansion {
                            instruction: i,
                            bundle,
                            message: e.to_string(),
                        });
                        continue;
                    }
                };
                for take in jobs.iter().flat_map(|j| j.stream_takes()) {
                    consumed += take;
                    match program.stream.get(cursor) {
                        Some(t) if t.len == take => {}
                        other => out.push(Diagnostic::StreamMismatch {
                            instruction: i,
                            tensor: other.map(|t| t.name.clone()),
                            expected: take,
                        }),
                    }
                    cursor += 1;
                }
            }
        }
    }
    let declared = program.stream_len();
    if declared != consumed {
        out.push(Diagnostic::StreamAccounting { declared, consumed });
    }
    out
}
