//! Instruction bundles.
//!
//! A program is a flat list of two instruction kinds. `ParamSet` writes a
//! scalar register; `ModuleExec` looks a bundle up in the Instruction Bundle
//! Table and expands its component sequence into concrete jobs using the
//! current register values.

mod disasm;
mod encode;
mod expand;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, Diagnostics};
use crate::datamove::DataMoveError;
use crate::tensor::Dims3;

pub use disasm::disassemble;
pub use encode::{decode, encode, DecodeError, DecodeErrorKind, FORMAT_VERSION, MAGIC};
pub use expand::{expand, Job};
pub use validate::{validate, Diagnostic};

pub const NUM_REGISTERS: usize = 64;
pub const BUNDLE_TABLE_CAPACITY: usize = 256;

pub type RegId = u8;
pub type BundleId = u8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("register r{0} read before any ParamSet wrote it")]
    Uninitialized(RegId),
    #[error("register r{0} does not exist")]
    BadRegister(RegId),
    #[error("bundle {0} is not in the bundle table")]
    UnknownBundle(BundleId),
    #[error("component {op:?} expects {expected} register bindings, has {actual}")]
    Bindings {
        op: ComponentOp,
        expected: usize,
        actual: usize,
    },
    #[error("address span {0:?} is not inside a single memory region")]
    Address((usize, usize)),
    #[error("{op:?}: slot `{slot}` holds {value}, {reason}")]
    BadValue {
        op: ComponentOp,
        slot: &'static str,
        value: u64,
        reason: &'static str,
    },
    #[error(transparent)]
    DataMove(#[from] DataMoveError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    ParamSet { reg: RegId, value: u64 },
    ModuleExec { bundle: BundleId },
}

/// Hardware component a job runs on; also the rows of the timing report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    MatMul,
    SoftMax,
    LayerNorm,
    Gelu,
    DataMove,
    PreProcess,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::MatMul,
        ComponentKind::SoftMax,
        ComponentKind::LayerNorm,
        ComponentKind::Gelu,
        ComponentKind::DataMove,
        ComponentKind::PreProcess,
    ];
}

/// Component templates. Each has a fixed list of register-bound slots,
/// resolved at expansion time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentOp {
    PatchGather,
    Linear,
    MeanPool,
    WindowScores,
    WindowContext,
    LayerNorm,
    Gelu,
    WindowSoftmax,
    WindowPartition,
    WindowReverse,
    CyclicShift,
    CyclicUnshift,
    PatchMerge,
    StreamLoad,
}

impl ComponentOp {
    pub const ALL: [ComponentOp; 14] = [
        ComponentOp::PatchGather,
        ComponentOp::Linear,
        ComponentOp::MeanPool,
        ComponentOp::WindowScores,
        ComponentOp::WindowContext,
        ComponentOp::LayerNorm,
        ComponentOp::Gelu,
        ComponentOp::WindowSoftmax,
        ComponentOp::WindowPartition,
        ComponentOp::WindowReverse,
        ComponentOp::CyclicShift,
        ComponentOp::CyclicUnshift,
        ComponentOp::PatchMerge,
        ComponentOp::StreamLoad,
    ];

    pub fn kind(self) -> ComponentKind {
        use ComponentOp::*;
        match self {
            PatchGather => ComponentKind::PreProcess,
            Linear | MeanPool | WindowScores | WindowContext => ComponentKind::MatMul,
            LayerNorm => ComponentKind::LayerNorm,
            Gelu => ComponentKind::Gelu,
            WindowSoftmax => ComponentKind::SoftMax,
            WindowPartition | WindowReverse | CyclicShift | CyclicUnshift | PatchMerge | StreamLoad => {
                ComponentKind::DataMove
            }
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        use ComponentOp::*;
        match self {
            PatchGather => &["channels", "height", "width", "patch", "src", "dst"],
            Linear => &["tokens", "in_dim", "out_dim", "bias", "accumulate", "src", "dst"],
            MeanPool => &["tokens", "dim", "src", "dst"],
            WindowScores => &["windows", "dim", "heads", "window", "qkv", "scores"],
            WindowContext => &["windows", "dim", "heads", "window", "probs", "qkv", "dst"],
            LayerNorm => &["tokens", "dim", "src", "dst"],
            Gelu => &["count", "src", "dst"],
            WindowSoftmax => &[
                "windows", "dim", "heads", "window", "scores", "probs", "table", "use_bias",
            ],
            WindowPartition | WindowReverse => &["channels", "height", "width", "window", "src", "dst"],
            CyclicShift | CyclicUnshift => &["channels", "height", "width", "shift", "src", "dst"],
            PatchMerge => &["channels", "height", "width", "src", "dst"],
            StreamLoad => &["count", "dst"],
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        use ComponentOp::*;
        match self {
            PatchGather => "patch_gather",
            Linear => "linear",
            MeanPool => "mean_pool",
            WindowScores => "window_scores",
            WindowContext => "window_context",
            LayerNorm => "layer_norm",
            Gelu => "gelu",
            WindowSoftmax => "window_softmax",
            WindowPartition => "window_partition",
            WindowReverse => "window_reverse",
            CyclicShift => "cyclic_shift",
            CyclicUnshift => "cyclic_unshift",
            PatchMerge => "patch_merge",
            StreamLoad => "stream_load",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentInvocation {
    pub op: ComponentOp,
    /// One register per slot of `op`, in slot order.
    pub bindings: Vec<RegId>,
}

impl ComponentInvocation {
    pub fn new(op: ComponentOp, bindings: Vec<RegId>) -> Self {
        Self { op, bindings }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    Public,
    /// Only emitted by compiler-internal lowering.
    Private,
}

/// Model-level operation a bundle implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BundleRole {
    PreProcess,
    WindowAttention,
    ShiftedWindowAttention,
    Mlp,
    PatchMerge,
    Head,
    Other,
}

impl BundleRole {
    pub const ALL: [BundleRole; 7] = [
        BundleRole::PreProcess,
        BundleRole::WindowAttention,
        BundleRole::ShiftedWindowAttention,
        BundleRole::Mlp,
        BundleRole::PatchMerge,
        BundleRole::Head,
        BundleRole::Other,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, BundleRole::WindowAttention | BundleRole::ShiftedWindowAttention)
    }

    pub fn label(self) -> &'static str {
        match self {
            BundleRole::PreProcess => "pre-process",
            BundleRole::WindowAttention => "w-msa",
            BundleRole::ShiftedWindowAttention => "sw-msa",
            BundleRole::Mlp => "mlp",
            BundleRole::PatchMerge => "patch-merge",
            BundleRole::Head => "head",
            BundleRole::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BundleTableEntry {
    pub id: BundleId,
    pub name: String,
    pub role: BundleRole,
    pub visibility: Visibility,
    pub components: Vec<ComponentInvocation>,
}

impl BundleTableEntry {
    /// Registers read by this bundle, in first-use order without repeats.
    pub fn registers(&self) -> Vec<RegId> {
        let mut regs = Vec::new();
        for c in &self.components {
            for &r in &c.bindings {
                if !regs.contains(&r) {
                    regs.push(r);
                }
            }
        }
        regs
    }
}

/// Named slice of the flat address space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryRegion {
    pub name: String,
    pub base: usize,
    pub len: usize,
    /// Fix8 fraction bits of values stored here.
    pub frac_bits: u8,
}

impl MemoryRegion {
    pub fn end(&self) -> usize {
        self.base + self.len
    }

    pub fn contains(&self, span: (usize, usize)) -> bool {
        span.0 >= self.base && span.1 <= self.end() && span.0 < span.1
    }
}

/// One parameter-stream tensor, by manifest name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamTensor {
    pub name: String,
    pub len: usize,
}

/// Where the program reads its input image and writes its result.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgramIo {
    pub input_region: String,
    pub input_dims: Dims3,
    pub output_region: String,
    pub output_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BundleProgram {
    pub io: Option<ProgramIo>,
    pub memory: Vec<MemoryRegion>,
    pub bundles: Vec<BundleTableEntry>,
    pub instructions: Vec<Instruction>,
    pub stream: Vec<StreamTensor>,
}

impl BundleProgram {
    pub fn bundle(&self, id: BundleId) -> Option<&BundleTableEntry> {
        self.bundles.iter().find(|b| b.id == id)
    }

    pub fn region(&self, name: &str) -> Option<&MemoryRegion> {
        self.memory.iter().find(|r| r.name == name)
    }

    /// Total size of the flat address space.
    pub fn address_space(&self) -> usize {
        self.memory.iter().map(MemoryRegion::end).max().unwrap_or(0)
    }

    pub fn stream_len(&self) -> usize {
        self.stream.iter().map(|t| t.len).sum()
    }

    /// Region containing `span`, if any single region does.
    pub fn region_of(&self, span: (usize, usize)) -> Option<&MemoryRegion> {
        self.memory.iter().find(|r| r.contains(span))
    }

    /// `ModuleExec` roles in program order.
    pub fn exec_roles(&self) -> Vec<BundleRole> {
        self.instructions
            .iter()
            .filter_map(|i| match i {
                Instruction::ModuleExec { bundle } => self.bundle(*bundle).map(|b| b.role),
                _ => None,
            })
            .collect()
    }
}

/// Scalar registers plus the diagnostics counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterFile {
    values: [Option<u64>; NUM_REGISTERS],
    pub diagnostics: Diagnostics,
}

impl Default for RegisterFile {
    fn default() -> Self {
        Self {
            values: [None; NUM_REGISTERS],
            diagnostics: Diagnostics::default(),
        }
    }
}

impl RegisterFile {
    pub fn set(&mut self, reg: RegId, value: u64) -> Result<(), ProgramError> {
        let slot = self
            .values
            .get_mut(reg as usize)
            .ok_or(ProgramError::BadRegister(reg))?;
        *slot = Some(value);
        Ok(())
    }

    pub fn get(&self, reg: RegId) -> Result<u64, ProgramError> {
        self.values
            .get(reg as usize)
            .ok_or(ProgramError::BadRegister(reg))?
            .ok_or(ProgramError::Uninitialized(reg))
    }

    pub fn is_set(&self, reg: RegId) -> bool {
        self.values.get(reg as usize).is_some_and(Option::is_some)
    }
}

/// A program error pinned to the instruction that raised it.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("instruction {instruction}{}: {source}", bundle.map(|b| format!(" (bundle {b})")).unwrap_or_default())]
pub struct ExecError {
    pub instruction: usize,
    pub bundle: Option<BundleId>,
    pub source: ProgramError,
}

/// The jobs one `ModuleExec` expanded into.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecStep {
    pub instruction: usize,
    pub bundle: BundleId,
    pub jobs: Vec<Job>,
}

/// Walk the instruction sequence, calling `f` with each expanded
/// `ModuleExec`. Nothing is computed, only registers and expansion.
pub fn walk<E: From<ExecError>>(
    program: &BundleProgram,
    mut f: impl FnMut(ExecStep, &RegisterFile) -> Result<(), E>,
) -> Result<RegisterFile, E> {
    let mut regs = RegisterFile::default();
    for (i, inst) in program.instructions.iter().enumerate() {
        let fail = |bundle, source| ExecError {
            instruction: i,
            bundle,
            source,
        };
        match *inst {
            Instruction::ParamSet { reg, value } => regs.set(reg, value).map_err(|e| fail(None, e))?,
            Instruction::ModuleExec { bundle } => {
                let entry = program
                    .bundle(bundle)
                    .ok_or_else(|| fail(Some(bundle), ProgramError::UnknownBundle(bundle)))?;
                let jobs = expand(entry, &regs, &program.memory).map_err(|e| fail(Some(bundle), e))?;
                f(
                    ExecStep {
                        instruction: i,
                        bundle,
                        jobs,
                    },
                    &regs,
                )?;
            }
        }
    }
    Ok(regs)
}
