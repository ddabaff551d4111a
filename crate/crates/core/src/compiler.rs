//! Model configuration to bundle program lowering.
//!
//! The model layer is a [`ModelConfig`]. Lowering picks a bundle for every
//! block (container layer), binds its geometry through `ParamSet`
//! instructions and lays the parameter stream out in first-use order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamove::window_partition_plan;
use crate::isa::{
    self, BundleId, BundleProgram, BundleRole, BundleTableEntry, ComponentInvocation, ComponentKind, ComponentOp,
    Diagnostic, ExecError, Instruction, MemoryRegion, ProgramIo, RegId, StreamTensor, Visibility, NUM_REGISTERS,
};
use crate::tensor::{Dims3, Manifest, ManifestEntry, TensorRole};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("stage {stage}: {reason}")]
    Geometry { stage: usize, reason: String },
    #[error("tensor `{tensor}`: {reason}")]
    Manifest { tensor: String, reason: String },
    #[error("tensor `{0}` is placed in the parameter stream twice")]
    DuplicateStreamTensor(String),
    #[error("lowering needs {0} registers, only {NUM_REGISTERS} exist")]
    Registers(usize),
    #[error("lowered program fails validation: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("reading config {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub shift_size: usize,
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub relative_position_bias: bool,
    pub final_norm: bool,
}

impl ModelConfig {
    /// The tiny Swin Transformer.
    pub fn swin_t() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            window_size: 7,
            shift_size: 3,
            depths: vec![2, 2, 6, 2],
            dims: vec![96, 192, 384, 768],
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
            num_classes: 1000,
            relative_position_bias: true,
            final_norm: true,
        }
    }

    /// A single-stage, single-window model small enough for unit tests.
    pub fn toy() -> Self {
        Self {
            image_size: 28,
            in_channels: 3,
            patch_size: 4,
            window_size: 7,
            shift_size: 3,
            depths: vec![2],
            dims: vec![16],
            heads: vec![2],
            mlp_ratio: 4,
            num_classes: 10,
            relative_position_bias: true,
            final_norm: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CompileError> {
        let read = |message: String| CompileError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| read(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        let bad = |m: String| Err(CompileError::Config(m));
        if self.depths.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.depths.len() != self.dims.len() || self.dims.len() != self.heads.len() {
            return bad(format!(
                "depths, dims and heads must have equal length ({}, {}, {})",
                self.depths.len(),
                self.dims.len(),
                self.heads.len()
            ));
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("patch_size", self.patch_size),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.window_size < 2 {
            return bad("window_size must be at least 2".into());
        }
        if self.shift_size == 0 || self.shift_size >= self.window_size {
            return bad(format!(
                "shift_size must lie in 1..{}, got {}",
                self.window_size, self.shift_size
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for s in 0..self.num_stages() {
            if self.depths[s] == 0 || self.dims[s] == 0 || self.heads[s] == 0 {
                return bad(format!("stage {s} has a zero depth, dim or head count"));
            }
            if !self.dims[s].is_multiple_of(self.heads[s]) {
                return Err(CompileError::Geometry {
                    stage: s,
                    reason: format!("{} heads do not divide dim {}", self.heads[s], self.dims[s]),
                });
            }
        }
        (0..self.num_stages()).try_for_each(|s| geometry(self, s).map(|_| ()))
    }
}

/// Feature map shape and window count of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageGeometry {
    pub stage: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub windows: usize,
    pub heads: usize,
    pub depth: usize,
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn elements(&self) -> usize {
        self.c * self.tokens()
    }

    pub fn dims(&self) -> Dims3 {
        Dims3 {
            c: self.c,
            h: self.h,
            w: self.w,
        }
    }
}

pub fn geometry(config: &ModelConfig, stage: usize) -> Result<StageGeometry, CompileError> {
    let err = |reason: String| CompileError::Geometry { stage, reason };
    if stage >= config.num_stages() {
        return Err(err(format!("model has {} stages", config.num_stages())));
    }
    let mut side = config.image_size / config.patch_size;
    for s in 0..stage {
        if !side.is_multiple_of(2) {
            return Err(CompileError::Geometry {
                stage: s,
                reason: format!("{side}x{side} map cannot be patch-merged"),
            });
        }
        side /= 2;
    }
    let win = config.window_size;
    if side == 0 || !side.is_multiple_of(win) {
        return Err(err(format!("{side}x{side} map is not divisible by window {win}")));
    }
    Ok(StageGeometry {
        stage,
        h: side,
        w: side,
        c: config.dims[stage],
        windows: (side / win) * (side / win),
        heads: config.heads[stage],
        depth: config.depths[stage],
    })
}

fn entry(name: String, role: TensorRole, c: usize, h: usize, w: usize) -> ManifestEntry {
    ManifestEntry {
        file: format!("{name}.bin"),
        name,
        role,
        c,
        h,
        w,
        frac_bits: None,
        byte_offset: 0,
    }
}

fn linear(name: String, k: usize, n: usize) -> ManifestEntry {
    entry(name, TensorRole::Linear, 1, k, n)
}

fn bias(name: String, n: usize) -> ManifestEntry {
    entry(name, TensorRole::Bias, 1, 1, n)
}

fn norm(prefix: &str, n: usize) -> [ManifestEntry; 2] {
    [
        entry(format!("{prefix}.weight"), TensorRole::NormWeight, 1, 1, n),
        entry(format!("{prefix}.bias"), TensorRole::NormBias, 1, 1, n),
    ]
}

/// Every tensor the model needs, in stream (first-use) order.
pub fn manifest_for_config(config: &ModelConfig) -> Result<Manifest, CompileError> {
    config.validate()?;
    let mut t = Vec::new();
    let c0 = config.dims[0];
    let feat = config.in_channels * config.patch_size * config.patch_size;
    t.push(linear("patch_embed.proj.weight".into(), feat, c0));
    t.push(bias("patch_embed.proj.bias".into(), c0));
    t.extend(norm("patch_embed.norm", c0));
    let side = 2 * config.window_size - 1;
    for s in 0..config.num_stages() {
        let (c, heads) = (config.dims[s], config.heads[s]);
        let hidden = config.mlp_ratio * c;
        for b in 0..config.depths[s] {
            let p = format!("layers.{s}.blocks.{b}");
            t.extend(norm(&format!("{p}.norm1"), c));
            t.push(linear(format!("{p}.attn.qkv.weight"), c, 3 * c));
            t.push(bias(format!("{p}.attn.qkv.bias"), 3 * c));
            if config.relative_position_bias {
                t.push(entry(
                    format!("{p}.attn.relative_position_bias_table"),
                    TensorRole::RelPosBias,
                    1,
                    side * side,
                    heads,
                ));
            }
            t.push(linear(format!("{p}.attn.proj.weight"), c, c));
            t.push(bias(format!("{p}.attn.proj.bias"), c));
            t.extend(norm(&format!("{p}.norm2"), c));
            t.push(linear(format!("{p}.mlp.fc1.weight"), c, hidden));
            t.push(bias(format!("{p}.mlp.fc1.bias"), hidden));
            t.push(linear(format!("{p}.mlp.fc2.weight"), hidden, c));
            t.push(bias(format!("{p}.mlp.fc2.bias"), c));
        }
        if s + 1 < config.num_stages() {
            t.extend(norm(&format!("layers.{s}.downsample.norm"), 4 * c));
            t.push(linear(
                format!("layers.{s}.downsample.reduction.weight"),
                4 * c,
                config.dims[s + 1],
            ));
        }
    }
    let last = *config.dims.last().unwrap();
    if config.final_norm {
        t.extend(norm("norm", last));
    }
    t.push(linear("head.weight".into(), last, config.num_classes));
    t.push(bias("head.bias".into(), config.num_classes));
    Ok(Manifest { tensors: t })
}

/// Fix8 fraction bits assigned to memory regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompileOptions {
    pub act_frac: u8,
    pub input_frac: u8,
    pub score_frac: u8,
    pub prob_frac: u8,
    /// Format of parameters loaded into memory (relative position tables).
    pub weight_frac: u8,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            act_frac: 4,
            input_frac: 4,
            score_frac: 3,
            prob_frac: 7,
            weight_frac: 6,
        }
    }
}

/// Serialize tensors in the order given, each exactly once.
pub fn layout_parameter_stream(order: &[String], manifest: &Manifest) -> Result<Vec<StreamTensor>, CompileError> {
    let mut seen = HashSet::new();
    order
        .iter()
        .map(|name| {
            if !seen.insert(name.as_str()) {
                return Err(CompileError::DuplicateStreamTensor(name.clone()));
            }
            let e = manifest.get(name).ok_or_else(|| CompileError::Manifest {
                tensor: name.clone(),
                reason: "missing from the manifest".into(),
            })?;
            Ok(StreamTensor {
                name: name.clone(),
                len: e.len(),
            })
        })
        .collect()
}

fn check_manifest(expected: &Manifest, given: &Manifest) -> Result<(), CompileError> {
    let mismatch = |tensor: &str, reason: String| {
        Err(CompileError::Manifest {
            tensor: tensor.to_string(),
            reason,
        })
    };
    for e in &expected.tensors {
        let Some(g) = given.get(&e.name) else {
            return mismatch(&e.name, "missing from the manifest".into());
        };
        if (g.c, g.h, g.w) != (e.c, e.h, e.w) {
            return mismatch(
                &e.name,
                format!(
                    "shape ({}, {}, {}), model needs ({}, {}, {})",
                    g.c, g.h, g.w, e.c, e.h, e.w
                ),
            );
        }
        if g.role != e.role {
            return mismatch(&e.name, format!("role {:?}, model needs {:?}", g.role, e.role));
        }
    }
    if let Some(extra) = given.tensors.iter().find(|g| expected.get(&g.name).is_none()) {
        return mismatch(&extra.name, "not used by the model".into());
    }
    let mut names = HashSet::new();
    if let Some(dup) = given.tensors.iter().find(|g| !names.insert(g.name.as_str())) {
        return mismatch(&dup.name, "listed twice in the manifest".into());
    }
    Ok(())
}

// Symbolic bundle definitions. Slot keys starting with '@' are region base
// addresses; everything else is a geometry value bound per ModuleExec.
type Def = (ComponentOp, &'static [&'static str]);

const PREPROCESS: &[Def] = &[
    (
        ComponentOp::PatchGather,
        &["in_c", "img", "img", "patch", "@input", "@patches"],
    ),
    (
        ComponentOp::Linear,
        &["tokens", "patch_feat", "dim", "one", "zero", "@patches", "@x"],
    ),
    (ComponentOp::LayerNorm, &["tokens", "dim", "@x", "@x"]),
];

const ATTN_PRE: Def = (ComponentOp::LayerNorm, &["tokens", "dim", "@x", "@t"]);
const ATTN_CORE: &[Def] = &[
    (ComponentOp::StreamLoad, &["table_len", "@table"]),
    (
        ComponentOp::WindowScores,
        &["windows", "dim", "heads", "win", "@qkv", "@scores"],
    ),
    (
        ComponentOp::WindowSoftmax,
        &[
            "windows", "dim", "heads", "win", "@scores", "@probs", "@table", "use_bias",
        ],
    ),
];
const SHIFT: Def = (ComponentOp::CyclicShift, &["dim", "h", "w", "shift", "@t", "@t2"]);

fn wmsa(shifted: bool, single: bool) -> Vec<Def> {
    let mut d = vec![ATTN_PRE];
    let src: &'static [&'static str] = match (shifted, single) {
        (false, false) => &["tokens", "dim", "dim3", "one", "zero", "@t", "@qkvf"],
        (true, false) => &["tokens", "dim", "dim3", "one", "zero", "@t2", "@qkvf"],
        (false, true) => &["tokens", "dim", "dim3", "one", "zero", "@t", "@qkv"],
        (true, true) => &["tokens", "dim", "dim3", "one", "zero", "@t2", "@qkv"],
    };
    if shifted {
        d.push(SHIFT);
    }
    d.push((ComponentOp::Linear, src));
    if !single {
        d.push((
            ComponentOp::WindowPartition,
            &["dim3", "h", "w", "win", "@qkvf", "@qkv"],
        ));
    }
    d.extend_from_slice(ATTN_CORE);
    if single {
        d.push((
            ComponentOp::WindowContext,
            &["windows", "dim", "heads", "win", "@probs", "@qkv", "@a"],
        ));
    } else {
        d.push((
            ComponentOp::WindowContext,
            &["windows", "dim", "heads", "win", "@probs", "@qkv", "@attn"],
        ));
        d.push((ComponentOp::WindowReverse, &["dim", "h", "w", "win", "@attn", "@a"]));
    }
    if shifted {
        d.push((ComponentOp::CyclicUnshift, &["dim", "h", "w", "shift", "@a", "@a2"]));
        d.push((
            ComponentOp::Linear,
            &["tokens", "dim", "dim", "one", "one", "@a2", "@x"],
        ));
    } else {
        d.push((ComponentOp::Linear, &["tokens", "dim", "dim", "one", "one", "@a", "@x"]));
    }
    d
}

const MLP: &[Def] = &[
    (ComponentOp::LayerNorm, &["tokens", "dim", "@x", "@t"]),
    (
        ComponentOp::Linear,
        &["tokens", "dim", "hidden", "one", "zero", "@t", "@hidden"],
    ),
    (ComponentOp::Gelu, &["hidden_count", "@hidden", "@hidden"]),
    (
        ComponentOp::Linear,
        &["tokens", "hidden", "dim", "one", "one", "@hidden", "@x"],
    ),
];

// tokens and dim here describe the merged map
const PATCH_MERGE: &[Def] = &[
    (ComponentOp::PatchMerge, &["in_dim", "h", "w", "@x", "@t"]),
    (ComponentOp::LayerNorm, &["tokens", "dim4", "@t", "@t"]),
    (
        ComponentOp::Linear,
        &["tokens", "dim4", "dim", "zero", "zero", "@t", "@x"],
    ),
];

const HEAD: &[Def] = &[
    (ComponentOp::LayerNorm, &["tokens", "dim", "@x", "@t"]),
    (ComponentOp::MeanPool, &["tokens", "dim", "@t", "@pooled"]),
    (
        ComponentOp::Linear,
        &["one", "dim", "classes", "one", "zero", "@pooled", "@logits"],
    ),
];

const HEAD_NO_NORM: &[Def] = &[
    (ComponentOp::MeanPool, &["tokens", "dim", "@x", "@pooled"]),
    (
        ComponentOp::Linear,
        &["one", "dim", "classes", "one", "zero", "@pooled", "@logits"],
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    PreProcess,
    Wmsa,
    Swmsa,
    Mlp,
    PatchMerge,
    Head,
    WmsaSingle,
    SwmsaSingle,
}

impl Kind {
    const ALL: [Kind; 8] = [
        Kind::PreProcess,
        Kind::Wmsa,
        Kind::Swmsa,
        Kind::Mlp,
        Kind::PatchMerge,
        Kind::Head,
        Kind::WmsaSingle,
        Kind::SwmsaSingle,
    ];

    fn id(self) -> BundleId {
        self as BundleId
    }

    fn name(self) -> &'static str {
        match self {
            Kind::PreProcess => "preprocess",
            Kind::Wmsa => "wmsa",
            Kind::Swmsa => "swmsa",
            Kind::Mlp => "mlp",
            Kind::PatchMerge => "patch_merge",
            Kind::Head => "head",
            Kind::WmsaSingle => "wmsa_single",
            Kind::SwmsaSingle => "swmsa_single",
        }
    }

    fn role(self) -> BundleRole {
        match self {
            Kind::PreProcess => BundleRole::PreProcess,
            Kind::Wmsa | Kind::WmsaSingle => BundleRole::WindowAttention,
            Kind::Swmsa | Kind::SwmsaSingle => BundleRole::ShiftedWindowAttention,
            Kind::Mlp => BundleRole::Mlp,
            Kind::PatchMerge => BundleRole::PatchMerge,
            Kind::Head => BundleRole::Head,
        }
    }

    fn visibility(self) -> Visibility {
        match self {
            Kind::WmsaSingle | Kind::SwmsaSingle => Visibility::Private,
            _ => Visibility::Public,
        }
    }

    fn defs(self, final_norm: bool) -> Vec<Def> {
        match self {
            Kind::PreProcess => PREPROCESS.to_vec(),
            Kind::Wmsa => wmsa(false, false),
            Kind::Swmsa => wmsa(true, false),
            Kind::WmsaSingle => wmsa(false, true),
            Kind::SwmsaSingle => wmsa(true, true),
            Kind::Mlp => MLP.to_vec(),
            Kind::PatchMerge => PATCH_MERGE.to_vec(),
            Kind::Head if final_norm => HEAD.to_vec(),
            Kind::Head => HEAD_NO_NORM.to_vec(),
        }
    }
}

/// Register assignment: every symbolic key gets one register, in order of
/// first appearance across all bundle definitions.
struct Registers {
    map: Vec<&'static str>,
}

impl Registers {
    fn new(final_norm: bool) -> Result<Self, CompileError> {
        let mut map = Vec::new();
        for kind in Kind::ALL {
            for (_, keys) in kind.defs(final_norm) {
                for &k in keys {
                    if !map.contains(&k) {
                        map.push(k);
                    }
                }
            }
        }
        if map.len() > NUM_REGISTERS {
            return Err(CompileError::Registers(map.len()));
        }
        Ok(Self { map })
    }

    fn reg(&self, key: &str) -> RegId {
        self.map.iter().position(|&k| k == key).expect("key registered") as RegId
    }
}

struct Layout {
    regions: Vec<MemoryRegion>,
}

impl Layout {
    fn new(config: &ModelConfig, stages: &[StageGeometry], opts: &CompileOptions) -> Self {
        let max = |f: &dyn Fn(&StageGeometry) -> usize| stages.iter().map(f).max().unwrap_or(0);
        let image = config.in_channels * config.image_size * config.image_size;
        let act = max(&|g| g.elements());
        let win4 = config.window_size.pow(4);
        let table = if config.relative_position_bias {
            (2 * config.window_size - 1).pow(2) * max(&|g| g.heads)
        } else {
            0
        };
        let sizes: [(&str, usize, u8); 16] = [
            ("input", image, opts.input_frac),
            ("patches", image, opts.input_frac),
            ("x", act, opts.act_frac),
            ("t", act, opts.act_frac),
            ("t2", act, opts.act_frac),
            ("qkvf", 3 * act, opts.act_frac),
            ("qkv", 3 * act, opts.act_frac),
            ("scores", max(&|g| g.windows * g.heads * win4), opts.score_frac),
            ("probs", max(&|g| g.windows * g.heads * win4), opts.prob_frac),
            ("table", table, opts.weight_frac),
            ("attn", act, opts.act_frac),
            ("a", act, opts.act_frac),
            ("a2", act, opts.act_frac),
            ("hidden", config.mlp_ratio * act, opts.act_frac),
            ("pooled", *config.dims.last().unwrap(), opts.act_frac),
            ("logits", config.num_classes, opts.act_frac),
        ];
        let mut base = 0;
        let regions = sizes
            .iter()
            .map(|&(name, len, frac_bits)| {
                let r = MemoryRegion {
                    name: name.to_string(),
                    base,
                    len,
                    frac_bits,
                };
                base += len;
                r
            })
            .collect();
        Self { regions }
    }

    fn base(&self, name: &str) -> usize {
        self.regions.iter().find(|r| r.name == name).expect("known region").base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoweringReport {
    /// ModuleExec count per bundle role label.
    pub bundle_counts: BTreeMap<String, usize>,
    pub module_execs: usize,
    pub param_sets: usize,
    pub data_move_elements: u64,
    pub parameter_count: usize,
    /// Charged operations per component kind.
    pub op_counts: BTreeMap<ComponentKind, u64>,
    pub stages: Vec<StageGeometry>,
}

impl fmt::Display for LoweringReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8}{:>6}{:>6}{:>8}{:>7}{:>7}{:>9}",
            "stage", "H", "W", "C", "heads", "depth", "windows"
        )?;
        for g in &self.stages {
            writeln!(
                f,
                "{:<8}{:>6}{:>6}{:>8}{:>7}{:>7}{:>9}",
                g.stage, g.h, g.w, g.c, g.heads, g.depth, g.windows
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<20}{:>14}", "bundle", "executions")?;
        for (name, n) in &self.bundle_counts {
            writeln!(f, "{name:<20}{n:>14}")?;
        }
        writeln!(f)?;
        writeln!(f, "{:<20}{:>14}", "component", "operations")?;
        for (kind, n) in &self.op_counts {
            writeln!(f, "{:<20}{n:>14}", format!("{kind:?}"))?;
        }
        writeln!(f)?;
        writeln!(f, "{:<20}{:>14}", "module execs", self.module_execs)?;
        writeln!(f, "{:<20}{:>14}", "param sets", self.param_sets)?;
        writeln!(f, "{:<20}{:>14}", "moved elements", self.data_move_elements)?;
        write!(f, "{:<20}{:>14}", "parameters", self.parameter_count)
    }
}

struct Emitter<'a> {
    regs: &'a Registers,
    layout: &'a Layout,
    shadow: [Option<u64>; NUM_REGISTERS],
    instructions: Vec<Instruction>,
    stream: Vec<String>,
    used: Vec<Kind>,
    final_norm: bool,
}

impl Emitter<'_> {
    fn exec(&mut self, kind: Kind, values: &HashMap<&'static str, u64>, tensors: Vec<String>) {
        for (_, keys) in kind.defs(self.final_norm) {
            for &key in keys {
                let v = match key.strip_prefix('@') {
                    Some(region) => self.layout.base(region) as u64,
                    None => match key {
                        "zero" => 0,
                        "one" => 1,
                        _ => *values.get(key).unwrap_or_else(|| panic!("no value for {key}")),
                    },
                };
                let reg = self.regs.reg(key);
                if self.shadow[reg as usize] != Some(v) {
                    self.shadow[reg as usize] = Some(v);
                    self.instructions.push(Instruction::ParamSet { reg, value: v });
                }
            }
        }
        self.instructions.push(Instruction::ModuleExec { bundle: kind.id() });
        if !self.used.contains(&kind) {
            self.used.push(kind);
        }
        self.stream.extend(tensors);
    }
}

fn names(prefix: &str, suffixes: &[&str]) -> Vec<String> {
    suffixes.iter().map(|s| format!("{prefix}.{s}")).collect()
}

/// Lower `config` against `manifest` into a validated program.
pub fn lower(
    config: &ModelConfig,
    manifest: &Manifest,
    opts: &CompileOptions,
) -> Result<(BundleProgram, LoweringReport), CompileError> {
    config.validate()?;
    for f in [
        opts.act_frac,
        opts.input_frac,
        opts.score_frac,
        opts.prob_frac,
        opts.weight_frac,
    ] {
        if f > 7 {
            return Err(CompileError::Config(format!("fraction bits {f} exceed 7")));
        }
    }
    let expected = manifest_for_config(config)?;
    check_manifest(&expected, manifest)?;

    let stages: Vec<StageGeometry> = (0..config.num_stages())
        .map(|s| geometry(config, s))
        .collect::<Result<_, _>>()?;
    let regs = Registers::new(config.final_norm)?;
    let layout = Layout::new(config, &stages, opts);
    let mut em = Emitter {
        regs: &regs,
        layout: &layout,
        shadow: [None; NUM_REGISTERS],
        instructions: Vec::new(),
        stream: Vec::new(),
        used: Vec::new(),
        final_norm: config.final_norm,
    };

    let win = config.window_size;
    let table_len = if config.relative_position_bias {
        (2 * win - 1).pow(2)
    } else {
        0
    };
    let g0 = stages[0];
    let v = HashMap::from([
        ("in_c", config.in_channels as u64),
        ("img", config.image_size as u64),
        ("patch", config.patch_size as u64),
        ("tokens", g0.tokens() as u64),
        ("patch_feat", (config.in_channels * config.patch_size.pow(2)) as u64),
        ("dim", g0.c as u64),
    ]);
    em.exec(
        Kind::PreProcess,
        &v,
        names("patch_embed", &["proj.weight", "proj.bias", "norm.weight", "norm.bias"]),
    );

    for g in &stages {
        let s = g.stage;
        let v = HashMap::from([
            ("tokens", g.tokens() as u64),
            ("dim", g.c as u64),
            ("dim3", 3 * g.c as u64),
            ("h", g.h as u64),
            ("w", g.w as u64),
            ("win", win as u64),
            ("windows", g.windows as u64),
            ("heads", g.heads as u64),
            ("shift", config.shift_size as u64),
            ("table_len", (table_len * g.heads) as u64),
            ("use_bias", config.relative_position_bias as u64),
            ("hidden", (config.mlp_ratio * g.c) as u64),
            ("hidden_count", (config.mlp_ratio * g.elements()) as u64),
        ]);
        // one window covering the whole map makes partition and reverse identities
        let single = window_partition_plan(Dims3::new(3 * g.c, g.h, g.w).expect("nonzero"), win)
            .map(|p| p.is_identity())
            .unwrap_or(false);
        for b in 0..g.depth {
            let p = format!("layers.{s}.blocks.{b}");
            let kind = match (b % 2 == 1, single) {
                (false, false) => Kind::Wmsa,
                (true, false) => Kind::Swmsa,
                (false, true) => Kind::WmsaSingle,
                (true, true) => Kind::SwmsaSingle,
            };
            let mut tensors = names(&p, &["norm1.weight", "norm1.bias", "attn.qkv.weight", "attn.qkv.bias"]);
            if config.relative_position_bias {
                tensors.push(format!("{p}.attn.relative_position_bias_table"));
            }
            tensors.extend(names(&p, &["attn.proj.weight", "attn.proj.bias"]));
            em.exec(kind, &v, tensors);
            em.exec(
                Kind::Mlp,
                &v,
                names(
                    &p,
                    &[
                        "norm2.weight",
                        "norm2.bias",
                        "mlp.fc1.weight",
                        "mlp.fc1.bias",
                        "mlp.fc2.weight",
                        "mlp.fc2.bias",
                    ],
                ),
            );
        }
        if let Some(next) = stages.get(s + 1) {
            let v = HashMap::from([
                ("in_dim", g.c as u64),
                ("h", g.h as u64),
                ("w", g.w as u64),
                ("tokens", next.tokens() as u64),
                ("dim4", 4 * g.c as u64),
                ("dim", next.c as u64),
            ]);
            em.exec(
                Kind::PatchMerge,
                &v,
                names(
                    &format!("layers.{s}.downsample"),
                    &["norm.weight", "norm.bias", "reduction.weight"],
                ),
            );
        }
    }

    let last = stages.last().unwrap();
    let v = HashMap::from([
        ("tokens", last.tokens() as u64),
        ("dim", last.c as u64),
        ("classes", config.num_classes as u64),
    ]);
    let mut tensors = Vec::new();
    if config.final_norm {
        tensors.extend(names("norm", &["weight", "bias"]));
    }
    tensors.extend(["head.weight".to_string(), "head.bias".to_string()]);
    em.exec(Kind::Head, &v, tensors);

    let mut used = em.used.clone();
    used.sort();
    let bundles = used
        .into_iter()
        .map(|kind| BundleTableEntry {
            id: kind.id(),
            name: kind.name().to_string(),
            role: kind.role(),
            visibility: kind.visibility(),
            components: kind
                .defs(config.final_norm)
                .into_iter()
                .map(|(op, keys)| ComponentInvocation::new(op, keys.iter().map(|k| regs.reg(k)).collect()))
                .collect(),
        })
        .collect();

    let program = BundleProgram {
        io: Some(ProgramIo {
            input_region: "input".into(),
            input_dims: Dims3::new(config.in_channels, config.image_size, config.image_size).expect("validated config"),
            output_region: "logits".into(),
            output_len: config.num_classes,
        }),
        memory: layout.regions.clone(),
        bundles,
        instructions: em.instructions,
        stream: layout_parameter_stream(&em.stream, manifest)?,
    };

    let diags = isa::validate(&program);
    if !diags.is_empty() {
        return Err(CompileError::Invalid(diags));
    }
    let report = lowering_report(&program, &stages)?;
    if report.parameter_count != manifest.total_elements() {
        return Err(CompileError::Manifest {
            tensor: "*".into(),
            reason: format!(
                "jobs consume {} parameters, manifest holds {}",
                report.parameter_count,
                manifest.total_elements()
            ),
        });
    }
    Ok((program, report))
}

fn lowering_report(program: &BundleProgram, stages: &[StageGeometry]) -> Result<LoweringReport, CompileError> {
    let mut report = LoweringReport {
        bundle_counts: BTreeMap::new(),
        module_execs: 0,
        param_sets: program
            .instructions
            .iter()
            .filter(|i| matches!(i, Instruction::ParamSet { .. }))
            .count(),
        data_move_elements: 0,
        parameter_count: 0,
        op_counts: ComponentKind::ALL.iter().map(|&k| (k, 0)).collect(),
        stages: stages.to_vec(),
    };
    isa::walk::<CompileError>(program, |step, _| {
        let entry = program.bundle(step.bundle).expect("walk resolves bundles");
        report.module_execs += 1;
        *report.bundle_counts.entry(entry.role.label().to_string()).or_default() += 1;
        for job in &step.jobs {
            *report.op_counts.get_mut(&job.kind()).unwrap() += job.op_count();
            if job.kind() == ComponentKind::DataMove {
                report.data_move_elements += job.op_count();
            }
            report.parameter_count += job.parameter_count();
        }
        Ok(())
    })?;
    Ok(report)
}
