//! Program execution, the parameter stream and the timing model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{
    gelu_job_f64, gelu_job_fix8, layernorm_job_f64, layernorm_job_fix8, matmul_f64, matmul_fix8, softmax_job_f64,
    softmax_job_fix8, to_stream_order, uniform_weight, ComputeError, Diagnostics, MatmulFracs, MatmulJob, WeightSource,
};
use crate::datamove::DataMoveError;
use crate::isa::{self, BundleId, BundleProgram, ComponentKind, ExecError, ExecStep, Job, MemoryRegion, ProgramError};
use crate::tensor::{
    read_tensor, Dims3, Fix8, IoError, Manifest, ManifestEntry, QuantSpec, Tensor3D, TensorError, TensorRole,
};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("needs {needed} more parameters but the stream is exhausted")]
    Underrun { needed: usize },
    #[error("requested {requested} parameters but the next stream tensor `{tensor}` holds {len}")]
    Mismatch {
        tensor: String,
        len: usize,
        requested: usize,
    },
    #[error("{unused} stream tensors left unconsumed")]
    Overrun { unused: usize },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("instruction {instruction} (bundle {bundle}): parameter stream: {source}")]
    Stream {
        instruction: usize,
        bundle: BundleId,
        source: StreamError,
    },
    #[error("parameter stream: {0}")]
    StreamEnd(StreamError),
    #[error("input: {0}")]
    Input(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("timing: {0}")]
    Timing(String),
}

/// Model weights by manifest name.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Tensor3D>,
}

impl WeightSet {
    pub fn new(entries: Vec<(ManifestEntry, Tensor3D)>) -> Self {
        let mut manifest = Manifest::default();
        let mut tensors = HashMap::new();
        for (e, t) in entries {
            tensors.insert(e.name.clone(), t);
            manifest.tensors.push(e);
        }
        Self { manifest, tensors }
    }

    /// Read `manifest.json` and every tensor it lists from `dir`.
    pub fn load(dir: &Path) -> Result<Self, IoError> {
        let manifest = Manifest::load(&dir.join("manifest.json"))?;
        let tensors = manifest
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), read_tensor(dir, e)?)))
            .collect::<Result<_, IoError>>()?;
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest, IoError> {
        let pairs: Vec<_> = self
            .manifest
            .tensors
            .iter()
            .map(|e| (e.clone(), self.tensors[&e.name].clone()))
            .collect();
        crate::tensor::write_weight_dir(dir, &pairs)
    }

    /// Quantize every float tensor to fix_8 with `frac_bits`.
    pub fn quantized(&self, frac_bits: u8) -> Result<(Self, usize), TensorError> {
        let q = QuantSpec::new(frac_bits)?;
        let mut out = self.clone();
        let mut saturations = 0;
        for e in &mut out.manifest.tensors {
            let t = out.tensors.get_mut(&e.name).expect("manifest and tensors agree");
            if t.quant().is_none() {
                let (fixed, sat) = t.to_fix8(q)?;
                *t = fixed;
                saturations += sat;
            }
            e.frac_bits = t.quant().map(|q| q.frac_bits());
        }
        Ok((out, saturations))
    }
}

/// One stream tensor, already in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub values: Vec<f64>,
    /// Fraction bits when the tensor is stored as fix_8.
    pub frac: Option<u8>,
}

/// Parameters in the order the program consumes them. Matrices are
/// rearranged column by column so every consumer reads sequentially.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStream {
    pub segments: Vec<Segment>,
}

impl ParamStream {
    pub fn new(program: &BundleProgram, weights: &WeightSet) -> Result<Self, RunError> {
        let segments = program
            .stream
            .iter()
            .map(|st| {
                let entry = weights
                    .manifest
                    .get(&st.name)
                    .ok_or_else(|| RunError::Weights(format!("`{}` is not in the manifest", st.name)))?;
                let tensor = weights
                    .tensors
                    .get(&st.name)
                    .ok_or_else(|| RunError::Weights(format!("`{}` has no data", st.name)))?;
                if tensor.dims().len() != st.len {
                    return Err(RunError::Weights(format!(
                        "`{}` holds {} values, the program streams {}",
                        st.name,
                        tensor.dims().len(),
                        st.len
                    )));
                }
                let values = tensor.to_f64();
                let values = match entry.role {
                    TensorRole::Linear => to_stream_order(&values, entry.h, entry.w),
                    _ => values,
                };
                Ok(Segment {
                    name: st.name.clone(),
                    values,
                    frac: tensor.quant().map(|q| q.frac_bits()),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { segments })
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

struct Cursor<'a, T> {
    segments: &'a [T],
    next: usize,
}

impl<'a, T> Cursor<'a, T> {
    fn take(
        &mut self,
        len: usize,
        size: impl Fn(&T) -> usize,
        name: impl Fn(&T) -> String,
    ) -> Result<&'a T, StreamError> {
        let seg = self
            .segments
            .get(self.next)
            .ok_or(StreamError::Underrun { needed: len })?;
        if size(seg) != len {
            return Err(StreamError::Mismatch {
                tensor: name(seg),
                len: size(seg),
                requested: len,
            });
        }
        self.next += 1;
        Ok(seg)
    }

    fn finish(&self) -> Result<(), StreamError> {
        match self.segments.len() - self.next {
            0 => Ok(()),
            unused => Err(StreamError::Overrun { unused }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Float,
    Fix8,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float" => Ok(Mode::Float),
            "fix8" => Ok(Mode::Fix8),
            _ => Err(format!("unknown mode `{s}`, expected float or fix8")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub mode: Mode,
    /// Fix8 format of stream tensors that arrive as floats.
    pub weight_frac: u8,
}

impl ExecOptions {
    pub fn float() -> Self {
        Self {
            mode: Mode::Float,
            weight_frac: 6,
        }
    }

    pub fn fix8(weight_frac: u8) -> Self {
        Self {
            mode: Mode::Fix8,
            weight_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Empty when the program declares no output.
    pub logits: Vec<f64>,
    pub mode: Mode,
    pub diagnostics: Diagnostics,
    pub timing: TimingReport,
}

/// Region fraction bits by address.
struct FracMap {
    spans: Vec<(usize, usize, u8)>,
}

impl FracMap {
    fn new(memory: &[MemoryRegion]) -> Self {
        let mut spans: Vec<_> = memory
            .iter()
            .filter(|r| r.len > 0)
            .map(|r| (r.base, r.end(), r.frac_bits))
            .collect();
        spans.sort();
        Self { spans }
    }

    fn at(&self, addr: usize) -> u8 {
        let i = self.spans.partition_point(|s| s.1 <= addr);
        // expansion already proved every address lies in a region
        self.spans[i].2
    }
}

struct FixSegment {
    raw: Vec<i8>,
    quant: QuantSpec,
}

enum Memory {
    Float(Vec<f64>),
    Fix8 {
        mem: Vec<i8>,
        fracs: FracMap,
        stream: Vec<FixSegment>,
    },
}

fn job_error(step: &ExecStep, source: impl Into<ProgramError>) -> ExecError {
    ExecError {
        instruction: step.instruction,
        bundle: Some(step.bundle),
        source: source.into(),
    }
}

fn place_input(program: &BundleProgram, input: &Tensor3D, mem: &mut Memory) -> Result<Diagnostics, RunError> {
    let mut diag = Diagnostics::default();
    let Some(io) = &program.io else {
        return Ok(diag);
    };
    if input.dims() != io.input_dims {
        return Err(RunError::Input(format!(
            "tensor is {:?}, program expects {:?}",
            input.dims(),
            io.input_dims
        )));
    }
    let region = program
        .region(&io.input_region)
        .ok_or_else(|| RunError::Input(format!("no region `{}`", io.input_region)))?;
    match mem {
        Memory::Float(m) => m[region.base..region.end()].copy_from_slice(&input.to_f64()),
        Memory::Fix8 { mem, .. } => {
            let q = QuantSpec::new(region.frac_bits).map_err(|e| RunError::Input(e.to_string()))?;
            let (fixed, sat) = input.to_fix8(q).map_err(|e| RunError::Input(e.to_string()))?;
            diag.saturations += sat as u64;
            if let crate::tensor::TensorData::Fix8 { raw, .. } = fixed.data() {
                mem[region.base..region.end()].copy_from_slice(raw);
            }
        }
    }
    Ok(diag)
}

fn run_job(
    step: &ExecStep,
    job: &Job,
    mem: &mut Memory,
    segments: &[Segment],
    cursor: &mut usize,
) -> Result<Diagnostics, RunError> {
    let err = |e: ProgramError| RunError::Exec(job_error(step, e));
    let mut take = |len: usize| -> Result<usize, RunError> {
        let mut c = Cursor {
            segments,
            next: *cursor,
        };
        c.take(len, |s| s.values.len(), |s| s.name.clone())
            .map_err(|source| RunError::Stream {
                instruction: step.instruction,
                bundle: step.bundle,
                source,
            })?;
        *cursor += 1;
        Ok(*cursor - 1)
    };
    let mut diag = Diagnostics::default();
    match (job, mem) {
        (Job::MatMul(j), Memory::Float(m)) => {
            let (w, b) = stream_operands(j, &mut take)?;
            matmul_f64(
                j,
                m,
                w.map(|i| segments[i].values.as_slice()),
                b.map(|i| segments[i].values.as_slice()),
            )
            .map_err(|e| err(e.into()))?;
        }
        (Job::MatMul(j), Memory::Fix8 { mem, fracs, stream }) => {
            let (w, b) = stream_operands(j, &mut take)?;
            let weight = match j.weights {
                WeightSource::Stream => stream[w.unwrap()].quant.frac_bits(),
                WeightSource::Memory(v) => fracs.at(v.base),
                WeightSource::Uniform => uniform_weight(j.k).1,
            };
            let f = MatmulFracs {
                input: fracs.at(j.input.base),
                weight,
                bias: b.map_or(0, |i| stream[i].quant.frac_bits()),
                output: fracs.at(j.output.base),
            };
            let d = matmul_fix8(
                j,
                mem,
                f,
                w.map(|i| stream[i].raw.as_slice()),
                b.map(|i| stream[i].raw.as_slice()),
            )
            .map_err(|e| err(e.into()))?;
            diag.merge(d);
        }
        (Job::SoftMax(j), Memory::Float(m)) => diag.merge(softmax_job_f64(j, m).map_err(|e| err(e.into()))?),
        (Job::SoftMax(j), Memory::Fix8 { mem, fracs, .. }) => {
            diag.merge(softmax_job_fix8(j, mem, |a| fracs.at(a)).map_err(|e| err(e.into()))?)
        }
        (Job::LayerNorm(j), Memory::Float(m)) => {
            let (g, b) = (take(j.dim)?, take(j.dim)?);
            diag.merge(layernorm_job_f64(j, m, &segments[g].values, &segments[b].values).map_err(|e| err(e.into()))?);
        }
        (Job::LayerNorm(j), Memory::Fix8 { mem, fracs, stream }) => {
            let (g, b) = (take(j.dim)?, take(j.dim)?);
            let (g, b) = (&stream[g], &stream[b]);
            diag.merge(
                layernorm_job_fix8(j, mem, |a| fracs.at(a), (&g.raw, g.quant), (&b.raw, b.quant))
                    .map_err(|e| err(e.into()))?,
            );
        }
        (Job::Gelu(j), Memory::Float(m)) => gelu_job_f64(j, m),
        (Job::Gelu(j), Memory::Fix8 { mem, fracs, .. }) => {
            diag.merge(gelu_job_fix8(j, mem, |a| fracs.at(a)).map_err(|e| err(e.into()))?)
        }
        (Job::DataMove(p) | Job::PreProcess { plan: p, .. }, m) => {
            let r: Result<(), DataMoveError> = match m {
                Memory::Float(m) => p.execute(m),
                Memory::Fix8 { mem, .. } => p.execute(mem),
            };
            r.map_err(|e| err(e.into()))?;
        }
        (Job::StreamLoad { dst, count }, m) => {
            let s = take(*count)?;
            match m {
                Memory::Float(m) => m[*dst..dst + count].copy_from_slice(&segments[s].values),
                Memory::Fix8 { mem, fracs, stream } => {
                    let q = QuantSpec::new(fracs.at(*dst)).map_err(|e| err(ComputeError::from(e).into()))?;
                    let seg = &stream[s];
                    for (i, &r) in seg.raw.iter().enumerate() {
                        let v = q.quantize(seg.quant.dequantize(Fix8(r))).expect("finite");
                        diag.saturations += v.saturated as u64;
                        mem[dst + i] = v.value.0;
                    }
                }
            }
        }
    }
    Ok(diag)
}

type Operands = (Option<usize>, Option<usize>);

fn stream_operands(
    j: &MatmulJob,
    take: &mut impl FnMut(usize) -> Result<usize, RunError>,
) -> Result<Operands, RunError> {
    if j.weights != WeightSource::Stream {
        return Ok((None, None));
    }
    let w = take(j.k * j.n)?;
    let b = if j.bias { Some(take(j.n)?) } else { None };
    Ok((Some(w), b))
}

/// Run `program` on `input`. Instructions execute in order; every
/// `ModuleExec` expands and runs its jobs, charging the timing model.
pub fn execute(
    program: &BundleProgram,
    stream: &ParamStream,
    input: &Tensor3D,
    opts: &ExecOptions,
    timing: &TimingModel,
) -> Result<RunResult, RunError> {
    timing.check()?;
    let mut diagnostics = Diagnostics::default();
    let size = program.address_space();
    let mut mem = match opts.mode {
        Mode::Float => Memory::Float(vec![0.0; size]),
        Mode::Fix8 => {
            let default = QuantSpec::new(opts.weight_frac).map_err(|e| RunError::Weights(e.to_string()))?;
            let mut fixed = Vec::with_capacity(stream.segments.len());
            for seg in &stream.segments {
                let quant = match seg.frac {
                    Some(f) => QuantSpec::new(f).map_err(|e| RunError::Weights(e.to_string()))?,
                    None => default,
                };
                let mut raw = Vec::with_capacity(seg.values.len());
                for &v in &seg.values {
                    let q = quant
                        .quantize(v)
                        .map_err(|e| RunError::Weights(format!("`{}`: {e}", seg.name)))?;
                    diagnostics.saturations += q.saturated as u64;
                    raw.push(q.value.0);
                }
                fixed.push(FixSegment { raw, quant });
            }
            Memory::Fix8 {
                mem: vec![0; size],
                fracs: FracMap::new(&program.memory),
                stream: fixed,
            }
        }
    };
    diagnostics.merge(place_input(program, input, &mut mem)?);

    let mut counts = OpCounts::default();
    let mut cursor = 0;
    isa::walk::<RunError>(program, |step, _| {
        for job in &step.jobs {
            diagnostics.merge(run_job(&step, job, &mut mem, &stream.segments, &mut cursor)?);
            counts.add(job);
        }
        Ok(())
    })?;
    Cursor {
        segments: &stream.segments,
        next: cursor,
    }
    .finish()
    .map_err(RunError::StreamEnd)?;

    let logits = match &program.io {
        None => Vec::new(),
        Some(io) => {
            let r = program
                .region(&io.output_region)
                .ok_or_else(|| RunError::Input(format!("no region `{}`", io.output_region)))?;
            let span = r.base..r.base + io.output_len;
            match &mem {
                Memory::Float(m) => m[span].to_vec(),
                Memory::Fix8 { mem, .. } => {
                    let q = QuantSpec::new(r.frac_bits).map_err(|e| RunError::Input(e.to_string()))?;
                    mem[span].iter().map(|&v| q.dequantize(Fix8(v))).collect()
                }
            }
        }
    };
    Ok(RunResult {
        logits,
        mode: opts.mode,
        diagnostics,
        timing: timing.report(&counts),
    })
}

/// Operations charged per component kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts(pub BTreeMap<ComponentKind, u64>);

impl OpCounts {
    pub fn add(&mut self, job: &Job) {
        *self.0.entry(job.kind()).or_default() += job.op_count();
    }

    pub fn get(&self, kind: ComponentKind) -> u64 {
        self.0.get(&kind).copied().unwrap_or(0)
    }
}

/// Op counts of a program without computing anything.
pub fn count_ops(program: &BundleProgram) -> Result<OpCounts, ExecError> {
    let mut counts = OpCounts::default();
    isa::walk::<ExecError>(program, |step, _| {
        step.jobs.iter().for_each(|j| counts.add(j));
        Ok(())
    })?;
    Ok(counts)
}

/// Linear cost model. Matrix multiply time is `matmul * MACs / batch`;
/// every other component costs its constant per counted operation.
/// Constants are seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingModel {
    pub batch: u32,
    pub matmul: f64,
    pub softmax: f64,
    pub layernorm: f64,
    pub gelu: f64,
    pub datamove: f64,
    pub preprocess: f64,
    /// Pre-process runs concurrently with the matrix unit and is left out
    /// of the total.
    #[serde(default = "yes")]
    pub overlap_preprocess: bool,
}

fn yes() -> bool {
    true
}

impl Default for TimingModel {
    /// One operation per cycle at 200 MHz, 96 MAC lanes.
    fn default() -> Self {
        let cycle = 1.0 / 200e6;
        Self {
            batch: 96,
            matmul: cycle,
            softmax: cycle,
            layernorm: cycle,
            gelu: cycle,
            datamove: cycle,
            preprocess: cycle,
            overlap_preprocess: true,
        }
    }
}

pub const MODULE_NAMES: [(ComponentKind, &str); 6] = [
    (ComponentKind::MatMul, "Matrix Multiply"),
    (ComponentKind::SoftMax, "SoftMax"),
    (ComponentKind::LayerNorm, "Layer Normalization"),
    (ComponentKind::Gelu, "Gelu"),
    (ComponentKind::DataMove, "Data Selection and Data Arrangement"),
    (ComponentKind::PreProcess, "Pre-process"),
];

impl TimingModel {
    pub fn constant(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::MatMul => self.matmul,
            ComponentKind::SoftMax => self.softmax,
            ComponentKind::LayerNorm => self.layernorm,
            ComponentKind::Gelu => self.gelu,
            ComponentKind::DataMove => self.datamove,
            ComponentKind::PreProcess => self.preprocess,
        }
    }

    fn constant_mut(&mut self, kind: ComponentKind) -> &mut f64 {
        match kind {
            ComponentKind::MatMul => &mut self.matmul,
            ComponentKind::SoftMax => &mut self.softmax,
            ComponentKind::LayerNorm => &mut self.layernorm,
            ComponentKind::Gelu => &mut self.gelu,
            ComponentKind::DataMove => &mut self.datamove,
            ComponentKind::PreProcess => &mut self.preprocess,
        }
    }

    pub fn check(&self) -> Result<(), RunError> {
        if self.batch == 0 {
            return Err(RunError::Timing("batch must be at least 1".into()));
        }
        for (kind, _) in MODULE_NAMES {
            let c = self.constant(kind);
            if !(c >= 0.0 && c.is_finite()) {
                return Err(RunError::Timing(format!(
                    "{kind:?} constant {c} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Work units the constant multiplies: MACs per batch lane for the
    /// matrix unit, raw counts elsewhere.
    fn units(&self, kind: ComponentKind, count: u64) -> f64 {
        match kind {
            ComponentKind::MatMul => count as f64 / self.batch as f64,
            _ => count as f64,
        }
    }

    pub fn seconds(&self, kind: ComponentKind, count: u64) -> f64 {
        self.constant(kind) * self.units(kind, count)
    }

    pub fn report(&self, counts: &OpCounts) -> TimingReport {
        let rows = MODULE_NAMES
            .iter()
            .map(|&(kind, name)| {
                let batched = matches!(
                    kind,
                    ComponentKind::MatMul
                        | ComponentKind::SoftMax
                        | ComponentKind::LayerNorm
                        | ComponentKind::PreProcess
                );
                RowInput {
                    module: name.to_string(),
                    batch: batched.then_some(self.batch),
                    seconds: self.seconds(kind, counts.get(kind)),
                    overlapped: kind == ComponentKind::PreProcess && self.overlap_preprocess,
                }
            })
            .collect();
        TimingReport::from_rows(rows)
    }

    /// Fit constants so that `report` reproduces `target` (seconds per kind)
    /// for a program with op counts `counts`.
    pub fn calibrate(
        counts: &OpCounts,
        target: &BTreeMap<ComponentKind, f64>,
        batch: u32,
        overlap_preprocess: bool,
    ) -> Result<Self, RunError> {
        let mut model = TimingModel {
            batch,
            matmul: 0.0,
            softmax: 0.0,
            layernorm: 0.0,
            gelu: 0.0,
            datamove: 0.0,
            preprocess: 0.0,
            overlap_preprocess,
        };
        model.check()?;
        for (&kind, &t) in target {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(RunError::Timing(format!("{kind:?} target {t} is not a valid time")));
            }
            let units = model.units(kind, counts.get(kind));
            *model.constant_mut(kind) = match (t == 0.0, units == 0.0) {
                (true, _) => 0.0,
                (false, true) => {
                    return Err(RunError::Timing(format!(
                        "{kind:?} has a target of {t} s but the program performs no such operations"
                    )))
                }
                (false, false) => t / units,
            };
        }
        Ok(model)
    }
}

/// Timing model prediction for `program` without computing any values.
pub fn predict(program: &BundleProgram, model: &TimingModel) -> Result<TimingReport, RunError> {
    model.check()?;
    Ok(model.report(&count_ops(program)?))
}

pub struct RowInput {
    pub module: String,
    pub batch: Option<u32>,
    pub seconds: f64,
    pub overlapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub module: String,
    pub batch: Option<u32>,
    pub seconds: f64,
    pub percentage: f64,
    pub overlapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Sum of the rows not marked overlapped.
    pub total_seconds: f64,
}

pub const REPORT_FOOTER: &str = "* overlapped with the matrix unit and excluded from Total. \
Pre-process counts patch gathering only; the patch embedding matmul is part of Matrix Multiply.";

impl TimingReport {
    pub fn from_rows(rows: Vec<RowInput>) -> Self {
        let total: f64 = rows.iter().filter(|r| !r.overlapped).map(|r| r.seconds).sum();
        let rows = rows
            .into_iter()
            .map(|r| TimingRow {
                percentage: if total > 0.0 { r.seconds / total * 100.0 } else { 0.0 },
                module: r.module,
                batch: r.batch,
                seconds: r.seconds,
                overlapped: r.overlapped,
            })
            .collect();
        Self {
            rows,
            total_seconds: total,
        }
    }

    pub fn row(&self, module: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.module == module)
    }

    /// Percentage rounded to two decimals, as printed.
    pub fn rounded_percentage(&self, module: &str) -> Option<f64> {
        self.row(module).map(|r| (r.percentage * 100.0).round() / 100.0)
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = |f: &mut fmt::Formatter<'_>, a: &str, b: &str, c: &str, d: &str| {
            writeln!(f, "{a:<37}| {b:>5} | {c:>18} | {d:>13}")
        };
        line(f, "Module", "Batch", "Inference time(ms)", "Percentage(%)")?;
        let mut any_overlap = false;
        for r in &self.rows {
            let name = if r.overlapped {
                format!("{}*", r.module)
            } else {
                r.module.clone()
            };
            any_overlap |= r.overlapped;
            line(
                f,
                &name,
                &r.batch.map_or("-".to_string(), |b| b.to_string()),
                &format!("{:.7}", r.seconds * 1e3),
                &format!("{:.2}", r.percentage),
            )?;
        }
        let pct = if self.total_seconds > 0.0 { "100.00" } else { "0.00" };
        line(f, "Total", "-", &format!("{:.7}", self.total_seconds * 1e3), pct)?;
        if any_overlap {
            writeln!(f, "{REPORT_FOOTER}")?;
        }
        Ok(())
    }
}

/// Parse measured module times. Accepts the report layout (fields split on
/// `|` or tabs, times in milliseconds); the Total row and unknown modules
/// are ignored. Returns seconds per component kind.
pub fn parse_target(text: &str) -> Result<BTreeMap<ComponentKind, f64>, RunError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(['|', '\t']).map(str::trim).collect();
        if fields.len() < 3 {
            continue;
        }
        let name = fields[0].trim_end_matches('*');
        let Some(&(kind, _)) = MODULE_NAMES.iter().find(|(_, m)| *m == name) else {
            continue;
        };
        let ms: f64 = fields[2]
            .parse()
            .map_err(|_| RunError::Timing(format!("line {}: `{}` is not a time", n + 1, fields[2])))?;
        if out.insert(kind, ms * 1e-3).is_some() {
            return Err(RunError::Timing(format!("line {}: {name} listed twice", n + 1)));
        }
    }
    if out.is_empty() {
        return Err(RunError::Timing("no module rows found".into()));
    }
    Ok(out)
}

/// Text of a run: logits and diagnostics followed by the timing table.
pub fn render_run(result: &RunResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode\t{:?}", result.mode);
    if !result.logits.is_empty() {
        let top = argmax(&result.logits);
        let _ = writeln!(s, "top1\t{top}");
        let logits: Vec<String> = result.logits.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "logits\t{}", logits.join(" "));
    }
    let d = result.diagnostics;
    let _ = writeln!(
        s,
        "diagnostics\tsaturations={} divisions={} accumulator_overflows={}",
        d.saturations, d.divisions, d.accumulator_overflows
    );
    let _ = write!(s, "\n{}", result.timing);
    s
}

/// Index of the largest value; first wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            },
        )
        .0
}

/// Dims of the program input, if it declares one.
pub fn input_dims(program: &BundleProgram) -> Option<Dims3> {
    program.io.as_ref().map(|io| io.input_dims)
}
