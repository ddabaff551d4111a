use serde::{Deserialize, Serialize};

use super::{
    BundleTableEntry, ComponentInvocation, ComponentKind, ComponentOp, MemoryRegion, ProgramError, RegisterFile,
};
use crate::compute::{GeluJob, LayerNormJob, MatView, MatmulJob, RelBias, SoftmaxJob, WeightSource, LAYERNORM_EPS};
use crate::datamove::{
    cyclic_shift_plan, cyclic_unshift_plan, patch_gather_plan, patch_merge_plan, window_partition_plan,
    window_reverse_plan, ArrangePlan,
};
use crate::tensor::Dims3;

/// A fully concretized unit of work for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Job {
    MatMul(MatmulJob),
    SoftMax(SoftmaxJob),
    LayerNorm(LayerNormJob),
    Gelu(GeluJob),
    DataMove(ArrangePlan),
    /// Copy `count` parameters from the stream into memory at `dst`.
    StreamLoad {
        dst: usize,
        count: usize,
    },
    PreProcess {
        plan: ArrangePlan,
        tokens: usize,
    },
}

impl Job {
    pub fn kind(&self) -> ComponentKind {
        match self {
            Job::MatMul(_) => ComponentKind::MatMul,
            Job::SoftMax(_) => ComponentKind::SoftMax,
            Job::LayerNorm(_) => ComponentKind::LayerNorm,
            Job::Gelu(_) => ComponentKind::Gelu,
            Job::DataMove(_) | Job::StreamLoad { .. } => ComponentKind::DataMove,
            Job::PreProcess { .. } => ComponentKind::PreProcess,
        }
    }

    /// The quantity the timing model charges for: MACs, elements processed,
    /// elements moved, or tokens.
    pub fn op_count(&self) -> u64 {
        match self {
            Job::MatMul(j) => j.macs(),
            Job::SoftMax(j) => j.elements(),
            Job::LayerNorm(j) => j.elements(),
            Job::Gelu(j) => j.count as u64,
            Job::DataMove(p) => p.total_elements() as u64,
            Job::StreamLoad { count, .. } => *count as u64,
            Job::PreProcess { tokens, .. } => *tokens as u64,
        }
    }

    /// Lengths of the consecutive stream tensors this job consumes.
    pub fn stream_takes(&self) -> Vec<usize> {
        match self {
            Job::MatMul(j) if j.weights == WeightSource::Stream => {
                let mut takes = vec![j.k * j.n];
                if j.bias {
                    takes.push(j.n);
                }
                takes
            }
            Job::LayerNorm(j) => vec![j.dim, j.dim],
            Job::StreamLoad { count, .. } => vec![*count],
            _ => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.stream_takes().iter().sum()
    }

    /// Every address span the job reads or writes.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        match self {
            Job::MatMul(j) => {
                let mut s = vec![j.input.span(j.m, j.k), j.output.span(j.m, j.n)];
                if let WeightSource::Memory(v) = j.weights {
                    s.push(v.span(j.k, j.n));
                }
                s
            }
            Job::SoftMax(j) => {
                let n = j.rows * j.len;
                let mut s = vec![(j.src, j.src + n), (j.dst, j.dst + n)];
                if let Some(b) = j.bias {
                    let side = 2 * b.window - 1;
                    s.push((b.table, b.table + side * side * b.heads));
                }
                s
            }
            Job::LayerNorm(j) => {
                let n = j.tokens * j.dim;
                vec![(j.src, j.src + n), (j.dst, j.dst + n)]
            }
            Job::Gelu(j) => vec![(j.src, j.src + j.count), (j.dst, j.dst + j.count)],
            Job::DataMove(p) | Job::PreProcess { plan: p, .. } => {
                p.selections.iter().flat_map(|s| [s.src_span(), s.dst_span()]).collect()
            }
            Job::StreamLoad { dst, count } => vec![(*dst, dst + count)],
        }
    }
}

struct Slots<'a> {
    op: ComponentOp,
    values: Vec<u64>,
    names: &'a [&'static str],
}

impl Slots<'_> {
    fn read(inv: &ComponentInvocation, regs: &RegisterFile) -> Result<Self, ProgramError> {
        let names = inv.op.slots();
        if inv.bindings.len() != names.len() {
            return Err(ProgramError::Bindings {
                op: inv.op,
                expected: names.len(),
                actual: inv.bindings.len(),
            });
        }
        let values = inv.bindings.iter().map(|&r| regs.get(r)).collect::<Result<_, _>>()?;
        Ok(Slots {
            op: inv.op,
            values,
            names,
        })
    }

    fn raw(&self, i: usize) -> usize {
        self.values[i] as usize
    }

    /// Slot value that must be at least one.
    fn count(&self, i: usize) -> Result<usize, ProgramError> {
        if self.values[i] == 0 {
            return Err(self.bad(i, "must be non-zero"));
        }
        Ok(self.raw(i))
    }

    fn flag(&self, i: usize) -> Result<bool, ProgramError> {
        match self.values[i] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.bad(i, "must be 0 or 1")),
        }
    }

    fn bad(&self, i: usize, reason: &'static str) -> ProgramError {
        ProgramError::BadValue {
            op: self.op,
            slot: self.names[i],
            value: self.values[i],
            reason,
        }
    }

    fn dims(&self, c: usize, h: usize, w: usize) -> Result<Dims3, ProgramError> {
        Ok(Dims3 {
            c: self.count(c)?,
            h: self.count(h)?,
            w: self.count(w)?,
        })
    }

    fn head_dim(&self, dim: usize, heads: usize) -> Result<usize, ProgramError> {
        let (d, h) = (self.count(dim)?, self.count(heads)?);
        if d % h != 0 {
            return Err(self.bad(heads, "must divide dim"));
        }
        Ok(d / h)
    }
}

fn expand_component(inv: &ComponentInvocation, regs: &RegisterFile, jobs: &mut Vec<Job>) -> Result<(), ProgramError> {
    use ComponentOp::*;
    let s = Slots::read(inv, regs)?;
    match inv.op {
        PatchGather => {
            let dims = s.dims(0, 1, 2)?;
            let patch = s.count(3)?;
            let plan = patch_gather_plan(dims, patch)?.rebased(s.raw(4), s.raw(5));
            jobs.push(Job::PreProcess {
                plan,
                tokens: (dims.h / patch) * (dims.w / patch),
            });
        }
        Linear => {
            let tokens = s.count(0)?;
            jobs.push(Job::MatMul(MatmulJob {
                m: tokens,
                k: s.count(1)?,
                n: s.count(2)?,
                input: MatView::tokens(s.raw(5), tokens),
                weights: WeightSource::Stream,
                bias: s.flag(3)?,
                output: MatView::tokens(s.raw(6), tokens),
                accumulate: s.flag(4)?,
            }));
        }
        MeanPool => {
            let tokens = s.count(0)?;
            jobs.push(Job::MatMul(MatmulJob {
                m: s.count(1)?,
                k: tokens,
                n: 1,
                input: MatView::row_major(s.raw(2), tokens),
                weights: WeightSource::Uniform,
                bias: false,
                output: MatView::new(s.raw(3), 1, 1),
                accumulate: false,
            }));
        }
        WindowScores => {
            let (windows, dim, heads) = (s.count(0)?, s.count(1)?, s.count(2)?);
            let hd = s.head_dim(1, 2)?;
            let t = s.count(3)?.pow(2);
            let (qkv, scores) = (s.raw(4), s.raw(5));
            for w in 0..windows {
                let block = qkv + w * 3 * dim * t;
                for h in 0..heads {
                    jobs.push(Job::MatMul(MatmulJob {
                        m: t,
                        k: hd,
                        n: t,
                        input: MatView::tokens(block + h * hd * t, t),
                        weights: WeightSource::Memory(MatView::row_major(block + (dim + h * hd) * t, t)),
                        bias: false,
                        output: MatView::row_major(scores + (w * heads + h) * t * t, t),
                        accumulate: false,
                    }));
                }
            }
        }
        WindowSoftmax => {
            let (windows, heads) = (s.count(0)?, s.count(2)?);
            let hd = s.head_dim(1, 2)?;
            let window = s.count(3)?;
            let t = window * window;
            let use_bias = s.flag(7)?;
            for w in 0..windows {
                for h in 0..heads {
                    let off = (w * heads + h) * t * t;
                    jobs.push(Job::SoftMax(SoftmaxJob {
                        src: s.raw(4) + off,
                        dst: s.raw(5) + off,
                        rows: t,
                        len: t,
                        scale: 1.0 / (hd as f64).sqrt(),
                        bias: use_bias.then_some(RelBias {
                            table: s.raw(6),
                            heads,
                            head: h,
                            window,
                        }),
                    }));
                }
            }
        }
        WindowContext => {
            let (windows, dim, heads) = (s.count(0)?, s.count(1)?, s.count(2)?);
            let hd = s.head_dim(1, 2)?;
            let t = s.count(3)?.pow(2);
            let (probs, qkv, dst) = (s.raw(4), s.raw(5), s.raw(6));
            for w in 0..windows {
                for h in 0..heads {
                    let v = qkv + w * 3 * dim * t + (2 * dim + h * hd) * t;
                    jobs.push(Job::MatMul(MatmulJob {
                        m: t,
                        k: t,
                        n: hd,
                        input: MatView::row_major(probs + (w * heads + h) * t * t, t),
                        weights: WeightSource::Memory(MatView::new(v, 1, t)),
                        bias: false,
                        output: MatView::tokens(dst + w * dim * t + h * hd * t, t),
                        accumulate: false,
                    }));
                }
            }
        }
        LayerNorm => jobs.push(Job::LayerNorm(LayerNormJob {
            tokens: s.count(0)?,
            dim: s.count(1)?,
            src: s.raw(2),
            dst: s.raw(3),
            eps: LAYERNORM_EPS,
        })),
        Gelu => jobs.push(Job::Gelu(GeluJob {
            count: s.count(0)?,
            src: s.raw(1),
            dst: s.raw(2),
        })),
        WindowPartition | WindowReverse | CyclicShift | CyclicUnshift => {
            let dims = s.dims(0, 1, 2)?;
            let p = s.count(3)?;
            let plan = match inv.op {
                WindowPartition => window_partition_plan(dims, p)?,
                WindowReverse => window_reverse_plan(dims, p)?,
                CyclicShift => cyclic_shift_plan(dims, p)?,
                _ => cyclic_unshift_plan(dims, p)?,
            };
            jobs.push(Job::DataMove(plan.rebased(s.raw(4), s.raw(5))));
        }
        PatchMerge => {
            let plan = patch_merge_plan(s.dims(0, 1, 2)?)?;
            jobs.push(Job::DataMove(plan.rebased(s.raw(3), s.raw(4))));
        }
        StreamLoad => {
            if s.raw(0) > 0 {
                jobs.push(Job::StreamLoad {
                    dst: s.raw(1),
                    count: s.raw(0),
                });
            }
        }
    }
    Ok(())
}

/// Turn a bundle into concrete jobs using the current register values.
/// Pure in `(entry, regs, memory)`.
pub fn expand(
    entry: &BundleTableEntry,
    regs: &RegisterFile,
    memory: &[MemoryRegion],
) -> Result<Vec<Job>, ProgramError> {
    let mut jobs = Vec::new();
    for inv in &entry.components {
        expand_component(inv, regs, &mut jobs)?;
    }
    for job in &jobs {
        for span in job.spans() {
            if !memory.iter().any(|r| r.contains(span)) {
                return Err(ProgramError::Address(span));
            }
        }
    }
    Ok(jobs)
}
