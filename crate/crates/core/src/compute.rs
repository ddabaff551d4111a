//! Compute units: the stream matrix multiply and the nonlinear vector modules.
//!
//! Kernels operate directly on the flat simulator memory. Float kernels work
//! on `f64` values; fix_8 kernels work on raw `i8` values and take the
//! fraction bits of each operand from the caller. Nonlinear functions run in
//! `f64` between a dequantize and a requantize step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamove::{patch_gather_plan, DataMoveError};
use crate::tensor::{saturate_i8, shift_round_even, Dims3, Fix8, QuantSpec, Tensor3D, TensorData, TensorError};

/// Coefficient of the tanh fit, `sqrt(2 / pi)`.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044715;
pub const LAYERNORM_EPS: f64 = 1e-5;

// rows of work below which the matmul stays on the calling thread
const PAR_THRESHOLD_MACS: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("{0} needs at least one element")]
    Empty(&'static str),
    #[error("length mismatch in {what}: expected {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("bias requires stream weights")]
    BiasWithoutStream,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    DataMove(#[from] DataMoveError),
    #[error("head count {heads} does not divide dimension {dim}")]
    Heads { heads: usize, dim: usize },
}

/// Counters the hardware would expose in its diagnostics registers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub saturations: u64,
    pub divisions: u64,
    pub accumulator_overflows: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: Diagnostics) {
        self.saturations += other.saturations;
        self.divisions += other.divisions;
        self.accumulator_overflows += other.accumulator_overflows;
    }
}

/// A strided 2-D view into flat memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatView {
    pub base: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn new(base: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            base,
            row_stride,
            col_stride,
        }
    }

    /// Channel-first activations: row `m` is a token, column `k` a channel.
    pub fn tokens(base: usize, tokens: usize) -> Self {
        Self::new(base, 1, tokens)
    }

    pub fn row_major(base: usize, cols: usize) -> Self {
        Self::new(base, cols, 1)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> usize {
        self.base + r * self.row_stride + c * self.col_stride
    }

    /// Half-open address span of a `rows x cols` view.
    pub fn span(&self, rows: usize, cols: usize) -> (usize, usize) {
        (self.base, self.at(rows - 1, cols - 1) + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightSource {
    /// `K x N` weights read from the parameter stream, column by column.
    Stream,
    /// `K x N` operand already in memory (attention products).
    Memory(MatView),
    /// Every weight equals `1 / K` (mean pooling).
    Uniform,
}

/// `out[m, n] = sum_k in[m, k] * w[k, n] (+ bias[n]) (+ out[m, n])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatmulJob {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub input: MatView,
    pub weights: WeightSource,
    pub bias: bool,
    pub output: MatView,
    /// Add the product onto the existing output (residual connection).
    pub accumulate: bool,
}

impl MatmulJob {
    pub fn macs(&self) -> u64 {
        (self.m * self.k * self.n) as u64
    }

    pub fn parameter_count(&self) -> usize {
        match self.weights {
            WeightSource::Stream => self.k * self.n + if self.bias { self.n } else { 0 },
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), ComputeError> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(ComputeError::Empty("matmul"));
        }
        if self.bias && self.weights != WeightSource::Stream {
            return Err(ComputeError::BiasWithoutStream);
        }
        Ok(())
    }
}

/// Fraction bits of every fix_8 operand of a matmul.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulFracs {
    pub input: u8,
    pub weight: u8,
    pub bias: u8,
    pub output: u8,
}

impl MatmulFracs {
    pub fn product(&self) -> i32 {
        self.input as i32 + self.weight as i32
    }

    /// Right shift taking the 32-bit accumulator to the output format.
    pub fn requant_shift(&self) -> i32 {
        self.product() - self.output as i32
    }
}

/// Raw value and fraction bits used for uniform `1 / K` weights.
pub fn uniform_weight(k: usize) -> (i8, u8) {
    let frac = if k >= 2 { 7 } else { 6 };
    let q = QuantSpec::new(frac).expect("valid frac");
    (q.quantize(1.0 / k as f64).expect("finite").value.0, frac)
}

fn check_stream(job: &MatmulJob, weights: Option<usize>, bias: Option<usize>) -> Result<(), ComputeError> {
    job.validate()?;
    if job.weights == WeightSource::Stream {
        let got = weights.unwrap_or(0);
        if got != job.k * job.n {
            return Err(ComputeError::Length {
                what: "matmul weights",
                expected: job.k * job.n,
                actual: got,
            });
        }
    }
    if job.bias && bias.unwrap_or(0) != job.n {
        return Err(ComputeError::Length {
            what: "matmul bias",
            expected: job.n,
            actual: bias.unwrap_or(0),
        });
    }
    Ok(())
}

/// Float stream matmul. Stream weights are column-major: `w[n * K + k]`.
pub fn matmul_f64(
    job: &MatmulJob,
    mem: &mut [f64],
    weights: Option<&[f64]>,
    bias: Option<&[f64]>,
) -> Result<(), ComputeError> {
    check_stream(job, weights.map(<[f64]>::len), bias.map(<[f64]>::len))?;
    let uniform = 1.0 / job.k as f64;
    let row = |m: usize, mem: &[f64]| -> Vec<f64> {
        (0..job.n)
            .map(|n| {
                let mut acc = 0.0;
                for k in 0..job.k {
                    let w = match job.weights {
                        WeightSource::Stream => weights.unwrap()[n * job.k + k],
                        WeightSource::Memory(v) => mem[v.at(k, n)],
                        WeightSource::Uniform => uniform,
                    };
                    acc += mem[job.input.at(m, k)] * w;
                }
                if let Some(b) = bias {
                    acc += b[n];
                }
                acc
            })
            .collect()
    };
    let rows: Vec<Vec<f64>> = if (job.macs() as usize) < PAR_THRESHOLD_MACS {
        (0..job.m).map(|m| row(m, mem)).collect()
    } else {
        let shared: &[f64] = mem;
        (0..job.m).into_par_iter().map(|m| row(m, shared)).collect()
    };
    for (m, values) in rows.into_iter().enumerate() {
        for (n, v) in values.into_iter().enumerate() {
            let at = job.output.at(m, n);
            mem[at] = if job.accumulate { mem[at] + v } else { v };
        }
    }
    Ok(())
}

/// Fix8 stream matmul: 16-bit products summed in a saturating 32-bit
/// accumulator (k ascending), one power-of-two requantization at the end.
pub fn matmul_fix8(
    job: &MatmulJob,
    mem: &mut [i8],
    fracs: MatmulFracs,
    weights: Option<&[i8]>,
    bias: Option<&[i8]>,
) -> Result<Diagnostics, ComputeError> {
    check_stream(job, weights.map(<[i8]>::len), bias.map(<[i8]>::len))?;
    let (uniform_raw, _) = uniform_weight(job.k);
    let bias_shift = fracs.product() - fracs.bias as i32;
    let out_shift = fracs.product() - fracs.output as i32;
    let requant = fracs.requant_shift();
    let row = |m: usize, mem: &[i8]| -> Vec<(i8, Diagnostics)> {
        (0..job.n)
            .map(|n| {
                let mut diag = Diagnostics::default();
                let mut acc: i32 = 0;
                let mut add = |v: i64, diag: &mut Diagnostics| {
                    let sum = acc as i64 + v;
                    acc = if sum > i32::MAX as i64 {
                        diag.accumulator_overflows += 1;
                        i32::MAX
                    } else if sum < i32::MIN as i64 {
                        diag.accumulator_overflows += 1;
                        i32::MIN
                    } else {
                        sum as i32
                    };
                };
                for k in 0..job.k {
                    let w = match job.weights {
                        WeightSource::Stream => weights.unwrap()[n * job.k + k],
                        WeightSource::Memory(v) => mem[v.at(k, n)],
                        WeightSource::Uniform => uniform_raw,
                    };
                    add(mem[job.input.at(m, k)] as i64 * w as i64, &mut diag);
                }
                if let Some(b) = bias {
                    add(shift_round_even(b[n] as i64, -bias_shift), &mut diag);
                }
                if job.accumulate {
                    add(shift_round_even(mem[job.output.at(m, n)] as i64, -out_shift), &mut diag);
                }
                let (raw, sat) = saturate_i8(shift_round_even(acc as i64, requant));
                diag.saturations += sat as u64;
                (raw, diag)
            })
            .collect()
    };
    let rows: Vec<Vec<(i8, Diagnostics)>> = if (job.macs() as usize) < PAR_THRESHOLD_MACS {
        (0..job.m).map(|m| row(m, mem)).collect()
    } else {
        let shared: &[i8] = mem;
        (0..job.m).into_par_iter().map(|m| row(m, shared)).collect()
    };
    let mut diag = Diagnostics::default();
    for (m, values) in rows.into_iter().enumerate() {
        for (n, (raw, d)) in values.into_iter().enumerate() {
            mem[job.output.at(m, n)] = raw;
            diag.merge(d);
        }
    }
    Ok(diag)
}

/// Max-subtracted softmax.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>, ComputeError> {
    if row.is_empty() {
        return Err(ComputeError::Empty("softmax"));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let inv = 1.0 / exps.iter().sum::<f64>();
    Ok(exps.into_iter().map(|e| e * inv).collect())
}

/// LayerNorm with the variance taken as `E[x^2] - E[x]^2` in a single pass.
pub fn layernorm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>, ComputeError> {
    let d = row.len();
    if d == 0 {
        return Err(ComputeError::Empty("layernorm"));
    }
    for (what, v) in [("layernorm gamma", gamma), ("layernorm beta", beta)] {
        if v.len() != d {
            return Err(ComputeError::Length {
                what,
                expected: d,
                actual: v.len(),
            });
        }
    }
    let (mean, var) = one_pass_moments(row);
    let denom = (var + eps).sqrt();
    if denom == 0.0 {
        return Ok(beta.to_vec());
    }
    let inv = 1.0 / denom;
    Ok(row
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&x, (&g, &b))| g * (x - mean) * inv + b)
        .collect())
}

/// Mean and variance from one pass over the data; variance clamped at zero.
pub fn one_pass_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let (sum, sq) = row.iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
    let mean = sum / n;
    (mean, (sq / n - mean * mean).max(0.0))
}

/// Tanh fit of Gelu.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Index into a `(2w-1)^2` relative position table for tokens `i`, `j` of a
/// `window x window` window.
pub fn relative_position_index(i: usize, j: usize, window: usize) -> usize {
    let (ih, iw) = (i / window, i % window);
    let (jh, jw) = (j / window, j % window);
    (ih + window - 1 - jh) * (2 * window - 1) + (iw + window - 1 - jw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelBias {
    /// Address of the `((2w-1)^2, heads)` table.
    pub table: usize,
    pub heads: usize,
    pub head: usize,
    pub window: usize,
}

/// Row softmax of `scale * x (+ relative bias)` over a `rows x len` block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxJob {
    pub src: usize,
    pub dst: usize,
    pub rows: usize,
    pub len: usize,
    pub scale: f64,
    pub bias: Option<RelBias>,
}

impl SoftmaxJob {
    pub fn elements(&self) -> u64 {
        (self.rows * self.len) as u64
    }

    fn logits(&self, r: usize, read: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.len)
            .map(|j| {
                let mut x = self.scale * read(self.src + r * self.len + j);
                if let Some(b) = self.bias {
                    x += read(b.table + relative_position_index(r, j, b.window) * b.heads + b.head);
                }
                x
            })
            .collect()
    }
}

pub fn softmax_job_f64(job: &SoftmaxJob, mem: &mut [f64]) -> Result<Diagnostics, ComputeError> {
    let mut diag = Diagnostics::default();
    for r in 0..job.rows {
        let out = softmax(&job.logits(r, |a| mem[a]))?;
        diag.divisions += 1;
        mem[job.dst + r * job.len..][..job.len].copy_from_slice(&out);
    }
    Ok(diag)
}

/// Fix8 softmax. `frac_at` gives the fraction bits of the region holding an address.
pub fn softmax_job_fix8(
    job: &SoftmaxJob,
    mem: &mut [i8],
    frac_at: impl Fn(usize) -> u8,
) -> Result<Diagnostics, ComputeError> {
    let mut diag = Diagnostics::default();
    let out_q = QuantSpec::new(frac_at(job.dst))?;
    for r in 0..job.rows {
        let out = softmax(&job.logits(r, |a| dequant_at(mem, a, &frac_at)))?;
        diag.divisions += 1;
        for (j, v) in out.into_iter().enumerate() {
            mem[job.dst + r * job.len + j] = requant(v, out_q, &mut diag)?;
        }
    }
    Ok(diag)
}

fn dequant_at(mem: &[i8], addr: usize, frac_at: &impl Fn(usize) -> u8) -> f64 {
    mem[addr] as f64 * (-(frac_at(addr) as f64)).exp2()
}

fn requant(v: f64, q: QuantSpec, diag: &mut Diagnostics) -> Result<i8, ComputeError> {
    let r = q.quantize(v)?;
    diag.saturations += r.saturated as u64;
    Ok(r.value.0)
}

/// LayerNorm over each token of a channel-first `(dim, tokens)` block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNormJob {
    pub tokens: usize,
    pub dim: usize,
    pub src: usize,
    pub dst: usize,
    pub eps: f64,
}

impl LayerNormJob {
    pub fn elements(&self) -> u64 {
        (self.tokens * self.dim) as u64
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.dim
    }

    fn token(&self, t: usize, read: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.dim).map(|c| read(self.src + c * self.tokens + t)).collect()
    }
}

pub fn layernorm_job_f64(
    job: &LayerNormJob,
    mem: &mut [f64],
    gamma: &[f64],
    beta: &[f64],
) -> Result<Diagnostics, ComputeError> {
    let mut diag = Diagnostics::default();
    for t in 0..job.tokens {
        let out = layernorm(&job.token(t, |a| mem[a]), gamma, beta, job.eps)?;
        diag.divisions += 1;
        for (c, v) in out.into_iter().enumerate() {
            mem[job.dst + c * job.tokens + t] = v;
        }
    }
    Ok(diag)
}

pub fn layernorm_job_fix8(
    job: &LayerNormJob,
    mem: &mut [i8],
    frac_at: impl Fn(usize) -> u8,
    gamma: (&[i8], QuantSpec),
    beta: (&[i8], QuantSpec),
) -> Result<Diagnostics, ComputeError> {
    let mut diag = Diagnostics::default();
    let g: Vec<f64> = gamma.0.iter().map(|&r| gamma.1.dequantize(Fix8(r))).collect();
    let b: Vec<f64> = beta.0.iter().map(|&r| beta.1.dequantize(Fix8(r))).collect();
    let out_q = QuantSpec::new(frac_at(job.dst))?;
    for t in 0..job.tokens {
        let out = layernorm(&job.token(t, |a| dequant_at(mem, a, &frac_at)), &g, &b, job.eps)?;
        diag.divisions += 1;
        for (c, v) in out.into_iter().enumerate() {
            mem[job.dst + c * job.tokens + t] = requant(v, out_q, &mut diag)?;
        }
    }
    Ok(diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeluJob {
    pub count: usize,
    pub src: usize,
    pub dst: usize,
}

pub fn gelu_job_f64(job: &GeluJob, mem: &mut [f64]) {
    for i in 0..job.count {
        mem[job.dst + i] = gelu(mem[job.src + i]);
    }
}

pub fn gelu_job_fix8(
    job: &GeluJob,
    mem: &mut [i8],
    frac_at: impl Fn(usize) -> u8,
) -> Result<Diagnostics, ComputeError> {
    let mut diag = Diagnostics::default();
    let in_q = QuantSpec::new(frac_at(job.src))?;
    let out_q = QuantSpec::new(frac_at(job.dst))?;
    for i in 0..job.count {
        let x = in_q.dequantize(Fix8(mem[job.src + i]));
        mem[job.dst + i] = requant(gelu(x), out_q, &mut diag)?;
    }
    Ok(diag)
}

/// Split an image into `patch x patch` patches, one token per patch with
/// `C * patch * patch` raw features, channel-first.
pub fn preprocess_patches(image: &Tensor3D, patch: usize) -> Result<Tensor3D, ComputeError> {
    let d = image.dims();
    let plan = patch_gather_plan(d, patch)?;
    let out_dims = Dims3::new(d.c * patch * patch, d.h / patch, d.w / patch)?;
    let data = match image.data() {
        TensorData::Float(v) => TensorData::Float(plan.apply(v, d.len())?),
        TensorData::Fix8 { raw, quant } => TensorData::Fix8 {
            raw: plan.apply(raw, d.len())?,
            quant: *quant,
        },
    };
    Ok(Tensor3D::new(out_dims, data)?)
}

/// Weights of one windowed multi-head attention layer. Matrices are
/// `K x N` row-major (input features by output features).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub qkv_weight: Vec<f64>,
    pub qkv_bias: Vec<f64>,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    /// `((2w-1)^2, heads)` table, if relative position bias is enabled.
    pub rel_bias: Option<Vec<f64>>,
}

/// Reorder a row-major `K x N` matrix into stream order (column by column).
pub fn to_stream_order(w: &[f64], k: usize, n: usize) -> Vec<f64> {
    (0..n).flat_map(|j| (0..k).map(move |i| w[i * n + j])).collect()
}

/// Float multi-head attention over one window. `tokens` is channel-first
/// `(dim, window * window)`; the result has the same layout.
pub fn attention_block(
    tokens: &[f64],
    dim: usize,
    window: usize,
    weights: &AttentionWeights,
) -> Result<Vec<f64>, ComputeError> {
    let t = window * window;
    let heads = weights.heads;
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(ComputeError::Heads { heads, dim });
    }
    if tokens.len() != dim * t {
        return Err(ComputeError::Length {
            what: "window tokens",
            expected: dim * t,
            actual: tokens.len(),
        });
    }
    let hd = dim / heads;
    // scratch layout: x | qkv | scores | probs | attn | rel table | out
    let x0 = 0;
    let qkv0 = x0 + dim * t;
    let s0 = qkv0 + 3 * dim * t;
    let p0 = s0 + t * t;
    let a0 = p0 + t * t;
    let table0 = a0 + dim * t;
    let table_len = weights.rel_bias.as_ref().map_or(0, Vec::len);
    let out0 = table0 + table_len;
    let mut mem = vec![0.0; out0 + dim * t];
    mem[..dim * t].copy_from_slice(tokens);
    if let Some(tbl) = &weights.rel_bias {
        mem[table0..out0].copy_from_slice(tbl);
    }

    let qkv = MatmulJob {
        m: t,
        k: dim,
        n: 3 * dim,
        input: MatView::tokens(x0, t),
        weights: WeightSource::Stream,
        bias: true,
        output: MatView::tokens(qkv0, t),
        accumulate: false,
    };
    matmul_f64(
        &qkv,
        &mut mem,
        Some(&to_stream_order(&weights.qkv_weight, dim, 3 * dim)),
        Some(&weights.qkv_bias),
    )?;
    for h in 0..heads {
        let q = qkv0 + h * hd * t;
        let k = qkv0 + (dim + h * hd) * t;
        let v = qkv0 + (2 * dim + h * hd) * t;
        let scores = MatmulJob {
            m: t,
            k: hd,
            n: t,
            input: MatView::tokens(q, t),
            weights: WeightSource::Memory(MatView::row_major(k, t)),
            bias: false,
            output: MatView::row_major(s0, t),
            accumulate: false,
        };
        matmul_f64(&scores, &mut mem, None, None)?;
        let sm = SoftmaxJob {
            src: s0,
            dst: p0,
            rows: t,
            len: t,
            scale: 1.0 / (hd as f64).sqrt(),
            bias: weights.rel_bias.as_ref().map(|_| RelBias {
                table: table0,
                heads,
                head: h,
                window,
            }),
        };
        softmax_job_f64(&sm, &mut mem)?;
        let av = MatmulJob {
            m: t,
            k: t,
            n: hd,
            input: MatView::row_major(p0, t),
            weights: WeightSource::Memory(MatView::new(v, 1, t)),
            bias: false,
            output: MatView::tokens(a0 + h * hd * t, t),
            accumulate: false,
        };
        matmul_f64(&av, &mut mem, None, None)?;
    }
    let proj = MatmulJob {
        m: t,
        k: dim,
        n: dim,
        input: MatView::tokens(a0, t),
        weights: WeightSource::Stream,
        bias: true,
        output: MatView::tokens(out0, t),
        accumulate: false,
    };
    matmul_f64(
        &proj,
        &mut mem,
        Some(&to_stream_order(&weights.proj_weight, dim, dim)),
        Some(&weights.proj_bias),
    )?;
    Ok(mem.split_off(out0))
}
