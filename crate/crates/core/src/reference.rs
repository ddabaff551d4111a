//! Monolithic dense forward pass used as the correctness oracle.
//!
//! Shares no code with the lowering path: activations are token-major
//! `Vec<Vec<f64>>`, windows are indexed directly and every operator is a
//! plain loop. Only the model config and weight set are common inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compiler::{manifest_for_config, CompileError, ModelConfig};
use crate::runtime::WeightSet;
use crate::tensor::{Dims3, Tensor3D, TensorRole};

type Tokens = Vec<Vec<f64>>;

/// Random weights for `config`, deterministic in `seed`. Matrices are
/// uniform in `±1/sqrt(K)` so activations keep unit scale; every value lies
/// inside `[-1, 1)`.
pub fn synthesize_weights(config: &ModelConfig, seed: u64) -> Result<WeightSet, CompileError> {
    let manifest = manifest_for_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let n = e.len();
            let values: Vec<f64> = match e.role {
                TensorRole::Linear => {
                    let a = 1.0 / (e.h as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                TensorRole::NormWeight => (0..n).map(|_| rng.gen_range(0.6..0.95)).collect(),
                TensorRole::RelPosBias => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                _ => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            };
            // float tensors round-trip through f32 on disk; keep them exact
            let values = values.into_iter().map(|v| v as f32 as f64).collect();
            let t = Tensor3D::from_f64(Dims3::new(e.c, e.h, e.w).expect("manifest dims"), values).expect("sized");
            (e, t)
        })
        .collect();
    Ok(WeightSet::new(entries))
}

/// Uniform random image in `[-1, 1]`.
pub fn random_input(config: &ModelConfig, seed: u64) -> Tensor3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims3::new(config.in_channels, config.image_size, config.image_size).expect("validated config");
    let values = (0..dims.len())
        .map(|_| rng.gen_range(-1.0..=1.0f64) as f32 as f64)
        .collect();
    Tensor3D::from_f64(dims, values).expect("sized")
}

struct Params<'a> {
    weights: &'a WeightSet,
}

impl Params<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.weights.tensors[name].to_f64()
    }

    /// `K x N` matrix as rows.
    fn mat(&self, name: &str) -> Vec<Vec<f64>> {
        let t = &self.weights.tensors[name];
        let (k, n) = (t.dims().h, t.dims().w);
        let v = t.to_f64();
        (0..k).map(|i| v[i * n..(i + 1) * n].to_vec()).collect()
    }
}

fn linear(x: &Tokens, w: &[Vec<f64>], b: Option<&[f64]>) -> Tokens {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let s: f64 = row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum();
                    s + b.map_or(0.0, |b| b[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Tokens, g: &[f64], b: &[f64]) -> Tokens {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add(x: &mut Tokens, y: &Tokens) {
    for (a, b) in x.iter_mut().zip(y) {
        for (p, q) in a.iter_mut().zip(b) {
            *p += q;
        }
    }
}

/// Move token `(i, j)` to `((i + di) % side, (j + dj) % side)`.
fn roll(x: &Tokens, side: usize, d: usize) -> Tokens {
    let mut out = x.clone();
    for i in 0..side {
        for j in 0..side {
            out[((i + d) % side) * side + (j + d) % side] = x[i * side + j].clone();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn window_attention(
    x: &Tokens,
    side: usize,
    win: usize,
    heads: usize,
    qkv_w: &[Vec<f64>],
    qkv_b: &[f64],
    table: Option<&[f64]>,
    proj_w: &[Vec<f64>],
    proj_b: &[f64],
) -> Tokens {
    let c = x[0].len();
    let hd = c / heads;
    let qkv = linear(x, qkv_w, Some(qkv_b));
    let mut out = vec![vec![0.0; c]; x.len()];
    let scale = 1.0 / (hd as f64).sqrt();
    let n = side / win;
    for wr in 0..n {
        for wc in 0..n {
            let idx: Vec<(usize, usize, usize)> = (0..win * win)
                .map(|p| {
                    let (r, q) = (p / win, p % win);
                    ((wr * win + r) * side + wc * win + q, r, q)
                })
                .collect();
            for h in 0..heads {
                for &(ti, ri, qi) in &idx {
                    let logits: Vec<f64> = idx
                        .iter()
                        .map(|&(tj, rj, qj)| {
                            let dot: f64 = (0..hd).map(|d| qkv[ti][h * hd + d] * qkv[tj][c + h * hd + d]).sum();
                            let bias = table.map_or(0.0, |t| {
                                let rel = (ri + win - 1 - rj) * (2 * win - 1) + (qi + win - 1 - qj);
                                t[rel * heads + h]
                            });
                            dot * scale + bias
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..hd {
                        out[ti][h * hd + d] = idx
                            .iter()
                            .zip(&e)
                            .map(|(&(tj, _, _), p)| p / z * qkv[tj][2 * c + h * hd + d])
                            .sum();
                    }
                }
            }
        }
    }
    linear(&out, proj_w, Some(proj_b))
}

/// Logits of the dense model on `image`.
pub fn forward(config: &ModelConfig, weights: &WeightSet, image: &Tensor3D) -> Vec<f64> {
    let p = Params { weights };
    let (ps, img) = (config.patch_size, config.image_size);
    let mut side = img / ps;
    let pix = image.to_f64();
    let mut x: Tokens = (0..side * side)
        .map(|t| {
            let (i, j) = (t / side, t % side);
            let mut f = Vec::with_capacity(config.in_channels * ps * ps);
            for c in 0..config.in_channels {
                for kh in 0..ps {
                    for kw in 0..ps {
                        f.push(pix[(c * img + i * ps + kh) * img + j * ps + kw]);
                    }
                }
            }
            f
        })
        .collect();
    x = linear(
        &x,
        &p.mat("patch_embed.proj.weight"),
        Some(&p.vec("patch_embed.proj.bias")),
    );
    x = layer_norm(&x, &p.vec("patch_embed.norm.weight"), &p.vec("patch_embed.norm.bias"));

    let win = config.window_size;
    for s in 0..config.num_stages() {
        for b in 0..config.depths[s] {
            let pre = format!("layers.{s}.blocks.{b}");
            let shift = if b % 2 == 1 { config.shift_size } else { 0 };
            let mut h = layer_norm(
                &x,
                &p.vec(&format!("{pre}.norm1.weight")),
                &p.vec(&format!("{pre}.norm1.bias")),
            );
            if shift > 0 {
                h = roll(&h, side, side - shift);
            }
            let table = config
                .relative_position_bias
                .then(|| p.vec(&format!("{pre}.attn.relative_position_bias_table")));
            let mut y = window_attention(
                &h,
                side,
                win,
                config.heads[s],
                &p.mat(&format!("{pre}.attn.qkv.weight")),
                &p.vec(&format!("{pre}.attn.qkv.bias")),
                table.as_deref(),
                &p.mat(&format!("{pre}.attn.proj.weight")),
                &p.vec(&format!("{pre}.attn.proj.bias")),
            );
            if shift > 0 {
                y = roll(&y, side, shift);
            }
            add(&mut x, &y);

            let h = layer_norm(
                &x,
                &p.vec(&format!("{pre}.norm2.weight")),
                &p.vec(&format!("{pre}.norm2.bias")),
            );
            let mut h = linear(
                &h,
                &p.mat(&format!("{pre}.mlp.fc1.weight")),
                Some(&p.vec(&format!("{pre}.mlp.fc1.bias"))),
            );
            h.iter_mut().flatten().for_each(|v| *v = gelu(*v));
            let y = linear(
                &h,
                &p.mat(&format!("{pre}.mlp.fc2.weight")),
                Some(&p.vec(&format!("{pre}.mlp.fc2.bias"))),
            );
            add(&mut x, &y);
        }
        if s + 1 < config.num_stages() {
            let half = side / 2;
            let merged: Tokens = (0..half * half)
                .map(|t| {
                    let (i, j) = (t / half, t % half);
                    [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .flat_map(|&(di, dj)| x[(2 * i + di) * side + 2 * j + dj].iter().copied())
                        .collect()
                })
                .collect();
            let pre = format!("layers.{s}.downsample");
            let m = layer_norm(
                &merged,
                &p.vec(&format!("{pre}.norm.weight")),
                &p.vec(&format!("{pre}.norm.bias")),
            );
            x = linear(&m, &p.mat(&format!("{pre}.reduction.weight")), None);
            side = half;
        }
    }
    if config.final_norm {
        x = layer_norm(&x, &p.vec("norm.weight"), &p.vec("norm.bias"));
    }
    let c = x[0].len();
    let pooled: Vec<f64> = (0..c)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64)
        .collect();
    linear(&vec![pooled], &p.mat("head.weight"), Some(&p.vec("head.bias"))).remove(0)
}
