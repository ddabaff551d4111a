//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits nonzero if any check fails, except those listed in
//! `KNOWN_UNATTAINABLE`: those still print FAIL with the measured value.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistop::compiler::{lower, manifest_for_config, CompileOptions, ModelConfig};
use vistop::compute::{
    gelu, matmul_fix8, one_pass_moments, softmax, softmax_job_fix8, MatView, MatmulFracs, MatmulJob, SoftmaxJob,
    WeightSource,
};
use vistop::datamove::{select_cube, CubeSelectParams};
use vistop::isa::{
    self, BundleProgram, BundleRole, BundleTableEntry, ComponentInvocation, ComponentOp, Instruction, Job,
    MemoryRegion, StreamTensor, Visibility,
};
use vistop::reference::{forward, random_input, synthesize_weights};
use vistop::runtime::{
    count_ops, execute, parse_target, ExecOptions, ParamStream, TimingModel, TimingReport, MODULE_NAMES,
};
use vistop::verify::{max_rel_error, verify, TOP1_THRESHOLD};

const MEASURED: &str = include_str!("../../../data/measured_times.txt");

/// Checks that cannot pass as stated; see the notes printed with them.
const KNOWN_UNATTAINABLE: &[&str] = &["7: data-move percentage"];

struct Outcome {
    checks: Vec<(String, bool, String)>,
}

impl Outcome {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push((name.to_string(), ok, detail.into()));
    }
}

fn criterion_1() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let large = (rng.gen_range(1..=8), rng.gen_range(1..=32), rng.gen_range(1..=32));
        let small = (
            rng.gen_range(1..=large.0),
            rng.gen_range(1..=large.1),
            rng.gen_range(1..=large.2),
        );
        let off = (
            rng.gen_range(0..=large.0 - small.0),
            rng.gen_range(0..=large.1 - small.1),
            rng.gen_range(0..=large.2 - small.2),
        );
        let n_large = large.0 * large.1 * large.2;
        let src_off = rng.gen_range(0..16);
        let dst_off = src_off + n_large + rng.gen_range(0..16);
        let p = CubeSelectParams::new(large, small, off).with_offsets(src_off, dst_off);
        let mut mem: Vec<u32> = (0..dst_off + small.0 * small.1 * small.2 + 8)
            .map(|_| rng.gen())
            .collect();
        let mut want = mem.clone();
        for c in 0..small.0 {
            for h in 0..small.1 {
                for w in 0..small.2 {
                    let from = src_off + ((off.0 + c) * large.1 + off.1 + h) * large.2 + off.2 + w;
                    let to = dst_off + (c * small.1 + h) * small.2 + w;
                    want[to] = want[from];
                }
            }
        }
        select_cube(&mut mem, &p).expect("valid params");
        mismatches += (mem != want) as usize;
    }
    out.check(
        "1: select_cube == triple loop",
        mismatches == 0,
        format!("{mismatches}/1000 mismatches"),
    );
    out
}

fn swin_t() -> (ModelConfig, BundleProgram) {
    let c = ModelConfig::swin_t();
    let (p, _) = lower(&c, &manifest_for_config(&c).unwrap(), &CompileOptions::default()).unwrap();
    (c, p)
}

fn criterion_2(program: &BundleProgram) -> Outcome {
    let mut out = Outcome::new();
    let roles = program.exec_roles();
    let attention: Vec<BundleRole> = roles.iter().copied().filter(|r| r.is_attention()).collect();
    out.check(
        "2: attention bundles",
        attention.len() == 12,
        format!("{}", attention.len()),
    );

    // windows and alternation per stage, split at patch merges
    let mut stages: Vec<Vec<(BundleRole, usize)>> = vec![vec![]];
    isa::walk::<isa::ExecError>(program, |step, _| {
        let role = program.bundle(step.bundle).unwrap().role;
        if role == BundleRole::PatchMerge {
            stages.push(vec![]);
        } else if role.is_attention() {
            let windows = step
                .jobs
                .iter()
                .find_map(|j| match j {
                    Job::DataMove(plan) if plan.len() > 1 && !plan.is_identity() && role_partition(plan) => {
                        Some(plan.len())
                    }
                    _ => None,
                })
                .unwrap_or(1);
            stages.last_mut().unwrap().push((role, windows));
        }
        Ok(())
    })
    .unwrap();
    let depths: Vec<usize> = stages.iter().map(Vec::len).collect();
    out.check("2: depths", depths == [2, 2, 6, 2], format!("{depths:?}"));
    let windows: Vec<usize> = stages.iter().map(|s| s[0].1).collect();
    let uniform = stages.iter().all(|s| s.iter().all(|&(_, w)| w == s[0].1));
    out.check(
        "2: windows per stage",
        windows == [64, 16, 4, 1] && uniform,
        format!("{windows:?}"),
    );
    let alternating = stages.iter().all(|s| {
        s.iter().enumerate().all(|(i, &(r, _))| {
            r == if i % 2 == 0 {
                BundleRole::WindowAttention
            } else {
                BundleRole::ShiftedWindowAttention
            }
        })
    });
    out.check("2: W/SW alternation", alternating, "");
    let merges = roles.iter().filter(|&&r| r == BundleRole::PatchMerge).count();
    out.check("2: patch merges", merges == 3, format!("{merges}"));
    let diags = isa::validate(program);
    out.check("2: validate", diags.is_empty(), format!("{} diagnostics", diags.len()));
    out
}

/// Window partition plans move one whole window per selection; shifts and
/// merges use other selection shapes.
fn role_partition(plan: &vistop::datamove::ArrangePlan) -> bool {
    let first = plan.selections[0];
    first.sh == first.sw && first.sh < first.mh && plan.len() == (first.mh / first.sh) * (first.mw / first.sw)
}

fn criterion_3(program: &BundleProgram) -> Outcome {
    let mut out = Outcome::new();
    let manifest = manifest_for_config(&ModelConfig::swin_t()).unwrap();
    let total = manifest.total_elements();
    out.check(
        "3: stream == manifest",
        program.stream_len() == total,
        format!("{} vs {total}", program.stream_len()),
    );
    let rel = (total as f64 - 28.3e6).abs() / 28.3e6;
    out.check(
        "3: total within 1% of 28.3M",
        rel < 0.01,
        format!("{total} ({:.3}%)", rel * 100.0),
    );
    let names: Vec<&str> = program.stream.iter().map(|t| t.name.as_str()).collect();
    let unique: HashSet<&str> = names.iter().copied().collect();
    let all_present = manifest.tensors.iter().all(|e| unique.contains(e.name.as_str()));
    out.check(
        "3: each tensor once",
        unique.len() == names.len() && names.len() == manifest.tensors.len() && all_present,
        format!("{} streamed, {} in manifest", names.len(), manifest.tensors.len()),
    );
    out
}

fn random_toy(rng: &mut ChaCha8Rng) -> ModelConfig {
    loop {
        let stages = rng.gen_range(1..=2);
        let window = [2, 3, 4, 7][rng.gen_range(0..4)];
        let last_side = window * rng.gen_range(1..=2);
        let side = last_side << (stages - 1);
        let patch = [1, 2, 4][rng.gen_range(0..3)];
        if side * patch > 56 {
            continue;
        }
        let d0 = [8, 16, 32][rng.gen_range(0..3)];
        let dims: Vec<usize> = (0..stages).map(|s| d0 << s).collect();
        if *dims.last().unwrap() > 64 {
            continue;
        }
        let h0 = [1, 2, 4][rng.gen_range(0..3)];
        let c = ModelConfig {
            image_size: side * patch,
            in_channels: [1, 3][rng.gen_range(0..2)],
            patch_size: patch,
            window_size: window,
            shift_size: window / 2,
            depths: (0..stages).map(|_| rng.gen_range(1..=2)).collect(),
            heads: (0..stages).map(|s| h0 << s).collect(),
            dims,
            mlp_ratio: [2, 4][rng.gen_range(0..2)],
            num_classes: rng.gen_range(2..=12),
            relative_position_bias: rng.gen(),
            final_norm: rng.gen(),
        };
        if c.validate().is_ok() {
            return c;
        }
    }
}

fn criterion_4() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut failures = 0;
    let n = 24;
    for i in 0..n {
        let c = random_toy(&mut rng);
        let result = (|| -> Result<f64, String> {
            let (p, _) = lower(
                &c,
                &manifest_for_config(&c).map_err(|e| e.to_string())?,
                &CompileOptions::default(),
            )
            .map_err(|e| e.to_string())?;
            let w = synthesize_weights(&c, 100 + i).map_err(|e| e.to_string())?;
            let x = random_input(&c, 200 + i);
            let s = ParamStream::new(&p, &w).map_err(|e| e.to_string())?;
            let r = execute(&p, &s, &x, &ExecOptions::float(), &TimingModel::default()).map_err(|e| e.to_string())?;
            Ok(max_rel_error(&r.logits, &forward(&c, &w, &x)))
        })();
        match result {
            Ok(e) => {
                worst = worst.max(e);
                failures += (e >= 1e-6) as usize;
            }
            Err(e) => {
                failures += 1;
                eprintln!("config {c:?}: {e}");
            }
        }
    }
    out.check(
        "4: float == dense oracle",
        failures == 0,
        format!("{n} configs, max rel error {worst:.2e}, {failures} over 1e-6"),
    );
    out
}

fn criterion_5() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut violations, mut checked, mut saturated) = (0, 0, 0);
    let mut worst_lsb = 0.0f64;
    for _ in 0..200 {
        let (m, k, n) = (rng.gen_range(1..=6), rng.gen_range(1..=48), rng.gen_range(1..=6));
        // output format picked so a typical sum of k products fits
        let (fi, fw) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
        let headroom = (k as f64).sqrt().log2().ceil() as u8 + 6;
        let fracs = MatmulFracs {
            input: fi,
            weight: fw,
            bias: rng.gen_range(0..=7),
            output: (fi + fw).saturating_sub(headroom).min(7),
        };
        let bias = rng.gen_bool(0.5);
        let accumulate = rng.gen_bool(0.5);
        let (inp, outp) = (0, m * k);
        let job = MatmulJob {
            m,
            k,
            n,
            input: MatView::row_major(inp, k),
            weights: WeightSource::Stream,
            bias,
            output: MatView::row_major(outp, n),
            accumulate,
        };
        let mut mem: Vec<i8> = (0..m * k + m * n).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..k * n).map(|_| rng.gen()).collect();
        let b: Vec<i8> = (0..n).map(|_| rng.gen()).collect();
        let before = mem.clone();
        matmul_fix8(&job, &mut mem, fracs, Some(&w), bias.then_some(&b[..])).unwrap();

        let s = |f: u8| (-(f as f64)).exp2();
        let (sa, sw, sb, so) = (s(fracs.input), s(fracs.weight), s(fracs.bias), s(fracs.output));
        // analytic bound: half a product LSB per accumulated term plus half
        // an output LSB for the final rounding
        let bound = k as f64 * sa * sw / 2.0 + so / 2.0;
        for r in 0..m {
            for c in 0..n {
                let mut exact: f64 = (0..k)
                    .map(|i| before[inp + r * k + i] as f64 * sa * w[c * k + i] as f64 * sw)
                    .sum();
                if bias {
                    exact += b[c] as f64 * sb;
                }
                if accumulate {
                    exact += before[outp + r * n + c] as f64 * so;
                }
                let got = mem[outp + r * n + c] as f64 * so;
                if exact > 127.0 * so || exact < -128.0 * so {
                    saturated += 1;
                    continue;
                }
                checked += 1;
                let err = (got - exact).abs();
                worst_lsb = worst_lsb.max(err / so);
                violations += (err > bound) as usize;
            }
        }
    }
    out.check(
        "5: matmul rounding bound",
        violations == 0,
        format!("{checked} outputs, worst {worst_lsb:.3} output LSB, {saturated} saturated skipped"),
    );
    match verify(&ModelConfig::toy(), 50, 0) {
        Ok(r) => out.check(
            "5: fix8 top-1 agreement",
            r.top1_agreement >= TOP1_THRESHOLD,
            format!("{:.3} >= {TOP1_THRESHOLD} over {} trials", r.top1_agreement, r.trials),
        ),
        Err(e) => out.check("5: fix8 top-1 agreement", false, e.to_string()),
    }
    out
}

fn criterion_6() -> Outcome {
    let mut out = Outcome::new();
    let exact = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let gelu_err = (0..=16_000)
        .map(|i| -8.0 + i as f64 * 1e-3)
        .map(|x| (gelu(x) - exact(x)).abs())
        .fold(0.0, f64::max);
    out.check("6: gelu", gelu_err <= 3e-3, format!("max abs error {gelu_err:.2e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut sum_err, mut shift_breaks) = (0.0f64, 0);
    for _ in 0..500 {
        let len = rng.gen_range(1..=64);
        // fix_8 grid values; every shift below is exact in f64
        let frac = rng.gen_range(0..=7);
        let scale = (-(frac as f64)).exp2();
        let raw: Vec<i32> = (0..len).map(|_| rng.gen_range(-128..=127)).collect();
        let row: Vec<f64> = raw.iter().map(|&r| r as f64 * scale).collect();
        let p = softmax(&row).unwrap();
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-1000..=1000) as f64 * scale;
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        shift_breaks += (softmax(&shifted).unwrap() != p) as usize;

        // device path: shift raw scores by a constant that stays in range
        let (lo, hi) = (*raw.iter().min().unwrap(), *raw.iter().max().unwrap());
        let d = rng.gen_range(-128 - lo..=127 - hi);
        let job = SoftmaxJob {
            src: 0,
            dst: len,
            rows: 1,
            len,
            scale: 1.0,
            bias: None,
        };
        let mut a: Vec<i8> = raw
            .iter()
            .map(|&r| r as i8)
            .chain(std::iter::repeat_n(0, len))
            .collect();
        let mut b: Vec<i8> = raw
            .iter()
            .map(|&r| (r + d) as i8)
            .chain(std::iter::repeat_n(0, len))
            .collect();
        softmax_job_fix8(&job, &mut a, |addr| if addr < len { frac } else { 7 }).unwrap();
        softmax_job_fix8(&job, &mut b, |addr| if addr < len { frac } else { 7 }).unwrap();
        shift_breaks += (a[len..] != b[len..]) as usize;
    }
    out.check(
        "6: softmax sums to 1",
        sum_err <= 1e-6,
        format!("max |sum - 1| {sum_err:.2e}"),
    );
    out.check(
        "6: softmax shift invariance",
        shift_breaks == 0,
        format!("{shift_breaks} differing rows"),
    );

    let mut var_err = 0.0f64;
    for _ in 0..500 {
        let len = rng.gen_range(2..=768);
        let row: Vec<f64> = (0..len).map(|_| rng.gen_range(-8.0..=8.0)).collect();
        let n = len as f64;
        let mean = row.iter().sum::<f64>() / n;
        let two_pass = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (_, one_pass) = one_pass_moments(&row);
        var_err = var_err.max((one_pass - two_pass).abs());
    }
    out.check(
        "6: layernorm variance",
        var_err <= 1e-6,
        format!("max |one-pass - two-pass| {var_err:.2e}"),
    );
    out
}

fn criterion_7(program: &BundleProgram, config: &ModelConfig) -> Outcome {
    let mut out = Outcome::new();
    let counts = count_ops(program).unwrap();
    let target = parse_target(MEASURED).unwrap();
    let model = TimingModel::calibrate(&counts, &target, 96, true).unwrap();
    let weights = synthesize_weights(config, 7).unwrap();
    let stream = ParamStream::new(program, &weights).unwrap();
    let image = random_input(config, 7);
    let report: TimingReport = execute(program, &stream, &image, &ExecOptions::fix8(6), &model)
        .unwrap()
        .timing;

    let total_ms = report.total_seconds * 1e3;
    out.check(
        "7: total",
        (total_ms - 11.8255194).abs() < 5e-8,
        format!("{total_ms:.7} ms (want 11.8255194)"),
    );
    let pct = |kind| {
        let name = MODULE_NAMES.iter().find(|(k, _)| *k == kind).unwrap().1;
        report.row(name).unwrap().percentage
    };
    let mm = pct(vistop::isa::ComponentKind::MatMul);
    out.check(
        "7: matrix-multiply percentage",
        (mm - 70.60).abs() <= 0.01,
        format!("{mm:.4}% (want 70.60 +- 0.01)"),
    );
    let dm = pct(vistop::isa::ComponentKind::DataMove);
    out.check(
        "7: data-move percentage",
        (dm - 29.21).abs() <= 0.01,
        format!(
            "{dm:.4}% (want 29.21 +- 0.01); 3.4572702 / 11.8255194 = {:.4}% so the target rows cannot \
             produce 29.21",
            3.4572702 / 11.8255194 * 100.0
        ),
    );
    out
}

fn small_program(rng: &mut ChaCha8Rng) -> BundleProgram {
    let name = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(0..10))
            .map(|_| rng.gen_range(b'a'..=b'z') as char)
            .collect()
    };
    let bundles = (0..rng.gen_range(0..5))
        .map(|_| BundleTableEntry {
            id: rng.gen(),
            name: name(rng),
            role: BundleRole::ALL[rng.gen_range(0..BundleRole::ALL.len())],
            visibility: if rng.gen() {
                Visibility::Public
            } else {
                Visibility::Private
            },
            components: (0..rng.gen_range(0..4))
                .map(|_| {
                    let op = ComponentOp::ALL[rng.gen_range(0..ComponentOp::ALL.len())];
                    let regs = (0..op.slots().len()).map(|_| rng.gen_range(0..64)).collect();
                    ComponentInvocation::new(op, regs)
                })
                .collect(),
        })
        .collect();
    BundleProgram {
        io: None,
        memory: (0..rng.gen_range(0..5))
            .map(|_| MemoryRegion {
                name: name(rng),
                base: rng.gen_range(0..1 << 30),
                len: rng.gen_range(0..1 << 20),
                frac_bits: rng.gen_range(0..8),
            })
            .collect(),
        bundles,
        instructions: (0..rng.gen_range(0..30))
            .map(|_| {
                if rng.gen() {
                    Instruction::ParamSet {
                        reg: rng.gen_range(0..64),
                        value: rng.gen(),
                    }
                } else {
                    Instruction::ModuleExec { bundle: rng.gen() }
                }
            })
            .collect(),
        stream: (0..rng.gen_range(0..4))
            .map(|_| StreamTensor {
                name: name(rng),
                len: rng.gen_range(0..1 << 24),
            })
            .collect(),
    }
}

fn criterion_9(program: &BundleProgram) -> Outcome {
    let mut out = Outcome::new();
    let bytes = isa::encode(program);
    let back = isa::decode(&bytes);
    let exact = back.as_ref() == Ok(program) && back.map(|p| isa::encode(&p) == bytes).unwrap_or(false);
    out.check("9: swin-t bit-exact", exact, format!("{} bytes", bytes.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..500 {
        let p = small_program(&mut rng);
        bad += (isa::decode(&isa::encode(&p)).as_ref() != Ok(&p)) as usize;
    }
    out.check("9: 500 random round-trips", bad == 0, format!("{bad} failures"));

    let result = std::panic::catch_unwind(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rejected = 0;
        for i in 0..2000 {
            let mut b = bytes.clone();
            match i % 3 {
                0 => b.truncate(rng.gen_range(0..b.len())),
                1 => {
                    for _ in 0..rng.gen_range(1..8) {
                        let at = rng.gen_range(0..b.len());
                        b[at] = rng.gen();
                    }
                }
                _ => {
                    // overwrite a 4-byte window, hitting length fields
                    let at = rng.gen_range(8..b.len() - 4);
                    b[at..at + 4].copy_from_slice(&rng.gen::<u32>().to_le_bytes());
                }
            }
            rejected += isa::decode(&b).is_err() as usize;
        }
        rejected
    });
    match result {
        Ok(rejected) => out.check(
            "9: corrupted input",
            true,
            format!("2000 inputs, {rejected} rejected, no panics"),
        ),
        Err(_) => out.check("9: corrupted input", false, "decoder panicked"),
    }
    out
}

fn main() -> ExitCode {
    let t = Instant::now();
    let (config, program) = swin_t();
    let criteria: Vec<(u8, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(|| criterion_2(&program))),
        (3, Box::new(|| criterion_3(&program))),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(criterion_6)),
        (7, Box::new(|| criterion_7(&program, &config))),
        (9, Box::new(|| criterion_9(&program))),
    ];
    let mut blocking = 0;
    for (n, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let passed = outcome.checks.iter().all(|c| c.1);
        println!(
            "criterion {n}: {} ({:.1} s)",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for (name, ok, detail) in &outcome.checks {
            let known = KNOWN_UNATTAINABLE.contains(&name.as_str());
            println!(
                "    {} {name}: {detail}{}",
                if *ok { "ok  " } else { "FAIL" },
                if known && !ok { " [known unattainable]" } else { "" }
            );
            blocking += (!ok && !known) as usize;
        }
        if n == 7 {
            println!("criterion 8: N/A (throughput, DSP count and throughput per DSP need the physical device)");
        }
    }
    println!(
        "acceptance: {blocking} blocking failures, {:.1} s",
        t.elapsed().as_secs_f64()
    );
    if blocking == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
