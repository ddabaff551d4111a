use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vistop::compiler::{lower, manifest_for_config, CompileOptions, ModelConfig};
use vistop::isa::{self, BundleProgram};
use vistop::reference::{random_input, synthesize_weights};
use vistop::runtime::{
    count_ops, execute, parse_target, predict, render_run, ExecOptions, Mode, ParamStream, TimingModel, WeightSet,
};
use vistop::tensor::{write_tensor, Manifest, QuantSpec, Tensor3D};

/// Compiler and simulator for the visual-Transformer overlay processor.
#[derive(Parser)]
#[command(name = "vistop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower a model config into a program file.
    Compile {
        #[arg(long)]
        config: PathBuf,
        /// Weight manifest; derived from the config when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON file overriding the fix_8 formats of memory regions.
        #[arg(long)]
        options: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Execute a program.
    Run {
        #[arg(long)]
        program: PathBuf,
        /// Directory holding manifest.json and the tensor files.
        #[arg(long)]
        weights: PathBuf,
        /// Raw tensor file (f32 or fix_8 bytes) shaped like the program input.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "float")]
        mode: Mode,
        /// Timing model JSON, as written by `calibrate`.
        #[arg(long)]
        timing: Option<PathBuf>,
        /// Fix8 format for weights stored as floats.
        #[arg(long, default_value_t = 6)]
        weight_frac: u8,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict per-module time without computing values.
    Report {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Randomized Float, Fix8 and oracle comparison.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a program as text.
    Disasm {
        #[arg(long)]
        program: PathBuf,
    },
    /// Check a program's static invariants.
    Validate {
        #[arg(long)]
        program: PathBuf,
    },
    /// Fit timing constants to measured module times.
    Calibrate {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 96)]
        batch: u32,
        /// Count Pre-process in the total instead of overlapping it.
        #[arg(long)]
        serial_preprocess: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write random weights (and optionally an input image) for a config.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store weights as fix_8 with this many fraction bits.
        #[arg(long)]
        frac: Option<u8>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write a random input image here.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn read_program(path: &Path) -> Result<BundleProgram> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    isa::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn read_timing(path: Option<&Path>) -> Result<TimingModel> {
    match path {
        None => Ok(TimingModel::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn read_input(program: &BundleProgram, path: &Path) -> Result<Tensor3D> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(io) = &program.io else {
        return Ok(Tensor3D::from_f64(vistop::tensor::Dims3::new(1, 1, 1)?, vec![0.0])?);
    };
    let dims = io.input_dims;
    let quant = if bytes.len() == dims.len() {
        let frac = program.region(&io.input_region).map_or(4, |r| r.frac_bits);
        Some(QuantSpec::new(frac)?)
    } else {
        None
    };
    Tensor3D::from_bytes(dims, quant, &bytes).with_context(|| format!("input {}", path.display()))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Ok(true) on success, Ok(false) on a verification failure.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Compile {
            config,
            manifest,
            options,
            output,
        } => {
            let config = ModelConfig::load(&config)?;
            let manifest = match manifest {
                Some(p) => Manifest::load(&p)?,
                None => manifest_for_config(&config)?,
            };
            let opts = match options {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => CompileOptions::default(),
            };
            let (program, report) = lower(&config, &manifest, &opts)?;
            fs::write(&output, isa::encode(&program)).with_context(|| format!("writing {}", output.display()))?;
            println!("{report}");
        }
        Command::Run {
            program,
            weights,
            input,
            mode,
            timing,
            weight_frac,
            report,
        } => {
            let program = read_program(&program)?;
            let diags = isa::validate(&program);
            if let Some(d) = diags.first() {
                bail!("program is not runnable: {d}");
            }
            let weights = WeightSet::load(&weights)?;
            let stream = ParamStream::new(&program, &weights)?;
            let input = read_input(&program, &input)?;
            let timing = read_timing(timing.as_deref())?;
            let opts = ExecOptions { mode, weight_frac };
            let result = execute(&program, &stream, &input, &opts, &timing)?;
            write_out(report.as_deref(), &render_run(&result))?;
        }
        Command::Report { program, timing } => {
            let program = read_program(&program)?;
            let report = predict(&program, &read_timing(timing.as_deref())?)?;
            print!("{report}");
        }
        Command::Verify { config, trials, seed } => {
            let config = ModelConfig::load(&config)?;
            let report = vistop::verify::verify(&config, trials, seed)?;
            print!("{report}");
            return Ok(report.passed());
        }
        Command::Disasm { program } => print!("{}", isa::disassemble(&read_program(&program)?)),
        Command::Validate { program } => {
            let diags = isa::validate(&read_program(&program)?);
            for d in &diags {
                println!("{d}");
            }
            if !diags.is_empty() {
                bail!("{} diagnostics", diags.len());
            }
            println!("ok");
        }
        Command::Calibrate {
            program,
            target,
            batch,
            serial_preprocess,
            output,
        } => {
            let program = read_program(&program)?;
            let text = fs::read_to_string(&target).with_context(|| format!("reading {}", target.display()))?;
            let target = parse_target(&text)?;
            let counts = count_ops(&program)?;
            let model = TimingModel::calibrate(&counts, &target, batch, !serial_preprocess)?;
            write_out(output.as_deref(), &(serde_json::to_string_pretty(&model)? + "\n"))?;
        }
        Command::InitWeights {
            config,
            seed,
            frac,
            output,
            input,
        } => {
            let config = ModelConfig::load(&config)?;
            let mut weights = synthesize_weights(&config, seed)?;
            if let Some(f) = frac {
                weights = weights.quantized(f)?.0;
            }
            weights.save(&output)?;
            if let Some(p) = input {
                write_tensor(&p, &random_input(&config, seed))?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
