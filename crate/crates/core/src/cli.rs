//! Command-line surface of the `ear` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{flops_estimate, scales_from_sides, write_comparison, ParadigmSpec};
use crate::error::{invalid, EarError, Result};
use crate::generator::{Generator, SamplingConfig, TokenGrid};
use crate::kv_cache::{write_slots_csv, CacheSlot};
use crate::mask::{write_roles_csv, SequencePlan};
use crate::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelParameters, Precision, Real,
};
use crate::schedule::{ScheduleKind, StepSchedule};
use crate::spiral::SpiralMap;
use crate::trainer::{
    gen_dataset, parse_key_values, read_dataset, train, write_dataset, write_loss_curve, Family,
    SyntheticSpec, TrainConfig,
};

const SCHEDULE_HELP: &str = "Step schedule: odd, half, ones, uniform:<c> or custom:<l1,l2,...>. \
A 10-step list for 256 tokens is custom:1,3,6,10,16,24,34,44,54,64";

/// Default next-scale side lengths (10 scales ending at 16x16).
const DEFAULT_SCALE_SIDES: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

#[derive(Parser, Debug)]
#[command(
    name = "ear",
    version,
    about = "Spiral-order expanding autoregressive token generation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for data generation, initialization and sampling
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key=value settings file (model and training keys)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (stdout when omitted, where that makes sense)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the spiral order of an n x n grid
    SpiralMap {
        #[arg(long)]
        n: usize,
        /// csv: rank,row,col rows; ranks: the grid of ranks
        #[arg(long, default_value = "csv", value_parser = ["csv", "ranks"])]
        format: String,
    },
    /// Print a step schedule as step,length,offset
    Schedule {
        #[arg(long, help = SCHEDULE_HELP)]
        kind: ScheduleKind,
        #[arg(long)]
        tokens: usize,
    },
    /// Write the training attention mask (mask.pgm) and slot roles (roles.csv)
    MaskDump {
        #[arg(long)]
        tokens: usize,
        #[arg(long, help = SCHEDULE_HELP)]
        kind: ScheduleKind,
    },
    /// Write a synthetic dataset directory
    GenData {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value = "rings")]
        family: Family,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train a model on a dataset directory; writes a checkpoint and loss_curve.csv
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "odd", help = SCHEDULE_HELP)]
        kind: ScheduleKind,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate one grid from a checkpoint
    Generate {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Keep the centered m x m block of a grid and regenerate the rest
    Extend {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Source grid (EARTOK v1)
        #[arg(long)]
        input: PathBuf,
        /// Kept center side length
        #[arg(long)]
        m: usize,
        /// Class for the regenerated part (defaults to the source grid's class)
        #[arg(long)]
        class: Option<usize>,
    },
    /// Time cached generation on a randomly initialized model
    Bench {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "ones,odd,half")]
        kinds: Vec<ScheduleKind>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Step, token and FLOPs accounting for the three decoding paradigms
    CompareParadigms {
        #[arg(long, default_value_t = 16)]
        grid: usize,
        /// Next-scale side lengths, coarse to fine (the default ends at 16)
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long, default_value = "half", help = SCHEDULE_HELP)]
        kind: ScheduleKind,
    },
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "odd", help = SCHEDULE_HELP)]
    kind: ScheduleKind,
    /// Argmax decoding instead of sampling
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// 0 keeps the whole vocabulary
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    /// Write the final cache slot layout as CSV
    #[arg(long)]
    dump_cache: Option<PathBuf>,
}

impl DecodeArgs {
    fn sampling(&self, seed: u64) -> SamplingConfig {
        if self.greedy {
            SamplingConfig {
                seed,
                ..SamplingConfig::greedy()
            }
        } else {
            SamplingConfig::stochastic(self.temperature, self.top_k, seed)
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    cli_dispatch_to(argv, &mut out)
}

/// Same as [`cli_dispatch`] with standard output redirected to `out`.
pub fn cli_dispatch_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let msg = e.to_string();
                eprintln!("error: {}", first_line(&msg));
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            1
        }
    }
}

fn first_line(msg: &str) -> &str {
    let msg = msg.trim().trim_start_matches("error: ");
    msg.lines().next().unwrap_or("")
}

fn csv_err(e: csv::Error) -> EarError {
    EarError::Format(e.to_string())
}

struct Settings {
    model: ModelConfig,
    train: TrainConfig,
}

fn load_settings(common: &Common) -> Result<Settings> {
    let mut s = Settings {
        model: ModelConfig::default(),
        train: TrainConfig {
            seed: common.seed,
            ..TrainConfig::default()
        },
    };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        for (k, v) in parse_key_values(&text)? {
            if !s.model.set(&k, &v)? && !s.train.set(&k, &v)? {
                return invalid(format!("unknown config key {k:?}"));
            }
        }
    }
    s.model.validate()?;
    s.train.validate()?;
    Ok(s)
}

/// Writes to the `--out` file, or to `out` when no path was given.
fn emit(
    common: &Common,
    out: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    match &common.out {
        Some(path) => {
            let mut file = std::io::BufWriter::new(fs::File::create(path)?);
            f(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => f(out),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    match &common.out {
        Some(p) => Ok(p),
        None => invalid("this command needs --out <dir>"),
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::SpiralMap { n, format } => {
            let map = SpiralMap::new(n)?;
            emit(&common, out, |w| {
                if format == "ranks" {
                    for row in 0..n {
                        let ranks: Vec<String> =
                            (0..n).map(|c| map.rank(row, c).to_string()).collect();
                        writeln!(w, "{}", ranks.join(" "))?;
                    }
                } else {
                    writeln!(w, "rank,row,col")?;
                    for (rank, &(r, c)) in map.order().iter().enumerate() {
                        writeln!(w, "{rank},{r},{c}")?;
                    }
                }
                Ok(())
            })
        }
        Command::Schedule { kind, tokens } => {
            let s = StepSchedule::new(&kind, tokens)?;
            emit(&common, out, |w| {
                writeln!(w, "step,length,offset")?;
                for (i, (l, o)) in s.lengths().iter().zip(s.offsets()).enumerate() {
                    writeln!(w, "{},{l},{o}", i + 1)?;
                }
                Ok(())
            })
        }
        Command::MaskDump { tokens, kind } => {
            let plan = SequencePlan::new(&StepSchedule::new(&kind, tokens)?);
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir)?;
            let pgm = std::io::BufWriter::new(fs::File::create(dir.join("mask.pgm"))?);
            plan.mask.write_pgm(pgm)?;
            write_roles_csv(&plan.layout, fs::File::create(dir.join("roles.csv"))?)
                .map_err(csv_err)?;
            writeln!(
                out,
                "wrote {} and {}",
                dir.join("mask.pgm").display(),
                dir.join("roles.csv").display()
            )?;
            Ok(())
        }
        Command::GenData {
            n,
            vocab,
            classes,
            family,
            noise,
            count,
        } => {
            let spec = SyntheticSpec {
                n,
                vocab,
                num_classes: classes,
                family,
                noise_rate: noise,
                seed: common.seed,
            };
            let grids = gen_dataset(&spec, count)?;
            let dir = out_dir(&common)?;
            write_dataset(dir, &grids)?;
            writeln!(out, "wrote {count} grids to {}", dir.display())?;
            Ok(())
        }
        Command::Train { data, kind, epochs } => {
            let mut settings = load_settings(&common)?;
            if let Some(e) = epochs {
                settings.train.epochs = e;
            }
            let grids = read_dataset(&data)?;
            if let Some(g) = grids
                .iter()
                .find(|g| g.class_id.is_none_or(|c| c >= settings.model.num_classes))
            {
                return invalid(format!(
                    "dataset grid has class {:?}, model has {} classes",
                    g.class_id, settings.model.num_classes
                ));
            }
            let n = grids.first().map_or(0, |g| g.n);
            let schedule = StepSchedule::new(&kind, n * n)?;
            let dir = out_dir(&common)?.to_path_buf();
            let curve = match settings.model.precision {
                Precision::Fp32 => train_and_save::<f32>(&settings, &grids, &schedule, &dir)?,
                Precision::Fp64 => train_and_save::<f64>(&settings, &grids, &schedule, &dir)?,
            };
            write_loss_curve(&curve, fs::File::create(dir.join("loss_curve.csv"))?)?;
            writeln!(
                out,
                "final loss {:.6} after {} epochs",
                curve.last().unwrap_or(&f64::NAN),
                curve.len()
            )?;
            Ok(())
        }
        Command::Generate { decode, class, n } => {
            let params = load_checkpoint(&decode.checkpoint)?;
            let schedule = StepSchedule::new(&decode.kind, n * n)?;
            let sampling = decode.sampling(common.seed);
            let (grid, slots) = match params.config.precision {
                Precision::Fp32 => decode_grid(&params, class, &schedule, &sampling, &[], n)?,
                Precision::Fp64 => {
                    decode_grid(&params.cast::<f64>(), class, &schedule, &sampling, &[], n)?
                }
            };
            finish_decode(&common, out, &decode, &grid, &slots)
        }
        Command::Extend {
            decode,
            input,
            m,
            class,
        } => {
            let params = load_checkpoint(&decode.checkpoint)?;
            let source = TokenGrid::from_eartok(&fs::read_to_string(&input)?)?;
            let target = match class.or(source.class_id) {
                Some(c) => c,
                None => return invalid("source grid has no class; pass --class"),
            };
            let map = SpiralMap::new(source.n)?;
            if !map.center_block(m)?.is_prefix {
                return invalid(format!("centered {m}x{m} block is not a spiral prefix"));
            }
            let seq = map.flatten(&source.tokens)?;
            let schedule = StepSchedule::new(&decode.kind, map.len())?.with_boundary(m * m)?;
            let sampling = decode.sampling(common.seed);
            let prefix = &seq[..m * m];
            let (grid, slots) = match params.config.precision {
                Precision::Fp32 => {
                    decode_grid(&params, target, &schedule, &sampling, prefix, source.n)?
                }
                Precision::Fp64 => decode_grid(
                    &params.cast::<f64>(),
                    target,
                    &schedule,
                    &sampling,
                    prefix,
                    source.n,
                )?,
            };
            finish_decode(&common, out, &decode, &grid, &slots)
        }
        Command::Bench { n, kinds, repeats } => {
            let settings = load_settings(&common)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let params = ModelParameters::<f32>::init(&settings.model, &mut rng);
            let generator = Generator::new(&params);
            let sampling = SamplingConfig::greedy();
            let repeats = repeats.max(1);
            emit(&common, out, |w| {
                writeln!(w, "# wall-clock timings of this build on this machine; not comparable to published figures")?;
                writeln!(w, "schedule,steps,mean_ms")?;
                for kind in &kinds {
                    let schedule = StepSchedule::new(kind, n * n)?;
                    let start = Instant::now();
                    for _ in 0..repeats {
                        generator.run(0, &schedule, &sampling, &[])?;
                    }
                    let ms = start.elapsed().as_secs_f64() * 1e3 / repeats as f64;
                    writeln!(w, "{kind},{},{ms:.3}", schedule.num_steps())?;
                }
                Ok(())
            })
        }
        Command::CompareParadigms { grid, scales, kind } => {
            let settings = load_settings(&common)?;
            let sides = match scales {
                Some(s) => s,
                None if grid == 16 => DEFAULT_SCALE_SIDES.to_vec(),
                None => return invalid("--scales is required when --grid is not 16"),
            };
            if sides.last() != Some(&grid) {
                return invalid(format!(
                    "the last scale side must equal the grid side {grid}"
                ));
            }
            let t = grid * grid;
            let specs = [
                ParadigmSpec::NextToken { tokens: t },
                ParadigmSpec::NextScale {
                    scale_tokens: scales_from_sides(&sides),
                },
                ParadigmSpec::Ear(StepSchedule::new(&kind, t)?),
            ];
            let rows = specs
                .iter()
                .map(|s| Ok((s.name().to_string(), flops_estimate(s, &settings.model)?)))
                .collect::<Result<Vec<_>>>()?;
            emit(&common, out, |w| {
                write_comparison(&rows, w).map_err(csv_err)
            })
        }
    }
}

fn train_and_save<F: Real>(
    settings: &Settings,
    grids: &[TokenGrid],
    schedule: &StepSchedule,
    dir: &Path,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
    let params = ModelParameters::<F>::init(&settings.model, &mut rng);
    let (params, curve) = train(params, grids, schedule, &settings.train)?;
    save_checkpoint(&params, dir)?;
    Ok(curve)
}

fn decode_grid<F: Real>(
    params: &ModelParameters<F>,
    class: usize,
    schedule: &StepSchedule,
    sampling: &SamplingConfig,
    prefix: &[u32],
    n: usize,
) -> Result<(TokenGrid, Vec<CacheSlot>)> {
    let map = SpiralMap::new(n)?;
    let trace = Generator::new(params).run(class, schedule, sampling, prefix)?;
    let grid = TokenGrid::new(map.unflatten(&trace.tokens)?, Some(class))?;
    Ok((grid, trace.final_slots))
}

fn finish_decode(
    common: &Common,
    out: &mut dyn Write,
    decode: &DecodeArgs,
    grid: &TokenGrid,
    slots: &[CacheSlot],
) -> Result<()> {
    if let Some(path) = &decode.dump_cache {
        write_slots_csv(slots, fs::File::create(path)?).map_err(csv_err)?;
    }
    emit(common, out, |w| {
        Ok(w.write_all(grid.to_eartok().as_bytes())?)
    })
}
