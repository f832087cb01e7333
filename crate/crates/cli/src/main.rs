use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reld::evaluation::{
    ablation_suite, evaluate, exact_solve_with, extension_probe, EvalConfig, EvalError, EvalReport, HeldOut,
    References,
};
use reld::instance_gen::{generate_set, CapacityMode, GenConfig};
use reld::io::checkpoint::{load_checkpoint, Checkpoint};
use reld::io::config::{read_config, write_config, RunConfig};
use reld::io::cvrplib::{format_routes, parse_cvrplib, scale_instance};
use reld::io::dataset::{
    format_ablation_table, format_report_table, read_instance_set, write_instance_set, write_report, BksTable,
};
use reld::io::{write_atomic, IoError};
use reld::model::ModelConfig;
use reld::numerics::GradCheckOptions;
use reld::rollout::{num_trajectories, solve, RolloutError};
use reld::training::{fine_tune, policy_grad_check, train, Freeze, TrainError, TrainStart};
use reld::vrp::{tour_cost, tour_cost_rounded, Instance};

const THREADS_ENV: &str = "REld_THREADS";

#[derive(Parser)]
#[command(name = "reld", version, about = "Light-decoder neural solvers for the CVRP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Suppress all non-error output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an instance set to line-delimited JSON.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of instances.
        #[arg(long)]
        count: usize,
        /// Fixed customer count (default: the configured training range).
        #[arg(long)]
        size: Option<usize>,
        /// Fixed capacity (default: the standard capacity for `--size`).
        #[arg(long)]
        capacity: Option<u32>,
        /// Index of the first instance in the seeded stream.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train from scratch, or resume from `--checkpoint`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.instances_per_epoch`.
        #[arg(long)]
        instances_per_epoch: Option<usize>,
    },
    /// Continue training trained weights with a fresh schedule.
    FineTune {
        #[command(flatten)]
        common: Common,
        /// Parameter groups kept fixed.
        #[arg(long, value_enum, default_value_t = FreezeArg::None)]
        freeze: FreezeArg,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.instances_per_epoch`.
        #[arg(long)]
        instances_per_epoch: Option<usize>,
    },
    /// Solve one instance (CVRPLib `.vrp` or the first record of a `.ljson` set).
    Solve {
        #[command(flatten)]
        common: Common,
        /// Instance file.
        #[arg(long)]
        instance: PathBuf,
        /// Trajectory cap; `min(K, N)` trajectories are decoded.
        #[arg(long)]
        k: Option<usize>,
        /// Also decode the eight symmetric copies of each instance.
        #[arg(long)]
        augment: bool,
        #[command(flatten)]
        rounding: Rounding,
    },
    /// Greedy evaluation of a dataset with optional references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `.ljson` set, a `.vrp` file or a directory of `.vrp` files.
        #[arg(long)]
        data: PathBuf,
        /// Best-known costs (`name cost` per line).
        #[arg(long, conflicts_with = "oracle")]
        bks: Option<PathBuf>,
        /// Use exact solutions as references (at most 12 customers).
        #[arg(long)]
        oracle: bool,
        /// Trajectory cap; `min(K, N)` trajectories are decoded.
        #[arg(long)]
        k: Option<usize>,
        /// Also decode the eight symmetric copies of each instance.
        #[arg(long)]
        augment: bool,
        #[command(flatten)]
        rounding: Rounding,
    },
    /// Decode the original customers while encoding extra ones.
    ProbeExtension {
        #[command(flatten)]
        common: Common,
        /// `.ljson` set or `.vrp` file; generated instances otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Customer count of generated instances when `--data` is absent.
        #[arg(long, default_value_t = 10)]
        size: usize,
        /// Generated instance count (default: `eval.count`).
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated extension rates (default: `eval.deltas`).
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        /// Use exact solutions as references (at most 12 customers).
        #[arg(long)]
        oracle: bool,
        /// Trajectory cap; `min(K, N)` trajectories are decoded.
        #[arg(long)]
        k: Option<usize>,
        /// Also decode the eight symmetric copies of each instance.
        #[arg(long)]
        augment: bool,
    },
    /// Train and compare architecture variants on shared held-out sets.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants, e.g. `pomo,pomon,pomon+idt,pomon+ff,pomon+idt+ff`.
        #[arg(long, value_delimiter = ',', default_value = "pomo,pomon,pomon+idt,pomon+ff,pomon+idt+ff")]
        variants: Vec<String>,
        /// Use exact solutions as references (at most 12 customers).
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of the trajectory log-probability gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Embedding width.
        #[arg(long, default_value_t = 16)]
        dh: usize,
        /// Customers of the sampled instance.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Attention heads.
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Encoder layers.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Variant name, e.g. `pomo`, `reld`, `pomon+idt`.
        #[arg(long, default_value = "reld")]
        variant: String,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Exact optimal costs for small instances.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Instance set or CVRPLib file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        rounding: Rounding,
    },
    /// Write the effective configuration with documented defaults.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Copy, Default)]
struct Rounding {
    /// Score with legs rounded to the nearest integer (default for `.vrp` inputs).
    #[arg(long, conflicts_with = "no_round_distances")]
    round_distances: bool,
    /// Score with exact Euclidean legs.
    #[arg(long)]
    no_round_distances: bool,
}

impl Rounding {
    fn resolve(self, default: bool) -> bool {
        if self.round_distances {
            true
        } else if self.no_round_distances {
            false
        } else {
            default
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FreezeArg {
    None,
    Encoder,
    Decoder,
    All,
}

impl From<FreezeArg> for Freeze {
    fn from(f: FreezeArg) -> Self {
        match f {
            FreezeArg::None => Freeze::None,
            FreezeArg::Encoder => Freeze::Encoder,
            FreezeArg::Decoder => Freeze::Decoder,
            FreezeArg::All => Freeze::All,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

fn usage(stage: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{stage}: {msg}"))
}

fn data(stage: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{stage}: {msg}"))
}

fn rollout_failure(stage: &str, e: RolloutError) -> Failure {
    match &e {
        RolloutError::Model(m) if m.is_numeric() => Failure::Numeric(format!("{stage}: {e}")),
        _ => data(stage, e),
    }
}

fn train_failure(stage: &str, e: TrainError) -> Failure {
    if e.is_numeric() {
        Failure::Numeric(format!("{stage}: {e}"))
    } else {
        data(stage, e)
    }
}

fn eval_failure(stage: &str, e: EvalError) -> Failure {
    match e {
        EvalError::Rollout(r) => rollout_failure(stage, r),
        EvalError::Train(t) => train_failure(stage, t),
        other => data(stage, other),
    }
}

struct Ctx {
    common: Common,
    cfg: RunConfig,
}

impl Ctx {
    fn new(common: Common) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(p) => read_config(p).map_err(|e| data("config", e))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
            cfg.train.gen.seed = seed;
            cfg.eval.seed = seed;
        }
        Ok(Self { common, cfg })
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.common.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn out(&self, what: &str) -> Result<&Path, Failure> {
        self.common
            .out
            .as_deref()
            .ok_or_else(|| usage(what, "--out is required"))
    }

    fn checkpoint(&self, stage: &str, expected: Option<&ModelConfig>) -> Result<Checkpoint, Failure> {
        let path = self
            .common
            .checkpoint
            .as_deref()
            .ok_or_else(|| usage(stage, "--checkpoint is required"))?;
        load_checkpoint(path, expected).map_err(|e| data("checkpoint", format!("{}: {e}", path.display())))
    }
}

fn setup_threads(threads: Option<usize>) -> Result<(), Failure> {
    let from_env = std::env::var(THREADS_ENV).ok();
    let n = match (threads, from_env) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| usage("threads", format!("{THREADS_ENV}={v} is not a count")))?,
        ),
        (None, None) => None,
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("threads", "thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage("threads", e))?;
    }
    Ok(())
}

fn is_vrp(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("vrp"))
}

/// Instances as stored plus, for CVRPLib files, scaled copies and factors.
struct Dataset {
    original: Vec<Instance>,
    scaled: Vec<Instance>,
    from_cvrplib: bool,
}

fn load_vrp(path: &Path) -> Result<Instance, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| data("data", format!("{}: {e}", path.display())))?;
    let mut inst = parse_cvrplib(&text).map_err(|e| data("data", format!("{}: {e}", path.display())))?;
    if inst.name.is_none() {
        inst.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok(inst)
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let (original, from_cvrplib) = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| data("data", format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_vrp(p))
            .collect();
        files.sort();
        (files.iter().map(|f| load_vrp(f)).collect::<Result<Vec<_>, _>>()?, true)
    } else if is_vrp(path) {
        (vec![load_vrp(path)?], true)
    } else {
        (read_instance_set(path).map_err(|e| data("data", format!("{}: {e}", path.display())))?, false)
    };
    if original.is_empty() {
        return Err(data("data", format!("{} holds no instances", path.display())));
    }
    let scaled = original
        .iter()
        .map(|i| scale_instance(i).map(|(s, _)| s))
        .collect::<Result<Vec<_>, IoError>>()
        .map_err(|e| data("data", e))?;
    Ok(Dataset {
        original,
        scaled,
        from_cvrplib,
    })
}

/// Re-scores every tour of a report on the unscaled instances.
fn rescore(report: &mut EvalReport, originals: &[Instance], rounded: bool) -> Result<(), Failure> {
    for (rec, inst) in report.records.iter_mut().zip(originals) {
        rec.cost = if rounded {
            tour_cost_rounded(inst, &rec.tour)
        } else {
            tour_cost(inst, &rec.tour)
        }
        .map_err(|e| data("eval", e))?;
        rec.gap_pct = rec.reference.and_then(|r| reld::evaluation::gap_pct(rec.cost, r));
    }
    let n = report.records.len() as f64;
    report.mean_cost = report.records.iter().map(|r| r.cost).sum::<f64>() / n;
    let gaps: Vec<f64> = report.records.iter().filter_map(|r| r.gap_pct).collect();
    report.mean_gap_pct = (gaps.len() == report.records.len()).then(|| gaps.iter().sum::<f64>() / n);
    Ok(())
}

fn references(ds: &Dataset, bks: Option<&Path>, oracle: bool, rounded: bool) -> Result<References, Failure> {
    if let Some(path) = bks {
        let table = BksTable::read(path).map_err(|e| data("references", e))?;
        return Ok(References::Given(
            table.references_for(&ds.original).map_err(|e| data("references", e))?,
        ));
    }
    if oracle {
        let refs = ds
            .original
            .iter()
            .map(|i| exact_solve_with(i, rounded).map(|t| t.cost))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| data("oracle", e))?;
        return Ok(References::Given(refs));
    }
    Ok(References::None)
}

fn emit_report(ctx: &Ctx, report: &EvalReport) -> Result<(), Failure> {
    ctx.say(format_report_table(report));
    if let Some(out) = &ctx.common.out {
        write_report(out, report).map_err(|e| data("report", e))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen {
            common,
            count,
            size,
            capacity,
            start,
        } => {
            let ctx = Ctx::new(common)?;
            let out = ctx.out("gen")?;
            let mut gen = ctx.cfg.train.gen.clone();
            if let Some(n) = size {
                gen.size_min = n;
                gen.size_max = n;
                gen.capacity = CapacityMode::Fixed {
                    value: capacity.unwrap_or_else(|| GenConfig::standard_capacity(n)),
                };
            } else if let Some(c) = capacity {
                gen.capacity = CapacityMode::Fixed { value: c };
            }
            let set = generate_set(&gen, start, count).map_err(|e| data("gen", e))?;
            write_instance_set(out, &set).map_err(|e| data("gen", e))?;
            ctx.say(format!("wrote {} instances to {}", set.len(), out.display()));
            Ok(())
        }
        Command::Train {
            common,
            epochs,
            instances_per_epoch,
        } => {
            let mut ctx = Ctx::new(common)?;
            let out = ctx.out("train")?.to_path_buf();
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = e;
            }
            if let Some(i) = instances_per_epoch {
                ctx.cfg.train.instances_per_epoch = i;
            }
            let start = match ctx.common.checkpoint {
                Some(_) => TrainStart::resume(ctx.checkpoint("train", Some(&ctx.cfg.model))?),
                None => TrainStart::fresh(ctx.cfg.model.clone(), ctx.cfg.train.seed)
                    .map_err(|e| train_failure("train", e))?,
            };
            let quiet = ctx.common.quiet;
            let result = train(&ctx.cfg.train, start, Some(&out), &mut |r| {
                if !quiet {
                    println!("{}", r.progress_line());
                }
            });
            finish_training(&ctx, &out, result)
        }
        Command::FineTune {
            common,
            freeze,
            epochs,
            instances_per_epoch,
        } => {
            let mut ctx = Ctx::new(common)?;
            let out = ctx.out("fine-tune")?.to_path_buf();
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = e;
            }
            if let Some(i) = instances_per_epoch {
                ctx.cfg.train.instances_per_epoch = i;
            }
            let ckpt = ctx.checkpoint("fine-tune", Some(&ctx.cfg.model))?;
            ctx.say("fine-tune: learning-rate schedule restarts at epoch 1");
            let quiet = ctx.common.quiet;
            let result = fine_tune(&ctx.cfg.train, ckpt, &ctx.cfg.model, freeze.into(), Some(&out), &mut |r| {
                if !quiet {
                    println!("{}", r.progress_line());
                }
            });
            finish_training(&ctx, &out, result)
        }
        Command::Solve {
            common,
            instance,
            k,
            augment,
            rounding,
        } => {
            let ctx = Ctx::new(common)?;
            let ckpt = ctx.checkpoint("solve", None)?;
            let ds = load_dataset(&instance)?;
            let (original, scaled) = (&ds.original[0], &ds.scaled[0]);
            let k = num_trajectories(k.unwrap_or(ctx.cfg.eval.max_trajectories), original.num_customers());
            if k == 0 {
                return Err(usage("solve", "--k must be positive"));
            }
            let t = solve(scaled, &ckpt.params, &ckpt.model, k, augment, None)
                .map_err(|e| rollout_failure("solve", e))?;
            let rounded = rounding.resolve(ds.from_cvrplib);
            let cost = if rounded {
                tour_cost_rounded(original, &t.nodes)
            } else {
                tour_cost(original, &t.nodes)
            }
            .map_err(|e| data("solve", e))?;
            let listing = format_routes(&t.nodes, cost);
            ctx.say(format!("K = {k}"));
            ctx.say(listing.trim_end());
            if let Some(out) = &ctx.common.out {
                write_atomic(out, listing.as_bytes()).map_err(|e| data("solve", e))?;
            }
            Ok(())
        }
        Command::Eval {
            common,
            data: path,
            bks,
            oracle,
            k,
            augment,
            rounding,
        } => {
            let ctx = Ctx::new(common)?;
            let ckpt = ctx.checkpoint("eval", None)?;
            let ds = load_dataset(&path)?;
            let rounded = rounding.resolve(ds.from_cvrplib);
            let refs = references(&ds, bks.as_deref(), oracle, rounded)?;
            let cfg = EvalConfig {
                max_trajectories: k.unwrap_or(ctx.cfg.eval.max_trajectories),
                augment,
                round_distances: false,
                ..ctx.cfg.eval.clone()
            };
            let mut report = evaluate(&ckpt.params, &ckpt.model, &ds.scaled, &cfg, &refs, &path.display().to_string())
                .map_err(|e| eval_failure("eval", e))?;
            report.meta.round_distances = rounded;
            rescore(&mut report, &ds.original, rounded)?;
            emit_report(&ctx, &report)
        }
        Command::ProbeExtension {
            common,
            data: path,
            size,
            count,
            deltas,
            oracle,
            k,
            augment,
        } => {
            let ctx = Ctx::new(common)?;
            let ckpt = ctx.checkpoint("probe-extension", None)?;
            let instances = match &path {
                Some(p) => {
                    let ds = load_dataset(p)?;
                    if ds.from_cvrplib {
                        return Err(usage("probe-extension", "expects unit-square instances (.ljson)"));
                    }
                    ds.original
                }
                None => generate_set(
                    &GenConfig::fixed(size, GenConfig::standard_capacity(size)).with_seed(ctx.cfg.eval.seed),
                    0,
                    count.unwrap_or(ctx.cfg.eval.count),
                )
                .map_err(|e| data("probe-extension", e))?,
            };
            let cfg = EvalConfig {
                max_trajectories: k.unwrap_or(ctx.cfg.eval.max_trajectories),
                augment,
                ..ctx.cfg.eval.clone()
            };
            let refs = if oracle { References::Oracle } else { References::None };
            let deltas = deltas.unwrap_or_else(|| ctx.cfg.eval.deltas.clone());
            let reports = extension_probe(
                &ckpt.params,
                &ckpt.model,
                &instances,
                &deltas,
                ctx.cfg.train.gen.demand_range(),
                &cfg,
                &refs,
                ctx.cfg.eval.seed,
            )
            .map_err(|e| eval_failure("probe-extension", e))?;
            for r in &reports {
                ctx.say(format!(
                    "delta={} mean_cost={:.6} mean_gap_pct={}",
                    r.meta.delta.unwrap_or(0.0),
                    r.mean_cost,
                    r.mean_gap_pct.map_or("-".into(), |g| format!("{g:.3}"))
                ));
            }
            if let Some(out) = &ctx.common.out {
                std::fs::create_dir_all(out).map_err(|e| data("probe-extension", e))?;
                for r in &reports {
                    let name = format!("delta-{}.jsonl", r.meta.delta.unwrap_or(0.0));
                    write_report(&out.join(name), r).map_err(|e| data("probe-extension", e))?;
                }
            }
            Ok(())
        }
        Command::Ablate {
            common,
            variants,
            oracle,
        } => {
            let ctx = Ctx::new(common)?;
            let base = &ctx.cfg.model;
            let variants = variants
                .iter()
                .map(|v| {
                    let m = ModelConfig::variant(v).map_err(|e| usage("ablate", e))?;
                    let m = ModelConfig {
                        d_h: base.d_h,
                        heads: base.heads,
                        layers: base.layers,
                        d_ff: base.d_ff,
                        logit_clip: base.logit_clip,
                        ..m
                    };
                    Ok((v.clone(), m))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            let held_out = ctx
                .cfg
                .eval
                .sizes
                .iter()
                .map(|&n| {
                    let gen = GenConfig::fixed(n, GenConfig::standard_capacity(n)).with_seed(ctx.cfg.eval.seed);
                    let instances = generate_set(&gen, 0, ctx.cfg.eval.count).map_err(|e| data("ablate", e))?;
                    let references = if oracle && n <= reld::evaluation::EXACT_LIMIT {
                        References::Oracle
                    } else {
                        References::None
                    };
                    Ok(HeldOut {
                        size: n,
                        instances,
                        references,
                    })
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            let quiet = ctx.common.quiet;
            let rows = ablation_suite(
                &variants,
                &ctx.cfg.train,
                &held_out,
                &ctx.cfg.eval,
                ctx.common.out.as_deref(),
                &mut |label, r| {
                    if !quiet {
                        println!("variant={label} {}", r.progress_line());
                    }
                },
            )
            .map_err(|e| eval_failure("ablate", e))?;
            let table = format_ablation_table(&rows);
            ctx.say(&table);
            if let Some(out) = &ctx.common.out {
                std::fs::create_dir_all(out).map_err(|e| data("ablate", e))?;
                write_atomic(&out.join("ablation.txt"), table.as_bytes()).map_err(|e| data("ablate", e))?;
                let json = serde_json::to_string_pretty(&rows).map_err(|e| data("ablate", e))?;
                write_atomic(&out.join("ablation.json"), json.as_bytes()).map_err(|e| data("ablate", e))?;
            }
            Ok(())
        }
        Command::GradCheck {
            common,
            dh,
            n,
            heads,
            layers,
            variant,
            step,
            tolerance,
        } => {
            let ctx = Ctx::new(common)?;
            let model = ModelConfig {
                d_h: dh,
                heads,
                layers,
                d_ff: 2 * dh,
                ..ModelConfig::variant(&variant).map_err(|e| usage("grad-check", e))?
            };
            model.validate().map_err(|e| usage("grad-check", e))?;
            let opts = GradCheckOptions {
                step,
                tolerance,
                seed: ctx.common.seed.unwrap_or(0),
                ..GradCheckOptions::default()
            };
            let report = policy_grad_check(&model, n, ctx.common.seed.unwrap_or(0), &opts)
                .map_err(|e| train_failure("grad-check", e))?;
            ctx.say(format!(
                "checked={} skipped_kinks={} max_rel_error={:.3e} worst={}",
                report.checked,
                report.skipped_kinks,
                report.max_rel_error,
                report.worst.as_ref().map_or("-".into(), |(n, i)| format!("{n}[{i}]"))
            ));
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Numeric(format!(
                    "grad-check: max relative error {:.3e} exceeds {tolerance:e}",
                    report.max_rel_error
                )))
            }
        }
        Command::Oracle {
            common,
            data: path,
            rounding,
        } => {
            let ctx = Ctx::new(common)?;
            let ds = load_dataset(&path)?;
            let rounded = rounding.resolve(ds.from_cvrplib);
            let mut lines = String::new();
            for (i, inst) in ds.original.iter().enumerate() {
                let t = exact_solve_with(inst, rounded).map_err(|e| data("oracle", e))?;
                let name = inst.name.clone().unwrap_or_else(|| format!("#{i}"));
                lines.push_str(&format!("{name} {}\n", t.cost));
            }
            ctx.say(lines.trim_end());
            if let Some(out) = &ctx.common.out {
                write_atomic(out, lines.as_bytes()).map_err(|e| data("oracle", e))?;
            }
            Ok(())
        }
        Command::Config { common } => {
            let ctx = Ctx::new(common)?;
            let out = ctx.out("config")?;
            write_config(out, &ctx.cfg).map_err(|e| data("config", e))?;
            ctx.say(format!("wrote {}", out.display()));
            Ok(())
        }
    }
}

fn finish_training(
    ctx: &Ctx,
    out: &Path,
    result: Result<reld::training::TrainReport, TrainError>,
) -> Result<(), Failure> {
    let (report, failure) = match result {
        Ok(r) => (r, None),
        Err(TrainError::Checkpoint {
            completed,
            source,
            report,
        }) => (
            *report,
            Some(data("checkpoint", format!("write failed after {completed} epochs: {source}"))),
        ),
        Err(e) => return Err(train_failure("train", e)),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| data("report", e))?;
    std::fs::create_dir_all(out).map_err(|e| data("report", e))?;
    write_atomic(&out.join("train_report.json"), json.as_bytes()).map_err(|e| data("report", e))?;
    if let Some(f) = failure {
        return Err(f);
    }
    if let Some(p) = &report.final_checkpoint {
        ctx.say(format!("checkpoint={}", p.display()));
    }
    Ok(())
}

fn threads_of(command: &Command) -> Option<usize> {
    match command {
        Command::Gen { common, .. }
        | Command::Train { common, .. }
        | Command::FineTune { common, .. }
        | Command::Solve { common, .. }
        | Command::Eval { common, .. }
        | Command::ProbeExtension { common, .. }
        | Command::Ablate { common, .. }
        | Command::GradCheck { common, .. }
        | Command::Oracle { common, .. }
        | Command::Config { common } => common.threads,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = setup_threads(threads_of(&cli.command)).and_then(|_| run(cli.command)) {
        eprintln!("error: {}", f.message());
        return ExitCode::from(f.code());
    }
    ExitCode::SUCCESS
}
