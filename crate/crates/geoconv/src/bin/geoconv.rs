//! Command-line front end: dataset generation, training, evaluation,
//! analytic verification, FLOP accounting, and the benchmark suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error,
//! 3 verification failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use geoconv::bench::{
    derive_seed, emit_greek_report, emit_report, format_f32, run_mass_centre_ablation, run_positional_bias_sweep,
    AblationConfig, GreekConfig, ALL_VARIANTS,
};
use geoconv::datasets::{gen_greek_numerals, gen_mass_centre, load_dataset, save_dataset, GlyphMetrics, GreekSplit, Task};
use geoconv::error::GeoError;
use geoconv::geopos::{Axis, GeoChannelSpec};
use geoconv::layers::{count_flops, LayerSpec};
use geoconv::model::{
    build_model, evaluate, load_model, save_model, train, FilterPlan, Head, ModelSpec, TrainConfig,
};
use geoconv::nn::{Activation, OptimizerConfig};
use geoconv::verify::{solve_equivalence, verify_filter_collapse, verify_shift_identity};
use geoconv::{ConvGeometry, LayerVariant, Tensor};

const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_VERIFY: i32 = 3;

#[derive(Parser)]
#[command(name = "geoconv", version, about = "Convolution variants with positional channels: data, training, verification, benchmarks")]
struct Cli {
    /// Root seed; all randomness in a run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for benchmark runs (1 keeps output byte-stable by construction; any value is deterministic).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Directory for machine-readable artifacts (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset and write it as a GPDS file.
    GenData(GenDataArgs),
    /// Train one model on a GPDS dataset.
    Train(TrainArgs),
    /// Evaluate a saved model on a GPDS dataset.
    Eval(EvalArgs),
    /// Run the analytic identity checks and print a residual table.
    Verify(VerifyArgs),
    /// FLOP and parameter accounting for one layer geometry, all variants.
    Flops(FlopsArgs),
    /// Run a full benchmark suite and emit CSV reports.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// mass-centre or greek
    #[arg(long)]
    task: String,
    /// Sample count (ignored by --split exhaustive).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Canvas side length.
    #[arg(long)]
    size: Option<usize>,
    /// White-pixel probability (mass-centre only).
    #[arg(long, default_value_t = 0.1)]
    density: f32,
    /// Max absolute glyph offset per axis (greek, shifted split).
    #[arg(long, default_value_t = 4)]
    spread: usize,
    /// shifted or exhaustive (greek only).
    #[arg(long, default_value = "shifted")]
    split: String,
    /// Output file name inside --out.
    #[arg(long, default_value = "data.gpds")]
    name: String,
}

#[derive(Args)]
struct TrainArgs {
    /// GPDS dataset to train on.
    #[arg(long)]
    data: PathBuf,
    /// conv, coordconv, or geoconv
    #[arg(long, default_value = "geoconv")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Filters per layer; ignored with --doubling.
    #[arg(long, default_value_t = 1)]
    filters: usize,
    /// Layer n gets 2^(n-1) filters.
    #[arg(long, default_value_t = false)]
    doubling: bool,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// GPDS dataset to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random trials per check.
    #[arg(long, default_value_t = 50)]
    seeds: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    cin: usize,
    #[arg(long)]
    cout: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    p: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// mass-centre or greek
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 10_000)]
    train_samples: usize,
    #[arg(long, default_value_t = 2_000)]
    test_samples: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Number of model seeds averaged per grid cell.
    #[arg(long, default_value_t = 3)]
    model_seeds: usize,
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: Vec<String>,
    tool_version: String,
    seed: u64,
    jobs: usize,
    config: serde_json::Value,
    /// sha256 of every dataset file read or written.
    dataset_hashes: BTreeMap<String, String>,
    wall_clock_seconds: f64,
}

struct RunContext {
    out: PathBuf,
    seed: u64,
    jobs: usize,
    started: Instant,
    hashes: BTreeMap<String, String>,
}

impl RunContext {
    fn hash_file(&mut self, path: &Path) -> geoconv::Result<()> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        self.hashes.insert(path.display().to_string(), format!("{digest:x}"));
        Ok(())
    }

    fn finish(&mut self, config: serde_json::Value) -> geoconv::Result<()> {
        let manifest = RunManifest {
            command: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            jobs: self.jobs,
            config,
            dataset_hashes: std::mem::take(&mut self.hashes),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| GeoError::Internal(e.to_string()))?;
        std::fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(EXIT_DATA);
        }
    }
}

fn run(cli: Cli) -> geoconv::Result<i32> {
    if cli.jobs == 0 {
        return Err(GeoError::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| GeoError::Internal(e.to_string()))?;
    std::fs::create_dir_all(&cli.out)?;
    let mut ctx = RunContext {
        out: cli.out.clone(),
        seed: cli.seed,
        jobs: cli.jobs,
        started: Instant::now(),
        hashes: BTreeMap::new(),
    };
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&mut ctx, &args),
        Command::Train(args) => cmd_train(&mut ctx, &args),
        Command::Eval(args) => cmd_eval(&mut ctx, &args),
        Command::Verify(args) => cmd_verify(&mut ctx, &args),
        Command::Flops(args) => cmd_flops(&mut ctx, &args),
        Command::Bench(args) => cmd_bench(&mut ctx, &args),
    }
}

fn cmd_gen_data(ctx: &mut RunContext, args: &GenDataArgs) -> geoconv::Result<i32> {
    let ds = match args.task.as_str() {
        "mass-centre" => {
            let size = args.size.unwrap_or(32);
            gen_mass_centre(args.n, size, args.density, ctx.seed)?
        }
        "greek" => {
            let size = args.size.unwrap_or(64);
            let split = match args.split.as_str() {
                "shifted" => GreekSplit::Shifted { spread: args.spread },
                "exhaustive" => GreekSplit::Exhaustive,
                other => return Err(GeoError::Config(format!("unknown split '{other}' (shifted or exhaustive)"))),
            };
            gen_greek_numerals(args.n, size, split, &GlyphMetrics::default(), ctx.seed)?
        }
        other => return Err(GeoError::Config(format!("unknown task '{other}' (mass-centre or greek)"))),
    };
    let path = ctx.out.join(&args.name);
    save_dataset(&ds, &path)?;
    ctx.hash_file(&path)?;
    let (h, w) = ds.image_hw();
    println!("task {:?}: {} samples of {h}x{w}, labels dim {} -> {}", ds.meta.task, ds.len(), ds.label_dim(), path.display());
    let config = serde_json::json!({
        "task": args.task, "n": args.n, "size": args.size, "density": args.density,
        "spread": args.spread, "split": args.split, "samples_written": ds.len(),
    });
    ctx.finish(config)?;
    Ok(0)
}

fn parse_variant(name: &str) -> geoconv::Result<LayerVariant> {
    LayerVariant::from_name(name)
}

fn cmd_train(ctx: &mut RunContext, args: &TrainArgs) -> geoconv::Result<i32> {
    let ds = load_dataset(&args.data)?;
    ctx.hash_file(&args.data)?;
    let head = match ds.meta.task {
        Task::MassCentre => Head::Centroid,
        Task::Greek => Head::Classifier(3),
    };
    let spec = ModelSpec {
        variant: parse_variant(&args.variant)?,
        n_layers: args.layers,
        filters: if args.doubling { FilterPlan::Doubling } else { FilterPlan::Constant(args.filters) },
        head,
        input_size: ds.image_hw().0,
    };
    let mut model = build_model(&spec, derive_seed(ctx.seed, &[1]))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: OptimizerConfig::adam(args.lr),
        seed: derive_seed(ctx.seed, &[2]),
    };
    let history = train(&mut model, &ds, &cfg)?;

    let model_path = ctx.out.join("model.bin");
    save_model(&model, &model_path)?;
    let mut csv = String::from("epoch,loss\n");
    println!("epoch  train loss");
    for (i, l) in history.iter().enumerate() {
        println!("{i:>5}  {l:.6}");
        csv.push_str(&format!("{i},{}\n", format_f32(*l)));
    }
    std::fs::write(ctx.out.join("history.csv"), csv)?;
    println!("model: {} params, {} conv FLOPs/sample -> {}", model.total_params(), model.total_flops(), model_path.display());
    let config = serde_json::json!({ "spec": spec, "train": cfg, "final_loss": history.last() });
    ctx.finish(config)?;
    Ok(0)
}

fn cmd_eval(ctx: &mut RunContext, args: &EvalArgs) -> geoconv::Result<i32> {
    let model = load_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    ctx.hash_file(&args.data)?;
    let metrics = evaluate(&model, &ds)?;
    match metrics.accuracy {
        Some(acc) => println!("mean loss {:.6}, accuracy {:.2}%", metrics.mean_loss, 100.0 * acc),
        None => println!("mean loss {:.6}", metrics.mean_loss),
    }
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| GeoError::Internal(e.to_string()))?;
    std::fs::write(ctx.out.join("metrics.json"), text)?;
    ctx.finish(serde_json::json!({ "model": args.model.display().to_string(), "metrics": metrics }))?;
    Ok(0)
}

fn cmd_verify(ctx: &mut RunContext, args: &VerifyArgs) -> geoconv::Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let trials = args.seeds.max(1);

    // Filter collapse: random 2-D filters against both axes of a coordinate
    // channel; exact up to f32 noise.
    let mut collapse_max = 0.0f32;
    for _ in 0..trials {
        let k = [2usize, 3, 5][rng.gen_range(0..3)];
        let f = Tensor::new(&[k, k], (0..k * k).map(|_| rng.gen_range(-1.0..1.0f32)).collect())?;
        let spec = GeoChannelSpec::normalized(12, 12);
        for axis in [Axis::Row, Axis::Col] {
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            collapse_max = collapse_max.max(verify_filter_collapse(&f, &spec, axis, stride, padding)?);
        }
    }

    // Shift identity: geoconv output offset under a fixed shift equals
    // r times the summed positional-plane filter.
    let mut shift_max = 0.0f32;
    for _ in 0..trials {
        let geom = ConvGeometry { kernel_h: 3, kernel_w: 3, stride: 1, padding: 0, in_channels: 1, out_channels: 2 };
        let filters = Tensor::new(&[3, 3, 2, 2], (0..36).map(|_| rng.gen_range(-1.0..1.0f32)).collect())?;
        let input = Tensor::new(&[8, 8, 1], (0..64).map(|_| rng.gen_range(-1.0..1.0f32)).collect())?;
        for r in [-1.0f32, -0.3, 0.0, 0.7, 1.0] {
            shift_max = shift_max.max(verify_shift_identity(&filters, &input, r, &geom)?);
        }
    }

    // Positional-response equivalence: least-squares fit of a single-plane
    // filter to a two-plane coordinate response, random pairs and
    // equal-column-sum pairs.
    let geom5 = ConvGeometry { kernel_h: 5, kernel_w: 5, stride: 1, padding: 0, in_channels: 1, out_channels: 1 };
    let mut equiv_random_max = 0.0f32;
    let mut equiv_matched_max = 0.0f32;
    for _ in 0..trials {
        let mut pair = Tensor::new(&[5, 5, 2], (0..50).map(|_| rng.gen_range(-1.0..1.0f32)).collect())?;
        equiv_random_max = equiv_random_max.max(solve_equivalence(&pair, &geom5, 16)?.residual);
        // Rescale the second filter so both planes have the same total.
        let s0: f32 = (0..25).map(|i| pair.data()[2 * i]).sum();
        let s1: f32 = (0..25).map(|i| pair.data()[2 * i + 1]).sum();
        if s1.abs() > 1e-3 {
            let scale = s0 / s1;
            for i in 0..25 {
                let v = pair.data()[2 * i + 1] * scale;
                pair.data_mut()[2 * i + 1] = v;
            }
            equiv_matched_max = equiv_matched_max.max(solve_equivalence(&pair, &geom5, 16)?.residual);
        }
    }

    let rows = [
        ("filter collapse (k in {2,3,5})", collapse_max, Some(1e-6f32)),
        ("shift identity (3x3)", shift_max, Some(1e-5)),
        ("equivalence, equal-sum pairs (5x5)", equiv_matched_max, Some(1e-4)),
        ("equivalence, random pairs (5x5)", equiv_random_max, Some(1e-4)),
    ];
    println!("{:<38} {:>14} {:>12} {:>6}", "check", "max residual", "tolerance", "pass");
    let mut all_pass = true;
    let mut report = Vec::new();
    for (name, residual, tol) in rows {
        let pass = tol.map(|t| residual < t);
        if pass == Some(false) {
            all_pass = false;
        }
        let pass_str = match pass {
            Some(true) => "yes",
            Some(false) => "NO",
            None => "-",
        };
        let tol_str = tol.map(|t| format!("{t:.0e}")).unwrap_or_else(|| "-".into());
        println!("{name:<38} {:>14} {tol_str:>12} {pass_str:>6}", format_f32(residual));
        report.push(serde_json::json!({ "check": name, "residual": residual, "tolerance": tol, "pass": pass }));
    }
    std::fs::write(
        ctx.out.join("residuals.json"),
        serde_json::to_string_pretty(&report).map_err(|e| GeoError::Internal(e.to_string()))?,
    )?;
    ctx.finish(serde_json::json!({ "trials": trials, "all_pass": all_pass }))?;
    if all_pass {
        Ok(0)
    } else {
        eprintln!("verification failed: at least one residual exceeds its tolerance");
        Ok(EXIT_VERIFY)
    }
}

fn cmd_flops(ctx: &mut RunContext, args: &FlopsArgs) -> geoconv::Result<i32> {
    let mut rows = Vec::new();
    println!("{:<10} {:>12} {:>10} {:>9}", "variant", "flops", "params", "out hw");
    for variant in ALL_VARIANTS {
        let geom = ConvGeometry {
            kernel_h: args.k,
            kernel_w: args.k,
            stride: args.s,
            padding: args.p,
            in_channels: args.cin,
            out_channels: args.cout,
        };
        let spec = LayerSpec::new(variant, geom, Activation::None);
        let r = count_flops(&spec, (args.h, args.w))?;
        println!("{:<10} {:>12} {:>10} {:>4}x{}", variant.name(), r.flops, r.params, r.h_out, r.w_out);
        rows.push(serde_json::json!({ "variant": variant.name(), "report": r }));
    }
    std::fs::write(
        ctx.out.join("flops.json"),
        serde_json::to_string_pretty(&rows).map_err(|e| GeoError::Internal(e.to_string()))?,
    )?;
    ctx.finish(serde_json::json!({
        "h": args.h, "w": args.w, "cin": args.cin, "cout": args.cout,
        "k": args.k, "s": args.s, "p": args.p,
    }))?;
    Ok(0)
}

fn cmd_bench(ctx: &mut RunContext, args: &BenchArgs) -> geoconv::Result<i32> {
    let seeds: Vec<u64> = (0..args.model_seeds as u64).collect();
    match args.suite.as_str() {
        "mass-centre" => {
            let cfg = AblationConfig {
                seeds,
                train_samples: args.train_samples,
                test_samples: args.test_samples,
                epochs: args.epochs,
                batch_size: args.batch_size,
                optimizer: OptimizerConfig::adam(args.lr),
                data_seed: ctx.seed,
                ..AblationConfig::default()
            };
            println!("running {} training jobs on {} thread(s)...", cfg.job_count(), ctx.jobs);
            let report = run_mass_centre_ablation(&cfg)?;
            emit_report(&report, &ctx.out)?;
            println!("{:<10} {:>12} {:>14} {:>6}", "variant", "avg loss", "norm avg", "best");
            for a in &report.aggregates {
                println!("{:<10} {:>12.4} {:>14.6} {:>6}", a.variant.name(), a.avg_loss, a.norm_avg_loss, a.best_count);
            }
            ctx.finish(serde_json::json!({ "suite": "mass-centre", "config": cfg }))?;
        }
        "greek" => {
            let cfg = GreekConfig {
                seeds,
                train_samples: args.train_samples,
                epochs: args.epochs,
                batch_size: args.batch_size,
                optimizer: OptimizerConfig::adam(args.lr),
                data_seed: ctx.seed,
                ..GreekConfig::default()
            };
            let report = run_positional_bias_sweep(&cfg)?;
            emit_greek_report(&report, &ctx.out)?;
            println!("exhaustive test set: {} samples", report.test_samples);
            println!("{:<10} {:>10} {:>10}", "variant", "avg loss", "avg acc");
            for a in &report.aggregates {
                println!("{:<10} {:>10.4} {:>9.2}%", a.variant.name(), a.avg_loss, 100.0 * a.avg_accuracy);
            }
            ctx.finish(serde_json::json!({ "suite": "greek", "config": cfg }))?;
        }
        other => return Err(GeoError::Config(format!("unknown suite '{other}' (mass-centre or greek)"))),
    }
    Ok(0)
}
