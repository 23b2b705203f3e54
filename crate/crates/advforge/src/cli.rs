//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage/config problems, 2 on runtime
//! failures.

use crate::attack::{craft_dataset, dataset_mssim, AttackConfig, Crafting};
use crate::config::{CraftTarget, ExperimentConfig, Structure};
use crate::data::{load_mnist_idx, save_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::report::{curves_from_csv, emit_report, ReportMeta};
use crate::harness::{evaluate_robustness, CraftModel, EvalTarget, RobustnessCurve};
use crate::nn::estimate_cost;
use crate::select::{
    brute_force_select, build_accuracy_matrix, random_walk_select, AccuracyMatrix,
    RandomWalkConfig,
};
use crate::train::{
    evaluate_accuracy, evaluate_ensemble_accuracy, fit_udu_weights, train_mixed_mat,
    train_parallel_mat, train_plain, train_single_strength, Ensemble, TrainConfig,
};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "advforge",
    version,
    about = "Adversarial training with multiple attack strengths"
)]
struct Cli {
    /// Experiment config file (INI)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory with the MNIST IDX files (or set ADVFORGE_DATA)
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "advforge-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model (or model ensemble) and save checkpoints
    Train,
    /// Craft an adversarial copy of a dataset with a saved model
    Craft,
    /// Evaluate saved models over an attack-strength grid
    Sweep {
        /// Checkpoint files or ensemble directories
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// Pick a training strength subset by penalized random walk
    Select {
        /// Also run the exhaustive oracle and compare
        #[arg(long)]
        oracle: bool,
        /// Reuse a previously written accuracy matrix CSV
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Re-render a robustness CSV into CSV + SVG
    Report {
        /// Curves CSV produced by `sweep`
        curves: PathBuf,
    },
    /// Print the per-example inference cost of the configured model
    Cost,
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::from_file(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: config {}: {e}", path.display());
                return 1;
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match dispatch(&cli, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    match &cli.cmd {
        Cmd::Train => cmd_train(cli, cfg),
        Cmd::Craft => cmd_craft(cli, cfg),
        Cmd::Sweep { models } => cmd_sweep(cli, cfg, models),
        Cmd::Select { oracle, matrix } => cmd_select(cli, cfg, *oracle, matrix.as_deref()),
        Cmd::Report { curves } => cmd_report(cli, curves),
        Cmd::Cost => cmd_cost(cfg),
    }
}

fn data_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(dir) = &cli.data_dir {
        return Ok(dir.clone());
    }
    if let Ok(dir) = std::env::var("ADVFORGE_DATA") {
        return Ok(PathBuf::from(dir));
    }
    Err(Error::InvalidArg(
        "no data directory: pass --data-dir or set ADVFORGE_DATA".into(),
    ))
}

fn load_split(dir: &Path, train: bool) -> Result<LabeledDataset> {
    let (images, labels) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    };
    load_mnist_idx(&dir.join(images), &dir.join(labels))
}

fn limited(ds: LabeledDataset, limit: usize, seed: u64) -> Result<LabeledDataset> {
    if limit == 0 || limit >= ds.len() {
        return Ok(ds);
    }
    let name = format!("{}[{limit}]", ds.name);
    ds.subsample(limit, seed, name)
}

fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(cfg.victim_spec()?);
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.seed = cfg.seed;
    tc.static_crafting = cfg.static_crafting;
    Ok(tc)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_train(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let tc = train_config(cfg)?;
    let clean = limited(load_split(&data_dir(cli)?, true)?, cfg.train_limit, cfg.seed)?;
    ensure_out(&cli.out)?;

    if cfg.structure == Structure::Parallel {
        // hold out 10% of the training data to fit the vote weights
        let shuffled = clean.shuffled(cfg.seed)?;
        let n_val = (shuffled.len() / 10).max(1);
        let n_train = shuffled.len().saturating_sub(n_val);
        if n_train == 0 {
            return Err(Error::Dataset(
                "training set too small to hold out vote-fitting data".into(),
            ));
        }
        let fit_train = shuffled.head(n_train, format!("{}/fit", shuffled.name))?;
        let val_idx: Vec<usize> = (n_train..shuffled.len()).collect();
        let fit_val = shuffled.take(&val_idx, format!("{}/votes", shuffled.name))?;
        let ens = train_parallel_mat(&tc, &fit_train, &cfg.strengths, &tc.victim)?;
        let ens = fit_udu_weights(&ens, &fit_val)?;
        save_ensemble(&ens, &cli.out)?;
        let acc = evaluate_ensemble_accuracy(&ens, &fit_val)?;
        println!("structure parallel copies {}", ens.copies.len());
        println!("votes {:?}", ens.votes);
        println!("val_accuracy {acc:.4}");
        println!("saved {}", cli.out.display());
        return Ok(());
    }

    let net = match cfg.structure {
        Structure::Plain => train_plain(&tc, &clean)?,
        Structure::Single => train_single_strength(&tc, &clean, cfg.train_epsilon)?,
        Structure::Mixed => train_mixed_mat(&tc, &clean, &cfg.strengths, cfg.size_mode)?,
        Structure::Parallel => unreachable!(),
    };
    let path = cli.out.join("model.ckpt");
    save_checkpoint(&net, &path)?;
    let acc = evaluate_accuracy(&net, &clean)?;
    println!("structure {}", cfg.structure);
    println!("model {}", net.identity());
    println!("train_accuracy {acc:.4}");
    println!("saved {}", path.display());
    Ok(())
}

fn save_ensemble(ens: &Ensemble, dir: &Path) -> Result<()> {
    ensure_out(dir)?;
    let mut manifest = String::from("strength,vote,file\n");
    for (k, copy) in ens.copies.iter().enumerate() {
        let file = format!("copy_{}.ckpt", k + 1);
        save_checkpoint(copy, &dir.join(&file))?;
        manifest.push_str(&format!("{},{},{file}\n", ens.strengths[k], ens.votes[k]));
    }
    let path = dir.join("ensemble.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let path = dir.join("ensemble.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("strength,vote,file") => {}
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: expected header strength,vote,file",
                path.display()
            )))
        }
    }
    let mut strengths = Vec::new();
    let mut votes = Vec::new();
    let mut copies = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split(',');
        let (s, v, f) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
            (Some(s), Some(v), Some(f), None) => (s, v, f),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{}: malformed row '{line}'",
                    path.display()
                )))
            }
        };
        let parse = |x: &str| -> Result<f64> {
            x.parse()
                .map_err(|_| Error::Checkpoint(format!("{}: bad number '{x}'", path.display())))
        };
        strengths.push(parse(s)?);
        votes.push(parse(v)?);
        copies.push(load_checkpoint(&dir.join(f))?);
    }
    let ens = Ensemble {
        copies,
        votes,
        strengths,
    };
    ens.validate()?;
    Ok(ens)
}

fn image_side(ds: &LabeledDataset) -> Result<usize> {
    let w = ds.examples.row_len();
    let side = (w as f64).sqrt().round() as usize;
    if side * side != w {
        return Err(Error::Dataset(format!(
            "examples of width {w} are not square images"
        )));
    }
    Ok(side)
}

fn cmd_craft(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let model = match &cfg.crafting {
        Crafting::Substitute(path) => load_checkpoint(Path::new(path))?,
        Crafting::SelfModel => {
            return Err(Error::InvalidArg(
                "craft needs a saved model: set [attack] crafting = substitute:<checkpoint>"
                    .into(),
            ))
        }
    };
    let dir = data_dir(cli)?;
    let (ds, limit) = match cfg.craft_target {
        CraftTarget::Train => (load_split(&dir, true)?, cfg.train_limit),
        CraftTarget::Test => (load_split(&dir, false)?, cfg.test_limit),
    };
    let ds = limited(ds, limit, cfg.seed)?;
    let mut attack = AttackConfig::new(cfg.attack_epsilon);
    attack.clamp_lo = cfg.clamp_lo;
    attack.clamp_hi = cfg.clamp_hi;
    attack.crafting = cfg.crafting.clone();
    let crafted = craft_dataset(&model, &ds, &attack)?;
    let side = image_side(&ds)?;
    ensure_out(&cli.out)?;
    let images = cli.out.join("crafted-images-idx3-ubyte");
    let labels = cli.out.join("crafted-labels-idx1-ubyte");
    save_idx(&crafted, &images, &labels, side, side)?;
    let sim = dataset_mssim(&ds, &crafted)?;
    println!("crafted {} examples at epsilon {}", crafted.len(), cfg.attack_epsilon);
    println!("mssim {sim:.4}");
    println!("saved {}", images.display());
    println!("saved {}", labels.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli, cfg: &ExperimentConfig, models: &[PathBuf]) -> Result<()> {
    let test = limited(load_split(&data_dir(cli)?, false)?, cfg.test_limit, cfg.seed)?;
    let substitute = match &cfg.crafting {
        Crafting::Substitute(path) => Some(load_checkpoint(Path::new(path))?),
        Crafting::SelfModel => None,
    };
    let digest = cfg.digest();
    let mut curves: Vec<RobustnessCurve> = Vec::new();
    for path in models {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let craft = match &substitute {
            Some(net) => CraftModel::Substitute(net),
            None => CraftModel::WhiteBox,
        };
        let curve = if path.is_dir() {
            let ens = load_ensemble(path)?;
            evaluate_robustness(
                &EvalTarget::Ensemble(&ens),
                &test,
                &cfg.report_grid,
                &craft,
                &id,
                &digest,
            )?
        } else {
            let net = load_checkpoint(path)?;
            evaluate_robustness(
                &EvalTarget::Single(&net),
                &test,
                &cfg.report_grid,
                &craft,
                &id,
                &digest,
            )?
        };
        println!("{id} average {:.4}", curve.average);
        curves.push(curve);
    }
    ensure_out(&cli.out)?;
    let mut meta = ReportMeta::default();
    meta.push("seed", cfg.seed);
    meta.push("test_examples", test.len());
    let (csv, svg) = emit_report(&curves, &cli.out, &meta)?;
    println!("saved {}", csv.display());
    println!("saved {}", svg.display());
    Ok(())
}

fn cmd_select(
    cli: &Cli,
    cfg: &ExperimentConfig,
    oracle: bool,
    matrix: Option<&Path>,
) -> Result<()> {
    let a = match matrix {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            AccuracyMatrix::from_csv(&text)?
        }
        None => {
            let clean = limited(load_split(&data_dir(cli)?, true)?, cfg.train_limit, cfg.seed)?;
            let tc = train_config(cfg)?;
            let a = build_accuracy_matrix(&tc, &clean, &cfg.candidates, &cfg.select_attack_grid)?;
            ensure_out(&cli.out)?;
            let path = cli.out.join("matrix.csv");
            std::fs::write(&path, a.to_csv()).map_err(|e| Error::io(&path, e))?;
            println!("saved {}", path.display());
            a
        }
    };
    let wc = RandomWalkConfig {
        steps: cfg.walk_steps,
        walks: cfg.walk_count,
        penalty: cfg.penalty,
        seed: cfg.seed,
        mode: cfg.select_mode,
    };
    let walk = random_walk_select(&a, &wc)?;
    println!(
        "walk   chosen {:?} score {:.6} estimate {:.6} walks {}",
        walk.chosen, walk.score, walk.estimate, walk.walks_evaluated
    );
    if oracle {
        let exact = brute_force_select(&a, cfg.penalty, cfg.select_mode)?;
        println!(
            "oracle chosen {:?} score {:.6} estimate {:.6}",
            exact.chosen, exact.score, exact.estimate
        );
        println!("agreement {}", walk.chosen == exact.chosen);
    }
    Ok(())
}

fn cmd_report(cli: &Cli, curves_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(curves_path).map_err(|e| Error::io(curves_path, e))?;
    let (curves, meta_lines) = curves_from_csv(&text)?;
    let meta = ReportMeta { lines: meta_lines };
    ensure_out(&cli.out)?;
    let (csv, svg) = emit_report(&curves, &cli.out, &meta)?;
    println!("saved {}", csv.display());
    println!("saved {}", svg.display());
    Ok(())
}

fn with_commas(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_cost(cfg: &ExperimentConfig) -> Result<()> {
    let report = estimate_cost(&cfg.victim_spec()?)?;
    println!("macc_ops {}", with_commas(report.macc_ops));
    println!("param_count {}", with_commas(report.param_count));
    Ok(())
}
