//! `mygo`: synthesize phantoms, train, evaluate, run the ablation table and
//! check gradients.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mygo::data::{make_split, pgm, Dataset, PhantomSpec, SplitConfig};
use mygo::network::load_checkpoint;
use mygo::training::{
    ablation_csv, evaluate, log_csv, predict_lesion, run_ablation, train, TrainConfig, ABLATION_ROWS,
};
use mygo::Error;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "mygo", version, about = "KAN segmentation with pixel anchors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom images, masks and a manifest.
    Synth {
        /// Phantom spec (TOML); defaults apply to omitted keys.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        /// Overrides the seed given in `--spec`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes log.csv and the best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes per-image metrics and predicted masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; predicted masks go to `pred/` next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test the six ablation configurations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        #[arg(long, default_value_t = 1e-4)]
        rtol: f64,
        /// Seed count for `ops`, sampling seed for `model`.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

/// Failure with its exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::NanLoss { .. } | Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Fail { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail { code: 2, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 1, msg: msg.into() }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `header.txt` with what is needed to reproduce the directory.
fn write_header(dir: &Path, command: &str, config_hash: &str, seed: Option<u64>) -> Result<(), Fail> {
    fs::create_dir_all(dir)?;
    let seed = seed.map_or_else(|| "-".to_string(), |s| s.to_string());
    let text = format!(
        "tool mygo {}\ncommand {command}\nconfig_hash {config_hash}\nseed {seed}\n",
        env!("CARGO_PKG_VERSION")
    );
    fs::write(dir.join("header.txt"), text)?;
    Ok(())
}

const CONFIG_HINT: &str = "pass --config <file.toml>; every key is optional, defaults:";

fn read_train_config(path: Option<&Path>) -> Result<TrainConfig, Fail> {
    let hint = || {
        format!(
            "{CONFIG_HINT}\n\n{}",
            toml::to_string(&TrainConfig::default()).expect("config serializes")
        )
    };
    let path = path.ok_or_else(|| usage(format!("missing --config\n{}", hint())))?;
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}\n{}", path.display(), hint())))?;
    let cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}\n{}", path.display(), hint())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(toml::to_string(cfg).expect("config serializes").as_bytes())
}

fn synth(spec: &Path, out: &Path, count: usize, seed: Option<u64>) -> Result<(), Fail> {
    let text = fs::read_to_string(spec).map_err(|e| usage(format!("cannot read spec {}: {e}", spec.display())))?;
    let mut spec: PhantomSpec = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let samples = mygo::data::generate(&spec, count)?;
    let split_cfg = SplitConfig {
        seed: spec.seed,
        ..SplitConfig::default()
    };
    let groups = match make_split(count, &split_cfg) {
        Ok(split) => split.group_of(count),
        Err(_) => {
            // too few or too many for the standard grouping: even contiguous groups
            let g = split_cfg.n_groups.min(count);
            (0..count).map(|i| i * g / count).collect()
        }
    };
    let ds = Dataset { samples, groups };
    let manifest = ds.save(out)?;
    let spec_text = toml::to_string(&spec).expect("spec serializes");
    fs::write(out.join("spec.toml"), &spec_text)?;
    write_header(out, "synth", &sha256_hex(spec_text.as_bytes()), Some(spec.seed))?;
    println!("wrote {count} samples, manifest {}", manifest.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, Fail> {
    let ds = Dataset::load(path)?;
    if ds.is_empty() {
        return Err(Fail {
            code: 2,
            msg: format!("{}: no samples", path.display()),
        });
    }
    Ok(ds)
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), Fail> {
    let cfg = read_train_config(config)?;
    let ds = load_data(data)?;
    let (tr, val) = ds.split_by_group(cfg.train_groups);
    let outcome = train(&tr.samples, &val.samples, &cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("log.csv"), log_csv(&outcome.log))?;
    fs::write(out.join("config.toml"), toml::to_string(&cfg).expect("config serializes"))?;
    let ck = out.join("checkpoint");
    mygo::network::save_checkpoint(&ck, &outcome.model, &outcome.best_params, &cfg.run_description())?;
    write_header(out, "train", &config_hash(&cfg), Some(cfg.seed))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "trained {} epochs on {} images; best epoch {} val IoU {:.2} Dice {:.2}",
        cfg.epochs,
        tr.len(),
        best.epoch,
        best.val_iou,
        best.val_dice
    );
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Fail> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let pred_dir = dir.join("pred");
    fs::create_dir_all(&pred_dir)?;
    for s in &ds.samples {
        let pred = predict_lesion(&ck.model, &ck.params, s)?;
        pgm::write_mask(&pred_dir.join(format!("{}.pgm", s.id)), &pred)?;
    }
    let table = evaluate(&ck.model, &ck.params, &ds.samples)?;
    fs::write(out, table.to_csv())?;
    write_header(dir, "eval", &ck.config_hash, None)?;
    let m = table.mean().expect("nonempty dataset");
    println!("{} images: IoU {:.2} Dice {:.2} specificity {:.2}", ds.len(), m.iou, m.dice, m.specificity);
    Ok(())
}

fn ablate_cmd(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), Fail> {
    let cfg = read_train_config(config)?;
    let ds = load_data(data)?;
    let (tr, te) = ds.split_by_group(cfg.train_groups);
    if te.is_empty() {
        return Err(Fail {
            code: 2,
            msg: format!("no test groups: every group id is among the first {}", cfg.train_groups),
        });
    }
    fs::create_dir_all(out)?;
    let results = run_ablation(&tr.samples, &te.samples, &ABLATION_ROWS, &cfg, Some(out))?;
    let csv = ablation_csv(&results);
    fs::write(out.join("ablation.csv"), &csv)?;
    write_header(out, "ablate", &config_hash(&cfg), Some(cfg.seed))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck_cmd(scope: Scope, rtol: f64, seed: u64) -> Result<(), Fail> {
    if !(rtol > 0.0) {
        return Err(usage("--rtol must be positive"));
    }
    let mut failed = 0;
    let mut show = |name: &str, r: &mygo::tensor::GradcheckReport| {
        println!("{} {name}: {r}", if r.passed() { "ok  " } else { "FAIL" });
        if !r.passed() {
            failed += 1;
            let mut worst = r.failures.clone();
            worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
            for e in worst.iter().take(5) {
                println!(
                    "      input {} [{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                    e.input, e.index, e.analytic, e.numeric, e.rel_error
                );
            }
        }
    };
    match scope {
        Scope::Ops => {
            for s in 0..seed.max(1) {
                for (name, r) in mygo::checks::ops_gradchecks(rtol, s)? {
                    show(&format!("{name} (seed {s})"), &r);
                }
            }
        }
        Scope::Model => show("model", &mygo::checks::model_gradcheck(rtol, 60, seed)?),
    }
    if failed > 0 {
        return Err(Fail {
            code: 3,
            msg: format!("{failed} gradient check(s) failed"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Synth { spec, out, count, seed } => synth(&spec, &out, count as usize, seed),
        Command::Train { config, data, out } => train_cmd(config.as_deref(), &data, &out),
        Command::Eval { checkpoint, data, out } => eval_cmd(&checkpoint, &data, &out),
        Command::Ablate { config, data, out } => ablate_cmd(config.as_deref(), &data, &out),
        Command::Gradcheck { scope, rtol, seed } => gradcheck_cmd(scope, rtol, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
