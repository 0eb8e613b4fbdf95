//! Command-line front end. Exit codes: 0 success, 1 failed check, 2 usage
//! or configuration error, 3 numerical failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablation_variants, run_ablation, write_ablation_csv, AblationSetup};
use crate::config::{parse_override, RunConfig};
use crate::data::{generate_dataset, list_pairs, read_pair, write_manifest, write_pair, ScenePair64};
use crate::error::{Error, Result};
use crate::gradcheck::{format_table, run_suite, GRADCHECK_TOLERANCE};
use crate::metrics::{evaluate, evaluate_network, MetricReport, Projection, EVAL_ORDER_SEED, METRIC_CSV_HEADER};
use crate::network::Network;
use crate::optim::ParamStore;
use crate::points::PointCloud;
use crate::training::{train, MaskMode, TrainOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sceneflow", version, about = "Train and evaluate a coarse-to-fine scene flow network")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets every seed (network, training, data)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Configuration override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scene pairs and a manifest
    GenData {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes checkpoints, loss.csv and config.txt
    Train {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from this checkpoint (parameters and optimizer state)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or stored predictions, against ground truth
    Eval {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of prediction files written by `infer`
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
    },
    /// Predict flow; writes one pair file per input with the prediction as flow
    Infer {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every layer
    Gradcheck {
        #[command(flatten)]
        g: Global,
    },
    /// Train and evaluate the ablation variants
    Ablate {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command, printing to
/// stdout/stderr. Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut overrides = g.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(s) = g.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn required(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config key)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_pairs(dir: &Path) -> Result<Vec<(String, ScenePair64)>> {
    let paths = list_pairs(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no pair files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_pair(&p)?))
        })
        .collect()
}

/// Builds the configured network and loads `checkpoint` into it, checking
/// that every parameter name and shape agrees.
fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Network, ParamStore<f64>)> {
    let (net, fresh) = Network::build::<f64>(&cfg.network)?;
    let ps = ParamStore::<f64>::load(checkpoint)?;
    check_compatible(&fresh, &ps)?;
    Ok((net, ps))
}

pub fn check_compatible(expected: &ParamStore<f64>, got: &ParamStore<f64>) -> Result<()> {
    let mismatch = |m: String| Err(Error::Config(format!("checkpoint does not match the configured network: {m}")));
    if expected.len() != got.len() {
        return mismatch(format!("{} parameters expected, {} found", expected.len(), got.len()));
    }
    for ((a, pa), (b, pb)) in expected.iter().zip(got.iter()) {
        if a != b || pa.value.shape() != pb.value.shape() {
            return mismatch(format!("{a} {:?} vs {b} {:?}", pa.value.shape(), pb.value.shape()));
        }
    }
    Ok(())
}

fn write_metrics(out: &Path, r: &MetricReport) -> Result<()> {
    create_dir(out)?;
    let path = out.join("metrics.csv");
    let text = format!("{METRIC_CSV_HEADER}\n{},{}\n", r.csv_fields(), r.n_evaluated);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn dispatch(cli: Cli) -> Result<i32> {
    let g = match &cli.cmd {
        Command::GenData { g, .. }
        | Command::Train { g, .. }
        | Command::Eval { g, .. }
        | Command::Infer { g, .. }
        | Command::Gradcheck { g }
        | Command::Ablate { g, .. } => g,
    };
    let cfg = load_config(g)?;
    let out = g.out.clone();
    let use_mask = cfg.loss.mask_mode == MaskMode::ExcludeInvalid;
    match cli.cmd {
        Command::GenData { count, .. } => {
            let count = count.unwrap_or(cfg.data_count);
            let names = generate_dataset(&cfg.data, &out, count)?;
            println!("wrote {} pairs and the manifest to {}", names.len(), out.display());
        }
        Command::Train { data, resume, .. } => {
            let dir = required(data, &cfg.data_dir, "training data directory")?;
            let pairs: Vec<ScenePair64> = load_pairs(&dir)?.into_iter().map(|(_, p)| p).collect();
            let (net, mut ps) = match &resume {
                Some(ck) => load_model(&cfg, ck)?,
                None => Network::build::<f64>(&cfg.network)?,
            };
            create_dir(&out)?;
            let cfg_path = out.join("config.txt");
            std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            let log = train(
                &net,
                &mut ps,
                &pairs,
                &cfg.train,
                &cfg.loss,
                &TrainOutput { dir: Some(out.clone()) },
                &mut |r| {
                    println!(
                        "epoch {:4}  lr {:.2e}  loss {:.6}  epe {:.4} {:.4} {:.4} {:.4}",
                        r.epoch, r.lr, r.mean_loss, r.level_epe[0], r.level_epe[1], r.level_epe[2], r.level_epe[3]
                    )
                },
            )?;
            println!("trained {} epochs; checkpoint {}", log.len(), out.join("final.bin").display());
        }
        Command::Eval { data, checkpoint, pred, .. } => {
            let dir = required(data, &cfg.data_dir, "data directory")?;
            let pairs = load_pairs(&dir)?;
            let report = if let Some(pred_dir) = pred {
                eval_predictions(&pairs, &pred_dir, use_mask, &cfg)?
            } else {
                let ck = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
                let (net, ps) = load_model(&cfg, &ck)?;
                let pairs: Vec<ScenePair64> = pairs.into_iter().map(|(_, p)| p).collect();
                evaluate_network(&net, &ps, &pairs, use_mask, cfg.camera)?
            };
            println!("{report}");
            write_metrics(&out, &report)?;
        }
        Command::Infer { data, checkpoint, .. } => {
            let dir = required(data, &cfg.data_dir, "data directory")?;
            let ck = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
            let (net, ps) = load_model(&cfg, &ck)?;
            create_dir(&out)?;
            let mut names = vec![];
            for (k, (name, pair)) in load_pairs(&dir)?.into_iter().enumerate() {
                let p = pair.resample(net.cfg.n_input, EVAL_ORDER_SEED.wrapping_add(k as u64))?;
                let inf = net.infer(&ps, &p.pc1, &p.pc2, Some(&p.gt_flow))?;
                let pc1 = p.pc1.select(&inf.source_idx)?;
                let written = ScenePair64 {
                    pc1,
                    pc2: p.pc2.clone(),
                    gt_flow: inf.flow.clone(),
                    mask: inf.source_idx.iter().map(|&i| p.mask[i]).collect(),
                };
                write_pair(&written, &out.join(&name))?;
                let epe = inf.epe.unwrap_or_default();
                println!("{name}: {} points, mean EPE {:.6}", epe.len(), epe.iter().sum::<f64>() / epe.len().max(1) as f64);
                names.push(name);
            }
            write_manifest(&out.join(crate::data::MANIFEST), &names)?;
        }
        Command::Gradcheck { .. } => {
            let rows = run_suite(&cfg.network, cfg.gradcheck_points, cfg.gradcheck_eps, cfg.network.seed)?;
            let table = format_table(&rows);
            print!("{table}");
            create_dir(&out)?;
            let path = out.join("gradcheck.txt");
            std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            let ok = rows
                .iter()
                .all(|r| r.report.checked > 0 && r.report.max_rel_err < GRADCHECK_TOLERANCE);
            return Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED });
        }
        Command::Ablate { data, eval_data, .. } => {
            let dir = required(data, &cfg.data_dir, "training data directory")?;
            let train_pairs: Vec<ScenePair64> = load_pairs(&dir)?.into_iter().map(|(_, p)| p).collect();
            let eval_pairs: Option<Vec<ScenePair64>> = match eval_data.or_else(|| cfg.eval_dir.clone()) {
                Some(d) => Some(load_pairs(&d)?.into_iter().map(|(_, p)| p).collect()),
                None => None,
            };
            let variants = ablation_variants(&cfg.network)?;
            let setup = AblationSetup {
                train_data: &train_pairs,
                eval_data: eval_pairs.as_deref(),
                train: cfg.train.clone(),
                loss: cfg.loss.clone(),
                camera: cfg.camera,
            };
            create_dir(&out)?;
            let rows = run_ablation(&variants, &setup, &mut |r| match &r.outcome {
                Ok(m) => println!("{:50} {m}  ({:.1} s)", r.name, r.train_seconds),
                Err(e) => println!("{:50} failed: {e}", r.name),
            });
            write_ablation_csv(&out.join("ablation.csv"), &rows)?;
            println!("wrote {}", out.join("ablation.csv").display());
        }
    }
    Ok(EXIT_OK)
}

/// Matches prediction rows to ground truth by exact PC1 coordinates.
fn eval_predictions(
    pairs: &[(String, ScenePair64)],
    pred_dir: &Path,
    use_mask: bool,
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let (mut pred, mut gt, mut mask, mut pts) = (vec![], vec![], vec![], vec![]);
    for (name, truth) in pairs {
        let p = read_pair(&pred_dir.join(name))?;
        let index: HashMap<[u64; 3], usize> = truth
            .pc1
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| (c.map(f64::to_bits), i))
            .collect();
        for (c, f) in p.pc1.coords.iter().zip(&p.gt_flow) {
            let i = *index.get(&c.map(f64::to_bits)).ok_or_else(|| {
                Error::invalid(format!("{name}: predicted point {c:?} is not in the ground-truth PC1"))
            })?;
            pred.push(*f);
            gt.push(truth.gt_flow[i]);
            mask.push(truth.mask[i]);
            pts.push(*c);
        }
    }
    let _ = PointCloud::new(pts.clone())?;
    evaluate(
        &pred,
        &gt,
        use_mask.then_some(&mask[..]),
        cfg.camera.map(|camera| Projection { camera, pc1: &pts }),
    )
}
