//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mrvpc_core::model::Mvpc;
use mrvpc_core::train::{DistillSet, Distilled, Mode};

use crate::checkpoint::{self, vocab_hash, Checkpoint};
use crate::config::{parse_drop_grid, parse_percents, RunConfig};
use crate::experiment::{self as exp, Bench, Data};
use crate::{corpus, plot, report, HarnessError, Result};

#[derive(Parser)]
#[command(name = "mrvpc", version, about = "Missing-resistant video paragraph captioning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test splits as JSONL.
    Generate(Common),
    /// Train one model and write `<mode>.ckpt`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vanilla")]
        mode: String,
        /// Teacher checkpoint (mrvpc without a distill set, wordkd).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Caption the training set with a teacher and write `distill.jsonl`.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Score a checkpoint on test scenarios and write `eval_<mode>.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated scenario names (default: all configured).
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Drop-rate sweep of DropAM-only training; writes `sweep.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        drop_grid: Option<String>,
    },
    /// Metrics as the share of ASR-missing test instances grows.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Comma-separated checkpoints.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        percent_grid: Option<String>,
    },
    /// Model x modality grid for vanilla, DropAM-only and MR-VPC.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Comma-separated vanilla, dropam and mrvpc checkpoints; trained
        /// in-run when omitted.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Finite-difference gradient check of the full network.
    Gradcheck(Common),
    /// Render a report CSV as an SVG line chart.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metric: Option<String>,
    },
    /// generate, train teacher, distill, train student, evaluate, plot.
    Pipeline(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let (tr, te) = (cfg.out.join("train.jsonl"), cfg.out.join("test.jsonl"));
    if cfg.data.train_path.is_none() && cfg.data.test_path.is_none() && tr.exists() && te.exists() {
        cfg.data.train_path = Some(tr);
        cfg.data.test_path = Some(te);
    }
    Ok(cfg)
}

fn load_model(path: &Path, data: &Data) -> Result<(Checkpoint, Mvpc<f32>)> {
    let ck = checkpoint::load(path)?;
    let (have, want) = (vocab_hash(&ck.vocab), vocab_hash(&data.vocab));
    if have != want {
        return Err(HarnessError::Data(format!(
            "{}: vocabulary hash {have} does not match the corpus vocabulary {want}",
            path.display()
        )));
    }
    let model = ck.model()?;
    Ok((ck, model))
}

fn mode_of(s: &str) -> Result<Mode> {
    s.parse().map_err(|e: mrvpc_core::Error| HarnessError::Config(e.to_string()))
}

fn load_distill(path: &Path, cfg: &RunConfig) -> Result<DistillSet> {
    let entries = corpus::load(path, Some(&cfg.world))?;
    let items = entries
        .into_iter()
        .map(|e| {
            let source_id = e
                .source
                .ok_or_else(|| HarnessError::Data(format!("{}: item {} has no source", path.display(), e.instance.id)))?;
            Ok(Distilled {
                empty: e.instance.caption.is_empty(),
                source_id,
                instance: e.instance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistillSet { items })
}

fn split_paths(list: &str) -> Vec<PathBuf> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let cfg = load_config(&Common {
                config: c.config,
                out: c.out,
                seed: c.seed,
            })?;
            let (train, test) = exp::generate(&cfg)?;
            corpus::save(&cfg.out.join("train.jsonl"), &corpus::plain(&train))?;
            corpus::save(&cfg.out.join("test.jsonl"), &corpus::plain(&test))?;
            println!("wrote {} train and {} test instances to {}", train.len(), test.len(), cfg.out.display());
        }
        Command::Train { common, mode, teacher } => {
            let cfg = load_config(&common)?;
            let mode = mode_of(&mode)?;
            let data = exp::load_data(&cfg)?;
            let teacher = teacher.map(|p| load_model(&p, &data)).transpose()?;
            let distill_path = cfg.out.join("distill.jsonl");
            let kd = if mode == Mode::Mrvpc && distill_path.exists() {
                Some(load_distill(&distill_path, &cfg)?)
            } else {
                None
            };
            let trained = exp::train_mode(&cfg, &data, mode, teacher.as_ref().map(|t| &t.1), kd)?;
            let prov = exp::provenance(&cfg);
            checkpoint::save(
                &cfg.out.join(format!("{}.ckpt", mode.name())),
                &exp::checkpoint_for(&cfg, &trained.model, &data.vocab, mode),
            )?;
            report::save(
                &cfg.out.join(format!("training_{}.csv", mode.name())),
                &exp::log_rows(&prov, mode.name(), &trained.log),
            )?;
            println!(
                "trained {} for {} steps, loss {:?} -> {:?}",
                mode.name(),
                trained.log.steps,
                trained.log.initial_loss,
                trained.log.epoch_loss.last()
            );
        }
        Command::Distill { common, teacher } => {
            let cfg = load_config(&common)?;
            let data = exp::load_data(&cfg)?;
            let (_, model) = load_model(&teacher, &data)?;
            let kd = exp::distill(&cfg, &data, &model)?;
            let entries: Vec<corpus::Entry> = kd
                .items
                .iter()
                .map(|d| corpus::Entry {
                    instance: d.instance.clone(),
                    source: Some(d.source_id.clone()),
                })
                .collect();
            corpus::save(&cfg.out.join("distill.jsonl"), &entries)?;
            println!("distilled {} captions ({} empty)", kd.len(), kd.empty_count());
        }
        Command::Eval {
            common,
            checkpoint,
            scenario,
        } => {
            let cfg = load_config(&common)?;
            let scenarios: Vec<String> = match scenario {
                Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
                None => cfg.scenarios.clone(),
            };
            for s in &scenarios {
                cfg.scenario(s).map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            let data = exp::load_data(&cfg)?;
            let (ck, model) = load_model(&checkpoint, &data)?;
            let prov = exp::provenance(&cfg);
            let mut bench = Bench::new(&cfg, &data.vocab, &data.test);
            let mut rows = Vec::new();
            for r in exp::run_eval(&mut bench, &ck.meta.mode, &model, &scenarios)? {
                println!("{:<20} cider {:.4} meteor {:.4} r4 {:.4}", r.scenario, r.cider, r.meteor, r.r4);
                rows.extend(prov.rows(&r));
            }
            report::save(&cfg.out.join(format!("eval_{}.csv", ck.meta.mode)), &rows)?;
        }
        Command::Sweep { common, drop_grid } => {
            let cfg = load_config(&common)?;
            let grid = match drop_grid {
                Some(g) => parse_drop_grid(&g)?,
                None => cfg.sweep_grid.clone(),
            };
            let data = exp::load_data(&cfg)?;
            let rows = exp::run_drop_sweep(&cfg, &data, &exp::provenance(&cfg), &grid, &[])?;
            report::save(&cfg.out.join("sweep.csv"), &rows)?;
            for r in rows.iter().filter(|r| r.scenario == "avg") {
                println!("{:<16} avg {} {:.4}", r.model, r.metric, r.value);
            }
        }
        Command::Curve {
            common,
            checkpoint,
            percent_grid,
        } => {
            let cfg = load_config(&common)?;
            let percents = match percent_grid {
                Some(g) => parse_percents(&g)?,
                None => cfg.curve_percents.clone(),
            };
            let data = exp::load_data(&cfg)?;
            let loaded = split_paths(&checkpoint)
                .iter()
                .map(|p| load_model(p, &data))
                .collect::<Result<Vec<_>>>()?;
            let models: Vec<(&str, &Mvpc<f32>)> = loaded.iter().map(|(ck, m)| (ck.meta.mode.as_str(), m)).collect();
            let mut bench = Bench::new(&cfg, &data.vocab, &data.test);
            let rows = exp::run_missing_curve(&mut bench, &exp::provenance(&cfg), &models, &percents)?;
            let csv = cfg.out.join("curve.csv");
            report::save(&csv, &rows)?;
            plot::emit_plot(&csv, &cfg.out.join("curve.svg"), Some("cider"))?;
        }
        Command::Ablation { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let data = exp::load_data(&cfg)?;
            let models: Vec<Mvpc<f32>> = match checkpoint {
                Some(list) => {
                    let paths = split_paths(&list);
                    if paths.len() != 3 {
                        return Err(HarnessError::Config("ablation needs vanilla, dropam and mrvpc checkpoints".into()));
                    }
                    paths.iter().map(|p| load_model(p, &data).map(|x| x.1)).collect::<Result<_>>()?
                }
                None => {
                    let vanilla = exp::train_mode(&cfg, &data, Mode::Vanilla, None, None)?.model;
                    let dropam = exp::train_mode(&cfg, &data, Mode::DropAm, None, None)?.model;
                    let mrvpc = exp::train_mode(&cfg, &data, Mode::Mrvpc, Some(&vanilla), None)?.model;
                    vec![vanilla, dropam, mrvpc]
                }
            };
            let named: Vec<(&str, &Mvpc<f32>)> = ["vanilla", "dropam", "mrvpc"].into_iter().zip(&models).collect();
            let mut bench = Bench::new(&cfg, &data.vocab, &data.test);
            let rows = exp::run_ablation(&mut bench, &exp::provenance(&cfg), &named)?;
            report::save(&cfg.out.join("ablation.csv"), &rows)?;
            for r in rows.iter().filter(|r| r.metric == "cider") {
                println!("{:<8} {:<6} cider {:.4}", r.model, r.scenario, r.value);
            }
        }
        Command::Gradcheck(c) => {
            let cfg = load_config(&c)?;
            let start = std::time::Instant::now();
            let (rep, n) = exp::run_gradcheck(&cfg)?;
            let prov = exp::provenance(&cfg);
            let mut rows = Vec::new();
            for t in &rep.tensors {
                rows.push(prov.row("gradcheck", &t.name, "max_rel_error", t.max_rel_error));
                rows.push(prov.row("gradcheck", &t.name, "worst_analytic", t.worst_analytic));
                rows.push(prov.row("gradcheck", &t.name, "worst_numeric", t.worst_numeric));
            }
            rows.push(prov.row("gradcheck", "all", "max_rel_error", rep.max_rel_error));
            report::save(&cfg.out.join("gradcheck.csv"), &rows)?;
            println!(
                "{} parameters, {} tensors, max relative error {:.3e} in {:.1?}",
                n,
                rep.tensors.len(),
                rep.max_rel_error,
                start.elapsed()
            );
            if !(rep.max_rel_error < 1e-4) {
                return Err(mrvpc_core::Error::Check(format!("max relative error {:.3e} exceeds 1e-4", rep.max_rel_error)).into());
            }
        }
        Command::Plot { csv, out, metric } => plot::emit_plot(&csv, &out, metric.as_deref())?,
        Command::Pipeline(c) => {
            let cfg = load_config(&c)?;
            let out = exp::run_pipeline(&cfg, &cfg.out)?;
            println!("pipeline finished in {:.1?}; artifacts in {}", out.elapsed, out.dir.display());
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MRVPC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HarnessError::Config(format!("MRVPC_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
