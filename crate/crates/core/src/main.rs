use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use protosent::ablate::{format_table, run_ablation};
use protosent::data::{generate_synthetic, load_dataset, save_dataset, Split, SynthSpec};
use protosent::eval::{eval_masked, evaluate_split, MaskSpec};
use protosent::gradcheck;
use protosent::metrics::MetricReport;
use protosent::trace::{extract_traces, write_gate_plots};
use protosent::train::{write_log, Checkpoint, Trainer};
use protosent::Config;

#[derive(Parser)]
#[command(name = "protosent", version, about = "Prototype-guided multimodal sentiment regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and save the best-by-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report records; defaults to `<ckpt>.eval.jsonl`.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Test metrics with modalities replaced by zeros.
    EvalMasked {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated letters from t, a, v (at most two), or `all`
        /// for every mask of size 0 to 2.
        #[arg(long, value_parser = parse_masks)]
        mask: Masks,
        /// Report records; defaults to `<ckpt>.masked.jsonl`.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the full model and all five ablations and print a table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Table rows as records; defaults to `<config>.ablate.jsonl`.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-sample gate and selection records for the test split.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-layer gate plots (SVG).
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; fails if any exceeds tolerance.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional per-check records.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone)]
struct Masks(Vec<MaskSpec>);

fn parse_masks(s: &str) -> Result<Masks, String> {
    if s.trim() == "all" {
        return Ok(Masks(MaskSpec::all()));
    }
    s.parse::<MaskSpec>().map(|m| Masks(vec![m])).map_err(|e| e.to_string())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn print_report(title: &str, r: &MetricReport) {
    println!(
        "{title:<12} n={:<5} MAE={:.4} Corr={:.4}{} {}={:.2} Acc-2={:.2}/{:.2} F1={:.2}/{:.2}",
        r.n,
        r.mae,
        r.corr,
        if r.corr_undefined { " (undefined)" } else { "" },
        r.multiclass.label(),
        100.0 * r.acc_multi,
        100.0 * r.acc2_nn,
        100.0 * r.acc2_np,
        100.0 * r.f1_nn,
        100.0 * r.f1_np
    );
}

#[derive(Serialize)]
struct MaskedRecord<'a> {
    mask: String,
    report: &'a MetricReport,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => SynthSpec::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => SynthSpec::default(),
            };
            let ds = generate_synthetic(&spec)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = Config::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let ds = load_dataset(&data)?;
            let trainer = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    if ckpt.config != cfg {
                        bail!("checkpoint {} was written with a different config", p.display());
                    }
                    Trainer::resume(&ckpt, &ds)?
                }
                None => Trainer::new(&cfg, &ds)?,
            };
            let outcome = trainer.finish()?;
            outcome.best.save(&out)?;
            outcome.last.save(with_suffix(&out, ".last"))?;
            write_log(&outcome.log, with_suffix(&out, ".log.jsonl"))?;
            println!(
                "trained {} steps; best valid MAE {}; checkpoint {}",
                outcome.last.step,
                outcome.best.best_valid_mae.map_or("n/a".into(), |m| format!("{m:.4}")),
                out.display()
            );
        }
        Command::Eval { ckpt, data, split, json } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let (model, store) = Checkpoint::load(&ckpt)?.restore_model()?;
            let ds = load_dataset(&data)?;
            let report = evaluate_split(&model, &store, &ds, split)?;
            print_report(&format!("{split:?}").to_lowercase(), &report);
            let p = json.unwrap_or_else(|| with_suffix(&ckpt, ".eval.jsonl"));
            write_jsonl(&p, &[report])?;
        }
        Command::EvalMasked { ckpt, data, mask, json } => {
            let masks = mask.0;
            let (model, store) = Checkpoint::load(&ckpt)?.restore_model()?;
            let ds = load_dataset(&data)?;
            let mut reports = Vec::with_capacity(masks.len());
            for m in &masks {
                let r = eval_masked(&model, &store, &ds, m)?;
                print_report(&format!("mask {m}"), &r);
                reports.push((m.to_string(), r));
            }
            let recs: Vec<_> = reports
                .iter()
                .map(|(m, r)| MaskedRecord { mask: m.clone(), report: r })
                .collect();
            write_jsonl(&json.unwrap_or_else(|| with_suffix(&ckpt, ".masked.jsonl")), &recs)?;
        }
        Command::Ablate { config, data, json } => {
            let cfg = Config::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let ds = load_dataset(&data)?;
            let rows = run_ablation(&cfg, &ds)?;
            print!("{}", format_table(&rows));
            write_jsonl(&json.unwrap_or_else(|| with_suffix(&config, ".ablate.jsonl")), &rows)?;
        }
        Command::Trace { ckpt, data, out, plots } => {
            let (model, store) = Checkpoint::load(&ckpt)?.restore_model()?;
            let ds = load_dataset(&data)?;
            let records = extract_traces(&model, &store, &ds, &out)?;
            println!("wrote {} trace records to {}", records.len(), out.display());
            if let Some(dir) = plots {
                for f in write_gate_plots(&records, &dir)? {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::Gradcheck { seed, json } => {
            let results = gradcheck::run_suite(seed)?;
            if let Some(p) = json {
                write_jsonl(&p, &results)?;
            }
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {:<48} n={:<4} max rel err {:.2e}",
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.name,
                    r.checked,
                    r.max_rel_err
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks exceeded {:e}", results.len(), gradcheck::TOLERANCE);
            }
            println!("all {} gradient checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with status 2 from inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
