use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fairtensor::audit::unfairness;
use fairtensor::datasets::{gen_synthetic, SyntheticSpec};
use fairtensor::experiment::{
    compare, counterexample_report, fit_single, gnuplot_script, provenance, save_dataset_dir, sweep,
    write_audit_csv, write_metrics_csv, write_summary_csv, AuditRecord, DatasetConfig, ExperimentConfig,
    Method, Overrides, PointResult, OUT_DIR_ENV,
};
use fairtensor::io::{read_mat, save_model};
use fairtensor::Error;

#[derive(Parser)]
#[command(name = "fairtensor", version, about = "Fairness-regularized CP decomposition experiments")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "fairtensor-out")]
    out: PathBuf,

    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-population synthetic tensor and write it to --out.
    GenSynth {
        #[arg(long)]
        small: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit one model and audit it.
    Fit(RunArgs),
    /// Sweep the regularization strength.
    Sweep(RunArgs),
    /// Compare methods over several seeds.
    Compare(RunArgs),
    /// Show that orthogonality to S does not imply independence from S.
    Counterexample,
    /// Audit a saved factor A (from `fit`) against a dataset's labels.
    Audit {
        /// Directory containing A.txt.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Named preset (fig1a, fig1b, fig2a, fig2b, fig3a, fig3b).
    #[arg(long)]
    preset: Option<String>,
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// synthetic, synthetic-small, contraceptive, counterexample or a directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    lr_a: Option<f64>,
    #[arg(long)]
    lr_bc: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the 60 x 30 x 30 synthetic problem.
    #[arg(long)]
    small: bool,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long)]
    gnuplot: bool,
}

impl RunArgs {
    fn resolve(&self, fallback_preset: &str) -> Result<ExperimentConfig, Error> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(p), _) => ExperimentConfig::preset(p)?,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => {
                let contraceptive = matches!(self.dataset.as_deref(), Some("contraceptive" | "cmc"));
                ExperimentConfig::preset(if contraceptive { "fig3b" } else { fallback_preset })?
            }
        };
        if let Some(name) = &self.dataset {
            let dataset = DatasetConfig::from_name(name)?;
            if std::mem::discriminant(&dataset) != std::mem::discriminant(&cfg.dataset) {
                cfg.train.rank = None;
                cfg.audit = None;
            }
            cfg.dataset = dataset;
        }
        cfg.apply(&Overrides {
            method: self.method,
            lambda: self.lambda,
            epochs: self.epochs,
            inner_steps: self.inner_steps,
            lr_a: self.lr_a,
            lr_bc: self.lr_bc,
            seed: self.seed,
            small: self.small,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn csv_file(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn print_rows(rows: &[PointResult]) {
    println!(
        "{:<6} {:>10} {:>5} {:>9} {:>10} {:>10} {:>12}",
        "method", "lambda", "seed", "residual", "unfairness", "rho", "||A^T S||"
    );
    for r in rows {
        let m = &r.metrics;
        if let Some(msg) = &r.diverged {
            println!("{:<6} {:>10} {:>5}  {msg}", m.method, m.lambda, m.seed);
        } else {
            println!(
                "{:<6} {:>10} {:>5} {:>9.4} {:>10.3} {:>10.4} {:>12.4e}",
                m.method, m.lambda, m.seed, m.relative_residual, m.unfairness, m.normalized_khsic, m.orthogonality_norm
            );
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let out = cli.out;
    match cli.command {
        Command::GenSynth { small, seed } => {
            let spec = if small { SyntheticSpec::small(seed) } else { SyntheticSpec::full(seed) };
            let synth = gen_synthetic(&spec)?;
            save_dataset_dir(&out, &synth.data)?;
            save_model(out.join("truth"), &synth.truth)?;
            if cli.json {
                println!("{}", json!({ "out": out, "spec": spec, "provenance": synth.data.provenance }));
            } else {
                println!("wrote {} to {}", synth.data.provenance, out.display());
            }
        }
        Command::Fit(args) => {
            let cfg = args.resolve("fig2b")?;
            let (data, method, outcome) = fit_single(&cfg)?;
            save_model(out.join("model"), &outcome.fit.model)?;
            outcome.fit.trace.write_csv(csv_file(&out.join("trace.csv"))?)?;
            let row = PointResult {
                metrics: outcome.metrics.clone(),
                majority_floor: outcome.audit.majority_floor,
                diverged: None,
            };
            write_metrics_csv(csv_file(&out.join("metrics.csv"))?, &provenance(&cfg, &data.provenance)?, &[row])?;
            let audit_row = AuditRecord::new(method.method, method.strength(), &outcome.audit);
            write_audit_csv(csv_file(&out.join("audit.csv"))?, &[audit_row])?;
            if cli.json {
                println!("{}", json!({ "metrics": outcome.metrics, "audit": outcome.audit, "out": out }));
            } else {
                let m = &outcome.metrics;
                println!("{} on {}", m.method, data.provenance);
                println!("  relative residual  {:.6}", m.relative_residual);
                println!("  unfairness         {:.4} (majority floor {:.4})", m.unfairness, outcome.audit.majority_floor);
                println!("  normalized KHSIC   {:.6}", m.normalized_khsic);
                println!("  ||A^T S||_F        {:.6e}", m.orthogonality_norm);
                println!("  wrote model, trace.csv, metrics.csv and audit.csv to {}", out.display());
            }
        }
        Command::Sweep(args) => {
            let cfg = args.resolve("fig1b")?;
            let data_note = cfg.dataset.load(0)?.provenance;
            let rows = sweep(&cfg)?;
            let csv_name = format!("{}_sweep.csv", cfg.name);
            write_metrics_csv(csv_file(&out.join(&csv_name))?, &provenance(&cfg, &data_note)?, &rows)?;
            if args.gnuplot {
                std::fs::write(out.join(format!("{}_sweep.gp", cfg.name)), gnuplot_script(&csv_name, &cfg.description))?;
            }
            if cli.json {
                let metrics: Vec<_> = rows.iter().map(|r| json!({ "metrics": r.metrics, "diverged": r.diverged })).collect();
                println!("{}", json!({ "csv": out.join(&csv_name), "rows": metrics }));
            } else {
                print_rows(&rows);
                println!("wrote {}", out.join(&csv_name).display());
            }
            let diverged = rows.iter().filter(|r| !r.ok()).count();
            if diverged > 0 {
                eprintln!("warning: {diverged} of {} points diverged", rows.len());
            }
        }
        Command::Compare(args) => {
            let cfg = args.resolve("fig2b")?;
            let data_note = cfg.dataset.load(0)?.provenance;
            let report = compare(&cfg)?;
            let rows_name = format!("{}_compare.csv", cfg.name);
            let summary_name = format!("{}_summary.csv", cfg.name);
            write_metrics_csv(csv_file(&out.join(&rows_name))?, &provenance(&cfg, &data_note)?, &report.rows)?;
            write_summary_csv(csv_file(&out.join(&summary_name))?, &report.summary)?;
            if cli.json {
                println!("{}", json!({ "summary": report.summary, "csv": out.join(&rows_name) }));
            } else {
                println!(
                    "{:<6} {:>10} {:>5} {:>22} {:>22} {:>10}",
                    "method", "lambda", "runs", "residual", "unfairness", "floor"
                );
                for s in &report.summary {
                    println!(
                        "{:<6} {:>10} {:>5} {:>22} {:>22} {:>10.3}",
                        s.method,
                        s.lambda,
                        s.runs - s.diverged,
                        s.relative_residual.to_string(),
                        s.unfairness.to_string(),
                        s.majority_floor.mean
                    );
                }
                println!("wrote {} and {}", out.join(&rows_name).display(), out.join(&summary_name).display());
            }
            let diverged: usize = report.summary.iter().map(|s| s.diverged).sum();
            if diverged > 0 {
                eprintln!("warning: {diverged} runs diverged");
            }
        }
        Command::Counterexample => {
            let r = counterexample_report()?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&r).expect("serializable report"));
            } else {
                println!("A =");
                r.a.iter().for_each(|row| println!("  {row:?}"));
                println!("S =");
                r.s.iter().for_each(|row| println!("  {row:?}"));
                println!("||A^T S||_F             = {}", r.orthogonality_norm);
                println!("normalized KHSIC (RBF)  = {:.6}", r.normalized_khsic);
                println!("linear alignment        = {:.3e}", r.linear_alignment);
                println!("threshold probe accuracy = {}", r.threshold_probe_accuracy);
                for c in &r.checks {
                    println!("[{}] {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            if !r.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Audit { model, run } => {
            let cfg = run.resolve("fig2b")?;
            let seed = cfg.seeds[0];
            let key_seed = if matches!(cfg.dataset, DatasetConfig::Synthetic { .. }) { seed } else { 0 };
            let data = cfg.dataset.load(key_seed)?;
            let a = read_mat(model.join("A.txt"))?;
            let result = unfairness(&a, &data.labels, &cfg.audit_config(seed))?;
            let row = AuditRecord::new(run.method.unwrap_or(Method::Bcd), run.lambda.unwrap_or(0.0), &result);
            write_audit_csv(csv_file(&out.join("audit.csv"))?, std::slice::from_ref(&row))?;
            if cli.json {
                println!("{}", json!({ "audit": result }));
            } else {
                println!(
                    "accuracy {:.4}  unfairness {:.4}  majority floor {:.4}  (n_test {})",
                    result.accuracy, result.unfairness, result.majority_floor, result.n_test
                );
                if result.degenerate_labels {
                    println!("warning: the training split holds a single class");
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
