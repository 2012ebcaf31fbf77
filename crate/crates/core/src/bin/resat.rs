//! Experiment CLI.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resat::datagen::{generate_spurious, load_csv, split};
use resat::harness::config::bias_spec_from_key_values;
use resat::harness::{compare, emit_plot, sweep_k, train, KeyValues, RunRecord, TrainConfig};
use resat::{selftest, Error, Execution, Result};

#[derive(Parser)]
#[command(
    name = "resat",
    version,
    about = "Affinity-based sample reweighting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a group-biased dataset.
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a stratified test split here; `--out` then receives
        /// the training part.
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
    },
    /// Train one run and write its record.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate final per-group accuracies of saved runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// `.csv` for CSV, anything else for aligned text.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-SAT for several K against ERM, medians over seeds.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        k: Vec<usize>,
        /// Number of seeds, 0..n.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot a per-group metric over epochs as SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// accuracy, loss or rank
        #[arg(long, default_value = "rank")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient and oracle-equivalence checks.
    Selftest,
}

fn read_key_values(path: &Path) -> Result<KeyValues> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    KeyValues::parse(&text)
}

fn load_config(path: &Path, data: &resat::GroupedDataset) -> Result<TrainConfig> {
    TrainConfig::from_key_values(
        &read_key_values(path)?,
        data.input_dim(),
        data.num_classes(),
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Gen {
            spec,
            seed,
            out,
            test_out,
            train_fraction,
        } => {
            let kv = match spec {
                Some(p) => read_key_values(&p)?,
                None => KeyValues::default(),
            };
            let bias = bias_spec_from_key_values(&kv)?;
            let data = generate_spurious(&bias, seed)?;
            match test_out {
                Some(test_path) => {
                    let (tr, te) = split(&data, train_fraction, seed)?;
                    tr.save_csv(&out)?;
                    te.save_csv(&test_path)?;
                    println!("wrote {} train rows to {}", tr.len(), out.display());
                    println!("wrote {} test rows to {}", te.len(), test_path.display());
                }
                None => {
                    data.save_csv(&out)?;
                    println!("wrote {} rows to {}", data.len(), out.display());
                }
            }
        }
        Command::Train {
            config,
            data,
            eval,
            seed,
            out,
        } => {
            let train_data = load_csv(&data)?;
            let eval_data = load_csv(&eval)?;
            let config = load_config(&config, &train_data)?;
            let record = train(&config, &train_data, &eval_data, seed)?;
            record.save(&out)?;
            if let Some(m) = record.final_metrics() {
                println!(
                    "{}: overall {:.4}, worst group {:.4} ({} epochs, {:.2}s)",
                    record.label(),
                    m.overall_accuracy,
                    m.worst_group_accuracy,
                    record.epochs.len(),
                    record.wall_time
                );
            }
        }
        Command::Compare { runs, out } => {
            let records = runs
                .iter()
                .map(|d| RunRecord::load(d))
                .collect::<Result<Vec<_>>>()?;
            let report = compare(&records)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(out) = out {
                let body = if out.extension().is_some_and(|e| e == "csv") {
                    report.to_csv()
                } else {
                    text
                };
                write_file(&out, &body)?;
            }
        }
        Command::SweepK {
            config,
            data,
            eval,
            k,
            seeds,
            out,
        } => {
            let train_data = load_csv(&data)?;
            let eval_data = load_csv(&eval)?;
            let config = load_config(&config, &train_data)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let result = sweep_k(
                &config,
                &train_data,
                &eval_data,
                &k,
                &seeds,
                Execution::default(),
            )?;
            for r in &result.erm_runs {
                r.save(&out.join(format!("erm_seed{}", r.seed)))?;
            }
            for (k, runs) in &result.resat_runs {
                for r in runs {
                    r.save(&out.join(format!("resat_k{k}_seed{}", r.seed)))?;
                }
            }
            write_file(&out.join("report.csv"), &result.report.to_csv())?;
            let text = result.report.to_text();
            write_file(&out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Plot { runs, metric, out } => {
            let records = runs
                .iter()
                .map(|d| RunRecord::load(d))
                .collect::<Result<Vec<_>>>()?;
            emit_plot(&records, &metric, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Selftest => {
            let mut ok = true;
            for check in selftest::run_all()? {
                let verdict = if check.passed() { "PASS" } else { "FAIL" };
                ok &= check.passed();
                println!(
                    "{verdict}  {:<46} worst {:.3e} (bound {:.0e})",
                    check.name, check.worst, check.bound
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
