use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sparc_core::cost::{analytic_entry, relative_to_clip, write_csv, CostSource, SweepSetup};
use sparc_core::softmax_lab::{grad_scale_sweep, iterate_softmax, jacobian_inf_norm, softmax_jacobian};
use sparc_harness::config::TrainConfig;
use sparc_harness::eval::{k_precision_eval, segmentation_eval};
use sparc_harness::plot::{line_chart, plot_costs, plot_run, Series};
use sparc_harness::train::{evaluate, held_out_set, load_checkpoint, train};
use sparc_harness::Result;
use sparc_tensor::Tensor;

#[derive(Parser)]
#[command(name = "sparc-lab", version, about = "Fine-grained contrastive alignment lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic planted data.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<objective>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out planted batches.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Compute and memory per objective over batch sizes.
    Cost {
        /// Measure every objective by running it; without this flag only the
        /// analytic model is printed.
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16])]
        batches: Vec<usize>,
        #[arg(long, default_value = "cost")]
        out: PathBuf,
    },
    /// Softmax saturation experiments.
    SoftmaxLab {
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// Comma-separated logits for `jacobian` and `iterate`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        logits: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        gain: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "softmax-lab")]
        out: PathBuf,
    },
    /// Draw the metrics of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Retrieval,
    Kprecision,
    Segmentation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Jacobian,
    Gradscale,
    Iterate,
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-seed{}", cfg.loss.objective, cfg.seed))
            });
            let summary = train(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { checkpoint, metric } => {
            let (params, cfg, step) = load_checkpoint(&checkpoint)?;
            let held_out = held_out_set(&cfg)?;
            let result = match metric {
                Metric::Retrieval => serde_json::to_value(evaluate(&params, &cfg, &held_out)?)?,
                Metric::Kprecision => serde_json::to_value(k_precision_eval(&params, &cfg, &held_out)?)?,
                Metric::Segmentation => serde_json::to_value(segmentation_eval(&params, &cfg, &held_out)?)?,
            };
            let report = json!({ "checkpoint": checkpoint, "step": step, "result": result });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Cost { sweep, batches, out } => cost(sweep, batches, &out)?,
        Command::SoftmaxLab { experiment, logits, trials, steps, gain, seed, out } => {
            fs::create_dir_all(&out)?;
            match experiment {
                Experiment::Jacobian => jacobian(logits.unwrap_or(vec![0.0, 0.0]), &out)?,
                Experiment::Gradscale => gradscale(trials, seed, &out)?,
                Experiment::Iterate => {
                    let h0 = logits.unwrap_or(vec![0.3, 0.1, 0.35, -0.2]);
                    iterate(h0, steps, gain, &out)?
                }
            }
        }
        Command::Plot { run } => {
            for path in plot_run(&run)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn cost(sweep: bool, batches: Vec<usize>, out: &Path) -> Result<()> {
    let setup = SweepSetup {
        batches,
        ..SweepSetup::default()
    };
    if !sweep {
        println!("objective,B,flops_forward,flops_total,peak_bytes");
        for &o in &setup.objectives {
            for &b in &setup.batches {
                let e = analytic_entry(o, &setup.dims.with_batch(b))?;
                println!("{o},{b},{},{},{}", e.flops_forward, e.flops_total, e.peak_bytes);
            }
        }
        return Ok(());
    }
    let entries = setup.run()?;
    fs::create_dir_all(out)?;
    let csv = out.join("cost.csv");
    write_csv(&mut BufWriter::new(File::create(&csv)?), &entries)?;
    println!("wrote {}", csv.display());
    for path in plot_costs(&entries, out)? {
        println!("wrote {}", path.display());
    }
    println!("\nwhole training step, relative to CLIP");
    println!("{:<14} {:>4} {:>8} {:>8}", "objective", "B", "mults", "peak");
    for r in relative_to_clip(&entries, CostSource::MeasuredStep) {
        println!("{:<14} {:>4} {:>8.4} {:>8.4}", r.objective.to_string(), r.batch, r.flops, r.peak_bytes);
    }
    Ok(())
}

fn jacobian(h: Vec<f64>, out: &Path) -> Result<()> {
    let k = h.len();
    let t = Tensor::new(vec![k], h)?;
    let j = softmax_jacobian(&t)?;
    println!("softmax Jacobian at {:?}", t.data());
    for row in j.data().chunks(k) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:>12.6e}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("infinity norm {:.6e}", jacobian_inf_norm(&t)?);

    let series = [2usize, 5, 8]
        .iter()
        .map(|&k| {
            let pts = (0..=40)
                .map(|i| {
                    let margin = 0.25 * i as f64;
                    let mut h = vec![0.0; k];
                    h[0] = margin;
                    let norm = jacobian_inf_norm(&Tensor::new(vec![k], h)?)?;
                    Ok((margin, norm))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Series::new(format!("k = {k}"), pts))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("jacobian_saturation.svg");
    line_chart(&path, "Jacobian norm against winning margin", "margin", "max row sum |J|", &series)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradscale(trials: usize, seed: u64, out: &Path) -> Result<()> {
    let ks = [2usize, 4, 8, 16, 32, 64, 128];
    let (reports, slope) = grad_scale_sweep(&ks, trials, seed)?;
    println!("{:>5} {:>14} {:>14}", "k", "expected", "measured");
    for r in &reports {
        println!("{:>5} {:>14.6e} {:>14.6e}", r.k, r.grad_scale_expected, r.grad_scale_measured);
    }
    let fit = &ks[2..];
    let (_, slope_fit) = grad_scale_sweep(fit, trials, seed)?;
    println!("log-log slope over all k {slope:.4}; over k >= 8 {slope_fit:.4}");
    let series = vec![
        Series::new("measured", reports.iter().map(|r| ((r.k as f64).log2(), r.grad_scale_measured.log2())).collect()),
        Series::new("1/k^2", reports.iter().map(|r| ((r.k as f64).log2(), r.grad_scale_expected.log2())).collect()),
    ];
    let path = out.join("grad_scale.svg");
    line_chart(&path, "off-diagonal gradient scale at uniform init", "log2 k", "log2 scale", &series)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn iterate(h0: Vec<f64>, steps: usize, gain: f64, out: &Path) -> Result<()> {
    let r = iterate_softmax(&Tensor::new(vec![h0.len()], h0)?, steps, gain)?;
    println!("{:>5} {:>12} {:>12}", "step", "entropy", "1 - max a");
    for (i, (e, c)) in r.entropy_trace.iter().zip(&r.corner_distance_trace).enumerate() {
        println!("{i:>5} {e:>12.6} {c:>12.6e}");
    }
    if let Some(c) = r.converged_corner {
        println!("converged to corner {c}");
    }
    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect();
    let series = vec![
        Series::new("entropy", pts(&r.entropy_trace)),
        Series::new("1 - max a", pts(&r.corner_distance_trace)),
    ];
    let path = out.join("iterate.svg");
    line_chart(&path, "repeated softmax", "step", "value", &series)?;
    println!("wrote {}", path.display());
    Ok(())
}
