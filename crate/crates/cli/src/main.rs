use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use fat_core::analysis::{
    eval_bound, export_interaction_matrix, gradient_check, load_data, run_scaling_sweep,
    run_training, schema_of, Baseline, BoundInputs, TrainConfig,
};
use fat_core::datagen::{generate_synthetic, oracle_path, resolve_bias, write_dataset, SyntheticSpec};
use fat_core::model::{count_params, FatParams};
use fat_core::FatError;

/// Field-aware transformer toolkit for CTR experiments.
#[derive(Parser)]
#[command(name = "fat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus oracle sidecar).
    GenerateData { spec: PathBuf, out: PathBuf },
    /// Train one model and print its run report.
    Train { config: PathBuf },
    /// Train every width for every seed and fit the power law.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// `smallest`, `standard`, or a fixed AUC value.
        #[arg(long, default_value = "smallest")]
        baseline: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a layer's field-pair modulation as CSV.
    ExportW {
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the generalization bound.
    Bound {
        #[arg(long = "F")]
        fields: usize,
        #[arg(long = "d")]
        dim: usize,
        #[arg(long = "m")]
        samples: u64,
        #[arg(long = "R")]
        r: f64,
        /// Shared bound for the Q, K and V projections.
        #[arg(long = "B")]
        b: f64,
        #[arg(long = "Bw")]
        b_w: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        c_lead: f64,
    },
    /// Compare analytic gradients with central differences.
    CheckGrad {
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Probe at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
    },
    /// Print itemized parameter counts for a config.
    CountParams { config: PathBuf },
}

fn parse_baseline(s: &str) -> anyhow::Result<Baseline> {
    Ok(match s {
        "smallest" => Baseline::Smallest,
        "standard" => Baseline::Standard,
        other => Baseline::Fixed(
            other
                .parse()
                .with_context(|| format!("baseline '{other}' is not smallest, standard or a number"))?,
        ),
    })
}

fn run(cli: Cli) -> anyhow::Result<Option<Value>> {
    match cli.command {
        Command::GenerateData { spec, out } => {
            let spec = SyntheticSpec::from_json_file(&spec)?;
            let data = generate_synthetic(&spec)?;
            write_dataset(&out, &data)?;
            Ok(Some(json!({
                "rows": data.len(),
                "positive_rate": data.positive_rate(),
                "bias": resolve_bias(&spec)?,
                "oracle_auc": data.oracle_auc().ok(),
                "path": out,
                "oracle_path": oracle_path(&out),
            })))
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let out = run_training(&cfg)?;
            if let Some(d) = &out.report.diverged {
                return Err(FatError::Diverged {
                    step: d.step,
                    reason: d.reason.clone(),
                }
                .into());
            }
            Ok(Some(serde_json::to_value(&out.report)?))
        }
        Command::Sweep {
            config,
            widths,
            seeds,
            baseline,
            out,
        } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let report = run_scaling_sweep(&cfg, &widths, &seeds, parse_baseline(&baseline)?)?;
            let value = serde_json::to_value(&report)?;
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
            }
            Ok(Some(value))
        }
        Command::ExportW { checkpoint, layer, out } => {
            let params = FatParams::load(&checkpoint)?;
            let w = export_interaction_matrix(&params, layer)?;
            match out {
                Some(path) => {
                    w.write_csv(&path)?;
                    Ok(Some(json!({ "path": path, "layer": layer, "heads": w.heads.len() })))
                }
                None => {
                    w.write_csv_to(std::io::stdout().lock())?;
                    Ok(None)
                }
            }
        }
        Command::Bound {
            fields,
            dim,
            samples,
            r,
            b,
            b_w,
            delta,
            c_lead,
        } => {
            let inputs = BoundInputs {
                fields,
                dim,
                samples,
                r,
                b_q: b,
                b_k: b,
                b_v: b,
                b_w,
                delta,
                c_lead,
            };
            let result = eval_bound(&inputs)?;
            Ok(Some(json!({ "inputs": inputs, "result": result })))
        }
        Command::CheckGrad {
            config,
            batch,
            step,
            tolerance,
            max_coords,
        } => {
            if batch == 0 {
                bail!(FatError::Config("batch must be at least 1".into()));
            }
            let cfg = TrainConfig::from_json_file(&config)?;
            let data = load_data(&cfg)?;
            let schema = &data.train.schema;
            let model = cfg.model.resolve(schema);
            let params = FatParams::seeded(&model, schema, cfg.seed)?;
            let n = batch.min(data.train.len());
            let labels = data.train.labels_f64();
            let groups = gradient_check(&params, &data.train.rows[..n], &labels[..n], step, max_coords, cfg.seed)?;
            let worst = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
            Ok(Some(json!({
                "batch": n,
                "step": step,
                "tolerance": tolerance,
                "max_relative_error": worst,
                "pass": worst <= tolerance,
                "groups": groups,
            })))
        }
        Command::CountParams { config } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let schema = schema_of(&cfg)?;
            let model = cfg.model.resolve(&schema);
            model.validate()?;
            Ok(Some(json!({
                "model": model,
                "total_vocab": schema.total_vocab(),
                "count": count_params(&model, schema.total_vocab()),
            })))
        }
    }
}

fn error_json(err: &anyhow::Error) -> Value {
    let kind = err.downcast_ref::<FatError>().map_or("error", FatError::kind);
    let mut body = json!({ "kind": kind, "message": format!("{err:#}") });
    if let Some(FatError::Resource { count, limit, .. }) = err.downcast_ref::<FatError>() {
        body["count"] = json!(count.to_string());
        body["limit"] = json!(limit.to_string());
    }
    json!({ "error": body })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Some(value)) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("values serialize"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}
