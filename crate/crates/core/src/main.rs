use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use metric_forge::config::{DataSource, RunConfig};
use metric_forge::data::{generate_synthetic, Sampler, SyntheticSpec};
use metric_forge::error::{Error, Result};
use metric_forge::eval::{evaluate, EvalMetric, RetrievalReport};
use metric_forge::gradcheck::{check_all, corrupt, default_registry, GradReport, DEFAULT_TOLERANCE};
use metric_forge::io::{read_dataset, write_dataset, write_history, write_matrix_with_labels};
use metric_forge::numerics::EmbeddingBatch;
use metric_forge::trainer::{train, LossName};

const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "metric-forge",
    version,
    about = "Deep metric learning losses, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clustered dataset as CSV.
    GenData(GenDataArgs),
    /// Train embeddings and write history, embeddings and a report.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Retrieval metrics for an embeddings file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.15)]
    spread: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration. Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossName>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<Sampler>,
    /// Sub-proxies per class (proxygml).
    #[arg(long = "M")]
    m: Option<usize>,
    /// Selected proxies per sample (proxygml).
    #[arg(long = "K")]
    k: Option<usize>,
    /// Direction regularization weight.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV; replaces the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeds 0..n for every loss.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Perturb one analytic gradient entry of the first loss.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    ks: Vec<usize>,
    #[arg(long, value_parser = parse_metric, default_value = "cosine")]
    metric: EvalMetric,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_sampler(s: &str) -> std::result::Result<Sampler, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown sampler '{s}' (expected uniform or two_per_class)"))
}

fn parse_metric(s: &str) -> std::result::Result<EvalMetric, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown metric '{s}' (expected cosine or squared_euclidean)"))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    loss: &'a str,
    seed: u64,
    epochs: usize,
    num_samples: usize,
    initial: &'a RetrievalReport,
    #[serde(rename = "final")]
    final_report: &'a RetrievalReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        ambient_dim: a.dim,
        class_spread: a.spread,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec)?;
    write_dataset(&a.out, &d)?;
    println!(
        "wrote {}: N={} C={} D={}",
        a.out.display(),
        d.len(),
        d.num_classes(),
        d.dim()
    );
    Ok(ExitCode::SUCCESS)
}

fn build_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(name) = a.loss {
        cfg.loss.name = name;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = Some(v);
    }
    if let Some(v) = a.sampler {
        cfg.train.sampler = Some(v);
    }
    if let Some(v) = a.m {
        cfg.loss.gml_m = v;
    }
    if let Some(v) = a.k {
        cfg.loss.gml_k = v;
    }
    if let Some(v) = a.gamma {
        cfg.loss.gamma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = Some(v);
    }
    if let Some(p) = &a.data {
        cfg.data = DataSource::Path(p.clone());
    }
    if let Some(p) = &a.out_dir {
        cfg.output_dir = p.clone();
    }
    cfg.resolve()
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = build_run_config(&a)?;
    if a.dump_config {
        println!("{}", cfg.to_json_pretty()?);
        return Ok(ExitCode::SUCCESS);
    }
    let dataset = cfg.data.load()?;
    if let Some(&k) = cfg.eval.ks.iter().find(|&&k| k == 0 || k >= dataset.len()) {
        return Err(Error::KTooLarge { k, n: dataset.len() });
    }
    let tc = cfg.to_train_config();
    let outcome = train(&dataset, &tc)?;
    let batch = EmbeddingBatch::new(outcome.embeddings.clone(), dataset.labels.clone())?;
    let report = evaluate(&batch, &cfg.eval.ks, cfg.eval.metric)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_history(&dir.join("history.csv"), &outcome.history)?;
    write_matrix_with_labels(&dir.join("embeddings.csv"), &outcome.embeddings, &dataset.labels)?;
    let summary = TrainReport {
        loss: tc.loss.name.as_str(),
        seed: tc.seed,
        epochs: tc.epochs,
        num_samples: dataset.len(),
        initial: &outcome.initial,
        final_report: &report,
    };
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&report_path, json).map_err(|e| io_error(&report_path, e))?;

    let r1 = match report.recall_at_k.get(&1) {
        Some(&r) => r,
        None => outcome.report.recall_at_k[&1],
    };
    println!("recall@1 = {r1:.4}");
    Ok(ExitCode::SUCCESS)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if !(a.tolerance > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be positive, got {}",
            a.tolerance
        )));
    }
    let mut registry = default_registry();
    if a.inject_fault {
        let first = registry.remove(0);
        registry.insert(0, corrupt(first, 0, 0, 0, 1e-2));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let reports = check_all(&registry, &seeds, a.tolerance);
    print_table(&reports);
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed (tolerance {:e})",
        reports.len(),
        failed,
        a.tolerance
    );
    if failed > 0 {
        Ok(ExitCode::from(EXIT_GRADCHECK))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn print_table(reports: &[GradReport]) {
    println!(
        "{:<24} {:>5} {:>12} {:>12}  status",
        "loss", "seed", "max_rel", "max_abs"
    );
    for r in reports {
        println!(
            "{:<24} {:>5} {:>12.3e} {:>12.3e}  {}",
            r.loss,
            r.seed,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            if let Some(c) = &r.worst_coordinate {
                println!("    worst at {}[{}, {}]", c.matrix, c.row, c.col);
            }
            for n in &r.notes {
                println!("    {n}");
            }
        }
    }
}

fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let d = read_dataset(&a.embeddings)?;
    let batch = EmbeddingBatch::new(d.features, d.labels)?;
    let report = evaluate(&batch, &a.ks, a.metric)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, json).map_err(|e| io_error(p, e))?,
        None => print!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}
