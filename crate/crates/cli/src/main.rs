use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlpix::kv::KvMap;
use vlpix::model::{load_checkpoint, LossMode};
use vlpix::synth::{gen_dataset, load_all, SynthConfig};
use vlpix::tensor::primitive_checks;
use vlpix::train::plot::{render_svg, Metric};
use vlpix::train::{
    eval_retrieval, model_grad_check, resolve_manifest, train, Dataset, RunLog, Split, TrainConfig,
    BEST_CHECKPOINT, MAX_RETRIEVAL_RECORDS,
};

/// Grad-check pass threshold on the relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "vlpix", version, about = "Pixel-level vision-language pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset with a manifest.
    GenData(GenData),
    /// Train a model; any config key can be overridden with `--key value`.
    Train(TrainArgs),
    /// Zero-shot image/text retrieval with a trained checkpoint.
    EvalRetrieval(EvalArgs),
    /// Finite-difference check of every primitive and of the full model.
    GradCheck(GradArgs),
    /// Plot loss curves from one or more run logs as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 96)]
    image_size: usize,
    /// Fraction of records that keep their segmentation map.
    #[arg(long, default_value_t = 0.5)]
    seg_fraction: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// `--key value` pairs; dashes in keys become underscores.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file, or a run directory holding best.ckpt.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest file or dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
    split: String,
    /// Use only the first N records of the split.
    #[arg(long, default_value_t = 100)]
    limit: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Random trials per primitive.
    #[arg(long, default_value_t = 20)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra random coordinates per model check.
    #[arg(long, default_value_t = 40)]
    extra: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    logs: Vec<PathBuf>,
    /// Curve names, in the order of `--logs`; defaults to the file names.
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    /// SVG output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "matching")]
    metric: String,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(vlpix::Error),
}

impl From<vlpix::Error> for Failure {
    fn from(e: vlpix::Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::EvalRetrieval(a) => run_eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenData) -> Outcome {
    let cfg = SynthConfig {
        image_size: a.image_size,
        seg_fraction: a.seg_fraction,
    };
    let manifest = gen_dataset(a.n, a.seed, &a.out, &cfg)?;
    println!("wrote {} records to {}", a.n, manifest.display());
    Ok(())
}

/// Config entries from `--loss-mode segl --lr=1e-3` style arguments. The
/// trailing list may also carry `--config` and `--resume`, which clap only
/// sees when they come first.
fn parse_overrides(args: &[String], a: &mut TrainArgs) -> std::result::Result<KvMap, Failure> {
    let mut kv = KvMap::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("unexpected argument '{flag}'")))?;
        let (key, inline) = match key.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (key, None),
        };
        if key == "resume" && inline.is_none() {
            a.resume = true;
            continue;
        }
        let key = key.replace('-', "_");
        if key != "config" && !TrainConfig::is_key(&key) {
            return Err(Failure::Usage(format!("unknown option '--{}'", key.replace('_', "-"))));
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| Failure::Usage(format!("option '{flag}' needs a value")))?,
        };
        if key == "config" {
            a.config = Some(PathBuf::from(value));
        } else {
            kv.set(&key, value);
        }
    }
    Ok(kv)
}

fn run_train(mut a: TrainArgs) -> Outcome {
    let trailing = std::mem::take(&mut a.overrides);
    let overrides = parse_overrides(&trailing, &mut a)?;
    let mut kv = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| vlpix::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            KvMap::parse(&text)?
        }
        None => KvMap::new(),
    };
    kv.merge(&overrides);
    let cfg = TrainConfig::from_kv(&kv)?;
    let out = train(&cfg, a.resume)?;
    if let Some(last) = out.log.last(Split::Val) {
        println!(
            "step {}: val total {:.4} (mlm {:.4}, itm {:.4}, visual {:.4}, itm acc {:.3})",
            last.step, last.total, last.mlm, last.itm, last.visual, last.itm_acc
        );
    }
    if let Some(best) = out.best_step {
        println!("best checkpoint at step {best}");
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let path = if a.checkpoint.is_dir() {
        a.checkpoint.join(BEST_CHECKPOINT)
    } else {
        a.checkpoint.clone()
    };
    if a.limit > MAX_RETRIEVAL_RECORDS {
        return Err(Failure::Usage(format!(
            "--limit {} exceeds {MAX_RETRIEVAL_RECORDS}",
            a.limit
        )));
    }
    let ckpt = load_checkpoint(&path)?;
    let model = ckpt.model()?;
    let data = Dataset::new(load_all(&resolve_manifest(&a.data))?)?;
    let split = match a.split.as_str() {
        "train" => data.train(),
        "val" => data.val(),
        _ => data.records(),
    };
    let records = &split[..a.limit.min(split.len())];
    let table = eval_retrieval(&model, &ckpt.vocab, records, &a.k)?;
    println!("{} {} records", a.split, table.n);
    println!("{:>6} {:>10} {:>10}", "k", "text R@k", "image R@k");
    for (i, k) in table.ks.iter().enumerate() {
        println!(
            "{k:>6} {:>10.3} {:>10.3}",
            table.text_retrieval[i], table.image_retrieval[i]
        );
    }
    Ok(())
}

fn grad_check(a: GradArgs) -> Outcome {
    let mut worst = 0.0f64;
    println!("{:<28} {:>12}", "primitive", "max rel err");
    for (name, err) in primitive_checks(a.trials)? {
        println!("{name:<28} {err:>12.3e}");
        worst = worst.max(err);
    }
    println!();
    println!("{:<28} {:>12}  worst coordinate", "model", "max rel err");
    for mode in LossMode::ALL {
        let r = model_grad_check(mode, a.seed, a.extra, 1e-5)?;
        println!(
            "{:<28} {:>12.3e}  {} ({} checked)",
            format!("loss_mode {mode}"),
            r.max_rel_err,
            r.worst,
            r.checked
        );
        worst = worst.max(r.max_rel_err);
    }
    if worst < GRAD_TOLERANCE {
        println!("\nall gradients within {GRAD_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Run(vlpix::Error::Numeric(format!(
            "max relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}"
        ))))
    }
}

fn curve_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    // run directories all hold log.csv, so name those curves by directory
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "log" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn plot(a: PlotArgs) -> Outcome {
    let metric: Metric = a.metric.parse().map_err(|e: vlpix::Error| Failure::Usage(e.to_string()))?;
    let split: Split = a.split.parse().map_err(|e: vlpix::Error| Failure::Usage(e.to_string()))?;
    if !a.labels.is_empty() && a.labels.len() != a.logs.len() {
        return Err(Failure::Usage(format!(
            "{} labels given for {} logs",
            a.labels.len(),
            a.logs.len()
        )));
    }
    let mut runs = Vec::with_capacity(a.logs.len());
    for (i, path) in a.logs.iter().enumerate() {
        let name = a.labels.get(i).cloned().unwrap_or_else(|| curve_name(path));
        runs.push((name, RunLog::load(path)?));
    }
    let svg = render_svg(&runs, split, metric)?;
    match &a.out {
        Some(path) => std::fs::write(path, svg).map_err(|e| vlpix::Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => print!("{svg}"),
    }
    Ok(())
}
