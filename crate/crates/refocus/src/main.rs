use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use refocus::bench::{run_experiment_1, run_experiment_2, AnnotationMasks, BaseCache, ExperimentData, ExperimentReport, ExperimentSettings};
use refocus::config::Config;
use refocus::{ingest, store};
use refocus_core::annotation::PolygonAnnotation;
use refocus_core::dataset::split_dataset;
use refocus_core::synth::{generate, SyntheticConfig};

#[derive(Parser)]
#[command(name = "refocus", version, about = "Attention-correction workbench service and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// TOML configuration file; REFOCUS_PORT, REFOCUS_DATA_DIR and REFOCUS_DEVICE override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Prediction-only versus prediction + attention fine-tuning.
    Exp1(ExpArgs),
    /// Focused versus random annotation strategies.
    Exp2(ExpArgs),
}

#[derive(Args)]
struct ExpArgs {
    /// `synthetic` or a dataset directory holding `labels.csv` and images.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Target label name; defaults to the first label.
    #[arg(long)]
    label: Option<String>,
    /// Seeds to run; the report carries the per-cell median.
    #[arg(long = "seed", default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    /// Fine-tuning epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory for the JSON report and the rendered table.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Polygon annotation JSON files for a dataset directory; defaults to `<data>/annotations`.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Input side length for a dataset directory.
    #[arg(long, default_value_t = 224)]
    image_size: usize,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config } => {
            let config = Config::load(config.as_deref())?;
            tokio::runtime::Runtime::new()?.block_on(refocus::service::serve(config))?;
        }
        Command::Exp1(args) => experiment("exp1", &args)?,
        Command::Exp2(args) => experiment("exp2", &args)?,
    }
    Ok(())
}

fn read_annotations(dir: &Path) -> anyhow::Result<Vec<PolygonAnnotation>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "json") {
            if let Some(a) = store::read_json::<PolygonAnnotation>(&path)? {
                out.push(a);
            }
        }
    }
    Ok(out)
}

fn experiment(name: &str, args: &ExpArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut settings = ExperimentSettings::synthetic();
    if let Some(e) = args.epochs {
        settings.finetune.epochs = e;
    }
    let report = if args.data == "synthetic" {
        let data = generate(&SyntheticConfig::confounded(0))?;
        run(name, args, &mut settings, &ExperimentData::synthetic(&data))?
    } else {
        let root = PathBuf::from(&args.data);
        let loaded = ingest::load_dataset(&root, &root.join("labels.csv"), args.image_size)?;
        let config = Config::default();
        let manifest = split_dataset(&loaded.manifest, config.split_ratios, config.split_seed)?;
        let dir = args.annotations.clone().unwrap_or_else(|| root.join("annotations"));
        let masks = AnnotationMasks::new(&manifest, read_annotations(&dir)?);
        if masks.is_empty() {
            bail!("no annotations found in {}", dir.display());
        }
        settings.input_size = args.image_size;
        let data = ExperimentData {
            manifest: &manifest,
            images: &loaded.images,
            masks: &masks,
        };
        run(name, args, &mut settings, &data)?
    };
    for s in &report.seeds {
        println!("seed {}\n{}", s.seed, s.table);
    }
    println!("median over {} seeds\n{}", report.seeds.len(), report.median);
    std::fs::create_dir_all(&args.out)?;
    store::write_json(&args.out.join(format!("{name}.json")), &report)?;
    std::fs::write(args.out.join(format!("{name}.txt")), report.median.to_string())?;
    tracing::info!(elapsed = ?started.elapsed(), out = %args.out.display(), "done");
    Ok(())
}

fn run(name: &str, args: &ExpArgs, settings: &mut ExperimentSettings, data: &ExperimentData<'_>) -> anyhow::Result<ExperimentReport> {
    if let Some(label) = &args.label {
        settings.target_label = data
            .manifest
            .label_index(label)
            .with_context(|| format!("unknown label {label}; known: {:?}", data.manifest.label_names))?;
    }
    let mut cache = BaseCache::default();
    Ok(match name {
        "exp1" => run_experiment_1(data, settings, &args.seeds, &mut cache)?,
        _ => run_experiment_2(data, settings, &args.seeds, &mut cache)?,
    })
}
