//! Command-line front end: dataset generation, training, evaluation, the
//! open-set protocol, and the embedding export.

use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vtmatch::chipgen::{generate_dataset, load_dataset, Split};
use vtmatch::experiments::{
    class_universe, config_file_text, evaluate, exhaustive_pairs, read_train_config,
    run_embedding, run_open_set, train, training_pairs, write_cross_csv, write_curve_csv,
    write_embedding_csv, write_embedding_svg, write_eval_csv, write_open_set_csv,
};
use vtmatch::model::{build_model, VtmModel};

#[derive(Parser)]
#[command(
    name = "vtmatch",
    version,
    about = "Open-ended vehicle recognition on synthetic aerial chips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a deterministic synthetic chip dataset.
    GenData {
        /// Output directory (must not already hold a manifest).
        #[arg(long)]
        out: PathBuf,
        /// Chips rendered per class (14 classes).
        #[arg(long = "per-class")]
        per_class: usize,
        /// Fraction of each class assigned to the train split.
        #[arg(long = "train-fraction", default_value_t = 0.75)]
        train_fraction: f64,
        /// Master seed; every chip seed derives from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a matcher on the train split and save it.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Training config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the model checkpoint (a `.config` sidecar lands
        /// next to it).
        #[arg(long)]
        out: PathBuf,
        /// Where to write the loss-per-epoch CSV.
        #[arg(long)]
        curve: PathBuf,
    },
    /// Score a saved model on the test split, probing every wrong class.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint from `train` (reads `<model>.config` too).
        #[arg(long)]
        model: PathBuf,
        /// Where to write the per-class metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 14 leave-one-class-out trainings.
    Openset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Per-class CSV; the yes-rate cross table lands next to it as
        /// `<out stem>.cross.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and export 2-d text embeddings of all 14 classes.
    Embed {
        #[arg(long)]
        data: PathBuf,
        /// Config whose text_dims end in 2.
        #[arg(long)]
        config: PathBuf,
        /// Embedding coordinates CSV.
        #[arg(long)]
        out: PathBuf,
        /// Scatter plot.
        #[arg(long)]
        svg: PathBuf,
    },
}

fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_os_string();
    s.push(".config");
    PathBuf::from(s)
}

fn run() -> Result<(), Box<dyn Error>> {
    match Cli::parse().command {
        Command::GenData {
            out,
            per_class,
            train_fraction,
            seed,
        } => {
            let manifest = generate_dataset(&out, per_class, train_fraction, seed)?;
            println!(
                "wrote {} chips across 14 classes to {}",
                manifest.records.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            curve,
        } => {
            let config = read_train_config(&config)?;
            let dataset = load_dataset(&data)?;
            let pairs = training_pairs(&dataset, &config)?;
            let mut model = build_model(config.model.clone())?;
            let losses = train(&mut model, &dataset, &pairs, &config)?;
            model.save(&out)?;
            std::fs::write(sidecar_path(&out), config_file_text(&config))?;
            write_curve_csv(&curve, &config, &losses)?;
            println!(
                "trained {} epochs on {} pairs; final loss {:.6}",
                config.epochs,
                pairs.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("model -> {}", out.display());
            println!("curve -> {}", curve.display());
        }
        Command::Eval { data, model, out } => {
            let config = read_train_config(&sidecar_path(&model))?;
            let mut model = VtmModel::load(&model, config.model.clone())?;
            let dataset = load_dataset(&data)?;
            let test_idx = dataset.indices_in(Split::Test);
            let universe = class_universe(&dataset, &dataset.indices_in(Split::Train));
            let pairs = exhaustive_pairs(&dataset, &test_idx, &universe, config.seed)?;
            let report = evaluate(&mut model, &dataset, &pairs)?;
            write_eval_csv(&out, &report)?;
            let m = report.overall;
            println!(
                "{} pairs: accuracy {:.6}, tpr {:.6}, tnr {:.6}",
                m.total(),
                m.accuracy(),
                m.tpr(),
                m.tnr()
            );
            println!("report -> {}", out.display());
        }
        Command::Openset { data, config, out } => {
            let config = read_train_config(&config)?;
            let dataset = load_dataset(&data)?;
            let outcome = run_open_set(&dataset, &config)?;
            write_open_set_csv(&out, &config, &outcome)?;
            let cross = out.with_extension("cross.csv");
            write_cross_csv(&cross, &outcome)?;
            let mean: f64 = outcome
                .rows
                .iter()
                .map(|r| r.held_out_metrics.accuracy())
                .sum::<f64>()
                / outcome.rows.len() as f64;
            println!("mean held-out accuracy over 14 runs: {mean:.6}");
            println!("rows -> {}", out.display());
            println!("cross table -> {}", cross.display());
        }
        Command::Embed {
            data,
            config,
            out,
            svg,
        } => {
            let config = read_train_config(&config)?;
            if config.model.text_dims.last() != Some(&2) {
                return Err(format!(
                    "embed needs a config whose text_dims end in 2 (e.g. `text_dims = 16,2`), \
                     got `text_dims = {}`",
                    config
                        .model
                        .text_dims
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                )
                .into());
            }
            let dataset = load_dataset(&data)?;
            let outcome = run_embedding(&dataset, &config)?;
            write_embedding_csv(&out, &config, &outcome.points)?;
            write_embedding_svg(&svg, &outcome.points)?;
            println!("embedded 14 classes");
            println!("coords -> {}", out.display());
            println!("plot -> {}", svg.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
