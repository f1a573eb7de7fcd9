use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use muse_core::datasets::{read_jsonl, DatasetRecord};
use muse_core::model::{ModelConfig, MuseModel};
use muse_core::training::{stage_seed, train_stage, BagOfBytesEmbedder, ExampleBuilder, Stage, TrainConfig, TrainReport};

use crate::manifest::RunManifest;
use crate::settings;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Comma-separated stages to run in order, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: Vec<u8>,
    /// A dataset JSONL file, or a folder of them.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint of the stage preceding the first requested stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the stage default epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// Dataset files under `data`, skipping metadata sidecars.
fn dataset_files(data: &Path) -> Result<Vec<PathBuf>> {
    if !data.exists() {
        bail!("data path {} does not exist", data.display());
    }
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(data)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        name.ends_with(".jsonl") && !name.ends_with(".meta.jsonl")
    });
    files.sort();
    if files.is_empty() {
        bail!("no dataset JSONL files in {}", data.display());
    }
    Ok(files)
}

fn write_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(a: Args) -> Result<()> {
    let stages = a
        .stage
        .iter()
        .map(|&s| Stage::try_from(s))
        .collect::<muse_core::Result<Vec<_>>>()?;
    if stages.windows(2).any(|w| w[1] <= w[0]) {
        bail!("stages must be listed in increasing order");
    }
    let file = settings::load(a.config.as_deref())?;
    let seed = settings::resolve_seed(a.seed, &file)?;
    let files = dataset_files(&a.data)?;
    let mut records: Vec<(PathBuf, Vec<DatasetRecord>)> = Vec::new();
    for f in &files {
        let recs: Vec<DatasetRecord> = read_jsonl(f).with_context(|| format!("reading {}", f.display()))?;
        records.push((f.parent().unwrap_or(Path::new(".")).to_path_buf(), recs));
    }

    let mut model = match &a.resume {
        Some(ckpt) => {
            let (m, done) = MuseModel::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let first = stages[0].number();
            if done + 1 != first {
                bail!(
                    "stage {first} needs a stage-{} checkpoint, but {} is from stage {done}",
                    first - 1,
                    ckpt.display()
                );
            }
            m
        }
        None => {
            let mut cfg = ModelConfig::toy(seed);
            cfg.apply(&file)?;
            cfg.set_seed(seed);
            MuseModel::new(cfg)?
        }
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let embedder = BagOfBytesEmbedder {
        target: model.cfg.projection.target,
        seed,
    };
    let mut stage_cfgs = Vec::new();
    let mut manifest_outputs = Vec::new();
    for &stage in &stages {
        let d = TrainConfig::for_stage(stage, stage_seed(seed, stage));
        let tc = TrainConfig {
            epochs: settings::pick(a.epochs, &file, "epochs", d.epochs)?,
            lr: settings::pick(a.lr, &file, "lr", d.lr)?,
            batch_size: settings::pick(a.batch_size, &file, "batch_size", d.batch_size)?,
            lora_rank: settings::pick(None, &file, "lora_rank", d.lora_rank)?,
            lora_alpha: settings::pick(None, &file, "lora_alpha", d.lora_alpha)?,
            penalty_weight: settings::pick(None, &file, "penalty_weight", d.penalty_weight)?,
            max_steps: match a.max_steps {
                Some(m) => Some(m),
                None => file.get("max_steps")?,
            },
            ..d
        };
        println!(
            "stage {stage}: epochs {} (default {}), lr {:e} (default {:e}), batch {}",
            tc.epochs, d.epochs, tc.lr, d.lr, tc.batch_size
        );
        let mut examples = Vec::new();
        for (root, recs) in &records {
            examples.extend(ExampleBuilder::new(&model, &embedder, root)?.build(stage, recs)?);
        }
        if examples.is_empty() {
            bail!("no stage-{stage} examples in {}", a.data.display());
        }
        let report = train_stage(&mut model, &examples, &tc)?;
        if let Some((first, last)) = report.smoothed_ends(10) {
            println!(
                "  {} examples, {} steps, loss {first:.4} -> {last:.4}",
                examples.len(),
                report.history.len()
            );
        }
        let ckpt = a.out.join(format!("stage{}.safetensors", stage.number()));
        let csv = a.out.join(format!("stage{}_loss.csv", stage.number()));
        model.save(&ckpt, stage.number())?;
        write_csv(&csv, &report)?;
        println!("  checkpoint {}", ckpt.display());
        manifest_outputs.extend([ckpt, csv]);
        stage_cfgs.push(tc);
    }

    let resolved = serde_json::json!({ "model": model.cfg, "stages": stage_cfgs });
    let mut manifest = RunManifest::new("train", a.config.as_deref(), seed, resolved);
    manifest.inputs = files;
    if let Some(r) = &a.resume {
        manifest.inputs.push(r.clone());
    }
    manifest.outputs = manifest_outputs;
    manifest.write(&a.out)
}
