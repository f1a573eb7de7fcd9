use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use muse_core::datasets::{
    build_dataset, builtin_pools, write_jsonl, BuildConfig, DatasetKind, DirSink, SourceDir, Subtype, TemplatePool,
};

use crate::manifest::RunManifest;
use crate::settings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Mucaps,
    Muimage,
    Muvideo,
    Muedit,
    All,
}

impl KindArg {
    fn kinds(self) -> Vec<DatasetKind> {
        match self {
            KindArg::Mucaps => vec![DatasetKind::Mucaps],
            KindArg::Muimage => vec![DatasetKind::Muimage],
            KindArg::Muvideo => vec![DatasetKind::Muvideo],
            KindArg::Muedit => vec![DatasetKind::Muedit],
            KindArg::All => DatasetKind::ALL.to_vec(),
        }
    }
}

#[derive(clap::Args, Debug)]
#[command(group = clap::ArgGroup::new("material").required(true).args(["synthetic", "source_dir"]))]
pub struct Args {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Generate seeded synthetic material.
    #[arg(long)]
    synthetic: bool,
    /// Folder of wav clips, png images, npy videos and per-song track folders.
    #[arg(long)]
    source_dir: Option<PathBuf>,
    /// Records per dataset kind.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Folder of `<subtype>.instructions.txt` / `<subtype>.responses.txt`
    /// overriding the shipped pools.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let file = settings::load(a.config.as_deref())?;
    let defaults = BuildConfig::default();
    let cfg = BuildConfig {
        count: settings::pick(a.count, &file, "count", defaults.count)?,
        seed: settings::resolve_seed(a.seed, &file)?,
        n_audio_tokens: settings::pick(None, &file, "n_audio_tokens", defaults.n_audio_tokens)?,
        sample_rate: settings::pick(None, &file, "sample_rate", defaults.sample_rate)?,
        clip_seconds: settings::pick(None, &file, "clip_seconds", defaults.clip_seconds)?,
        image_size: settings::pick(None, &file, "image_size", defaults.image_size)?,
        video_frames: settings::pick(None, &file, "video_frames", defaults.video_frames)?,
        video_size: settings::pick(None, &file, "video_size", defaults.video_size)?,
    };
    let mut pools = builtin_pools();
    if let Some(dir) = &a.templates {
        for s in Subtype::ALL {
            if dir.join(format!("{s}.instructions.txt")).exists() {
                pools.insert(s, TemplatePool::from_dir(dir, s)?);
            }
        }
    }
    let source = match &a.source_dir {
        Some(d) => Some(SourceDir::scan(d).with_context(|| format!("scanning {}", d.display()))?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut sink = DirSink::new(&a.out)?;
    let mut manifest = RunManifest::new("dataset", a.config.as_deref(), cfg.seed, serde_json::to_value(&cfg)?);
    if let Some(d) = &a.source_dir {
        manifest.inputs.push(d.clone());
    }
    let mut counts: BTreeMap<Subtype, usize> = BTreeMap::new();
    for kind in a.kind.kinds() {
        let built = build_dataset(kind, &cfg, &pools, source.as_ref(), &mut sink)
            .with_context(|| format!("building {kind}"))?;
        for (_, m) in &built {
            *counts.entry(m.subtype).or_default() += 1;
        }
        let (records, metas): (Vec<_>, Vec<_>) = built.into_iter().unzip();
        let rec_path = a.out.join(format!("{kind}.jsonl"));
        let meta_path = a.out.join(format!("{kind}.meta.jsonl"));
        write_jsonl(&rec_path, &records)?;
        write_jsonl(&meta_path, &metas)?;
        println!("{kind}: {} records -> {}", records.len(), rec_path.display());
        manifest.outputs.extend([rec_path, meta_path]);
    }
    for (s, n) in &counts {
        println!("  {s}: {n}");
    }
    manifest.outputs.push(a.out.join("media"));
    manifest.write(&a.out)
}
