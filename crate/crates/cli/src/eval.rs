use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use muse_core::datasets::read_jsonl;
use muse_core::encoders::load_input;
use muse_core::fusion::{GenerationControl, SamplingConfig};
use muse_core::media::Waveform;
use muse_core::metrics::{
    clap_score, fad, ib_rank, kl_metric, lsd, text_metrics, AudioEmbedder, EmbeddingSet, MetricReport, RankingTable,
    Task, TextEmbedder, ToyAudioClassifier, ToyAudioEmbedder, ToyTextEmbedder, ToyVisualEmbedder, VisualEmbedder,
    STFT_HOP, STFT_SIZE,
};
use muse_core::model::MuseModel;
use muse_core::output_projection::decode_stub;
use serde::Deserialize;

use crate::manifest::RunManifest;
use crate::settings;

/// Seed of the stand-in embedders; fixed so reports compare across runs.
const METRIC_SEED: u64 = 0;
const EMBED_DIM: usize = 16;
const N_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Mu,
    T2m,
    Edit,
    I2m,
    V2m,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mu => Task::Mu,
            TaskArg::T2m => Task::T2m,
            TaskArg::Edit => Task::Edit,
            TaskArg::I2m => Task::I2m,
            TaskArg::V2m => Task::V2m,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// JSONL of `{candidate, reference, prompt, media}` rows.
    #[arg(long)]
    manifest: PathBuf,
    /// Model used to fill rows that have no candidate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test harness for generated candidates, see `generate`.
    #[arg(long)]
    force_audio_after: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// One evaluation pair. Text for `mu`, wav paths otherwise; paths are
/// relative to the manifest.
#[derive(Debug, Deserialize)]
struct Row {
    candidate: Option<String>,
    reference: String,
    /// Instruction or caption; needed for `t2m` and for generated candidates.
    prompt: Option<String>,
    /// Conditioning input: music for `mu`/`edit`, image or video for `i2m`/`v2m`.
    media: Option<String>,
}

struct Generator {
    model: MuseModel,
    sampling: SamplingConfig,
    control: GenerationControl,
    seed: u64,
}

impl Generator {
    fn run(&self, row: &Row, idx: usize, root: &Path, want_audio: bool) -> Result<(String, Option<Waveform>)> {
        let prompt = row
            .prompt
            .as_deref()
            .ok_or_else(|| anyhow!("row {idx} has no candidate and no prompt"))?;
        let media = match &row.media {
            Some(m) => vec![load_input(&root.join(m)).with_context(|| format!("reading {m}"))?],
            None => Vec::new(),
        };
        let seed = self.seed.wrapping_add(idx as u64);
        let r = self.model.respond(prompt, &media, &self.sampling, &self.control, seed)?;
        if !want_audio {
            return Ok((muse_core::datasets::strip_audio_markers(&r.text), None));
        }
        let cond = r
            .conditioning
            .ok_or_else(|| anyhow!("row {idx}: the model produced no audio tokens"))?;
        Ok((r.text, Some(decode_stub(&cond, 2.0, seed)?)))
    }
}

fn read_wav(root: &Path, rel: &str) -> Result<Waveform> {
    Waveform::read_wav(&root.join(rel)).with_context(|| format!("reading {rel}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run(a: Args) -> Result<()> {
    let task: Task = a.task.into();
    let file = settings::load(a.config.as_deref())?;
    let seed = settings::resolve_seed(a.seed, &file)?;
    let rows: Vec<Row> = read_jsonl(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    if rows.is_empty() {
        bail!("evaluation manifest {} is empty", a.manifest.display());
    }
    let root = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let generator = match &a.checkpoint {
        Some(c) => Some(Generator {
            model: MuseModel::load(c).with_context(|| format!("loading {}", c.display()))?.0,
            sampling: SamplingConfig::default(),
            control: GenerationControl {
                force_audio_after: a.force_audio_after,
            },
            seed,
        }),
        None => None,
    };

    let mut metrics = BTreeMap::new();
    let mut notes = BTreeMap::new();
    if task == Task::Mu {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            let c = match (&row.candidate, &generator) {
                (Some(c), _) => c.clone(),
                (None, Some(g)) => g.run(row, i, &root, false)?.0,
                (None, None) => bail!("row {i} has no candidate and no --checkpoint was given"),
            };
            cands.push(c);
            refs.push(row.reference.clone());
        }
        let s = text_metrics(&cands, &refs)?;
        metrics.insert("bleu".to_string(), s.bleu);
        metrics.insert("rouge_l".to_string(), s.rouge_l);
        notes.insert("bleu".into(), "corpus, 1-4-gram uniform, add-1e-9 smoothing".into());
    } else {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            let c = match (&row.candidate, &generator) {
                (Some(c), _) => read_wav(&root, c)?,
                (None, Some(g)) => g.run(row, i, &root, true)?.1.expect("audio requested"),
                (None, None) => bail!("row {i} has no candidate and no --checkpoint was given"),
            };
            cands.push(c);
            refs.push(read_wav(&root, &row.reference)?);
        }
        let embedder = ToyAudioEmbedder::new(EMBED_DIM, METRIC_SEED);
        let embed = |ws: &[Waveform]| ws.iter().map(|w| embedder.embed(w)).collect::<muse_core::Result<Vec<_>>>();
        let ref_emb = embed(&refs)?;
        let cand_emb = embed(&cands)?;
        metrics.insert(
            "fad".into(),
            fad(&EmbeddingSet::new(ref_emb.clone(), "reference")?, &EmbeddingSet::new(cand_emb.clone(), "candidate")?)?,
        );
        metrics.insert("kl".into(), kl_metric(&refs, &cands, &ToyAudioClassifier::new(N_CLASSES, METRIC_SEED))?);
        match task {
            Task::T2m => {
                let text = ToyTextEmbedder::new(EMBED_DIM, METRIC_SEED);
                let mut scores = Vec::new();
                for (i, (row, e)) in rows.iter().zip(&cand_emb).enumerate() {
                    let p = row.prompt.as_deref().ok_or_else(|| anyhow!("t2m row {i} has no prompt"))?;
                    scores.push(clap_score(e, &text.embed_text(p)?)?);
                }
                metrics.insert("clap".into(), mean(&scores));
            }
            Task::Edit => {
                let mut vals = Vec::new();
                let mut truncated = 0;
                for (c, r) in cands.iter().zip(&refs) {
                    let l = lsd(r, c)?;
                    truncated += usize::from(l.truncated);
                    vals.push(l.value);
                }
                metrics.insert("lsd".into(), mean(&vals));
                notes.insert("lsd".into(), format!("STFT {STFT_SIZE}/{STFT_HOP} Hann, log10 power floor 1e-10"));
                notes.insert("lsd_truncated_pairs".into(), truncated.to_string());
            }
            Task::I2m | Task::V2m => {
                let visual = ToyVisualEmbedder::new(EMBED_DIM, METRIC_SEED);
                let mut anchors = Vec::new();
                for (i, row) in rows.iter().enumerate() {
                    let m = row.media.as_deref().ok_or_else(|| anyhow!("{task} row {i} has no media"))?;
                    anchors.push(visual.embed_visual(&load_input(&root.join(m)).with_context(|| format!("reading {m}"))?)?);
                }
                let systems: Vec<Vec<Vec<f64>>> =
                    cand_emb.iter().zip(&ref_emb).map(|(c, r)| vec![c.clone(), r.clone()]).collect();
                let table = RankingTable::from_similarities(&anchors, &systems)?;
                metrics.insert("ib_rank".into(), ib_rank(&table)?[0]);
                notes.insert("ib_rank".into(), "candidate ranked against the reference audio (N = 2)".into());
            }
            Task::Mu => unreachable!(),
        }
        notes.insert("kl".into(), "mean KL(reference || candidate), floor 1e-10".into());
    }
    notes.insert("embedders".into(), format!("seeded stand-ins, dim {EMBED_DIM}, seed {METRIC_SEED}"));

    let mut report = MetricReport::new(task, metrics, rows.len())?;
    report.notes = notes;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report_path = a.out.join("report.json");
    let json = report.to_json()?;
    std::fs::write(&report_path, json.clone() + "\n")?;
    println!("{json}");

    let resolved = serde_json::json!({ "task": task, "embed_dim": EMBED_DIM, "n_classes": N_CLASSES, "metric_seed": METRIC_SEED });
    let mut manifest = RunManifest::new("eval", a.config.as_deref(), seed, resolved);
    manifest.inputs = std::iter::once(a.manifest.clone()).chain(a.checkpoint.clone()).collect();
    manifest.outputs = vec![report_path];
    manifest.write(&a.out)
}
