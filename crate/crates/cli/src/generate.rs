use std::path::PathBuf;

use anyhow::{Context, Result};
use muse_core::encoders::load_input;
use muse_core::fusion::{GenerationControl, SamplingConfig};
use muse_core::model::MuseModel;
use muse_core::output_projection::decode_stub;

use crate::manifest::RunManifest;
use crate::settings;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    prompt: String,
    /// Image (png/npy), video (npy) or music (wav) input; repeatable, one per
    /// modality.
    #[arg(long)]
    media: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test harness: force the audio-token suffix after this many free tokens.
    #[arg(long)]
    force_audio_after: Option<usize>,
    /// Length of the decoded audio in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let file = settings::load(a.config.as_deref())?;
    let seed = settings::resolve_seed(a.seed, &file)?;
    let d = SamplingConfig::default();
    let sampling = SamplingConfig {
        temperature: settings::pick(a.temperature, &file, "temperature", d.temperature)?,
        top_p: settings::pick(a.top_p, &file, "top_p", d.top_p)?,
        max_len: settings::pick(a.max_len, &file, "max_len", d.max_len)?,
    };
    let duration = settings::pick(a.duration, &file, "duration", 2.0)?;
    let control = GenerationControl {
        force_audio_after: a.force_audio_after,
    };
    let (model, stage) =
        MuseModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let media = a
        .media
        .iter()
        .map(|p| load_input(p).with_context(|| format!("reading media {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let r = model.respond(&a.prompt, &media, &sampling, &control, seed)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text_path = a.out.join("response.txt");
    let tokens_path = a.out.join("tokens.json");
    std::fs::write(&text_path, format!("{}\n", r.text))?;
    std::fs::write(&tokens_path, serde_json::to_string(&r.tokens)? + "\n")?;
    println!("{}", r.text);
    let mut outputs = vec![text_path, tokens_path];
    match (&r.audio_tokens, &r.conditioning) {
        (Some(span), Some(cond)) => {
            let ids = &r.tokens[span.clone()];
            println!("audio tokens ({}): {ids:?}", ids.len());
            let cond_path = a.out.join("conditioning.safetensors");
            let wav_path = a.out.join("output.wav");
            cond.save(&cond_path)?;
            decode_stub(cond, duration, seed)?.write_wav(&wav_path)?;
            println!("wrote {}", wav_path.display());
            outputs.extend([cond_path, wav_path]);
        }
        _ => println!("no audio tokens; text only"),
    }

    let resolved = serde_json::json!({
        "sampling": sampling,
        "control": control,
        "duration_s": duration,
        "checkpoint_stage": stage,
        "prompt": a.prompt,
    });
    let mut manifest = RunManifest::new("generate", a.config.as_deref(), seed, resolved);
    manifest.inputs = std::iter::once(a.checkpoint.clone()).chain(a.media.iter().cloned()).collect();
    manifest.outputs = outputs;
    manifest.write(&a.out)
}
