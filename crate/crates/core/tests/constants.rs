use muse_core::encoders::{EncoderConfig, Modality};
use muse_core::fusion::{FusionConfig, SamplingConfig};
use muse_core::output_projection::CondTarget;
use muse_core::training::{Stage, TrainConfig};

#[test]
fn stage_hyperparameters() {
    let epochs: Vec<usize> = Stage::ALL.iter().map(|s| TrainConfig::for_stage(*s, 0).epochs).collect();
    assert_eq!(epochs, [5, 5, 2]);
    for s in Stage::ALL {
        let c = TrainConfig::for_stage(s, 0);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.lora_rank, 8);
    }
}

#[test]
fn sampling_defaults() {
    let s = SamplingConfig::default();
    assert_eq!((s.temperature, s.top_p, s.max_len), (0.6, 0.8, 512));
}

#[test]
fn full_scale_shapes() {
    let e = EncoderConfig::full(0);
    assert_eq!(e.shape(Modality::Music), (25, 1024));
    assert_eq!(e.shape(Modality::Image), (197, 768));
    assert_eq!(e.shape(Modality::Video), (3137, 768));
    assert_eq!(CondTarget::Audioldm2.shape(), (1, 512));
    assert_eq!(CondTarget::Musicgen.shape(), (512, 768));
    let f = FusionConfig::full_scale(0);
    assert_eq!((f.n_layers, f.block_len, f.d_model, f.n_audio_tokens), (32, 6, 4096, 8));
    // Three injected blocks of L layers each sit at the top of the stack.
    let blocks = f.injection_blocks();
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks[0].1.start, 32 - 18);
    assert_eq!(blocks[2].1.end, 32);
    assert_eq!(FusionConfig::default().n_audio_tokens, 8);
}
