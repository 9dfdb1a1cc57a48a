#![allow(dead_code)]

use actgen::critics::CriticConfig;
use actgen::generator::GeneratorConfig;
use actgen::motiondata::{normalize_records, synth_dataset, to_samples, NormalizationStats};
use actgen::textproc::{Vocab, MAX_VOCAB};
use actgen::training::{prepare, DatasetMode, Model, TrainConfig, TrainSample, Trainer};

pub struct ToyData {
    pub samples: Vec<TrainSample>,
    pub vocab: Vocab,
    pub stats: NormalizationStats,
}

pub fn toy_data(seed: u64, captions: usize, variants: usize) -> ToyData {
    let raw = synth_dataset(seed, captions, variants).unwrap();
    let records = to_samples(&raw).unwrap();
    let (stats, _) = NormalizationStats::fit(records.iter().flat_map(|r| &r.actions)).unwrap();
    let records = normalize_records(&stats, &records);
    let texts: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = Vocab::build(&texts, MAX_VOCAB).unwrap();
    let samples = prepare(&records, &vocab, DatasetMode::OneToMany).unwrap();
    ToyData { samples, vocab, stats }
}

pub fn toy_gen(vocab_size: usize) -> GeneratorConfig {
    GeneratorConfig {
        d: 16,
        d_z: 8,
        layers: 2,
        heads: 2,
        d_h: 8,
        d_p: 32,
        n_max: 16,
        vocab_size,
        ..GeneratorConfig::default()
    }
}

pub fn toy_critic() -> CriticConfig {
    CriticConfig {
        conv_channels: vec![8, 8],
        d1_hidden: 16,
        branch_width: 4,
        trunk_hidden: 16,
        ..CriticConfig::default()
    }
}

pub fn toy_trainer(data: &ToyData, cfg: TrainConfig, init_seed: u64) -> Trainer {
    let model = Model::init_params(&toy_gen(data.vocab.len()), &toy_critic(), init_seed).unwrap();
    Trainer::new(model, cfg, data.samples.clone(), data.vocab.clone(), data.stats.clone()).unwrap()
}
