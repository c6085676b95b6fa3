#![allow(dead_code)]

use sbir_core::data::{synth_generate, Dataset, PhotoInput, PrepConfig, Preprocessor, SynthConfig};
use sbir_core::model::{build_triplet, Pairing, Preset, ShareMode, SharingScheme, TripletNet};
use sbir_core::trainer::TrainContext;

pub fn dataset(categories: usize, per_category: usize, validation: usize, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        num_categories: categories,
        photos_per_category: per_category,
        sketches_per_category: per_category,
        validation_sketches_per_category: validation,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn prep(data: &Dataset, pairing: Pairing) -> Preprocessor {
    let mode = match pairing {
        Pairing::SketchEdgemap => PhotoInput::Edgemap,
        Pairing::SketchPhoto => PhotoInput::Rgb,
    };
    Preprocessor::new(PrepConfig::default(), mode, data).unwrap()
}

pub fn net(mode: ShareMode, pairing: Pairing, seed: u64) -> TripletNet {
    let scheme = SharingScheme::resolve(mode, pairing, Preset::Mini).unwrap();
    build_triplet(&scheme, pairing, Preset::Mini, seed).unwrap()
}

pub fn ctx<'a>(data: &'a Dataset, prep: &'a Preprocessor) -> TrainContext<'a> {
    TrainContext {
        manifest: &data.manifest,
        prep,
        checkpoint_dir: None,
        log_path: None,
    }
}
