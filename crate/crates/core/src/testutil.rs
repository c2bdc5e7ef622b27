use crate::backbone::{BaseModel, DenoiserConfig, ScheduleConfig};
use crate::losses::LossWeights;
use crate::nn::gaussian;
use crate::sketchrep::synth::{synth_concept, SynthConcept, SyntheticConceptSpec, TextureKind};
use crate::trainer::{train_concept, AblationFlags, Concept, StageConfig, TrainSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig { size: 32, channels: [8, 8, 8, 8], groups: 2, heads: 2, text_dim: 8, context_len: 20, time_dim: 8 }
}

/// Untrained 32×32 base with every weight jittered so all inputs matter.
pub fn tiny_base(seed: u64) -> BaseModel {
    let mut b = BaseModel::init(tiny_cfg(), ScheduleConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let names: Vec<String> = b.params.names().cloned().collect();
    for n in names {
        for x in b.params.get_mut(&n).unwrap().data_mut() {
            *x += 0.05 * gaussian(&mut rng) as f32;
        }
    }
    b
}

pub fn tiny_synth(id: &str, class: &str, deg: f32, seed: u64) -> SynthConcept {
    let spec = SyntheticConceptSpec::new(id, class, [0.9, 0.3, 0.2], TextureKind::Stripes, deg).unwrap();
    synth_concept(&spec, 2, 2, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A concept after two steps of each stage.
pub fn tiny_concept(base: &BaseModel, sc: &SynthConcept, flags: AblationFlags) -> Concept {
    let st = |seed| StageConfig { steps: 2, batch: 1, lr: 1e-2, seed, augment: true, grad_clip: 1.0 };
    let spec = TrainSpec {
        concept_id: sc.spec.concept_id.clone(),
        class_name: sc.spec.class_name.clone(),
        stage1: st(0),
        stage2: st(1),
        flags,
        weights: LossWeights::default(),
    };
    train_concept(base, &sc.training_pairs(), &spec).unwrap()
}
