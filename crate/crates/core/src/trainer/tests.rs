use super::*;
use crate::backbone::{DenoiserConfig, ScheduleConfig};
use crate::sketchrep::synth::{synth_concept, SyntheticConceptSpec, TextureKind};

fn tiny_base() -> BaseModel {
    let cfg = DenoiserConfig { size: 32, channels: [8, 8, 8, 8], groups: 2, heads: 2, text_dim: 8, context_len: 20, time_dim: 8 };
    let mut b = BaseModel::init(cfg, ScheduleConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = b.params.names().cloned().collect();
    for n in names {
        for x in b.params.get_mut(&n).unwrap().data_mut() {
            *x += 0.05 * gaussian(&mut rng) as f32;
        }
    }
    b
}

fn pairs(n: usize) -> Vec<TrainingPair> {
    let spec = SyntheticConceptSpec::new("toy-red", "toy", [0.9, 0.2, 0.2], TextureKind::Stripes, 30.0).unwrap();
    synth_concept(&spec, n, 0, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().training_pairs()
}

fn spec(steps: usize, flags: AblationFlags) -> TrainSpec {
    let st = |seed| StageConfig { steps, batch: 2, lr: 1e-2, seed, augment: true, grad_clip: 1.0 };
    TrainSpec { concept_id: "toy-red".into(), class_name: "toy".into(), stage1: st(0), stage2: st(1), flags, weights: LossWeights::default() }
}

#[test]
fn init_token_copies_the_class_row() {
    let b = tiny_base();
    let t = init_token("toy", &b).unwrap();
    assert_eq!(t.v, b.embedding("toy").unwrap().into_data());
    let mut u = init_token("toy", &b).unwrap();
    u.v[0] += 1.0;
    assert_eq!(init_token("toy", &b).unwrap(), t);
    assert!(matches!(init_token("zebra", &b), Err(Error::UnknownWord(_))));
}

#[test]
fn zero_steps_leave_the_token_at_init() {
    let b = tiny_base();
    let init = init_token("toy", &b).unwrap();
    let cfg = StageConfig { steps: 0, ..StageConfig::stage1() };
    let mut log = Vec::new();
    assert_eq!(run_stage1(&b, &pairs(1), &init, &cfg, &LossWeights::default(), &mut log).unwrap(), init);
    assert!(log.is_empty());
}

#[test]
fn freeze_contract_and_determinism() {
    let b = tiny_base();
    let before = (b.params.clone(), b.encoder.clone());
    let ps = pairs(2);
    let c = train_concept(&b, &ps, &spec(3, AblationFlags::default())).unwrap();
    assert_eq!((b.params.clone(), b.encoder.clone()), before);
    assert_ne!(c.token.v, init_token("toy", &b).unwrap().v);
    let f_d = c.f_d.as_ref().unwrap();
    assert!(!c.f_c.params.diff(&b.encoder.params).is_empty());
    assert!(!f_d.params.diff(&b.encoder.params).is_empty());
    assert_eq!(c.record.stage1_losses.len(), 3);
    assert_eq!(c.record.stage2_losses.len(), 3);
    assert_eq!(c.record.base_hash, b.hash());
    let again = train_concept(&b, &ps, &spec(3, AblationFlags::default())).unwrap();
    assert_eq!(c, again);
    assert_eq!(c.hash(), again.hash());
}

#[test]
fn perturbed_base_fails_the_checksum() {
    let b = tiny_base();
    let before = b.frozen_checksums();
    let mut p = b.clone();
    p.params.get_mut("unet.mid.res.c1.w").unwrap().data_mut()[0] += 1e-3;
    assert!(verify_frozen(&p, &before).is_err());
    assert!(verify_frozen(&b, &before).is_ok());
}

#[test]
fn stage1_touches_only_v() {
    let b = tiny_base();
    let init = init_token("toy", &b).unwrap();
    let mut log = Vec::new();
    let cfg = StageConfig { steps: 2, batch: 1, ..StageConfig::stage1() };
    let v = run_stage1(&b, &pairs(1), &init, &cfg, &LossWeights::default(), &mut log).unwrap();
    assert_eq!(v.v.len(), b.text_dim());
    assert!(v.v.iter().zip(&init.v).filter(|(a, b)| a != b).count() > 0);
}

#[test]
fn ablation_variants_build_matching_encoders() {
    let b = tiny_base();
    let ps = pairs(1);
    for (name, input, has_d) in
        [("single_sketch", SketchInput::Merged, false), ("single_encoder", SketchInput::Gray, false), ("skip_stage1", SketchInput::Dual, true)]
    {
        let flags = AblationFlags::parse(name).unwrap();
        let c = train_concept(&b, &ps, &spec(1, flags)).unwrap();
        assert_eq!(c.input, input);
        assert_eq!(c.f_d.is_some(), has_d);
        let p = c.pyramid(&ps[0].sketch, &ps[0].mask).unwrap();
        assert!(p.all_finite());
    }
    let c = train_concept(&b, &ps, &spec(1, AblationFlags::parse("skip_stage1").unwrap())).unwrap();
    assert!(c.record.stage1_losses.is_empty());
    let c = train_concept(&b, &ps, &spec(1, AblationFlags::parse("no_masked_features").unwrap())).unwrap();
    assert!(!c.masked);
}

#[test]
fn flags_parse_and_name() {
    assert_eq!(AblationFlags::parse("full").unwrap(), AblationFlags::default());
    let f = AblationFlags::parse("no_shape_loss+no_reg_loss").unwrap();
    assert!(f.no_shape_loss && f.no_reg_loss && !f.single_sketch);
    assert_eq!(f.name(), "no_shape_loss+no_reg_loss");
    assert_eq!(AblationFlags::default().name(), "full");
    assert!(AblationFlags::parse("no_such_flag").is_err());
    let w = f.weights(LossWeights::default());
    assert_eq!((w.shape, w.reg), (0.0, 0.0));
}

#[test]
fn loss_trends_down_and_pair_counts() {
    let b = tiny_base();
    let mut s = spec(60, AblationFlags::default());
    s.stage1.augment = false;
    let r = stage1_token(&b, &pairs(1), &s).unwrap();
    let mean = |xs: &[LossTerms]| xs.iter().map(|t| t.total).sum::<f64>() / xs.len() as f64;
    assert!(mean(&r.losses[40..]) < mean(&r.losses[..20]), "{} vs {}", mean(&r.losses[..20]), mean(&r.losses[40..]));
    train_concept(&b, &pairs(6), &spec(1, AblationFlags::default())).unwrap();
    assert!(train_concept(&b, &[], &spec(1, AblationFlags::default())).is_err());
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let rows = loss_csv(&[LossTerms::default(), LossTerms { total: 1.5, ..Default::default() }]);
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "step,l_rec,l_fg,l_bg,l_reg,total");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,") && lines[2].ends_with(",1.5"));
}
