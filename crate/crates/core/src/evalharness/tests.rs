use super::*;
use crate::sketchrep::manifest::{load_concept_dir, write_synth_concept};
use crate::sketchrep::synth::{synth_concept, SyntheticConceptSpec, TextureKind};
use crate::testutil::{tiny_base, tiny_concept, tiny_synth};
use crate::trainer::AblationFlags;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rect(n: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Raster {
    let mut r = Raster::new(n, n);
    for y in y0..y1 {
        for x in x0..x1 {
            r.set(x, y, 1.0);
        }
    }
    r
}

fn noise_image(n: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_planar(n, n, (0..3 * n * n).map(|_| rng.random()).collect()).unwrap()
}

fn stripes(n: usize, deg: f32, seed: u64) -> Image {
    let spec = SyntheticConceptSpec::new("s", "toy", [0.9, 0.5, 0.2], TextureKind::Stripes, deg).unwrap();
    synth_concept(&spec, 1, 0, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().pairs.remove(0).pair.image
}

#[test]
fn cosine_examples() {
    assert!((cosine(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn prompt_text_replaces_the_token_with_the_class() {
    assert_eq!(scored_text("a photo of [v] in the snow", "woman").unwrap(), "a photo of woman in the snow");
    assert!(matches!(scored_text("a photo in the snow", "woman"), Err(Error::MissingPlaceholder(_))));
    let e = PaletteEmbedder::default();
    let snow = Image::filled(16, 16, [0.95, 0.96, 0.98]);
    let beach = Image::filled(16, 16, [0.86, 0.78, 0.55]);
    let t = "a photo of [v] in the snow";
    assert!(prompt_similarity(&e, &snow, t, "cat").unwrap() > prompt_similarity(&e, &beach, t, "cat").unwrap());
    assert!(prompt_similarity(&e, &snow, "a photo of a cat", "cat").is_err());
}

#[test]
fn embeddings_are_unit_norm() {
    let b = tiny_base(0);
    let f = FeatureEmbedder { base: &b };
    let p = PaletteEmbedder::default();
    let img = noise_image(32, 1);
    for v in [f.embed_image(&img).unwrap(), p.embed_image(&img).unwrap(), p.embed_text("a red toy in the jungle").unwrap()] {
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    assert!(f.embed_text("a toy").is_err());
}

#[test]
fn identity_similarity_examples() {
    let b = tiny_base(0);
    let f = FeatureEmbedder { base: &b };
    let red = tiny_synth("r", "toy", 30.0, 1);
    let blue = {
        let spec = SyntheticConceptSpec::new("b", "cup", [0.15, 0.3, 0.85], TextureKind::Dots, 120.0).unwrap();
        synth_concept(&spec, 1, 0, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    };
    let (r0, r1) = (&red.pairs[0].pair, &red.pairs[1].pair);
    let m0 = r0.mask.raster();
    for e in [&f as &dyn Embedder, &PaletteEmbedder::default()] {
        assert!((identity_similarity(e, &r0.image, &r0.image, m0, m0).unwrap() - 1.0).abs() < 1e-9);
        let same = identity_similarity(e, &r1.image, &r0.image, r1.mask.raster(), m0).unwrap();
        let other = identity_similarity(e, &blue.pairs[0].pair.image, &r0.image, blue.pairs[0].pair.mask.raster(), m0).unwrap();
        assert!(other < same, "{}: {other} vs {same}", e.name());
    }
    assert!(matches!(identity_similarity(&f, &r0.image, &r0.image, &Raster::new(32, 32), m0), Err(Error::DegenerateMask(_))));
}

#[test]
fn perceptual_distance_examples() {
    let b = tiny_base(0);
    let f = FeatureEmbedder { base: &b };
    let p = &tiny_synth("r", "toy", 30.0, 1).pairs[0].pair;
    let m = p.mask.raster();
    assert_eq!(perceptual_distance(&f, &p.image, &p.image, m, m).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut recon = p.image.clone();
    for y in 0..32 {
        for x in 0..32 {
            let c = recon.get(x, y).map(|v| (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
            recon.set(x, y, c);
        }
    }
    let noise = noise_image(32, 4);
    let d_rec = perceptual_distance(&f, &recon, &p.image, m, m).unwrap();
    let d_noise = perceptual_distance(&f, &noise, &p.image, m, m).unwrap();
    assert!(d_rec > 0.0 && d_noise > d_rec, "{d_rec} vs {d_noise}");
    assert_eq!(d_noise, perceptual_distance(&f, &p.image, &noise, m, m).unwrap());
}

#[test]
fn masking_precedes_embedding() {
    let b = tiny_base(0);
    let f = FeatureEmbedder { base: &b };
    let p = &tiny_synth("r", "toy", 30.0, 1).pairs[0].pair;
    let m = p.mask.raster();
    let mut moved = p.image.clone();
    let noise = noise_image(32, 9);
    for y in 0..32 {
        for x in 0..32 {
            if m.get(x, y) < 0.5 {
                moved.set(x, y, noise.get(x, y));
            }
        }
    }
    let other = noise_image(32, 10);
    assert_eq!(identity_similarity(&f, &other, &p.image, m, m).unwrap(), identity_similarity(&f, &other, &moved, m, m).unwrap());
    assert_eq!(perceptual_distance(&f, &other, &p.image, m, m).unwrap(), perceptual_distance(&f, &other, &moved, m, m).unwrap());
    assert_eq!(perceptual_distance(&f, &moved, &p.image, m, m).unwrap(), 0.0);
}

#[test]
fn orientation_examples() {
    let full = Raster::filled(64, 64, 1.0);
    let region = rect(64, 20, 20, 44, 44);
    let err = texture_orientation_error(&stripes(64, 30.0, 0), &region, 30.0).unwrap().unwrap();
    assert!(err <= 3.0, "{err}");
    let err = texture_orientation_error(&stripes(64, 90.0, 0), &region, 0.0).unwrap().unwrap();
    assert!((err - 90.0).abs() < 3.0, "{err}");
    let o = dominant_orientation(&noise_image(64, 5), &full).unwrap();
    assert!(!o.defined(), "coherence {}", o.coherence);
    assert_eq!(texture_orientation_error(&noise_image(64, 5), &full, 10.0).unwrap(), None);
    assert_eq!(texture_orientation_error(&Image::filled(64, 64, [0.5; 3]), &full, 10.0).unwrap(), None);
    assert!(texture_orientation_error(&stripes(64, 30.0, 0), &Raster::new(64, 64), 30.0).is_err());
    assert_eq!(line_angle_diff(170.0, 10.0), 20.0);
    assert_eq!(line_angle_diff(0.0, 90.0), 90.0);
}

#[test]
fn silhouette_examples() {
    let bg = [0.5; 3];
    let m = rect(16, 2, 2, 10, 10);
    let mut img = Image::filled(16, 16, bg);
    for y in 0..16 {
        for x in 0..16 {
            if m.get(x, y) > 0.0 {
                img.set(x, y, [0.9, 0.1, 0.1]);
            }
        }
    }
    assert_eq!(silhouette_iou(&img, &m, bg).unwrap(), 1.0);
    assert_eq!(silhouette_iou(&img, &rect(16, 11, 11, 15, 15), bg).unwrap(), 0.0);
    let a = rect(16, 0, 0, 8, 4);
    let b = rect(16, 4, 0, 12, 4);
    assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&Raster::new(4, 4), &Raster::new(4, 4)).unwrap(), 1.0);
}

#[test]
fn masked_mse_examples() {
    let a = Image::filled(4, 4, [0.0; 3]);
    let mut b = a.clone();
    b.set(0, 0, [1.0; 3]);
    assert_eq!(masked_mse(&a, &b, &rect(4, 0, 0, 2, 2)).unwrap(), 0.25);
    assert_eq!(masked_mse(&a, &b, &rect(4, 2, 2, 4, 4)).unwrap(), 0.0);
    assert!(masked_mse(&a, &b, &Raster::new(4, 4)).is_err());
}

fn item(method: &str, concept: &str, scores: &[(&str, f64)]) -> ItemScore {
    ItemScore {
        method: method.into(),
        concept_id: concept.into(),
        item: "x".into(),
        prompt: String::new(),
        seed: 0,
        image: None,
        scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

proptest! {
    #[test]
    fn cells_are_item_means(vals in prop::collection::vec((0usize..2, 0usize..2, -10.0..10.0f64), 1..40)) {
        let items: Vec<ItemScore> = vals.iter().map(|&(m, c, v)| item(["full", "single_sketch"][m], ["a", "b"][c], &[("silhouette_iou", v)])).collect();
        let r = MetricReport::from_items(items);
        for cell in &r.cells {
            let xs: Vec<f64> = r.items.iter().filter(|i| i.method == cell.method && i.concept_id == cell.concept_id).map(|i| i.scores["silhouette_iou"]).collect();
            prop_assert_eq!(xs.len(), cell.n);
            prop_assert!((xs.iter().sum::<f64>() / xs.len() as f64 - cell.mean).abs() < 1e-9);
        }
    }
}

#[test]
fn report_csv_layout() {
    let r = MetricReport::from_items(vec![item("full", "a", &[("identity_similarity", 0.5), ("orientation_error", 10.0)]), item("full", "a", &[("identity_similarity", 0.7)])]);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,concept,prompt_similarity,identity_similarity,perceptual_distance,orientation_error,silhouette_iou,background_mse");
    assert_eq!(lines[1], "full,a,,0.600000,,10.000000,,");
    assert_eq!(r.cell("full", "a", "orientation_error"), Some(10.0));
}

#[test]
fn benchmark_runs_and_is_deterministic() {
    let b = tiny_base(0);
    let sc = tiny_synth("toy-red", "toy", 30.0, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut with_edits = sc.clone();
    with_edits.edits = crate::sketchrep::synth::synth_concept(&sc.spec, 1, 2, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().edits;
    write_synth_concept(dir.path(), &with_edits).unwrap();
    let ds = load_concept_dir(dir.path()).unwrap();
    let variants = [AblationFlags::default(), AblationFlags::parse("single_sketch").unwrap()];
    let mut concepts = BTreeMap::new();
    for v in &variants {
        concepts.insert((v.name(), "toy-red".to_string()), tiny_concept(&b, &sc, v.clone()));
    }
    let out = tempfile::tempdir().unwrap();
    let cfg = BenchConfig { steps: 2, templates: 2, out_dir: Some(out.path().to_path_buf()), ..Default::default() };
    let r = run_benchmark(&b, std::slice::from_ref(&ds), &concepts, &variants, &cfg).unwrap();
    assert_eq!(r.items.len(), 2 * (2 + 2));
    assert!(r.cell("full", "toy-red", "prompt_similarity").is_some());
    assert!(r.cell("single_sketch", "toy-red", "silhouette_iou").is_some());
    assert!(out.path().join("full/toy-red/edit_1.png").exists());
    let again = run_benchmark(&b, std::slice::from_ref(&ds), &concepts, &variants, &BenchConfig { out_dir: None, ..cfg.clone() }).unwrap();
    assert_eq!(r.cells, again.cells);
    concepts.remove(&("single_sketch".to_string(), "toy-red".to_string()));
    assert!(matches!(run_benchmark(&b, &[ds], &concepts, &variants, &cfg), Err(Error::NotFound(_))));
}
