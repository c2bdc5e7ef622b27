use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketch_concept::backbone::{BaseModel, DenoiserConfig, ScheduleConfig};
use sketch_concept::losses::LossWeights;
use sketch_concept::platform::{encode_base, encode_concept, ConceptStore};
use sketch_concept::sketchrep::synth::{synth_concept, SynthConcept, SyntheticConceptSpec, TextureKind};
use sketch_concept::trainer::{train_concept, AblationFlags, StageConfig, TrainSpec};
use sketch_concept_ffi::*;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

struct World {
    dir: tempfile::TempDir,
    base: *mut SkcBase,
    concept: *mut SkcConcept,
    strokes: CString,
    sc: SynthConcept,
}

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig { size: 32, channels: [8, 8, 8, 8], groups: 2, heads: 2, text_dim: 8, context_len: 20, time_dim: 8 }
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let b = BaseModel::init(tiny_cfg(), ScheduleConfig::default(), 0).unwrap();
    std::fs::write(dir.path().join("base.skb"), encode_base(&b).unwrap()).unwrap();
    let spec = SyntheticConceptSpec::new("toy-red", "toy", [0.9, 0.3, 0.2], TextureKind::Stripes, 30.0).unwrap();
    let sc = synth_concept(&spec, 2, 1, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let st = |seed| StageConfig { steps: 1, batch: 1, lr: 1e-2, seed, augment: false, grad_clip: 1.0 };
    let ts = TrainSpec { concept_id: "toy-red".into(), class_name: "toy".into(), stage1: st(0), stage2: st(1), flags: AblationFlags::default(), weights: LossWeights::default() };
    let c = train_concept(&b, &sc.training_pairs(), &ts).unwrap();
    std::fs::write(dir.path().join("toy.skc"), encode_concept(&c).unwrap()).unwrap();
    ConceptStore::open(dir.path().join("store")).unwrap().save_concept(&c).unwrap();

    let mut base = ptr::null_mut();
    let mut concept = ptr::null_mut();
    unsafe {
        assert_eq!(skc_base_load(cpath(&dir.path().join("base.skb")).as_ptr(), &mut base), SkcStatus::Ok);
        assert_eq!(skc_concept_load_file(cpath(&dir.path().join("toy.skc")).as_ptr(), base, &mut concept), SkcStatus::Ok);
    }
    let strokes = CString::new(serde_json::to_string(&sc.pairs[0].strokes).unwrap()).unwrap();
    World { dir, base, concept, strokes, sc }
}

impl Drop for World {
    fn drop(&mut self) {
        unsafe {
            skc_concept_free(self.concept);
            skc_base_free(self.base);
        }
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(skc_last_error()) }.to_string_lossy().into_owned()
}

fn pixels(img: *const SkcImage) -> Vec<u8> {
    unsafe {
        let n = skc_image_width(img) * skc_image_height(img) * 3;
        let mut buf = vec![0u8; n];
        assert_eq!(skc_image_copy_rgb8(img, buf.as_mut_ptr(), n), SkcStatus::Ok);
        assert_eq!(skc_image_copy_rgb8(img, buf.as_mut_ptr(), n - 1), SkcStatus::BufferTooSmall);
        buf
    }
}

#[test]
fn version_and_hash() {
    let w = world();
    unsafe {
        assert_eq!(CStr::from_ptr(skc_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        assert_eq!(skc_base_size(w.base), 32);
        assert_eq!(skc_base_size(ptr::null()), 0);
        let mut buf = [0 as std::ffi::c_char; 65];
        assert_eq!(skc_base_hash(w.base, buf.as_mut_ptr(), buf.len()), SkcStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap().len(), 64);
        assert_eq!(skc_base_hash(w.base, buf.as_mut_ptr(), 64), SkcStatus::BufferTooSmall);
        assert!(last_error().contains("65"));
    }
}

#[test]
fn generate_is_seeded_and_edit_keeps_outside() {
    let w = world();
    let prompt = CString::new("a photo of [v]").unwrap();
    unsafe {
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), ptr::null(), 0, prompt.as_ptr(), 2, 7, &mut a), SkcStatus::Ok, "{}", last_error());
        assert_eq!(last_error(), "");
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), ptr::null(), 0, prompt.as_ptr(), 2, 7, &mut b), SkcStatus::Ok);
        assert_eq!(pixels(a), pixels(b));

        let src = pixels(a);
        let mut img = ptr::null_mut();
        assert_eq!(skc_image_from_rgb8(32, 32, src.as_ptr(), src.len(), &mut img), SkcStatus::Ok);
        assert_eq!(pixels(img), src);
        let mut blend = vec![0u8; 32 * 32];
        for y in 10..20 {
            for x in 10..20 {
                blend[y * 32 + x] = 1;
            }
        }
        let mut e = ptr::null_mut();
        assert_eq!(skc_edit(w.base, w.concept, img, w.strokes.as_ptr(), blend.as_ptr(), blend.len(), prompt.as_ptr(), 2, 1, &mut e), SkcStatus::Ok, "{}", last_error());
        let out = pixels(e);
        for (i, &m) in blend.iter().enumerate() {
            if m == 0 {
                assert_eq!(out[i * 3..i * 3 + 3], src[i * 3..i * 3 + 3]);
            }
        }
        for p in [a, b, img, e] {
            skc_image_free(p);
        }
    }
}

#[test]
fn errors_map_to_status_codes() {
    let w = world();
    let good = CString::new("a photo of [v]").unwrap();
    unsafe {
        let mut img = ptr::null_mut();
        let no_v = CString::new("a photo of a toy").unwrap();
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), ptr::null(), 0, no_v.as_ptr(), 2, 0, &mut img), SkcStatus::Placeholder);
        assert!(last_error().contains("[v]"));
        let odd = CString::new("a photo of [v] zebra").unwrap();
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), ptr::null(), 0, odd.as_ptr(), 2, 0, &mut img), SkcStatus::UnknownWord);
        let bad = CString::new("[{\"kind\":\"contour\"}]").unwrap();
        assert_eq!(skc_generate(w.base, w.concept, bad.as_ptr(), ptr::null(), 0, good.as_ptr(), 2, 0, &mut img), SkcStatus::InvalidArgument);
        let m = [1u8; 10];
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), m.as_ptr(), m.len(), good.as_ptr(), 2, 0, &mut img), SkcStatus::Shape);
        let empty = [0u8; 32 * 32];
        let mut blank = ptr::null_mut();
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), empty.as_ptr(), empty.len(), good.as_ptr(), 2, 0, &mut blank), SkcStatus::Ok);
        let mut e = ptr::null_mut();
        assert_eq!(skc_edit(w.base, w.concept, blank, w.strokes.as_ptr(), empty.as_ptr(), empty.len(), good.as_ptr(), 2, 0, &mut e), SkcStatus::DegenerateMask);
        assert!(e.is_null());
        skc_image_free(blank);
        assert_eq!(skc_generate(ptr::null(), w.concept, w.strokes.as_ptr(), ptr::null(), 0, good.as_ptr(), 2, 0, &mut img), SkcStatus::NullPointer);
        assert_eq!(skc_generate(w.base, w.concept, w.strokes.as_ptr(), ptr::null(), 0, good.as_ptr(), 2, 0, ptr::null_mut()), SkcStatus::NullPointer);
        assert!(img.is_null());

        let mut b = ptr::null_mut();
        let missing = cpath(&w.dir.path().join("nope.skb"));
        assert_eq!(skc_base_load(missing.as_ptr(), &mut b), SkcStatus::Io);
        std::fs::write(w.dir.path().join("junk.skb"), b"junk").unwrap();
        assert_eq!(skc_base_load(cpath(&w.dir.path().join("junk.skb")).as_ptr(), &mut b), SkcStatus::Integrity);

        let other = BaseModel::init(tiny_cfg(), ScheduleConfig::default(), 9).unwrap();
        std::fs::write(w.dir.path().join("other.skb"), encode_base(&other).unwrap()).unwrap();
        assert_eq!(skc_base_load(cpath(&w.dir.path().join("other.skb")).as_ptr(), &mut b), SkcStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(skc_concept_load_file(cpath(&w.dir.path().join("toy.skc")).as_ptr(), b, &mut c), SkcStatus::BaseMismatch);
        skc_base_free(b);

        let store = cpath(&w.dir.path().join("store"));
        let id = CString::new("toy-red").unwrap();
        assert_eq!(skc_concept_load(store.as_ptr(), id.as_ptr(), w.base, &mut c), SkcStatus::Ok);
        skc_concept_free(c);
        let ghost = CString::new("ghost").unwrap();
        assert_eq!(skc_concept_load(store.as_ptr(), ghost.as_ptr(), w.base, &mut c), SkcStatus::NotFound);
        skc_image_free(ptr::null_mut());
        skc_concept_free(ptr::null_mut());
        skc_base_free(ptr::null_mut());
    }
}

#[test]
fn rasterize_matches_library() {
    let w = world();
    let n = 32 * 32;
    let (mut c, mut d, mut m) = (vec![9u8; n], vec![9u8; n], vec![9u8; n]);
    unsafe {
        assert_eq!(skc_rasterize(w.strokes.as_ptr(), 32, c.as_mut_ptr(), d.as_mut_ptr(), m.as_mut_ptr(), n), SkcStatus::Ok);
        assert_eq!(skc_rasterize(w.strokes.as_ptr(), 32, c.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), n - 1), SkcStatus::BufferTooSmall);
    }
    let ds = &w.sc.pairs[0].pair.sketch;
    let bits = |r: &sketch_concept::sketchrep::Raster| r.data().iter().map(|&v| u8::from(v > 0.5)).collect::<Vec<_>>();
    assert_eq!(c, bits(&ds.s_c));
    assert_eq!(d, bits(&ds.s_d));
    assert_eq!(m, bits(w.sc.pairs[0].pair.mask.raster()));
}

/// The generated header compiles as C and links against the static library.
#[test]
fn header_compiles_and_links_from_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    assert!(lib_dir.join("libsketch_concept_ffi.a").exists(), "static library missing in {}", lib_dir.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "sketch_concept.h"
#include <stdio.h>
#include <string.h>
int main(void) {
    SkcBase *b = NULL;
    if (skc_base_load("/nonexistent/base.skb", &b) != SKC_STATUS_IO) return 1;
    if (strlen(skc_last_error()) == 0) return 2;
    unsigned char c[32 * 32];
    const char *s = "[{\"kind\":\"contour\",\"width\":2,\"points\":[[0.2,0.2],[0.8,0.2],[0.5,0.8],[0.2,0.2]]}]";
    if (skc_rasterize(s, 32, c, NULL, NULL, sizeof c) != SKC_STATUS_OK) return 3;
    size_t ink = 0;
    for (size_t i = 0; i < sizeof c; i++) ink += c[i];
    printf("%s %zu\n", skc_version(), ink);
    return ink > 0 ? 0 : 4;
}
"#,
    )
    .unwrap();
    let bin = tmp.path().join("smoke");
    let st = std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .arg(lib_dir.join("libsketch_concept_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(env!("CARGO_PKG_VERSION")));
}
