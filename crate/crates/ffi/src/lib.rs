//! C ABI over the sketch-concept library.
//!
//! Every fallible call returns an [`SkcStatus`]; on failure the message is
//! available from [`skc_last_error`] on the same thread until the next call.
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Panics never unwind into C; they become
//! `SKC_STATUS_PANIC`.

use sketch_concept::backbone::BaseModel;
use sketch_concept::inference::{self, Sampling};
use sketch_concept::platform::{decode_base, decode_concept, ConceptStore};
use sketch_concept::sketchrep::{auto_mask, rasterize, Image, Raster, Stroke};
use sketch_concept::trainer::Concept;
use sketch_concept::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    UnknownWord = 4,
    Placeholder = 5,
    DegenerateMask = 6,
    Diverged = 7,
    BaseMismatch = 8,
    Integrity = 9,
    NotFound = 10,
    Conflict = 11,
    Config = 12,
    Io = 13,
    BufferTooSmall = 14,
    Panic = 15,
}

/// Pretrained base model.
pub struct SkcBase(BaseModel);

/// Learned concept bound to the base it was loaded against.
pub struct SkcConcept(Concept);

/// RGB image with components in `[0, 1]`.
pub struct SkcImage(Image);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SkcStatus {
    match e {
        Error::InvalidArgument(_) | Error::Json(_) | Error::Image(_) => SkcStatus::InvalidArgument,
        Error::Shape(_) => SkcStatus::Shape,
        Error::UnknownWord(_) => SkcStatus::UnknownWord,
        Error::MissingPlaceholder(_) | Error::UnexpectedPlaceholder(_) => SkcStatus::Placeholder,
        Error::DegenerateMask(_) => SkcStatus::DegenerateMask,
        Error::Diverged { .. } => SkcStatus::Diverged,
        Error::BaseMismatch { .. } => SkcStatus::BaseMismatch,
        Error::Integrity(_) => SkcStatus::Integrity,
        Error::NotFound(_) => SkcStatus::NotFound,
        Error::Conflict(_) => SkcStatus::Conflict,
        Error::Config(_) => SkcStatus::Config,
        Error::Io(_) => SkcStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, record any failure and map it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SkcStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkcStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            SkcStatus::NullPointer
        }
        Ok(Err(Fail::Small(need))) => {
            set_error(&format!("buffer too small, need {need} bytes"));
            SkcStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_default();
            set_error(&format!("panic: {msg}"));
            SkcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: non-null handles come from this library and are not yet freed.
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, Fail> {
    p.as_mut().ok_or(Fail::Null("output pointer"))
}

fn strokes(json: &str) -> Result<Vec<Stroke>, Fail> {
    Ok(serde_json::from_str(json).map_err(Error::from)?)
}

/// Mask from `len == size * size` bytes, nonzero meaning inside; null means
/// "use the automatic mask".
unsafe fn mask_arg(p: *const u8, len: usize, size: usize) -> Result<Option<Raster>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    if len != size * size {
        return Err(Error::Shape(format!("mask has {len} bytes, expected {}", size * size)).into());
    }
    // SAFETY: caller guarantees `len` readable bytes at `p`.
    let bytes = std::slice::from_raw_parts(p, len);
    Ok(Some(Raster::from_vec(size, size, bytes.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect())?))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn skc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn skc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a base archive from a file path.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn skc_base_load(path: *const c_char, out: *mut *mut SkcBase) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let bytes = std::fs::read(str_arg(path, "path")?).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(SkcBase(decode_base(&bytes)?)));
        Ok(())
    })
}

/// Working image size of the base in pixels (images are size × size).
///
/// # Safety
/// `base` is a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn skc_base_size(base: *const SkcBase) -> usize {
    base.as_ref().map_or(0, |b| b.0.denoiser_cfg.size)
}

/// Write the base's 64-char hex hash plus NUL into `buf`.
///
/// # Safety
/// `base` is a live handle; `buf` has `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn skc_base_hash(base: *const SkcBase, buf: *mut c_char, len: usize) -> SkcStatus {
    guard(|| {
        let b = ref_arg(base, "base")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let h = b.0.hash();
        if len < h.len() + 1 {
            return Err(Fail::Small(h.len() + 1));
        }
        // SAFETY: `len` bytes are writable and the hash plus NUL fits.
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `base` is null or a handle from [`skc_base_load`], freed at most once,
/// after every concept loaded against it has been freed or is no longer used.
#[no_mangle]
pub unsafe extern "C" fn skc_base_free(base: *mut SkcBase) {
    if !base.is_null() {
        drop(Box::from_raw(base));
    }
}

/// Load a concept archive file and check that it belongs to `base`.
///
/// # Safety
/// `path` is a NUL-terminated string; `base` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn skc_concept_load_file(path: *const c_char, base: *const SkcBase, out: *mut *mut SkcConcept) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let b = ref_arg(base, "base")?;
        let bytes = std::fs::read(str_arg(path, "path")?).map_err(Error::from)?;
        let c = decode_concept(&bytes)?;
        c.check_base(&b.0)?;
        *out = Box::into_raw(Box::new(SkcConcept(c)));
        Ok(())
    })
}

/// Load the head version of `concept_id` from a store directory.
///
/// # Safety
/// `store` and `concept_id` are NUL-terminated strings; `base` is live;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn skc_concept_load(store: *const c_char, concept_id: *const c_char, base: *const SkcBase, out: *mut *mut SkcConcept) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let b = ref_arg(base, "base")?;
        let s = ConceptStore::open(str_arg(store, "store")?)?;
        let c = s.load_concept(str_arg(concept_id, "concept_id")?, None, &b.0)?;
        *out = Box::into_raw(Box::new(SkcConcept(c)));
        Ok(())
    })
}

/// # Safety
/// `concept` is null or a handle from a concept loader, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn skc_concept_free(concept: *mut SkcConcept) {
    if !concept.is_null() {
        drop(Box::from_raw(concept));
    }
}

/// Image from `width * height * 3` interleaved RGB bytes.
///
/// # Safety
/// `rgb` has `len` readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn skc_image_from_rgb8(width: usize, height: usize, rgb: *const u8, len: usize, out: *mut *mut SkcImage) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        if rgb.is_null() {
            return Err(Fail::Null("rgb"));
        }
        if width == 0 || height == 0 || len != width * height * 3 {
            return Err(Error::Shape(format!("{len} bytes for a {width}x{height} RGB image")).into());
        }
        // SAFETY: caller guarantees `len` readable bytes.
        let bytes = std::slice::from_raw_parts(rgb, len);
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) * 3;
                img.set(x, y, [0, 1, 2].map(|c| bytes[i + c] as f32 / 255.0));
            }
        }
        *out = Box::into_raw(Box::new(SkcImage(img)));
        Ok(())
    })
}

/// # Safety
/// `img` is a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn skc_image_width(img: *const SkcImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` is a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn skc_image_height(img: *const SkcImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// Copy the image as interleaved RGB bytes; `len` must be at least
/// `width * height * 3`.
///
/// # Safety
/// `img` is live; `buf` has `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn skc_image_copy_rgb8(img: *const SkcImage, buf: *mut u8, len: usize) -> SkcStatus {
    guard(|| {
        let img = &ref_arg(img, "image")?.0;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let need = img.width() * img.height() * 3;
        if len < need {
            return Err(Fail::Small(need));
        }
        // SAFETY: `need <= len` writable bytes.
        let out = std::slice::from_raw_parts_mut(buf, need);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let i = (y * img.width() + x) * 3;
                let p = img.get(x, y);
                for c in 0..3 {
                    out[i + c] = (p[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(())
    })
}

/// # Safety
/// `img` is null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn skc_image_free(img: *mut SkcImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Rasterise stroke JSON at `size` and write the contour, detail and
/// automatic-mask channels as `size * size` bytes of 0 or 1. Any output may
/// be null. The mask is all zeros when the contour encloses nothing.
///
/// # Safety
/// `strokes_json` is a NUL-terminated string; each non-null output has
/// `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn skc_rasterize(strokes_json: *const c_char, size: usize, contour: *mut u8, detail: *mut u8, mask: *mut u8, len: usize) -> SkcStatus {
    guard(|| {
        let ds = rasterize(&strokes(str_arg(strokes_json, "strokes_json")?)?, size, size)?;
        if len < size * size {
            return Err(Fail::Small(size * size));
        }
        let m = auto_mask(&ds).map(|m| m.0).unwrap_or_else(|_| Raster::new(size, size));
        for (r, dst) in [(&ds.s_c, contour), (&ds.s_d, detail), (&m, mask)] {
            if !dst.is_null() {
                // SAFETY: non-null outputs have `len >= size * size` bytes.
                let out = std::slice::from_raw_parts_mut(dst, size * size);
                for (o, v) in out.iter_mut().zip(r.data()) {
                    *o = u8::from(*v > 0.5);
                }
            }
        }
        Ok(())
    })
}

/// Generate `concept` following the strokes. `prompt` must contain `[v]`.
/// `mask` is `mask_len` bytes (size × size, nonzero inside) or null for the
/// automatic mask.
///
/// # Safety
/// Handles are live; strings are NUL-terminated; `mask` has `mask_len`
/// readable bytes when non-null; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn skc_generate(
    base: *const SkcBase,
    concept: *const SkcConcept,
    strokes_json: *const c_char,
    mask: *const u8,
    mask_len: usize,
    prompt: *const c_char,
    steps: usize,
    seed: u64,
    out: *mut *mut SkcImage,
) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let b = &ref_arg(base, "base")?.0;
        let c = &ref_arg(concept, "concept")?.0;
        let size = b.denoiser_cfg.size;
        let ds = rasterize(&strokes(str_arg(strokes_json, "strokes_json")?)?, size, size)?;
        let m = match mask_arg(mask, mask_len, size)? {
            Some(r) => sketch_concept::sketchrep::ForegroundMask::new(r)?,
            None => auto_mask(&ds)?,
        };
        let img = inference::generate(b, c, &ds, &m, str_arg(prompt, "prompt")?, Sampling { steps, seed })?;
        *out = Box::into_raw(Box::new(SkcImage(img)));
        Ok(())
    })
}

/// Regenerate the region `blend_mask` of `image` (the sketch mask when
/// null) so it follows the strokes; pixels outside keep their values.
///
/// # Safety
/// As for [`skc_generate`]; `image` is live and `blend_mask` has
/// `blend_len` readable bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn skc_edit(
    base: *const SkcBase,
    concept: *const SkcConcept,
    image: *const SkcImage,
    strokes_json: *const c_char,
    blend_mask: *const u8,
    blend_len: usize,
    prompt: *const c_char,
    steps: usize,
    seed: u64,
    out: *mut *mut SkcImage,
) -> SkcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let b = &ref_arg(base, "base")?.0;
        let c = &ref_arg(concept, "concept")?.0;
        let img = &ref_arg(image, "image")?.0;
        let size = b.denoiser_cfg.size;
        let ds = rasterize(&strokes(str_arg(strokes_json, "strokes_json")?)?, size, size)?;
        let m = auto_mask(&ds)?;
        let m_b = mask_arg(blend_mask, blend_len, size)?.unwrap_or_else(|| m.0.clone());
        let r = inference::local_edit(b, c, img, &ds, &m, &m_b, str_arg(prompt, "prompt")?, Sampling { steps, seed })?;
        *out = Box::into_raw(Box::new(SkcImage(r)));
        Ok(())
    })
}
