//! C ABI for checkpoint loading and image embedding.
//!
//! The surface is deliberately small: load a checkpoint into an opaque
//! handle, query its geometry, push pixels through the encoder. Every
//! function is safe to call from any thread; failure details go to a
//! thread-local message readable with `mmreid_last_error`. A panic inside
//! the library is caught at the boundary and reported as `MMREID_PANIC`
//! rather than unwinding into the caller.
//!
//! The matching header lives at `include/mmreid.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mmreid::autodiff::Tape;
use mmreid::models::{load_checkpoint, reid_embed, Checkpoint, VisualEncoderConfig};
use mmreid::synthdata::read_ppm;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmreidStatus {
    MmreidOk = 0,
    /// A required pointer argument was null.
    MmreidNullArg = 1,
    /// A string argument was not valid UTF-8.
    MmreidInvalidUtf8 = 2,
    /// The checkpoint could not be read or parsed.
    MmreidLoadFailed = 3,
    /// Pixel data had the wrong length, wrong geometry, or non-finite values.
    MmreidBadImage = 4,
    /// The forward pass itself failed.
    MmreidEmbedFailed = 5,
    /// The output buffer is smaller than the embedding dimension.
    MmreidBufferTooSmall = 6,
    /// A panic was caught at the FFI boundary.
    MmreidPanic = 7,
}

/// Opaque model handle: a loaded checkpoint plus its encoder geometry.
pub struct MmreidModel {
    ckpt: Checkpoint,
    cfg: VisualEncoderConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: MmreidStatus, msg: String) -> MmreidStatus {
    set_error(msg);
    status
}

/// Run a fallible body, converting panics into `MMREID_PANIC`.
fn guarded(f: impl FnOnce() -> MmreidStatus) -> MmreidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(MmreidStatus::MmreidPanic, format!("caught panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be null or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(s: *const c_char) -> Result<&'a str, MmreidStatus> {
    if s.is_null() {
        return Err(fail(
            MmreidStatus::MmreidNullArg,
            "string argument is null".into(),
        ));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        fail(
            MmreidStatus::MmreidInvalidUtf8,
            "string argument is not valid UTF-8".into(),
        )
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmreid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread. The pointer
/// stays valid until the next failing call on the same thread. Never null;
/// empty string when nothing has failed yet.
#[no_mangle]
pub extern "C" fn mmreid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint from `path` into a newly allocated handle written to
/// `*out`. The checkpoint must carry encoder weights and their
/// configuration, which every training stage here writes. Free the handle
/// with `mmreid_model_free`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmreid_model_load(
    path: *const c_char,
    out: *mut *mut MmreidModel,
) -> MmreidStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MmreidStatus::MmreidNullArg, "output handle is null".into());
        }
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(MmreidStatus::MmreidLoadFailed, format!("{path}: {e}")),
        };
        let cfg: VisualEncoderConfig = match ckpt.get_json("encoder_config") {
            Ok(c) => c,
            Err(e) => return fail(MmreidStatus::MmreidLoadFailed, format!("{path}: {e}")),
        };
        if !ckpt.params.contains("enc.embed.w") {
            return fail(
                MmreidStatus::MmreidLoadFailed,
                format!("{path}: checkpoint has no encoder weights"),
            );
        }
        *out = Box::into_raw(Box::new(MmreidModel { ckpt, cfg }));
        MmreidStatus::MmreidOk
    })
}

/// Free a handle from `mmreid_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by `mmreid_model_load` that
/// has not been freed already.
#[no_mangle]
pub unsafe extern "C" fn mmreid_model_free(model: *mut MmreidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_dim(model: *const MmreidModel, f: impl Fn(&MmreidModel) -> usize) -> usize {
    if model.is_null() {
        0
    } else {
        f(&*model)
    }
}

/// Length of the embedding written by the embed calls; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmreid_embedding_dim(model: *const MmreidModel) -> usize {
    model_dim(model, |m| m.cfg.d_v)
}

/// Expected image height in pixels; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmreid_image_height(model: *const MmreidModel) -> usize {
    model_dim(model, |m| m.cfg.height)
}

/// Expected image width in pixels; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmreid_image_width(model: *const MmreidModel) -> usize {
    model_dim(model, |m| m.cfg.width)
}

/// Expected channel count; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmreid_image_channels(model: *const MmreidModel) -> usize {
    model_dim(model, |m| m.cfg.channels)
}

unsafe fn embed_into(
    model: &MmreidModel,
    pixels: &[f64],
    out: *mut f64,
    out_cap: usize,
) -> MmreidStatus {
    let want = model.cfg.height * model.cfg.width * model.cfg.channels;
    if pixels.len() != want {
        return fail(
            MmreidStatus::MmreidBadImage,
            format!("expected {want} pixel values, got {}", pixels.len()),
        );
    }
    if let Some(bad) = pixels.iter().position(|x| !x.is_finite()) {
        return fail(
            MmreidStatus::MmreidBadImage,
            format!("pixel {bad} is not finite"),
        );
    }
    if out_cap < model.cfg.d_v {
        return fail(
            MmreidStatus::MmreidBufferTooSmall,
            format!(
                "output buffer holds {out_cap} values, embedding needs {}",
                model.cfg.d_v
            ),
        );
    }
    let mut tape = Tape::new();
    match reid_embed(&mut tape, pixels, &model.cfg, &model.ckpt.params) {
        Ok(emb) => {
            let vals = tape.value(emb);
            std::ptr::copy_nonoverlapping(vals.as_ptr(), out, vals.len());
            MmreidStatus::MmreidOk
        }
        Err(e) => fail(MmreidStatus::MmreidEmbedFailed, e.to_string()),
    }
}

/// Embed one image. `pixels` is row-major height × width × channels in
/// `[0, 1]`, `len` its element count; the embedding dimension's worth of
/// values is written to `out`.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `len` doubles,
/// and `out` must have room for `out_cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmreid_embed_image(
    model: *const MmreidModel,
    pixels: *const f64,
    len: usize,
    out: *mut f64,
    out_cap: usize,
) -> MmreidStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || out.is_null() {
            return fail(MmreidStatus::MmreidNullArg, "null argument".into());
        }
        let pixels = std::slice::from_raw_parts(pixels, len);
        embed_into(&*model, pixels, out, out_cap)
    })
}

/// Embed a binary PPM (P6) file. Geometry must match the model.
///
/// # Safety
/// `model` must be a live handle, `path` NUL-terminated, and `out` must
/// have room for `out_cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmreid_embed_ppm(
    model: *const MmreidModel,
    path: *const c_char,
    out: *mut f64,
    out_cap: usize,
) -> MmreidStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(MmreidStatus::MmreidNullArg, "null argument".into());
        }
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let model = &*model;
        let (pixels, w, h) = match read_ppm(Path::new(path)) {
            Ok(t) => t,
            Err(e) => return fail(MmreidStatus::MmreidBadImage, format!("{path}: {e}")),
        };
        if (h, w, 3) != (model.cfg.height, model.cfg.width, model.cfg.channels) {
            return fail(
                MmreidStatus::MmreidBadImage,
                format!(
                    "{path}: image is {h}x{w}x3, model expects {}x{}x{}",
                    model.cfg.height, model.cfg.width, model.cfg.channels
                ),
            );
        }
        embed_into(model, &pixels, out, out_cap)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use mmreid::synthdata::dataset::{build_dataset, DataConfig, Dataset};
    use mmreid::synthdata::render::DomainStyle;
    use mmreid::trainer::{train_stage2, Stage, TrainConfig};

    fn trained_model() -> (tempfile::TempDir, Dataset, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(
            &DataConfig {
                train_ids: 4,
                eval_ids: 2,
                imgs_per_id: 2,
                cams: 2,
                style: DomainStyle::A,
                seed: 11,
            },
            &dir.path().join("data"),
            None,
        )
        .unwrap();
        let enc = VisualEncoderConfig {
            d_v: 16,
            layers: 1,
            heads: 2,
            ..VisualEncoderConfig::default()
        };
        let cfg = TrainConfig {
            stage: Stage::Reid,
            p: 2,
            k: 2,
            reid_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_stage2(&ds, &enc, &cfg, None, &dir.path().join("run")).unwrap();
        (dir, ds, out.checkpoint)
    }

    fn load(path: &Path) -> *mut MmreidModel {
        let c = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut MmreidModel = std::ptr::null_mut();
        let status = unsafe { mmreid_model_load(c.as_ptr(), &mut handle) };
        assert_eq!(status, MmreidStatus::MmreidOk, "{}", last_error());
        assert!(!handle.is_null());
        handle
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(mmreid_last_error()) }
            .to_str()
            .unwrap()
            .to_string()
    }

    #[test]
    fn embeds_match_the_library_exactly() {
        let (_dir, ds, ckpt_path) = trained_model();
        let handle = load(&ckpt_path);
        let dim = unsafe { mmreid_embedding_dim(handle) };
        assert_eq!(dim, 16);
        assert_eq!(unsafe { mmreid_image_height(handle) }, 64);
        assert_eq!(unsafe { mmreid_image_width(handle) }, 32);
        assert_eq!(unsafe { mmreid_image_channels(handle) }, 3);

        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        let cfg: VisualEncoderConfig = ckpt.get_json("encoder_config").unwrap();
        for rec in ds.query.iter().chain(ds.gallery.iter()).take(3) {
            let pixels = ds.load_pixels(rec).unwrap();
            let mut got = vec![0.0; dim];
            let status = unsafe {
                mmreid_embed_image(handle, pixels.as_ptr(), pixels.len(), got.as_mut_ptr(), dim)
            };
            assert_eq!(status, MmreidStatus::MmreidOk, "{}", last_error());

            let mut tape = Tape::new();
            let want = reid_embed(&mut tape, &pixels, &cfg, &ckpt.params).unwrap();
            assert_eq!(got, tape.value(want));
        }
        unsafe { mmreid_model_free(handle) };
    }

    #[test]
    fn ppm_entry_point_matches_raw_pixels() {
        let (_dir, ds, ckpt_path) = trained_model();
        let handle = load(&ckpt_path);
        let rec = &ds.query[0];
        let pixels = ds.load_pixels(rec).unwrap();
        let mut via_pixels = vec![0.0; 16];
        let mut via_file = vec![0.0; 16];
        unsafe {
            let s1 = mmreid_embed_image(
                handle,
                pixels.as_ptr(),
                pixels.len(),
                via_pixels.as_mut_ptr(),
                16,
            );
            assert_eq!(s1, MmreidStatus::MmreidOk);
            let file = ds.root.join(&rec.file);
            let path = CString::new(file.to_str().unwrap()).unwrap();
            let s2 = mmreid_embed_ppm(handle, path.as_ptr(), via_file.as_mut_ptr(), 16);
            assert_eq!(s2, MmreidStatus::MmreidOk, "{}", last_error());
            mmreid_model_free(handle);
        }
        assert_eq!(via_pixels, via_file);
    }

    #[test]
    fn error_paths_set_status_and_message() {
        let mut handle: *mut MmreidModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                mmreid_model_load(std::ptr::null(), &mut handle),
                MmreidStatus::MmreidNullArg
            );
            let bogus = CString::new("/nonexistent/x.ckpt").unwrap();
            assert_eq!(
                mmreid_model_load(bogus.as_ptr(), &mut handle),
                MmreidStatus::MmreidLoadFailed
            );
            assert!(last_error().contains("/nonexistent/x.ckpt"));
        }

        let (_dir, _ds, ckpt_path) = trained_model();
        let handle = load(&ckpt_path);
        let mut out = vec![0.0; 16];
        unsafe {
            let px = [0.5; 10];
            assert_eq!(
                mmreid_embed_image(handle, px.as_ptr(), px.len(), out.as_mut_ptr(), 16),
                MmreidStatus::MmreidBadImage
            );
            assert!(last_error().contains("got 10"));

            let px = vec![f64::NAN; 64 * 32 * 3];
            assert_eq!(
                mmreid_embed_image(handle, px.as_ptr(), px.len(), out.as_mut_ptr(), 16),
                MmreidStatus::MmreidBadImage
            );

            let px = vec![0.5; 64 * 32 * 3];
            assert_eq!(
                mmreid_embed_image(handle, px.as_ptr(), px.len(), out.as_mut_ptr(), 4),
                MmreidStatus::MmreidBufferTooSmall
            );

            assert_eq!(
                mmreid_embed_image(handle, std::ptr::null(), 0, out.as_mut_ptr(), 16),
                MmreidStatus::MmreidNullArg
            );
            mmreid_model_free(handle);
            mmreid_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn version_matches_the_crate() {
        let v = unsafe { CStr::from_ptr(mmreid_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn header_declares_every_symbol() {
        let header = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/include/mmreid.h"
        ))
        .unwrap();
        for sym in [
            "mmreid_version",
            "mmreid_last_error",
            "mmreid_model_load",
            "mmreid_model_free",
            "mmreid_embedding_dim",
            "mmreid_image_height",
            "mmreid_image_width",
            "mmreid_image_channels",
            "mmreid_embed_image",
            "mmreid_embed_ppm",
        ] {
            assert!(header.contains(sym), "header is missing {sym}");
        }
        for code in 0..=7 {
            assert!(
                header.contains(&format!("= {code}")),
                "header is missing status value {code}"
            );
        }
    }
}
