//! C interface to a trained experiment directory: opaque image, run and
//! extraction handles, status codes, and a thread-local error message.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use riw::cli::{ExperimentConfig, Run, RunManifest};
use riw::codec::Codec;
use riw::extract::{ExtractionResult, Extractor};
use riw::imaging::{load_png, save_png, Image};
use riw::riw::{inject, quantize_within_budget, BudgetNorm, InjectionConfig};
use riw::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    MissingArtifact = 5,
    Failed = 6,
    Panic = 7,
}

/// An RGB or grayscale image with samples in [0, 1].
pub struct RiwImage(Image);

/// A trained experiment directory with its codec and extractor loaded.
pub struct RiwRun {
    codec: Codec,
    extractor: Extractor,
    watermark: Image,
    injection: InjectionConfig,
}

/// Per-segment decodes of one image.
pub struct RiwExtraction(ExtractionResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RiwStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => RiwStatus::Config,
            Error::MissingArtifact(_) => RiwStatus::MissingArtifact,
            Error::Io(_) | Error::PngDecode(_) | Error::PngEncode(_) => RiwStatus::Io,
            Error::InvalidDimensions(_)
            | Error::ShapeMismatch { .. }
            | Error::InvalidParameter { .. }
            | Error::UnknownGlyph(_)
            | Error::TextTooLong { .. }
            | Error::OutOfBounds { .. } => RiwStatus::InvalidArgument,
            _ => RiwStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RiwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RiwStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RiwStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(RiwStatus::NullPointer, format!("{name} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, name)?))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RiwStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn riw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads an 8-bit PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn riw_image_load(path: *const c_char, out: *mut *mut RiwImage) -> RiwStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let img = load_png(&path_arg(path, "path")?)?;
        *out = boxed(RiwImage(img));
        Ok(())
    })
}

/// Builds an RGB image from `height * width * 3` interleaved bytes.
///
/// # Safety
/// `data` must point to `height * width * 3` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn riw_image_from_rgb8(
    data: *const u8,
    height: usize,
    width: usize,
    out: *mut *mut RiwImage,
) -> RiwStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let p = height
            .checked_mul(width)
            .ok_or_else(|| Failure(RiwStatus::InvalidArgument, "image size overflows".into()))?;
        let bytes = std::slice::from_raw_parts(data, p * 3);
        let mut planar = vec![0.0; p * 3];
        for i in 0..p {
            for c in 0..3 {
                planar[c * p + i] = f64::from(bytes[i * 3 + c]) / 255.0;
            }
        }
        *out = boxed(RiwImage(Image::new(3, height, width, planar)?));
        Ok(())
    })
}

/// Writes an 8-bit PNG.
///
/// # Safety
/// `img` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn riw_image_save(img: *const RiwImage, path: *const c_char) -> RiwStatus {
    guard(|| {
        let img = borrow(img, "img")?;
        save_png(&img.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Reports channels, height and width.
///
/// # Safety
/// `img` must come from this library; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn riw_image_shape(
    img: *const RiwImage,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> RiwStatus {
    guard(|| {
        let (c, h, w) = borrow(img, "img")?.0.shape();
        *out_ptr(channels, "channels")? = c;
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// Largest absolute per-sample difference between two images of equal shape.
///
/// # Safety
/// Both images must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn riw_image_linf_distance(a: *const RiwImage, b: *const RiwImage, out: *mut f64) -> RiwStatus {
    guard(|| {
        let d = borrow(a, "a")?.0.linf_distance(&borrow(b, "b")?.0)?;
        *out_ptr(out, "out")? = d;
        Ok(())
    })
}

/// # Safety
/// `img` must come from this library or be null, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn riw_image_free(img: *mut RiwImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

fn open_run(dir: &Path) -> Result<RiwRun, Failure> {
    let mut cfg = ExperimentConfig::load(Some(&dir.join("config.json")))?;
    cfg.out = dir.to_path_buf();
    cfg.validate()?;
    let manifest = RunManifest::load_or_new(dir, &cfg.hash())?;
    let run = Run {
        cfg,
        out: dir.to_path_buf(),
        manifest,
    };
    Ok(RiwRun {
        codec: run.load_codec()?,
        extractor: run.load_extractor()?,
        watermark: run.watermark_image()?,
        injection: run.cfg.injection.clone(),
    })
}

/// Opens an experiment directory whose codec and extraction stages have run.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn riw_run_open(dir: *const c_char, out: *mut *mut RiwRun) -> RiwStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(open_run(&path_arg(dir, "dir")?)?);
        Ok(())
    })
}

/// Embeds the run's watermark into `img` with its injection settings.
/// The result is quantized to 8 bits within the budget when the norm is L-infinity.
///
/// # Safety
/// `run` and `img` must come from this library; `out` must be valid and
/// `budget` valid or null.
#[no_mangle]
pub unsafe extern "C" fn riw_run_inject(
    run: *const RiwRun,
    img: *const RiwImage,
    out: *mut *mut RiwImage,
    budget: *mut f64,
) -> RiwStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let x = &borrow(img, "img")?.0;
        let out = out_ptr(out, "out")?;
        let (x_hat, _) = inject(&run.codec, x, &run.watermark, &run.injection)?;
        let x_hat = match run.injection.norm {
            BudgetNorm::Inf => quantize_within_budget(&x_hat, x, run.injection.eps)?,
            _ => x_hat.quantized(),
        };
        if let Some(b) = budget.as_mut() {
            *b = riw::riw::budget(&x_hat, x, run.injection.norm)?;
        }
        *out = boxed(RiwImage(x_hat));
        Ok(())
    })
}

/// Decodes every segment of `img`. `truth` may be null.
///
/// # Safety
/// `run` and `img` must come from this library, `truth` must be null or a
/// NUL-terminated string, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn riw_run_extract(
    run: *const RiwRun,
    img: *const RiwImage,
    truth: *const c_char,
    out: *mut *mut RiwExtraction,
) -> RiwStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let img = borrow(img, "img")?;
        let out = out_ptr(out, "out")?;
        let truth = if truth.is_null() {
            None
        } else {
            Some(str_arg(truth, "truth")?)
        };
        *out = boxed(RiwExtraction(run.extractor.extract(&img.0, truth)?));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be null, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn riw_run_free(run: *mut RiwRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of segments, or 0 for a null handle.
///
/// # Safety
/// `ext` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn riw_extraction_segment_count(ext: *const RiwExtraction) -> usize {
    ext.as_ref().map_or(0, |e| e.0.segments.len())
}

/// Copies the decoded text of segment `index` into `buf` with a trailing NUL.
/// `required` receives the buffer size needed, including the NUL.
///
/// # Safety
/// `ext` must come from this library, `buf` must hold `len` bytes or be null
/// when `len` is 0, and `required` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn riw_extraction_decoded(
    ext: *const RiwExtraction,
    index: usize,
    buf: *mut c_char,
    len: usize,
    required: *mut usize,
) -> RiwStatus {
    guard(|| {
        let seg = segment(ext, index)?;
        let bytes = seg.decoded.as_bytes();
        if let Some(r) = required.as_mut() {
            *r = bytes.len() + 1;
        }
        if len == 0 && buf.is_null() {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < bytes.len() + 1 {
            return Err(Failure(
                RiwStatus::InvalidArgument,
                format!("buffer of {len} bytes is too small"),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Writes 1 when segment `index` matches the truth, 0 when it does not, and -1
/// when no truth was supplied. `confidence` receives the mean glyph confidence.
///
/// # Safety
/// `ext` must come from this library and the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn riw_extraction_segment(
    ext: *const RiwExtraction,
    index: usize,
    correct: *mut c_int,
    confidence: *mut f64,
) -> RiwStatus {
    guard(|| {
        let seg = segment(ext, index)?;
        *out_ptr(correct, "correct")? = seg.correct.map_or(-1, c_int::from);
        *out_ptr(confidence, "confidence")? = seg.confidence_mean();
        Ok(())
    })
}

unsafe fn segment<'a>(ext: *const RiwExtraction, index: usize) -> Result<&'a riw::extract::SegmentRecord, Failure> {
    let ext = borrow(ext, "ext")?;
    ext.0.segments.get(index).ok_or_else(|| {
        Failure(
            RiwStatus::InvalidArgument,
            format!("segment {index} out of range ({} segments)", ext.0.segments.len()),
        )
    })
}

/// # Safety
/// `ext` must come from this library or be null, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn riw_extraction_free(ext: *mut RiwExtraction) {
    if !ext.is_null() {
        drop(Box::from_raw(ext));
    }
}

/// Runs the command-line interface with `argv[0..argc]` and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn riw_cli_main(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return riw::cli::EXIT_CONFIG;
    }
    let args: Vec<String> = (0..argc as usize)
        .map(|i| {
            let p = *argv.add(i);
            if p.is_null() {
                String::new()
            } else {
                CStr::from_ptr(p).to_string_lossy().into_owned()
            }
        })
        .collect();
    catch_unwind(|| riw::cli::main_with_args(args)).unwrap_or(riw::cli::EXIT_STAGE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut img = ptr::null_mut();
        let s = unsafe { riw_image_load(ptr::null(), &mut img) };
        assert_eq!(s, RiwStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(riw_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "path is null");
        assert!(img.is_null());
    }

    #[test]
    fn error_is_cleared_after_success() {
        let bytes = [0u8; 12];
        let mut img = ptr::null_mut();
        unsafe {
            riw_image_load(ptr::null(), &mut img);
            assert_eq!(riw_image_from_rgb8(bytes.as_ptr(), 2, 2, &mut img), RiwStatus::Ok);
            assert!(riw_last_error_message().is_null());
            riw_image_free(img);
        }
    }
}
