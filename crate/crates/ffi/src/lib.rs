//! C ABI over `segcodec`.
//!
//! Every function returns a [`SegcodecStatus`]. On failure a message for
//! the calling thread is available from [`segcodec_last_error`]. Buffers
//! handed out by the library are released with [`segcodec_buffer_free`],
//! models with [`segcodec_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use segcodec::cli::container::{decode_image, encode_image, Container, RegionSource};
use segcodec::net::Codec;
use segcodec::region::RegionMap;
use segcodec::tensor::{ParamStore, Tensor};
use segcodec::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegcodecStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Arguments are inconsistent, e.g. an external-map container decoded without labels.
    Usage = 2,
    /// Malformed weights, images or region maps.
    Data = 3,
    Numeric = 4,
    /// Corrupt or truncated container.
    Decode = 5,
    /// Container and model do not belong together.
    Consistency = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Loaded weights and the network they describe.
pub struct SegcodecModel {
    codec: Codec,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SegcodecStatus {
    match e {
        Error::Usage(_) => SegcodecStatus::Usage,
        Error::Numeric(_) => SegcodecStatus::Numeric,
        Error::Decode(_) => SegcodecStatus::Decode,
        Error::Consistency(_) => SegcodecStatus::Consistency,
        Error::Io(_) => SegcodecStatus::Io,
        _ => SegcodecStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SegcodecStatus>) -> SegcodecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SegcodecStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            SegcodecStatus::Internal
        }
    }
}

fn fail(e: Error) -> SegcodecStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> SegcodecStatus {
    set_error(&format!("{what} is null"));
    SegcodecStatus::NullArgument
}

fn model_from_store(params: ParamStore) -> Result<Box<SegcodecModel>, Error> {
    Ok(Box::new(SegcodecModel { codec: Codec::for_params(&params)?, params }))
}

fn leak_bytes(v: Vec<u8>, out: *mut *mut u8, out_len: *mut usize) {
    let b = v.into_boxed_slice();
    let len = b.len();
    // SAFETY: both pointers were checked non-null by the caller.
    unsafe {
        *out_len = len;
        *out = Box::into_raw(b) as *mut u8;
    }
}

/// Load SPW1 weights from a file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segcodec_model_load(path: *const c_char, out: *mut *mut SegcodecModel) -> SegcodecStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| fail(Error::Usage("path is not UTF-8".into())))?;
        let store = std::fs::File::open(path).map_err(Error::from).and_then(ParamStore::read_from).map_err(fail)?;
        *out = Box::into_raw(model_from_store(store).map_err(fail)?);
        Ok(())
    })
}

/// Load SPW1 weights from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segcodec_model_from_bytes(data: *const u8, len: usize, out: *mut *mut SegcodecModel) -> SegcodecStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let store = ParamStore::from_bytes(bytes).map_err(fail)?;
        *out = Box::into_raw(model_from_store(store).map_err(fail)?);
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn segcodec_model_free(model: *mut SegcodecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 64-bit fingerprint stored in every container made with this model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn segcodec_model_hash(model: *const SegcodecModel) -> u64 {
    model.as_ref().map_or(0, |m| m.params.fingerprint())
}

fn labels_map(labels: *const u32, width: usize, height: usize) -> Result<Option<RegionMap>, SegcodecStatus> {
    if labels.is_null() {
        return Ok(None);
    }
    // SAFETY: the caller promises width * height labels.
    let raw = unsafe { std::slice::from_raw_parts(labels, width * height) };
    RegionMap::from_raw(height, width, raw).map(Some).map_err(fail)
}

/// Compress interleaved 8-bit RGB. With `labels` null the image is
/// partitioned into a `grid` x `grid` grid; otherwise `labels` holds one
/// region id per pixel and the decoder must be given the same labels.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes, `labels` (if not null)
/// `width * height` values, and the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segcodec_encode_rgb8(
    model: *const SegcodecModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    grid: u32,
    labels: *const u32,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> SegcodecStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() || out_len.is_null() {
            return Err(null("out"));
        }
        let (w, h) = (width as usize, height as usize);
        if w == 0 || h == 0 {
            return Err(fail(Error::Dimension("zero image dimension".into())));
        }
        let px = std::slice::from_raw_parts(rgb, 3 * w * h);
        let img = Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            px[3 * p + c] as f32 / 255.0
        });
        let source = match labels_map(labels, w, h)? {
            Some(rm) => RegionSource::External(rm),
            None => RegionSource::Grid(grid as usize),
        };
        let enc = encode_image(&m.codec, &m.params, &img, &source).map_err(fail)?;
        leak_bytes(enc.bytes, out, out_len);
        Ok(())
    })
}

/// Read the image size from a container without decoding it.
///
/// # Safety
/// `data` must point to `len` bytes; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segcodec_container_info(data: *const u8, len: usize, width: *mut u32, height: *mut u32) -> SegcodecStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if width.is_null() || height.is_null() {
            return Err(null("out"));
        }
        let c = Container::from_bytes(std::slice::from_raw_parts(data, len)).map_err(fail)?;
        *width = c.width;
        *height = c.height;
        Ok(())
    })
}

/// Decode to interleaved 8-bit RGB (`3 * width * height` bytes). `labels`
/// is required for containers made with external labels and ignored
/// otherwise; it must cover the container's width x height.
///
/// # Safety
/// `data` must point to `len` bytes; `labels` must be null or hold one
/// value per pixel; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segcodec_decode_rgb8(
    model: *const SegcodecModel,
    data: *const u8,
    len: usize,
    labels: *const u32,
    out: *mut *mut u8,
    out_len: *mut usize,
    width: *mut u32,
    height: *mut u32,
) -> SegcodecStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() || out_len.is_null() || width.is_null() || height.is_null() {
            return Err(null("out"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let c = Container::from_bytes(bytes).map_err(fail)?;
        let (w, h) = (c.width as usize, c.height as usize);
        let rm = labels_map(labels, w, h)?;
        let img = decode_image(&m.codec, &m.params, bytes, rm.as_ref()).map_err(fail)?;
        let mut px = vec![0u8; 3 * w * h];
        for (i, v) in img.data().iter().enumerate() {
            let (ch, p) = (i / (h * w), i % (h * w));
            px[3 * p + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *width = c.width;
        *height = c.height;
        leak_bytes(px, out, out_len);
        Ok(())
    })
}

/// Release a buffer returned by this library. Null is ignored.
///
/// # Safety
/// `buf` and `len` must be exactly as returned.
#[no_mangle]
pub unsafe extern "C" fn segcodec_buffer_free(buf: *mut u8, len: usize) {
    if !buf.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf, len)));
    }
}

/// Message for the last failure on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn segcodec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn segcodec_status_name(status: SegcodecStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SegcodecStatus::Ok => c"ok",
        SegcodecStatus::NullArgument => c"null argument",
        SegcodecStatus::Usage => c"usage error",
        SegcodecStatus::Data => c"data error",
        SegcodecStatus::Numeric => c"numeric error",
        SegcodecStatus::Decode => c"decode error",
        SegcodecStatus::Consistency => c"consistency error",
        SegcodecStatus::Io => c"i/o error",
        SegcodecStatus::Internal => c"internal error",
    };
    s.as_ptr()
}
