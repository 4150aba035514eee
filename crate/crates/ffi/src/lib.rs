//! C ABI over the `hrss` kernels.
//!
//! Every fallible function returns an [`HrssStatus`]; on failure the message
//! is kept per thread and read back with [`hrss_last_error`]. Objects cross
//! the boundary as opaque handles that the caller releases with the
//! matching `_free` function. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hrss::layers::{Init, Initializer};
use hrss::net::{check_input, count_flops, count_params, HrssNet, ModelConfig};
use hrss::sscan::{contribution, scan_chunked, scan_naive, Discretization, DiscretizedStep};
use hrss::{Error, Module, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrssDiscretization {
    FirstOrder = 0,
    ExactZoh = 1,
}

impl From<HrssDiscretization> for Discretization {
    fn from(d: HrssDiscretization) -> Self {
        match d {
            HrssDiscretization::FirstOrder => Discretization::FirstOrder,
            HrssDiscretization::ExactZoh => Discretization::ExactZoh,
        }
    }
}

/// Dense f64 tensor, row-major.
pub struct HrssTensor(Tensor);

/// Multi-branch classification network.
pub struct HrssModel(HrssNet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HrssStatus {
    match e {
        Error::Shape { .. } => HrssStatus::Shape,
        Error::InvalidArgument { .. } => HrssStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => HrssStatus::Config,
        Error::Io(_) => HrssStatus::Io,
        Error::Format(_) => HrssStatus::Format,
        Error::NonFinite { .. } | Error::TapeCycle(_) => HrssStatus::Numeric,
    }
}

struct Fail(HrssStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HrssStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HrssStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HrssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HrssStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HrssStatus::Panic
        }
    }
}

unsafe fn tensor_ref<'a>(t: *const HrssTensor, what: &str) -> Result<&'a Tensor, Fail> {
    t.as_ref().map(|t| &t.0).ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn hrss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `data` (product of `shape` entries) into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to as many values as
/// their product; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut HrssTensor,
) -> HrssStatus {
    guard(|| {
        let shape = slice_arg(shape, rank, "shape")?.to_vec();
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("shape overflows"))?;
        let data = slice_arg(data, numel, "data")?.to_vec();
        write_out(out, HrssTensor(Tensor::new(shape, data)?))
    })
}

/// # Safety
/// `t` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_free(t: *mut HrssTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Rank of `t`, 0 when null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_rank(t: *const HrssTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Element count of `t`, 0 when null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_numel(t: *const HrssTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Copies the extents into `shape`, which holds `cap` entries.
///
/// # Safety
/// `shape` must be writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_shape(t: *const HrssTensor, shape: *mut usize, cap: usize) -> HrssStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        if cap < t.rank() {
            return Err(invalid(format!("shape buffer holds {cap}, rank is {}", t.rank())));
        }
        if t.rank() > 0 {
            if shape.is_null() {
                return Err(null("shape"));
            }
            std::slice::from_raw_parts_mut(shape, t.rank()).copy_from_slice(t.shape());
        }
        Ok(())
    })
}

/// Borrowed pointer to the elements; valid while `t` lives.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_data(t: *const HrssTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Writes the binary tensor container.
///
/// # Safety
/// `t` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_save(t: *const HrssTensor, path: *const c_char) -> HrssStatus {
    guard(|| Ok(tensor_ref(t, "tensor")?.save(str_arg(path, "path")?)?))
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_tensor_load(path: *const c_char, out: *mut *mut HrssTensor) -> HrssStatus {
    guard(|| write_out(out, HrssTensor(Tensor::load(str_arg(path, "path")?)?)))
}

unsafe fn step_from(
    delta: *const HrssTensor,
    a: *const HrssTensor,
    b: *const HrssTensor,
    c: *const HrssTensor,
    disc: HrssDiscretization,
) -> Result<DiscretizedStep, Fail> {
    Ok(DiscretizedStep::from_parts(
        tensor_ref(delta, "delta")?,
        tensor_ref(a, "a")?,
        tensor_ref(b, "b")?,
        tensor_ref(c, "c")?,
        disc.into(),
    )?)
}

/// Selective scan of `x` (B, L, C) given Δ (B, L, C), A (C, N) and the
/// input-dependent B, C (B, L, N). `chunk = 0` runs the sequential
/// recurrence; otherwise the chunked scan with that chunk length.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_scan(
    delta: *const HrssTensor,
    a: *const HrssTensor,
    b: *const HrssTensor,
    c: *const HrssTensor,
    x: *const HrssTensor,
    disc: HrssDiscretization,
    chunk: usize,
    out: *mut *mut HrssTensor,
) -> HrssStatus {
    guard(|| {
        let step = step_from(delta, a, b, c, disc)?;
        let x = tensor_ref(x, "x")?;
        let y = if chunk == 0 { scan_naive(&step, x)? } else { scan_chunked(&step, x, chunk)? };
        write_out(out, HrssTensor(y))
    })
}

/// Contribution of token `m` to token `n` (1-based, `m < n`) in one
/// channel of the first batch element.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_contribution(
    delta: *const HrssTensor,
    a: *const HrssTensor,
    b: *const HrssTensor,
    c: *const HrssTensor,
    disc: HrssDiscretization,
    m: usize,
    n: usize,
    channel: usize,
    out: *mut f64,
) -> HrssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = contribution(&step_from(delta, a, b, c, disc)?, m, n, channel)?;
        Ok(())
    })
}

unsafe fn config_from(preset: *const c_char, config_path: *const c_char) -> Result<ModelConfig, Fail> {
    if !config_path.is_null() {
        return Ok(ModelConfig::load(str_arg(config_path, "config path")?)?);
    }
    Ok(ModelConfig::preset(str_arg(preset, "preset")?)?)
}

/// Builds a model from a JSON configuration file, or from the named preset
/// ("S" or "B") when `config_path` is null.
///
/// # Safety
/// Strings must be nul-terminated or null; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_model_new(
    preset: *const c_char,
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut HrssModel,
) -> HrssStatus {
    guard(|| {
        let cfg = config_from(preset, config_path)?;
        write_out(out, HrssModel(HrssNet::new(&cfg, &Initializer::new(seed, Init::Standard))?))
    })
}

/// # Safety
/// `m` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hrss_model_free(m: *mut HrssModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Trainable parameters of the built model, 0 when null.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn hrss_model_num_params(m: *const HrssModel) -> u64 {
    m.as_ref().map_or(0, |m| m.0.num_params() as u64)
}

/// Analytic parameter count and per-image multiply-accumulates at `h`×`w`
/// for the configuration, without building the model.
///
/// # Safety
/// Strings must be nul-terminated or null; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn hrss_count(
    preset: *const c_char,
    config_path: *const c_char,
    h: usize,
    w: usize,
    params: *mut u64,
    flops: *mut u64,
) -> HrssStatus {
    guard(|| {
        let cfg = config_from(preset, config_path)?;
        check_input(h, w)?;
        if let Some(p) = params.as_mut() {
            *p = count_params(&cfg);
        }
        if let Some(f) = flops.as_mut() {
            *f = count_flops(&cfg, h, w);
        }
        Ok(())
    })
}

/// Classifies a (N, 3, H, W) batch; writes (N, classes) logits.
///
/// # Safety
/// Handles must be live and `logits` writable.
#[no_mangle]
pub unsafe extern "C" fn hrss_model_forward(
    m: *const HrssModel,
    x: *const HrssTensor,
    logits: *mut *mut HrssTensor,
) -> HrssStatus {
    guard(|| {
        let model = &m.as_ref().ok_or_else(|| null("model"))?.0;
        let (_, logit) = model.infer(tensor_ref(x, "x")?)?;
        write_out(logits, HrssTensor(logit))
    })
}
