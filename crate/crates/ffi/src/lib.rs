//! C ABI over the two-scale network engine.
//!
//! Every function returns an [`HfresStatus`]; on failure the message is kept
//! per thread and read with [`hfres_last_error`]. Networks are opaque
//! handles owned by the caller and released with [`hfres_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hfres::calibration::{predict_with_threshold, region_decomposition, CalibrationResult, Threshold};
use hfres::config::ExperimentConfig;
use hfres::data::NormStats;
use hfres::net::MsNetwork;
use hfres::train::{restore, Checkpoint};
use hfres::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfresStatus {
    Ok = 0,
    /// Null pointer, bad size or malformed text argument.
    InvalidArgument = 1,
    /// Invalid configuration or network specification.
    Config = 2,
    /// Unreadable or corrupt input file.
    Io = 3,
    /// Checkpoint written for a different network.
    SpecMismatch = 4,
    /// Any other engine error.
    Engine = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Fractions of images correct under both heads (a), only the low head (b),
/// only the high head (c) and neither (d).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HfresRegions {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub upper_bound: f64,
}

/// Opaque two-scale network with the normalization of its checkpoint.
pub struct HfresNetwork {
    net: MsNetwork,
    norm: NormStats,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(HfresStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidConfig { .. } | Error::InvalidSpec(_) | Error::Alignment { .. } => HfresStatus::Config,
            Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::DataMissing(_) => HfresStatus::Io,
            Error::SpecHashMismatch { .. } => HfresStatus::SpecMismatch,
            _ => HfresStatus::Engine,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(HfresStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HfresStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HfresStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HfresStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn network<'a>(p: *const HfresNetwork) -> Result<&'a HfresNetwork, Failure> {
    p.as_ref().ok_or_else(|| invalid("network handle is null"))
}

/// Message of the last failed call on this thread; empty after successes
/// that followed no failure. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn hfres_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hfres_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an untrained network from a JSON experiment configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hfres_network_new(config_json: *const c_char, out: *mut *mut HfresNetwork) -> HfresStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let cfg = ExperimentConfig::from_json(text(config_json, "config_json")?)?;
        let spec = cfg.base_spec()?;
        let net = hfres::net::wrap_multiscale(&spec, cfg.resolutions.low, cfg.fuse_stem, cfg.seed)?;
        let norm = NormStats::identity(spec.in_channels);
        *out = Box::into_raw(Box::new(HfresNetwork { net, norm }));
        Ok(())
    })
}

/// Releases a handle from [`hfres_network_new`]; null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hfres_network_free(net: *mut HfresNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Loads parameters and normalization statistics from a checkpoint file.
///
/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hfres_network_load_checkpoint(net: *mut HfresNetwork, path: *const c_char) -> HfresStatus {
    guard(|| {
        let h = net.as_mut().ok_or_else(|| invalid("network handle is null"))?;
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        // restore into a copy so a failed load leaves the handle untouched
        let mut fresh = h.net.clone();
        let (_, norm) = restore(&mut fresh, &ck)?;
        h.net = fresh;
        h.norm = norm;
        Ok(())
    })
}

/// Input geometry: channels and the high (full) resolution. The low branch
/// runs on the 2×2 average-pooled input.
///
/// # Safety
/// `net` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hfres_network_input_shape(
    net: *const HfresNetwork,
    channels: *mut usize,
    resolution: *mut usize,
) -> HfresStatus {
    guard(|| {
        let h = network(net)?;
        if channels.is_null() || resolution.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *channels = h.net.spec().in_channels;
        *resolution = h.net.high_res();
        Ok(())
    })
}

/// Per-image MACs of the low branch and the additional high branch.
///
/// # Safety
/// `net` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hfres_network_costs(net: *const HfresNetwork, f_low: *mut u64, f_high: *mut u64) -> HfresStatus {
    guard(|| {
        let h = network(net)?;
        if f_low.is_null() || f_high.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let c = hfres::flops::count_static(&h.net, h.net.low_res(), h.net.high_res())?;
        *f_low = c.f_low;
        *f_high = c.f_high;
        Ok(())
    })
}

/// Early-exit classification of `n` images laid out `[n, C, H, W]` with
/// pixel values in `[0, 1]`. Images whose low-branch confidence is at least
/// `threshold` stop there; a negative `threshold` sends every image through
/// the high branch. `used_high` and `scores` may be null.
///
/// # Safety
/// `images` must hold `n·C·H·W` floats and `classes` room for `n` entries
/// (likewise `used_high` and `scores` when non-null).
#[no_mangle]
pub unsafe extern "C" fn hfres_network_predict(
    net: *const HfresNetwork,
    images: *const f32,
    n: usize,
    threshold: f64,
    classes: *mut u32,
    used_high: *mut u8,
    scores: *mut f64,
) -> HfresStatus {
    guard(|| {
        let h = network(net)?;
        if images.is_null() || classes.is_null() {
            return Err(invalid("images or classes is null"));
        }
        if n == 0 {
            return Ok(());
        }
        let (c, r) = (h.net.spec().in_channels, h.net.high_res());
        let data = std::slice::from_raw_parts(images, n * c * r * r).to_vec();
        let mut x = Tensor::new(vec![n, c, r, r], data)?;
        h.norm.apply(&mut x)?;
        let t = if threshold < 0.0 {
            Threshold::AlwaysHigh
        } else {
            Threshold::Value(threshold)
        };
        let preds = predict_with_threshold(&h.net, &x, t)?;
        for (i, p) in preds.iter().enumerate() {
            *classes.add(i) = p.class as u32;
            if !used_high.is_null() {
                *used_high.add(i) = p.used_high as u8;
            }
            if !scores.is_null() {
                *scores.add(i) = p.score_low;
            }
        }
        Ok(())
    })
}

/// Region decomposition of `n` evaluation records.
///
/// # Safety
/// `pred_low`, `pred_high` and `labels` must hold `n` entries; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn hfres_regions(
    pred_low: *const u32,
    pred_high: *const u32,
    labels: *const u32,
    n: usize,
    out: *mut HfresRegions,
) -> HfresStatus {
    guard(|| {
        if pred_low.is_null() || pred_high.is_null() || labels.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        let (pl, ph, y) = (
            std::slice::from_raw_parts(pred_low, n),
            std::slice::from_raw_parts(pred_high, n),
            std::slice::from_raw_parts(labels, n),
        );
        let records: Vec<CalibrationResult> = (0..n)
            .map(|i| CalibrationResult {
                score_low: 0.0,
                pred_low: pl[i] as usize,
                pred_high: ph[i] as usize,
                label: y[i] as usize,
            })
            .collect();
        let r = region_decomposition(&records)?;
        *out = HfresRegions {
            a: r.a,
            b: r.b,
            c: r.c,
            d: r.d,
            upper_bound: r.upper_bound,
        };
        Ok(())
    })
}

/// Share of spectral energy outside the central band of a `[C, H, W]`
/// feature map.
///
/// # Safety
/// `features` must hold `c·h·w` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hfres_spectrum_hf_ratio(
    features: *const f64,
    c: usize,
    h: usize,
    w: usize,
    band_radius: f64,
    out: *mut f64,
) -> HfresStatus {
    guard(|| {
        if features.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        let data = std::slice::from_raw_parts(features, c * h * w).to_vec();
        let t = Tensor::new(vec![c, h, w], data)?;
        *out = hfres::freq::summarize_spectrum(&t, band_radius)?.hf_ratio();
        Ok(())
    })
}
