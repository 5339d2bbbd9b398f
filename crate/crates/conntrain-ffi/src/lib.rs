//! C ABI over the connectivity-training library. Every object crossing the
//! boundary is an opaque handle; every fallible call returns a [`CtStatus`]
//! and records a thread-local message retrievable with [`ct_last_error`].
//!
//! The generated header lands in `include/conntrain.h` at build time.

use conntrain::data::{self, Dataset};
use conntrain::layers::{LayerDesc, Network};
use conntrain::masking::Mode;
use conntrain::train::{self, TrainConfig, TrainError};
use conntrain::tensor::Tensor;
use serde::Serialize;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result of every fallible call. Anything but `Ok` leaves a message in
/// `ct_last_error()`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The arguments were readable but invalid (bad JSON, unknown preset,
    /// shape mismatch, out-of-range hyperparameter, ...).
    BadArgument = 3,
    /// The filesystem said no.
    IoError = 4,
    /// Training or inference failed after validation.
    TrainError = 5,
    /// A bug: the library panicked. The process is still sound, but the
    /// operation did nothing.
    Panic = 6,
}

/// Whether a network trains weights (`Dense`) or connectivity (`Prune`,
/// `Flip`).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtMode {
    Dense = 0,
    Prune = 1,
    Flip = 2,
}

pub struct CtDataset(Dataset);
pub struct CtNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().map(|b| if b == 0 { b'?' } else { b }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: CtStatus, msg: &str) -> CtStatus {
    set_error(msg);
    status
}

fn train_error_status(e: &TrainError) -> CtStatus {
    match e {
        TrainError::BadConfig(_) | TrainError::DatasetMismatch(_) => CtStatus::BadArgument,
        TrainError::Io(_) => CtStatus::IoError,
        _ => CtStatus::TrainError,
    }
}

/// Catches panics so they never unwind across the C boundary.
fn guarded(f: impl FnOnce() -> CtStatus) -> CtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(CtStatus::Panic, "internal panic"),
    }
}

/// `Ok("...")` from a C string argument, or the right failure status.
unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CtStatus> {
    if ptr.is_null() {
        return Err(fail(CtStatus::NullPointer, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(CtStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

fn give_string(s: String, out: *mut *mut c_char) -> CtStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CtStatus::Ok
        }
        Err(_) => fail(CtStatus::Panic, "interior NUL in produced string"),
    }
}

/// Library version as a static string; never fails, never freed.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned through a `char**` out-parameter. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ct_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn load_dataset(
    dir: *const c_char,
    out: *mut *mut CtDataset,
    load: fn(&Path) -> Result<Dataset, data::DataError>,
) -> CtStatus {
    if out.is_null() {
        return fail(CtStatus::NullPointer, "out is null");
    }
    let dir = match arg_str(dir, "dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match load(Path::new(dir)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(CtDataset(ds)));
            CtStatus::Ok
        }
        Err(e) => fail(CtStatus::IoError, &e.to_string()),
    }
}

/// Loads the four MNIST IDX files from `dir` into a dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ct_dataset_load_mnist(
    dir: *const c_char,
    out: *mut *mut CtDataset,
) -> CtStatus {
    guarded(|| load_dataset(dir, out, data::load_mnist))
}

/// Loads the six CIFAR-10 binary batches from `dir` into a dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ct_dataset_load_cifar10(
    dir: *const c_char,
    out: *mut *mut CtDataset,
) -> CtStatus {
    guarded(|| load_dataset(dir, out, data::load_cifar10))
}

/// Releases a dataset handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ct_dataset_free(ds: *mut CtDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of training samples, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ct_dataset_train_len(ds: *const CtDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.train_len())
}

/// Number of test samples, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ct_dataset_test_len(ds: *const CtDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.test_len())
}

/// Writes the reference configuration for a named preset (for example
/// "lenet-mnist-free-prune") as a JSON document the caller can edit and
/// pass to `ct_train`. `full` disables the reduced regime the CIFAR
/// presets otherwise default to.
#[no_mangle]
pub unsafe extern "C" fn ct_preset_config(
    name: *const c_char,
    full: bool,
    out_json: *mut *mut c_char,
) -> CtStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(CtStatus::NullPointer, "out_json is null");
        }
        let name = match arg_str(name, "name") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match conntrain::cli::preset_config(name, full) {
            Ok(cfg) => give_string(serde_json::to_string_pretty(&cfg).unwrap(), out_json),
            Err(e) => fail(CtStatus::BadArgument, &e.message()),
        }
    })
}

#[derive(Serialize)]
struct RunSummary {
    run_seed: u64,
    final_test_accuracy: f64,
    final_changed_fraction: f64,
    initial_checksum: u64,
    final_checksum: u64,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_mean_accuracy: f64,
    final_mean_changed_fraction: f64,
    runs: Vec<RunSummary>,
}

/// Trains `config_json` (the schema `ct_preset_config` emits) on a loaded
/// dataset and returns an aggregate summary as JSON in `*out_summary_json`.
/// `checkpoint_dir` may be null; when set and the config's
/// `checkpoint_every` is nonzero, checkpoints land there as
/// `run_{r}_epoch_{e}.ckpt`, loadable with `ct_network_load`.
#[no_mangle]
pub unsafe extern "C" fn ct_train(
    config_json: *const c_char,
    data: *const CtDataset,
    checkpoint_dir: *const c_char,
    out_summary_json: *mut *mut c_char,
) -> CtStatus {
    guarded(|| {
        if out_summary_json.is_null() {
            return fail(CtStatus::NullPointer, "out_summary_json is null");
        }
        let Some(data) = data.as_ref() else {
            return fail(CtStatus::NullPointer, "data is null");
        };
        let config_json = match arg_str(config_json, "config_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ckpt_dir = if checkpoint_dir.is_null() {
            None
        } else {
            match arg_str(checkpoint_dir, "checkpoint_dir") {
                Ok(s) => Some(Path::new(s)),
                Err(status) => return status,
            }
        };
        let cfg: TrainConfig = match serde_json::from_str(config_json) {
            Ok(c) => c,
            Err(e) => return fail(CtStatus::BadArgument, &format!("config_json: {e}")),
        };
        let out = match train::train(&cfg, &data.0, ckpt_dir) {
            Ok(o) => o,
            Err(e) => return fail(train_error_status(&e), &e.to_string()),
        };
        let (best_epoch, best_mean_accuracy) = train::best_mean_accuracy(&out.aggregate);
        let summary = TrainSummary {
            best_epoch,
            best_mean_accuracy,
            final_mean_changed_fraction: train::final_mean_changed_fraction(&out.runs),
            runs: out
                .runs
                .iter()
                .map(|r| RunSummary {
                    run_seed: r.run_seed,
                    final_test_accuracy: r.records.last().map_or(0.0, |m| m.test_accuracy),
                    final_changed_fraction: r
                        .records
                        .last()
                        .map_or(0.0, |m| m.changed_fraction),
                    initial_checksum: r.initial_checksum,
                    final_checksum: r.final_checksum,
                })
                .collect(),
        };
        give_string(serde_json::to_string_pretty(&summary).unwrap(), out_summary_json)
    })
}

/// Loads a checkpoint written during training into a network handle.
#[no_mangle]
pub unsafe extern "C" fn ct_network_load(
    path: *const c_char,
    out: *mut *mut CtNetwork,
) -> CtStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CtStatus::NullPointer, "out is null");
        }
        let path = match arg_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let mut file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(CtStatus::IoError, &format!("{path}: {e}")),
        };
        match Network::load(&mut file) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(CtNetwork(net)));
                CtStatus::Ok
            }
            Err(e) => fail(CtStatus::BadArgument, &e.to_string()),
        }
    })
}

/// Releases a network handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ct_network_free(net: *mut CtNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Total weight count across layers, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ct_network_param_count(net: *const CtNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.count_params())
}

/// Floats per input sample (channels * height * width), or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn ct_network_input_len(net: *const CtNetwork) -> usize {
    net.as_ref()
        .map_or(0, |n| n.0.spec().input_shape.iter().product())
}

/// Logits per sample (the last dense layer's width), or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn ct_network_output_len(net: *const CtNetwork) -> usize {
    net.as_ref().map_or(0, |n| {
        n.0.spec()
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerDesc::Dense { units } => Some(*units),
                _ => None,
            })
            .unwrap_or(0)
    })
}

/// What the handle trains; `Dense` for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ct_network_mode(net: *const CtNetwork) -> CtMode {
    match net.as_ref().map(|n| n.0.mode()) {
        Some(Mode::Prune) => CtMode::Prune,
        Some(Mode::Flip) => CtMode::Flip,
        _ => CtMode::Dense,
    }
}

/// Fraction of connections currently pruned or flipped (0 in dense mode).
#[no_mangle]
pub unsafe extern "C" fn ct_network_changed_fraction(
    net: *const CtNetwork,
    out: *mut f64,
) -> CtStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail(CtStatus::NullPointer, "net is null");
        };
        if out.is_null() {
            return fail(CtStatus::NullPointer, "out is null");
        }
        if net.0.mode() == Mode::Dense {
            *out = 0.0;
            return CtStatus::Ok;
        }
        match net.0.global_changed_fraction() {
            Ok(f) => {
                *out = f;
                CtStatus::Ok
            }
            Err(e) => fail(CtStatus::TrainError, &e.to_string()),
        }
    })
}

/// Runs the network on `batch` samples laid out channel-major. `input` must
/// hold exactly `batch * ct_network_input_len` floats and `out_logits`
/// exactly `batch * ct_network_output_len`.
#[no_mangle]
pub unsafe extern "C" fn ct_network_forward(
    net: *const CtNetwork,
    batch: usize,
    input: *const f32,
    input_len: usize,
    out_logits: *mut f32,
    out_len: usize,
) -> CtStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail(CtStatus::NullPointer, "net is null");
        };
        if input.is_null() || out_logits.is_null() {
            return fail(CtStatus::NullPointer, "input or out_logits is null");
        }
        if batch == 0 {
            return fail(CtStatus::BadArgument, "batch must be >= 1");
        }
        let [c, h, w] = net.0.spec().input_shape;
        if input_len != batch * c * h * w {
            return fail(
                CtStatus::BadArgument,
                &format!(
                    "input_len {input_len}, want batch {batch} * {c}x{h}x{w} = {}",
                    batch * c * h * w
                ),
            );
        }
        let xs = std::slice::from_raw_parts(input, input_len);
        let xb = match Tensor::new(vec![batch, c, h, w], xs.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(CtStatus::BadArgument, &e.to_string()),
        };
        let logits = match net.0.forward(&xb) {
            Ok(t) => t,
            Err(e) => return fail(CtStatus::TrainError, &e.to_string()),
        };
        if out_len != logits.len() {
            return fail(
                CtStatus::BadArgument,
                &format!("out_len {out_len}, want {}", logits.len()),
            );
        }
        std::slice::from_raw_parts_mut(out_logits, out_len).copy_from_slice(logits.data());
        CtStatus::Ok
    })
}
