//! C ABI over the `autocompress` library.
//!
//! Objects are opaque heap handles released with their `*_free` function.
//! Every fallible call returns an [`AcStatus`]; on failure a message is
//! available from [`ac_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use autocompress::driver::{
    load_checkpoint, load_data, run_autocompress, save_checkpoint, Checkpoint, RunConfig, RunOptions,
};
use autocompress::model::{
    build_network, evaluate_accuracy, load_dataset, synth_dataset_with, train_with, Dataset, DatasetSource, Network,
    Split, SynthSpec, TrainConfig,
};
use autocompress::schemes::{count_flops, count_params, MaskSet};
use autocompress::{Error, Tensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Contract = 4,
    Config = 5,
    Format = 6,
    Training = 7,
    Infeasible = 8,
    BelowFloor = 9,
    Io = 10,
    Panic = 11,
}

/// A network together with its structure masks.
pub struct AcNetwork {
    network: Network,
    masks: MaskSet,
}

/// A labelled image set.
pub struct AcDataset {
    data: Dataset,
}

/// Parameter and FLOP counts under the network's masks.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcCounts {
    pub conv_params: u64,
    pub total_params: u64,
    pub conv_flops: u64,
    pub total_flops: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> AcStatus {
    match err {
        Error::Shape(_) => AcStatus::Shape,
        Error::Contract(_) => AcStatus::Contract,
        Error::Config(_) => AcStatus::Config,
        Error::Format { .. } => AcStatus::Format,
        Error::Training { .. } => AcStatus::Training,
        Error::Infeasible(_) => AcStatus::Infeasible,
        Error::BelowFloor { .. } => AcStatus::BelowFloor,
        Error::Io(_) => AcStatus::Io,
    }
}

/// Failure inside the shim, before any library call.
struct Fail(AcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            AcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AcStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn ac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized network (`arch` is e.g. `"convnet-s"`).
///
/// # Safety
/// `arch` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_network_build(
    arch: *const c_char,
    channels: u32,
    height: u32,
    width: u32,
    classes: u32,
    seed: u64,
    out: *mut *mut AcNetwork,
) -> AcStatus {
    guard(|| {
        let arch = text(arch, "arch")?;
        let network = build_network(arch, [channels as usize, height as usize, width as usize], classes as usize, seed)?;
        let masks = MaskSet::dense(&network);
        put(out, AcNetwork { network, masks })
    })
}

/// Releases a network; null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ac_network_free(net: *mut AcNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_network_load(path: *const c_char, out: *mut *mut AcNetwork) -> AcStatus {
    guard(|| {
        let ckpt = load_checkpoint(&PathBuf::from(text(path, "path")?))?;
        put(
            out,
            AcNetwork {
                network: ckpt.network,
                masks: ckpt.masks,
            },
        )
    })
}

/// Saves a network and its masks as a checkpoint file.
///
/// # Safety
/// `net` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ac_network_save(net: *const AcNetwork, path: *const c_char) -> AcStatus {
    guard(|| {
        let net = deref(net, "network")?;
        let ckpt = Checkpoint {
            network: net.network.clone(),
            masks: net.masks.clone(),
            metadata: Default::default(),
        };
        save_checkpoint(&ckpt, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Writes the input shape (channels, height, width) and class count.
///
/// # Safety
/// `net` must be a live handle; `shape` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn ac_network_shape(net: *const AcNetwork, shape: *mut u32, classes: *mut u32) -> AcStatus {
    guard(|| {
        let net = deref(net, "network")?;
        if shape.is_null() || classes.is_null() {
            return Err(null("output pointer"));
        }
        for (i, &d) in net.network.input_shape.iter().enumerate() {
            *shape.add(i) = d as u32;
        }
        *classes = net.network.classes as u32;
        Ok(())
    })
}

/// Forward pass on `batch` images laid out as `batch x C x H x W` doubles;
/// writes `batch x classes` logits into `logits` (capacity `logits_len`).
///
/// # Safety
/// `input` must hold `batch * C * H * W` doubles and `logits` `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn ac_network_forward(
    net: *const AcNetwork,
    input: *const f64,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> AcStatus {
    guard(|| {
        let net = deref(net, "network")?;
        if input.is_null() || logits.is_null() {
            return Err(null("buffer"));
        }
        let [c, h, w] = net.network.input_shape;
        let need = batch * net.network.classes;
        if logits_len < need {
            return Err(Fail(AcStatus::Shape, format!("logits buffer holds {logits_len}, need {need}")));
        }
        let x = Tensor::new(vec![batch, c, h, w], std::slice::from_raw_parts(input, batch * c * h * w).to_vec())?;
        let y = net.network.forward(&x)?;
        std::ptr::copy_nonoverlapping(y.data().as_ptr(), logits, need);
        Ok(())
    })
}

/// Counts under the network's masks.
///
/// # Safety
/// `net` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_network_counts(net: *const AcNetwork, out: *mut AcCounts) -> AcStatus {
    guard(|| {
        let net = deref(net, "network")?;
        let out = deref_mut(out, "output pointer")?;
        let p = count_params(&net.network, Some(&net.masks))?;
        let f = count_flops(&net.network, Some(&net.masks))?;
        *out = AcCounts {
            conv_params: p.conv as u64,
            total_params: p.total as u64,
            conv_flops: f.conv,
            total_flops: f.total,
        };
        Ok(())
    })
}

/// Synthetic single-channel `size x size` class-blob images.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_dataset_synth(seed: u64, n: usize, classes: u32, size: u32, out: *mut *mut AcDataset) -> AcStatus {
    guard(|| {
        let spec = SynthSpec {
            shape: [1, size as usize, size as usize],
            ..Default::default()
        };
        let data = synth_dataset_with(seed, n, classes as usize, &spec)?;
        put(out, AcDataset { data })
    })
}

/// Loads an IDX image file and its label file.
///
/// # Safety
/// Paths must be valid C strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    classes: u32,
    out: *mut *mut AcDataset,
) -> AcStatus {
    guard(|| {
        let images = PathBuf::from(text(images, "images")?);
        let labels = PathBuf::from(text(labels, "labels")?);
        let data = load_dataset(
            DatasetSource::Idx {
                images: &images,
                labels: &labels,
            },
            classes as usize,
            Split::Train,
        )?;
        put(out, AcDataset { data })
    })
}

/// Number of samples; 0 for null.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ac_dataset_len(data: *const AcDataset) -> usize {
    data.as_ref().map_or(0, |d| d.data.len())
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `data` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ac_dataset_free(data: *mut AcDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Trains with Adam, keeping masked weights at zero.
///
/// # Safety
/// `net` and `data` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn ac_train(net: *mut AcNetwork, data: *const AcDataset, epochs: u32, lr: f64, batch: u32, seed: u64) -> AcStatus {
    guard(|| {
        let net = deref_mut(net, "network")?;
        let data = deref(data, "dataset")?;
        let cfg = TrainConfig {
            epochs: epochs as usize,
            lr,
            batch: batch as usize,
            seed,
        };
        train_with(&mut net.network, &data.data, &cfg, None, Some(&net.masks))?;
        Ok(())
    })
}

/// Top-1 accuracy in `[0, 1]`.
///
/// # Safety
/// `net` and `data` must be live handles and `accuracy` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_evaluate(net: *const AcNetwork, data: *const AcDataset, accuracy: *mut f64) -> AcStatus {
    guard(|| {
        let net = deref(net, "network")?;
        let data = deref(data, "dataset")?;
        *deref_mut(accuracy, "accuracy")? = evaluate_accuracy(&net.network, &data.data)?;
        Ok(())
    })
}

/// Runs a full compression described by `config_text` (the run
/// configuration file format). `pretrained` may be null to train a
/// baseline; `out_dir` may be null to skip writing files. On success the
/// final network is stored in `out` and the cumulative conv-parameter
/// reduction and final accuracy are written when the pointers are non-null.
///
/// # Safety
/// Strings must be valid C strings or null where allowed; handles live.
#[no_mangle]
pub unsafe extern "C" fn ac_compress(
    config_text: *const c_char,
    pretrained: *const AcNetwork,
    out_dir: *const c_char,
    out: *mut *mut AcNetwork,
    params_rate: *mut f64,
    accuracy: *mut f64,
) -> AcStatus {
    guard(|| {
        let cfg = RunConfig::parse(text(config_text, "config")?)?;
        let out_dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(out_dir, "out_dir")?))
        };
        let (train, test) = load_data(&cfg)?;
        let opts = RunOptions {
            out_dir,
            pretrained: pretrained.as_ref().map(|n| n.network.clone()),
            ..Default::default()
        };
        let outcome = run_autocompress(&cfg, &train, &test, &opts)?.into_result()?;
        let last = outcome.report.last().cloned();
        if let (Some(p), Some(row)) = (params_rate.as_mut(), &last) {
            *p = row.params_rate;
        }
        if let (Some(a), Some(row)) = (accuracy.as_mut(), &last) {
            *a = row.accuracy;
        }
        put(
            out,
            AcNetwork {
                network: outcome.network,
                masks: outcome.masks,
            },
        )
    })
}
