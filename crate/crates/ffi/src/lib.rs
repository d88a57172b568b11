//! C ABI over the `iavae` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`,
//! `*_generate` or `*_load` functions and released by the matching
//! `*_free`. Every fallible function returns an [`IavaeStatus`]; on failure
//! [`iavae_last_error_message`] describes the error on the calling thread.
//! Output pointers are written only on success. Panics are caught at the
//! boundary and reported as `IAVAE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use iavae::experiments::{load_model, ModelCheckpoint};
use iavae::hypernet::{HypernetParams, DEFAULT_EMBED_DIM};
use iavae::models::{decoder_true, make_encoder, PosteriorParams};
use iavae::posterior::{self, LaplaceFit, LatentModel, MapSearch};
use iavae::stats::{self, PairedSample, TestUsed};
use iavae::synthetic::{self, SyntheticDataset};
use iavae::vae::{self, InferenceModel, Mode, NoiseTable, TrainConfig};
use iavae::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IavaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NotPositiveDefinite = 4,
    Degenerate = 5,
    Io = 6,
    Numerical = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IavaeMode {
    Vae = 0,
    IaVae = 1,
}

/// Test chosen by the significance pipeline.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IavaeTest {
    PairedT = 0,
    Wilcoxon = 1,
}

/// Opaque synthetic dataset.
pub struct IavaeDataset {
    inner: SyntheticDataset,
}

/// Opaque inference model (plain VAE encoder or IA-VAE).
pub struct IavaeModel {
    inner: InferenceModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> IavaeStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::Dimension { .. } | Error::Layout(_) => IavaeStatus::ShapeMismatch,
        Error::NotPositiveDefinite { .. } => IavaeStatus::NotPositiveDefinite,
        Error::Degenerate(_) => IavaeStatus::Degenerate,
        Error::Io { .. } | Error::Json(_) | Error::Csv(_) => IavaeStatus::Io,
        Error::NonFiniteGradient { .. } | Error::NonScalarLoss(_) => IavaeStatus::Numerical,
        Error::InvalidArgument(_) => IavaeStatus::InvalidArgument,
    }
}

struct Fail(IavaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IavaeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IavaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IavaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside iavae".into());
            IavaeStatus::Panic
        }
    }
}

unsafe fn read<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IavaeStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn posterior_params(mean: &[f64], log_var: &[f64]) -> Result<PosteriorParams, Fail> {
    Ok(PosteriorParams::new(mean.to_vec(), log_var.to_vec())?)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iavae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Draws `n` observations from the oracle model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_generate(n: usize, sigma: f64, seed: u64, out: *mut *mut IavaeDataset) -> IavaeStatus {
    guard(|| {
        let slot = write(out, 1, "out")?;
        let inner = synthetic::generate(n, sigma, seed)?;
        slot[0] = Box::into_raw(Box::new(IavaeDataset { inner }));
        Ok(())
    })
}

/// Reads a dataset written as CSV with its JSON sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_load(path: *const c_char, out: *mut *mut IavaeDataset) -> IavaeStatus {
    guard(|| {
        let slot = write(out, 1, "out")?;
        let inner = SyntheticDataset::read_csv(path_arg(path)?)?;
        slot[0] = Box::into_raw(Box::new(IavaeDataset { inner }));
        Ok(())
    })
}

/// Number of observations; 0 for a NULL handle.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_len(ds: *const IavaeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Copies the observations row-major into `out` (`3 * len` values).
///
/// # Safety
/// `ds` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_copy_x(ds: *const IavaeDataset, out: *mut f64, out_len: usize) -> IavaeStatus {
    guard(|| {
        let d = handle(ds, "dataset")?;
        if out_len != 3 * d.inner.len() {
            return Err(Fail(IavaeStatus::ShapeMismatch, format!("need {} values, got {out_len}", 3 * d.inner.len())));
        }
        let dst = write(out, out_len, "out")?;
        for (chunk, x) in dst.chunks_mut(3).zip(&d.inner.x) {
            chunk.copy_from_slice(x);
        }
        Ok(())
    })
}

/// Copies the generating latents row-major into `out` (`2 * len` values).
///
/// # Safety
/// `ds` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_copy_z(ds: *const IavaeDataset, out: *mut f64, out_len: usize) -> IavaeStatus {
    guard(|| {
        let d = handle(ds, "dataset")?;
        if out_len != 2 * d.inner.len() {
            return Err(Fail(IavaeStatus::ShapeMismatch, format!("need {} values, got {out_len}", 2 * d.inner.len())));
        }
        let dst = write(out, out_len, "out")?;
        for (chunk, z) in dst.chunks_mut(2).zip(&d.inner.z_true) {
            chunk.copy_from_slice(z);
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iavae_dataset_free(ds: *mut IavaeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Freshly initialized reference encoder as a VAE model.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn iavae_encoder_new(hidden_width: usize, seed: u64, out: *mut *mut IavaeModel) -> IavaeStatus {
    guard(|| {
        let slot = write(out, 1, "out")?;
        let inner = InferenceModel::Vae(make_encoder(hidden_width, seed)?);
        slot[0] = Box::into_raw(Box::new(IavaeModel { inner }));
        Ok(())
    })
}

/// IA-VAE over the encoder of `base` whose hypernetwork head is exactly
/// zero, so it reproduces `base` bit for bit.
///
/// # Safety
/// `base` must be a live model handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_zero_modulation(base: *const IavaeModel, seed: u64, out: *mut *mut IavaeModel) -> IavaeStatus {
    guard(|| {
        let b = handle(base, "base")?;
        let slot = write(out, 1, "out")?;
        let encoder = b.inner.base().clone();
        let hypernet = HypernetParams::linear(&encoder, DEFAULT_EMBED_DIM, 0.0, seed)?;
        let inner = InferenceModel::IaVae { base: encoder, hypernet };
        slot[0] = Box::into_raw(Box::new(IavaeModel { inner }));
        Ok(())
    })
}

/// Trains a model with the given JSON training configuration (NULL for
/// defaults). IA-VAE mode requires `base`, whose encoder is frozen; VAE
/// mode starts from `base` when given.
///
/// # Safety
/// `ds` must be live; `base` NULL or live; `config_json` NULL or a
/// NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn iavae_train(
    ds: *const IavaeDataset,
    mode: IavaeMode,
    base: *const IavaeModel,
    config_json: *const c_char,
    out: *mut *mut IavaeModel,
) -> IavaeStatus {
    guard(|| {
        let d = handle(ds, "dataset")?;
        let slot = write(out, 1, "out")?;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(IavaeStatus::InvalidArgument, "config is not valid UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Fail(IavaeStatus::InvalidArgument, format!("config: {e}")))?
        };
        let base = base.as_ref().map(|b| b.inner.base());
        let mode = match mode {
            IavaeMode::Vae => Mode::Vae,
            IavaeMode::IaVae => Mode::IaVae,
        };
        let outcome = vae::train(&d.inner, mode, base, &cfg)?;
        slot[0] = Box::into_raw(Box::new(IavaeModel { inner: outcome.model }));
        Ok(())
    })
}

/// Loads a model checkpoint written by the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_load(path: *const c_char, out: *mut *mut IavaeModel) -> IavaeStatus {
    guard(|| {
        let slot = write(out, 1, "out")?;
        let inner = load_model(path_arg(path)?)?;
        slot[0] = Box::into_raw(Box::new(IavaeModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be live; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_save(model: *const IavaeModel, path: *const c_char, seed: u64) -> IavaeStatus {
    guard(|| {
        let m = handle(model, "model")?;
        ModelCheckpoint::from_model(&m.inner, seed).save(path_arg(path)?)?;
        Ok(())
    })
}

/// Inference parameters (encoder plus hypernetwork); 0 for NULL.
///
/// # Safety
/// `model` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_parameter_count(model: *const IavaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.inference_parameter_count())
}

/// Posterior mean and log-variance (2 values each) for one observation.
///
/// # Safety
/// `model` must be live; `x` holds 3 doubles; outputs hold 2 each.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_posterior(model: *const IavaeModel, x: *const f64, mean_out: *mut f64, log_var_out: *mut f64) -> IavaeStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = read(x, 3, "x")?;
        let q = m.inner.posterior(&[x[0], x[1], x[2]])?;
        write(mean_out, 2, "mean_out")?.copy_from_slice(&q.mean);
        write(log_var_out, 2, "log_var_out")?.copy_from_slice(&q.log_variance);
        Ok(())
    })
}

/// Dataset-mean ELBO (nats, likelihood constant included) with
/// `num_samples` fixed draws per point from `noise_seed`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_elbo(
    model: *const IavaeModel,
    ds: *const IavaeDataset,
    num_samples: usize,
    noise_seed: u64,
    out: *mut f64,
) -> IavaeStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(ds, "dataset")?;
        if num_samples == 0 {
            return Err(Fail(IavaeStatus::InvalidArgument, "num_samples must be positive".into()));
        }
        let noise = NoiseTable::new(d.inner.len(), num_samples, noise_seed);
        let est = vae::evaluate(&m.inner, &d.inner, &noise)?;
        write(out, 1, "out")?[0] = est.elbo;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iavae_model_free(model: *mut IavaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean of the oracle decoder at `z` (2 values in, 3 out).
///
/// # Safety
/// `z` holds 2 doubles, `out` 3.
#[no_mangle]
pub unsafe extern "C" fn iavae_decoder_true(z: *const f64, out: *mut f64) -> IavaeStatus {
    guard(|| {
        let z = read(z, 2, "z")?;
        write(out, 3, "out")?.copy_from_slice(&decoder_true(z)?);
        Ok(())
    })
}

/// `KL(N(mean, diag exp(log_var)) || N(0, I))` for `dim`-dimensional inputs.
///
/// # Safety
/// `mean` and `log_var` hold `dim` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_kl_diag_gaussian(mean: *const f64, log_var: *const f64, dim: usize, out: *mut f64) -> IavaeStatus {
    guard(|| {
        let q = posterior_params(read(mean, dim, "mean")?, read(log_var, dim, "log_var")?)?;
        write(out, 1, "out")?[0] = vae::kl_diag_gaussian(&q);
        Ok(())
    })
}

/// Unnormalized log-posterior of the oracle model at `z` for `x`.
///
/// # Safety
/// `z` holds 2 doubles, `x` 3; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_log_posterior(z: *const f64, x: *const f64, sigma: f64, out: *mut f64) -> IavaeStatus {
    guard(|| {
        let (z, x) = (read(z, 2, "z")?, read(x, 3, "x")?);
        if !(sigma > 0.0) {
            return Err(Fail(IavaeStatus::InvalidArgument, "sigma must be positive".into()));
        }
        write(out, 1, "out")?[0] = LatentModel::oracle(sigma).log_posterior_unnorm([z[0], z[1]], &[x[0], x[1], x[2]]);
        Ok(())
    })
}

/// Multi-start MAP search. `converged_out` receives 1 when the gradient
/// norm at the returned point is below 1e-5, else 0.
///
/// # Safety
/// `x` holds 3 doubles, `z_out` 2; `converged_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_find_map(
    x: *const f64,
    sigma: f64,
    restarts: usize,
    seed: u64,
    z_out: *mut f64,
    converged_out: *mut c_int,
) -> IavaeStatus {
    guard(|| {
        let x = read(x, 3, "x")?;
        if !(sigma > 0.0) {
            return Err(Fail(IavaeStatus::InvalidArgument, "sigma must be positive".into()));
        }
        let cfg = MapSearch {
            restarts,
            seed,
            ..MapSearch::default()
        };
        let r = posterior::find_map(&LatentModel::oracle(sigma), &[x[0], x[1], x[2]], &[], &cfg)?;
        write(z_out, 2, "z_out")?.copy_from_slice(&r.z);
        write(converged_out, 1, "converged_out")?[0] = c_int::from(r.converged);
        Ok(())
    })
}

/// Laplace covariance at `z_map`, written row-major (4 values).
///
/// # Safety
/// `x` holds 3 doubles, `z_map` 2, `cov_out` 4.
#[no_mangle]
pub unsafe extern "C" fn iavae_laplace_fit(x: *const f64, sigma: f64, z_map: *const f64, cov_out: *mut f64) -> IavaeStatus {
    guard(|| {
        let (x, z) = (read(x, 3, "x")?, read(z_map, 2, "z_map")?);
        if !(sigma > 0.0) {
            return Err(Fail(IavaeStatus::InvalidArgument, "sigma must be positive".into()));
        }
        let fit = posterior::laplace_fit(&LatentModel::oracle(sigma), &[x[0], x[1], x[2]], [z[0], z[1]])?;
        let c = fit.covariance;
        write(cov_out, 4, "cov_out")?.copy_from_slice(&[c[0][0], c[0][1], c[1][0], c[1][1]]);
        Ok(())
    })
}

/// Mahalanobis distance of `mu` from `z_map` under the row-major 2×2
/// covariance `cov`.
///
/// # Safety
/// `mu` and `z_map` hold 2 doubles, `cov` 4; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_mahalanobis(mu: *const f64, z_map: *const f64, cov: *const f64, out: *mut f64) -> IavaeStatus {
    guard(|| {
        let (mu, z, c) = (read(mu, 2, "mu")?, read(z_map, 2, "z_map")?, read(cov, 4, "cov")?);
        let covariance = [[c[0], c[1]], [c[2], c[3]]];
        let precision = posterior::inverse2(&covariance)?;
        if !(posterior::sym_eigenvalues(&covariance)[0] > 0.0) {
            return Err(Fail(IavaeStatus::NotPositiveDefinite, "covariance is not positive definite".into()));
        }
        let fit = LaplaceFit {
            z_map: [z[0], z[1]],
            covariance,
            precision,
            log_post_at_map: 0.0,
        };
        write(out, 1, "out")?[0] = posterior::mahalanobis([mu[0], mu[1]], &fit);
        Ok(())
    })
}

/// `p(mu | x) / p(z_map | x)` under the oracle model.
///
/// # Safety
/// `mu` and `z_map` hold 2 doubles, `x` 3; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_density_ratio(mu: *const f64, x: *const f64, sigma: f64, z_map: *const f64, out: *mut f64) -> IavaeStatus {
    guard(|| {
        let (mu, x, z) = (read(mu, 2, "mu")?, read(x, 3, "x")?, read(z_map, 2, "z_map")?);
        if !(sigma > 0.0) {
            return Err(Fail(IavaeStatus::InvalidArgument, "sigma must be positive".into()));
        }
        write(out, 1, "out")?[0] =
            posterior::density_ratio(&LatentModel::oracle(sigma), [mu[0], mu[1]], &[x[0], x[1], x[2]], [z[0], z[1]]);
        Ok(())
    })
}

/// Gated paired test of `treatment > baseline` (Shapiro–Wilk at `alpha`
/// selecting the t-test or Wilcoxon). Writes the one-sided p-value and the
/// test used.
///
/// # Safety
/// `baseline` and `treatment` hold `n` doubles; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn iavae_significance(
    baseline: *const f64,
    treatment: *const f64,
    n: usize,
    alpha: f64,
    p_out: *mut f64,
    test_out: *mut IavaeTest,
) -> IavaeStatus {
    guard(|| {
        let pairs = PairedSample::new(read(baseline, n, "baseline")?.to_vec(), read(treatment, n, "treatment")?.to_vec())?;
        let r = stats::significance(&pairs, alpha)?;
        write(p_out, 1, "p_out")?[0] = r.p_value;
        write(test_out, 1, "test_out")?[0] = match r.test_used {
            TestUsed::PairedT => IavaeTest::PairedT,
            TestUsed::Wilcoxon => IavaeTest::Wilcoxon,
        };
        Ok(())
    })
}
