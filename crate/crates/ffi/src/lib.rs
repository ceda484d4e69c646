//! C interface to `mpf-core`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`MpfStatus`]; the message of the last failure on the calling thread is
//! available from [`mpf_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use mpf_core::config::RunConfig;
use mpf_core::extract::{self, FieldKind};
use mpf_core::field::{self, FieldParams};
use mpf_core::geometry::{self, GeometryError, PointCloud, Transform, TriangleMesh};
use mpf_core::io::{self, IoError, MeshFormat, PointFormat};
use mpf_core::pipeline::{self, PipelineError};
use mpf_core::trainer::{self, Checkpoint, TrainError};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpfStatus {
    MpfOk = 0,
    /// A required pointer argument was null.
    MpfErrNull = 1,
    /// A string argument was not valid UTF-8, or another argument was out
    /// of range.
    MpfErrArgument = 2,
    /// File could not be read or written.
    MpfErrIo = 3,
    /// Input file or JSON was malformed.
    MpfErrParse = 4,
    /// Configuration rejected.
    MpfErrConfig = 5,
    /// Empty or degenerate geometry.
    MpfErrGeometry = 6,
    /// Training failed (non-finite loss, sampler starvation, ...).
    MpfErrTrain = 7,
    /// Internal panic; the handle arguments should be considered poisoned.
    MpfErrInternal = 8,
}

/// A point cloud in its original coordinates.
pub struct MpfCloud {
    cloud: PointCloud,
}

/// A trained field together with the normalization it was trained under
/// and, after reconstruction, the extracted mesh.
pub struct MpfModel {
    params: FieldParams,
    transform: Transform,
    mesh: Option<TriangleMesh>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MpfStatus, String);

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match &e {
            IoError::Io { .. } => MpfStatus::MpfErrIo,
            IoError::Parse { .. } | IoError::Unsupported(_) => MpfStatus::MpfErrParse,
            IoError::EmptyInput | IoError::Geometry(_) => MpfStatus::MpfErrGeometry,
        };
        Failure(code, e.to_string())
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        Failure(MpfStatus::MpfErrGeometry, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) => MpfStatus::MpfErrConfig,
            TrainError::Io { .. } => MpfStatus::MpfErrIo,
            TrainError::Checkpoint { .. } => MpfStatus::MpfErrParse,
            _ => MpfStatus::MpfErrTrain,
        };
        Failure(code, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Geometry(g) => g.into(),
            PipelineError::Train(t) => t.into(),
            PipelineError::Io(i) => i.into(),
            PipelineError::Write { .. } => Failure(MpfStatus::MpfErrIo, e.to_string()),
            PipelineError::Metric(_) => Failure(MpfStatus::MpfErrGeometry, e.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpfStatus::MpfOk,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal error".into());
            MpfStatus::MpfErrInternal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MpfStatus::MpfErrNull, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(MpfStatus::MpfErrArgument, "path is not valid UTF-8".into()))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn points_arg<'a>(xyz: *const f64, n: usize) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if xyz.is_null() {
        return Err(null("coordinate array"));
    }
    let len = n.checked_mul(3).ok_or_else(|| Failure(MpfStatus::MpfErrArgument, "point count overflows".into()))?;
    Ok(std::slice::from_raw_parts(xyz, len))
}

fn mesh_format(path: &Path) -> Result<MeshFormat, Failure> {
    MeshFormat::from_path(path)
        .ok_or_else(|| Failure(MpfStatus::MpfErrArgument, format!("{}: expected .ply or .obj", path.display())))
}

/// Message for the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mpf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an `.xyz`/`.txt` or `.ply` point file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpf_cloud_load(path: *const c_char, out: *mut *mut MpfCloud) -> MpfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let format = PointFormat::from_path(&path)
            .ok_or_else(|| Failure(MpfStatus::MpfErrArgument, format!("{}: expected .xyz or .ply", path.display())))?;
        let cloud = io::load_points(&path, format)?;
        *out = Box::into_raw(Box::new(MpfCloud { cloud }));
        Ok(())
    })
}

/// Builds a cloud from `n` interleaved `x y z` triples. `normals` may be
/// null; otherwise it holds `n` interleaved normal triples.
///
/// # Safety
/// `xyz` (and `normals` when non-null) must point to `3 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpf_cloud_from_points(
    xyz: *const f64,
    normals: *const f64,
    n: usize,
    out: *mut *mut MpfCloud,
) -> MpfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let triples = |s: &[f64]| s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let points = triples(points_arg(xyz, n)?);
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite { index: i }.into());
        }
        let cloud = if normals.is_null() {
            PointCloud::new(points)
        } else {
            PointCloud::with_normals(points, triples(points_arg(normals, n)?))?
        };
        *out = Box::into_raw(Box::new(MpfCloud { cloud }));
        Ok(())
    })
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpf_cloud_len(cloud: *const MpfCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.cloud.len())
}

/// Writes the scale and translation that map the cloud into the training
/// cube: `normalized = scale * p + translation`.
///
/// # Safety
/// `cloud` must be a live handle; `scale` and `translation` (3 doubles) must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn mpf_cloud_normalization(
    cloud: *const MpfCloud,
    scale: *mut f64,
    translation: *mut f64,
) -> MpfStatus {
    guard(|| {
        let c = ref_arg(cloud, "cloud")?;
        if scale.is_null() || translation.is_null() {
            return Err(null("output"));
        }
        let (_, t) = geometry::normalize(&c.cloud)?;
        *scale = t.scale;
        ptr::copy_nonoverlapping(t.translation.as_ptr(), translation, 3);
        Ok(())
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpf_cloud_free(cloud: *mut MpfCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Trains a field on the cloud and extracts its zero level set. `config_json`
/// may be null for the defaults; otherwise it uses the same schema as the
/// `--config` file of the command-line tool.
///
/// # Safety
/// `cloud` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mpf_reconstruct(
    cloud: *const MpfCloud,
    config_json: *const c_char,
    out: *mut *mut MpfModel,
) -> MpfStatus {
    guard(|| {
        let c = ref_arg(cloud, "cloud")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure(MpfStatus::MpfErrArgument, "configuration is not valid UTF-8".into()))?;
            RunConfig::from_json(text).map_err(|e| {
                let code = match e {
                    mpf_core::config::ConfigError::Parse(_) => MpfStatus::MpfErrParse,
                    _ => MpfStatus::MpfErrConfig,
                };
                Failure(code, e.to_string())
            })?
        };
        let r = pipeline::reconstruct(&c.cloud, &cfg, None, &mut std::io::sink())?;
        *out = Box::into_raw(Box::new(MpfModel { params: r.params, transform: r.transform, mesh: Some(r.mesh) }));
        Ok(())
    })
}

/// Loads parameters from a checkpoint. The model works in the normalized
/// cube (identity normalization) and carries no mesh until
/// [`mpf_model_extract`] is called.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_load(path: *const c_char, out: *mut *mut MpfModel) -> MpfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = trainer::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MpfModel { params: ck.params, transform: Transform::identity(), mesh: None }));
        Ok(())
    })
}

/// Saves the model parameters as a checkpoint without optimizer state.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_save(model: *const MpfModel, path: *const c_char) -> MpfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ck = Checkpoint { params: m.params.clone(), adam: None, rng: None, iteration: 0 };
        trainer::save_checkpoint(&ck, &path_arg(path)?)?;
        Ok(())
    })
}

/// Evaluates `r`, `theta` and `phi` at `n` points given in the model's
/// input coordinates. Any of the output arrays (length `n`) may be null.
///
/// # Safety
/// `xyz` must hold `3 * n` doubles; non-null outputs must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_evaluate(
    model: *const MpfModel,
    xyz: *const f64,
    n: usize,
    r: *mut f64,
    theta: *mut f64,
    phi: *mut f64,
) -> MpfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let xs: Vec<_> = points_arg(xyz, n)?.chunks_exact(3).map(|c| m.transform.apply([c[0], c[1], c[2]])).collect();
        let values = field::evaluate_values(&m.params, &xs);
        for (i, v) in values.iter().enumerate() {
            for (dst, x) in [(r, v.0), (theta, v.1), (phi, v.2)] {
                if !dst.is_null() {
                    *dst.add(i) = x;
                }
            }
        }
        Ok(())
    })
}

/// Re-extracts the zero level set of `phi` on a `resolution^3` grid,
/// replacing any mesh the model holds.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_extract(model: *mut MpfModel, resolution: usize) -> MpfStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if resolution < 2 {
            return Err(Failure(MpfStatus::MpfErrArgument, format!("resolution must be at least 2, got {resolution}")));
        }
        let grid = extract::evaluate_grid(&m.params, [resolution; 3], FieldKind::Phi);
        m.mesh = Some(geometry::denormalize_mesh(&extract::marching_cubes(&grid, 0.0), &m.transform));
        Ok(())
    })
}

fn mesh_of(m: &MpfModel) -> Result<&TriangleMesh, Failure> {
    m.mesh.as_ref().ok_or_else(|| Failure(MpfStatus::MpfErrArgument, "model has no mesh; call mpf_model_extract".into()))
}

/// Vertex and triangle counts of the current mesh.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_mesh_size(
    model: *const MpfModel,
    vertices: *mut usize,
    triangles: *mut usize,
) -> MpfStatus {
    guard(|| {
        let mesh = mesh_of(ref_arg(model, "model")?)?;
        if vertices.is_null() || triangles.is_null() {
            return Err(null("output"));
        }
        *vertices = mesh.vertices.len();
        *triangles = mesh.triangles.len();
        Ok(())
    })
}

/// Copies the mesh into caller buffers sized from [`mpf_model_mesh_size`]:
/// `3 * vertices` doubles and `3 * triangles` indices.
///
/// # Safety
/// The buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_mesh_copy(model: *const MpfModel, vertices: *mut f64, indices: *mut u32) -> MpfStatus {
    guard(|| {
        let mesh = mesh_of(ref_arg(model, "model")?)?;
        if vertices.is_null() || indices.is_null() {
            return Err(null("output"));
        }
        ptr::copy_nonoverlapping(mesh.vertices.as_ptr().cast::<f64>(), vertices, 3 * mesh.vertices.len());
        ptr::copy_nonoverlapping(mesh.triangles.as_ptr().cast::<u32>(), indices, 3 * mesh.triangles.len());
        Ok(())
    })
}

/// Writes the mesh as `.ply` or `.obj`, chosen by extension.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_write_mesh(model: *const MpfModel, path: *const c_char) -> MpfStatus {
    guard(|| {
        let mesh = mesh_of(ref_arg(model, "model")?)?;
        let path = path_arg(path)?;
        io::write_mesh(&path, mesh_format(&path)?, mesh)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpf_model_free(model: *mut MpfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
