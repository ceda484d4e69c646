//! End-to-end reconstruction: normalize, train, extract, denormalize, and
//! the run-directory artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::RunConfig;
use crate::extract::{self, metrics, FieldKind};
use crate::field::FieldParams;
use crate::geometry::{self, GeometryError, PointCloud, Transform, TriangleMesh};
use crate::io::{self, IoError};
use crate::losses::{LossBreakdown, Term};
use crate::trainer::{save_checkpoint, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";

pub struct Reconstruction {
    pub params: FieldParams,
    pub transform: Transform,
    /// Mesh in the coordinates of the input cloud.
    pub mesh: TriangleMesh,
    pub log: Vec<LossBreakdown>,
    pub warnings: Vec<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| PipelineError::Write { path: path.to_path_buf(), source })
}

pub fn snapshot_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("snapshots").join(format!("iter_{iteration:05}.bin"))
}

pub fn mesh_path(dir: &Path, cfg: &RunConfig) -> PathBuf {
    dir.join(format!("mesh.{}", cfg.mesh_format.extension()))
}

pub fn loss_csv(log: &[LossBreakdown]) -> String {
    let mut s = LossBreakdown::csv_header();
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

/// Runs the whole pipeline on a raw cloud. With `out_dir`, writes the echoed
/// configuration, periodic checkpoints and snapshots, the final checkpoint,
/// the loss log, the normalization and the mesh. Progress lines go to
/// `progress`.
pub fn reconstruct(
    raw: &PointCloud,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<Reconstruction, PipelineError> {
    let (cloud, transform) = geometry::normalize(raw)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("snapshots"))
            .map_err(|source| PipelineError::Write { path: dir.to_path_buf(), source })?;
        write_file(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
        let norm = serde_json::json!({ "scale": transform.scale, "translation": transform.translation });
        write_file(&dir.join(NORMALIZATION_FILE), format!("{norm:#}\n").as_bytes())?;
    }

    let mut trainer = Trainer::new(&cloud, &cfg.train)?;
    for w in &trainer.warnings {
        let _ = writeln!(progress, "warning: {w}");
    }
    let mut logged = 0;
    trainer.run(|t| {
        while logged < t.log.len() {
            let l = &t.log[logged];
            let _ = writeln!(
                progress,
                "iter {:>6} loss {:.6e} zero {:.3e} align {:.3e}",
                l.iteration,
                l.total,
                l.raw(Term::Zero),
                l.weighted(Term::Align)
            );
            logged += 1;
        }
        let Some(dir) = out_dir else { return Ok(()) };
        let it = t.iteration;
        if t.cfg.checkpoint_every > 0 && it % t.cfg.checkpoint_every == 0 {
            save_checkpoint(&t.checkpoint(), &dir.join(CHECKPOINT_FILE))?;
        }
        if t.cfg.snapshot_at.contains(&it) {
            save_checkpoint(&t.checkpoint(), &snapshot_path(dir, it))?;
        }
        Ok(())
    })?;

    let res = cfg.resolution;
    let grid = extract::evaluate_grid(&trainer.params, [res; 3], FieldKind::Phi);
    let mesh = geometry::denormalize_mesh(&extract::marching_cubes(&grid, 0.0), &transform);

    if let Some(dir) = out_dir {
        save_checkpoint(&trainer.checkpoint(), &dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(LOSS_FILE), loss_csv(&trainer.log).as_bytes())?;
        io::write_mesh(&mesh_path(dir, cfg), cfg.mesh_format.format(), &mesh)?;
    }
    Ok(Reconstruction { params: trainer.params, transform, mesh, log: trainer.log, warnings: trainer.warnings })
}
