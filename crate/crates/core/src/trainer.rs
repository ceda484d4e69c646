//! Adam optimization of the field, run configuration and checkpoints.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{self, init_params, Architecture, FieldParams, Gradients, InitOptions, ObjectiveError};
use crate::geometry::PointCloud;
use crate::losses::{LossBreakdown, LossWeights};
use crate::math::Vec3;
use crate::spatial::{self, BatchSizes, NearestIndex, SampleBatch, SpatialError};

pub const BETA_FLOOR: f64 = 1e-3;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("iteration {iteration}: {source}")]
    Objective { iteration: usize, source: ObjectiveError },
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("shape mismatch: expected {expected} entries, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub surface: usize,
    pub near: usize,
    pub far: usize,
    pub ambient: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { surface: 512, near: 512, far: 256, ambient: 128 }
    }
}

impl From<BatchConfig> for BatchSizes {
    fn from(b: BatchConfig) -> Self {
        BatchSizes { surface: b.surface, near: b.near, far: b.far, ambient: b.ambient }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_net: f64,
    pub lr_beta: f64,
    pub batch: BatchConfig,
    /// Near-band half-width in normalized units.
    pub delta: f64,
    /// Jitter of near-band proposals; `None` means `delta / 2`.
    pub sigma_jitter: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub init: InitOptions,
    /// Neighbours used for PCA normals when the input has none.
    pub pca_k: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Iterations after which a snapshot of the parameters is kept.
    pub snapshot_at: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr_net: 1e-4,
            lr_beta: 1e-4,
            batch: BatchConfig::default(),
            delta: 0.05,
            sigma_jitter: None,
            seed: 0,
            weights: LossWeights::default(),
            init: InitOptions::default(),
            pca_k: 16,
            log_every: 100,
            checkpoint_every: 1000,
            snapshot_at: vec![1000, 4000, 10_000],
        }
    }
}

impl TrainConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma_jitter.unwrap_or(0.5 * self.delta)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let b = self.batch;
        if b.surface == 0 || b.near == 0 || b.far == 0 || b.ambient == 0 {
            return Err(TrainError::Config("every batch count must be positive".into()));
        }
        if !(self.lr_net > 0.0 && self.lr_beta > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(self.delta > 0.0 && self.sigma() > 0.0) {
            return Err(TrainError::Config("delta and sigma_jitter must be positive".into()));
        }
        if !(self.init.beta_init > 0.0) || self.init.hidden == 0 {
            return Err(TrainError::Config("beta_init must be positive and hidden non-zero".into()));
        }
        if self.log_every == 0 {
            return Err(TrainError::Config("log_every must be positive".into()));
        }
        let w = &self.weights;
        let all = [w.zero, w.align, w.eik_r, w.eik_phi, w.lap, w.phase, w.far, w.normal];
        if all.iter().any(|v| !(*v >= 0.0)) || !(w.alpha_far > 0.0 && w.alpha_align > 0.0 && w.eps > 0.0) {
            return Err(TrainError::Config("loss weights must be non-negative and alphas/eps positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub m_beta: f64,
    pub v_beta: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], m_beta: 0.0, v_beta: 0.0 }
    }
}

/// One bias-corrected Adam update; β uses its own rate and is then clamped
/// to [`BETA_FLOOR`].
pub fn adam_step(
    params: &mut FieldParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr_net: f64,
    lr_beta: f64,
) -> Result<(), TrainError> {
    let n = params.net.len();
    for got in [grads.net.len(), state.m.len(), state.v.len()] {
        if got != n {
            return Err(TrainError::ShapeMismatch { expected: n, got });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_B1.powi(t);
    let c2 = 1.0 - ADAM_B2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    };
    for i in 0..n {
        update(&mut params.net[i], grads.net[i], &mut state.m[i], &mut state.v[i], lr_net);
    }
    update(&mut params.beta, grads.beta, &mut state.m_beta, &mut state.v_beta, lr_beta);
    params.beta = params.beta.max(BETA_FLOOR);
    Ok(())
}

/// A resumable optimization run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: FieldParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Number of completed steps.
    pub iteration: usize,
    pub log: Vec<LossBreakdown>,
    /// Non-fatal notes, e.g. the normal term being disabled.
    pub warnings: Vec<String>,
    /// Weights actually used (normal weight zeroed when no normals exist).
    pub weights: LossWeights,
    index: NearestIndex,
    normals: Option<Vec<Vec3>>,
}

impl Trainer {
    /// Fresh run on a normalized cloud.
    pub fn new(cloud: &PointCloud, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let params = init_params(cfg.seed, &cfg.init);
        let adam = AdamState::new(params.net.len());
        // Stream 1 keeps the sample sequence independent of initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::resume(cloud, cfg, params, adam, rng, 0)
    }

    /// Continues a run from saved state.
    pub fn resume(
        cloud: &PointCloud,
        cfg: &TrainConfig,
        params: FieldParams,
        adam: AdamState,
        rng: ChaCha8Rng,
        iteration: usize,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if adam.m.len() != params.net.len() {
            return Err(TrainError::ShapeMismatch { expected: params.net.len(), got: adam.m.len() });
        }
        let index = NearestIndex::from_cloud(cloud)?;
        let mut warnings = Vec::new();
        let mut weights = cfg.weights;
        let normals = if weights.normal > 0.0 {
            match &cloud.normals {
                Some(n) => Some(n.clone()),
                None => match spatial::estimate_normals(&index, cfg.pca_k) {
                    Ok(n) => Some(n),
                    Err(e) => {
                        warnings.push(format!("normal term disabled: {e}"));
                        weights.normal = 0.0;
                        None
                    }
                },
            }
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), params, adam, rng, iteration, log: Vec::new(), warnings, weights, index, normals })
    }

    pub fn index(&self) -> &NearestIndex {
        &self.index
    }

    pub fn draw_batch(&mut self) -> Result<SampleBatch, TrainError> {
        Ok(SampleBatch::draw(
            &self.index,
            self.normals.as_deref(),
            self.cfg.batch.into(),
            self.cfg.delta,
            self.cfg.sigma(),
            &mut self.rng,
        )?)
    }

    /// One sample–evaluate–update step. Parameters are left untouched when
    /// the objective fails.
    pub fn step(&mut self) -> Result<LossBreakdown, TrainError> {
        let it = self.iteration;
        let batch = self.draw_batch()?;
        let (loss, grads) = field::loss_param_gradients(&self.params, &batch, &self.weights, it)
            .map_err(|source| TrainError::Objective { iteration: it, source })?;
        adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.lr_net, self.cfg.lr_beta)?;
        self.iteration += 1;
        if it % self.cfg.log_every == 0 || self.iteration == self.cfg.iterations {
            self.log.push(loss.clone());
        }
        Ok(loss)
    }

    /// Steps until `cfg.iterations`, calling `hook` after every step.
    pub fn run(&mut self, mut hook: impl FnMut(&Trainer) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
            hook(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            rng: Some(RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            }),
            iteration: self.iteration as u64,
        }
    }
}

/// Trains from scratch and returns the final parameters and the log.
pub fn train(cloud: &PointCloud, cfg: &TrainConfig) -> Result<(FieldParams, Vec<LossBreakdown>), TrainError> {
    let mut t = Trainer::new(cloud, cfg)?;
    t.run(|_| Ok(()))?;
    Ok((t.params, t.log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
    pub iteration: u64,
}

const MAGIC: &[u8; 8] = b"MPFCKPT\0";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, expected: usize) -> Result<Vec<f64>, String> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(format!("dimension mismatch: expected {expected} values, found {n}"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        let a = self.params.arch;
        w.u64(a.hidden as u64);
        w.f64(a.omega0);
        w.f64(a.softplus_slope);
        w.f64s(&self.params.net);
        w.f64(self.params.beta);
        w.u64(self.iteration);
        match &self.adam {
            Some(s) => {
                w.0.push(1);
                w.u64(s.step);
                w.f64s(&s.m);
                w.f64s(&s.v);
                w.f64(s.m_beta);
                w.f64(s.v_beta);
            }
            None => w.0.push(0),
        }
        match &self.rng {
            Some(r) => {
                w.0.push(1);
                w.0.extend_from_slice(&r.seed);
                w.u64(r.stream);
                w.0.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.0.push(0),
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hidden = r.u64()? as usize;
        if hidden == 0 || hidden > 1 << 16 {
            return Err(format!("implausible hidden size {hidden}"));
        }
        let arch = Architecture { hidden, omega0: r.f64()?, softplus_slope: r.f64()? };
        let len = field::Layout::new(hidden).len;
        let net = r.f64s(len)?;
        let beta = r.f64()?;
        let iteration = r.u64()?;
        let adam = match r.u8()? {
            0 => None,
            1 => Some(AdamState { step: r.u64()?, m: r.f64s(len)?, v: r.f64s(len)?, m_beta: r.f64()?, v_beta: r.f64()? }),
            t => return Err(format!("bad optimizer tag {t}")),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
            t => return Err(format!("bad rng tag {t}")),
        };
        if r.at != buf.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { params: FieldParams { arch, net, beta }, adam, rng, iteration })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io { path: path.to_path_buf(), source };
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&ck.to_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&buf).map_err(|msg| TrainError::Checkpoint { path: path.to_path_buf(), msg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn small_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch: BatchConfig { surface: 32, near: 32, far: 16, ambient: 8 },
            init: InitOptions { hidden: 16, ..Default::default() },
            log_every: 2,
            ..Default::default()
        }
    }

    fn cloud() -> PointCloud {
        fixtures::sphere(300, 0.5, 4)
    }

    #[test]
    fn first_adam_step_is_closed_form() {
        let mut p = init_params(0, &InitOptions { hidden: 2, ..Default::default() });
        let before = p.clone();
        let mut g = Gradients::zeros(p.net.len());
        g.net[0] = 1.0;
        let mut s = AdamState::new(p.net.len());
        adam_step(&mut p, &g, &mut s, 1e-4, 1e-4).unwrap();
        assert_eq!(s.step, 1);
        let d = p.net[0] - before.net[0];
        assert!((d + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(&p.net[1..], &before.net[1..]);
        assert_eq!(p.beta, before.beta);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = init_params(0, &InitOptions { hidden: 2, ..Default::default() });
        let before = p.clone();
        let mut s = AdamState::new(p.net.len());
        let g = Gradients::zeros(p.net.len());
        adam_step(&mut p, &g, &mut s, 1e-4, 1e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn beta_is_clamped_and_shapes_checked() {
        let mut p = init_params(0, &InitOptions { hidden: 2, beta_init: 1e-3, ..Default::default() });
        let mut g = Gradients::zeros(p.net.len());
        g.beta = 1.0;
        let mut s = AdamState::new(p.net.len());
        adam_step(&mut p, &g, &mut s, 1e-4, 1.0).unwrap();
        assert_eq!(p.beta, BETA_FLOOR);
        let bad = Gradients::zeros(3);
        assert!(matches!(adam_step(&mut p, &bad, &mut s, 1e-4, 1e-4), Err(TrainError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let cfg = small_cfg(0);
        let (p, log) = train(&cloud(), &cfg).unwrap();
        assert_eq!(p, init_params(cfg.seed, &cfg.init));
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg(6);
        let a = train(&cloud(), &cfg).unwrap();
        let b = train(&cloud(), &cfg).unwrap();
        assert_eq!(a, b);
        // Iterations 0, 2, 4 and the final one.
        assert_eq!(a.1.len(), 4);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut t = Trainer::new(&cloud(), &small_cfg(3)).unwrap();
        t.run(|_| Ok(())).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        // Header says 8 hidden units but the arrays were sized for 16.
        let mut w = ck.to_bytes();
        w[12..20].copy_from_slice(&8u64.to_le_bytes());
        assert!(Checkpoint::from_bytes(&w).unwrap_err().contains("dimension mismatch"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_cfg(6);
        let mut full = Trainer::new(&cloud(), &cfg).unwrap();
        full.run(|_| Ok(())).unwrap();

        let mut first = Trainer::new(&cloud(), &TrainConfig { iterations: 3, ..cfg.clone() }).unwrap();
        first.run(|_| Ok(())).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut second =
            Trainer::resume(&cloud(), &cfg, ck.params, ck.adam.unwrap(), ck.rng.unwrap().restore(), ck.iteration as usize)
                .unwrap();
        second.run(|_| Ok(())).unwrap();
        assert_eq!(second.params, full.params);
        assert_eq!(second.adam, full.adam);
    }

    #[test]
    fn align_weight_is_gated_in_the_log() {
        let mut cfg = small_cfg(4);
        cfg.weights.align_start_iter = 2;
        cfg.log_every = 1;
        let (_, log) = train(&cloud(), &cfg).unwrap();
        let a = crate::losses::Term::Align.index();
        assert_eq!(log[0].weighted[a], 0.0);
        assert_eq!(log[1].weighted[a], 0.0);
        assert_eq!(log[2].weights[a], 0.7);
    }
}
