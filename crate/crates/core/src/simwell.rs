//! Damped, forced particle in the double-well potential `U(x) = (1 − x²)²`,
//! and the random-control trajectory datasets generated from it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, uniform};

/// Length of one recorded timestep.
pub const DT: f64 = 0.1;
/// Explicit substeps per recorded timestep.
pub const SUBSTEPS: usize = 10;
/// Velocity damping per recorded timestep (applied as `DAMPING^(1/10)` per substep).
pub const DAMPING: f64 = 0.99;
/// Positions beyond this magnitude abort generation.
pub const DIVERGENCE_LIMIT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellState {
    pub position: f64,
    pub velocity: f64,
}

impl WellState {
    pub fn new(position: f64, velocity: f64) -> Self {
        Self { position, velocity }
    }

    /// `ẋ²/2 + (1 − x²)²`
    pub fn energy(&self) -> f64 {
        let u = 1.0 - self.position * self.position;
        0.5 * self.velocity * self.velocity + u * u
    }
}

/// `−U′(x) = 4x(1 − x²)`
#[inline]
pub fn well_force(x: f64) -> f64 {
    4.0 * x * (1.0 - x * x)
}

/// Advances one recorded timestep with control `c` held constant.
///
/// Each of the ten substeps updates velocity first (including damping), then
/// position with the new velocity.
pub fn well_step(s: WellState, c: f64) -> Result<WellState> {
    let h = DT / SUBSTEPS as f64;
    let damp = DAMPING.powf(1.0 / SUBSTEPS as f64);
    let (mut x, mut v) = (s.position, s.velocity);
    for _ in 0..SUBSTEPS {
        v = (v + h * (well_force(x) + c)) * damp;
        x += h * v;
    }
    if !x.is_finite() || !v.is_finite() || x.abs() >= DIVERGENCE_LIMIT {
        return Err(Error::NonFinite(format!(
            "double-well state diverged to x={x}, v={v} from {s:?} with control {c}"
        )));
    }
    Ok(WellState { position: x, velocity: v })
}

/// Settings for [`gen_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellGenConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub control_range: [f64; 2],
    /// Fixed start state; drawn as `x₀ ~ U(−1.5, 1.5)`, `ẋ₀ = 0` when absent.
    pub init: Option<WellState>,
}

impl Default for WellGenConfig {
    fn default() -> Self {
        Self { n_steps: 100_000, seed: 42, control_range: [-5.0, 5.0], init: None }
    }
}

/// Simulates `n_steps` timesteps with i.i.d. uniform controls.
///
/// Record `t` holds the state at time `t` and the control applied over `[t, t+1)`.
pub fn gen_dataset(cfg: &WellGenConfig) -> Result<TrajectoryDataset> {
    if cfg.n_steps == 0 {
        return Err(Error::Config("dataset needs at least one step".into()));
    }
    let [lo, hi] = cfg.control_range;
    if !(lo <= hi) {
        return Err(Error::Config(format!("control range [{lo}, {hi}] is empty")));
    }
    let mut rng = seeded(cfg.seed);
    let mut state = match cfg.init {
        Some(s) => s,
        None => WellState::new(uniform(&mut rng, -1.5, 1.5), 0.0),
    };
    let mut obs = Vec::with_capacity(cfg.n_steps * 2);
    let mut controls = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        // The applied control is the stored 32-bit value.
        let c = uniform(&mut rng, lo, hi) as f32;
        obs.push(state.position as f32);
        obs.push(state.velocity as f32);
        controls.push(c);
        state = well_step(state, c as f64)?;
    }
    TrajectoryDataset::new(2, 1, DT, obs, controls)
}

const DATASET_MAGIC: &[u8; 8] = b"KOOPDS1\0";
const DATASET_HEADER: usize = 8 + 4 + 4 + 8 + 8;

/// Time series of `(observation, control)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    obs_dim: usize,
    ctrl_dim: usize,
    dt: f64,
    obs: Vec<f32>,
    controls: Vec<f32>,
}

impl TrajectoryDataset {
    pub fn new(obs_dim: usize, ctrl_dim: usize, dt: f64, obs: Vec<f32>, controls: Vec<f32>) -> Result<Self> {
        if obs_dim == 0 || ctrl_dim == 0 {
            return Err(Error::Config("dataset dims must be positive".into()));
        }
        let n = obs.len() / obs_dim;
        if n == 0 || obs.len() != n * obs_dim || controls.len() != n * ctrl_dim {
            return Err(Error::Config(format!(
                "dataset arrays ({} obs values, {} control values) do not form whole records of {obs_dim}+{ctrl_dim}",
                obs.len(),
                controls.len()
            )));
        }
        Ok(Self { obs_dim, ctrl_dim, dt, obs, controls })
    }

    pub fn len(&self) -> usize {
        self.obs.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn ctrl_dim(&self) -> usize {
        self.ctrl_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn obs(&self, t: usize) -> &[f32] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn control(&self, t: usize) -> &[f32] {
        &self.controls[t * self.ctrl_dim..(t + 1) * self.ctrl_dim]
    }

    pub fn all_obs(&self) -> &[f32] {
        &self.obs
    }

    pub fn all_controls(&self) -> &[f32] {
        &self.controls
    }

    /// Splits into `(train, validation)` index ranges, holding out the final
    /// `fraction` of records.
    pub fn split(&self, fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        let cut = n - held.min(n);
        (0..cut, cut..n)
    }

    /// Exact byte length of the file for this dataset.
    pub fn encoded_len(&self) -> usize {
        DATASET_HEADER + 4 * (self.obs.len() + self.controls.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.obs_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ctrl_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        for t in 0..self.len() {
            for v in self.obs(t).iter().chain(self.control(t)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_HEADER {
            return Err(Error::Format(format!(
                "dataset header needs {DATASET_HEADER} bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {:?}", &bytes[..8])));
        }
        let obs_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let ctrl_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let dt = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        if obs_dim == 0 || ctrl_dim == 0 || n == 0 {
            return Err(Error::Format(format!(
                "dataset header has D_obs={obs_dim}, D_ctrl={ctrl_dim}, N={n}; all must be positive"
            )));
        }
        let expected = (n as u128) * ((obs_dim + ctrl_dim) as u128) * 4 + DATASET_HEADER as u128;
        if expected != bytes.len() as u128 {
            return Err(Error::Format(format!(
                "dataset length mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let n = n as usize;
        let mut obs = Vec::with_capacity(n * obs_dim);
        let mut controls = Vec::with_capacity(n * ctrl_dim);
        let mut values = bytes[DATASET_HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for _ in 0..n {
            obs.extend(values.by_ref().take(obs_dim));
            controls.extend(values.by_ref().take(ctrl_dim));
        }
        Self::new(obs_dim, ctrl_dim, dt, obs, controls)
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &TrajectoryDataset) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TrajectoryDataset::from_bytes(&bytes)
}
