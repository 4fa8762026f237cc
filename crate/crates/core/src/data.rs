//! Simulated datasets and their JSON Lines serialization.
//!
//! Line 1 holds the metadata object, every following line one sample as a
//! flat array `[q…, q̇…, τ…, q̈…]`. Floats are written in shortest
//! round-trip form, so save → load → save is byte-identical.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::sim::{rk4_step, DT};
use crate::systems::{PlantParams, SwingUp, System};

pub const FORMAT: &str = "diffnea-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported dataset version {0} (expected {VERSION})")]
    Version(u32),
    #[error("dataset is empty")]
    Empty,
    #[error("plant simulation failed in episode {episode} at step {step}")]
    Simulation { episode: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub tau: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl Sample {
    fn flat(&self) -> Vec<f64> {
        [&self.q, &self.qd, &self.tau, &self.qdd].into_iter().flatten().copied().collect()
    }

    fn from_flat(x: &[f64], dof: usize) -> Self {
        let part = |k: usize| x[k * dof..(k + 1) * dof].to_vec();
        Self { q: part(0), qd: part(1), tau: part(2), qdd: part(3) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Uniform,
    Trajectory,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Uniform => "uniform",
            Regime::Trajectory => "trajectory",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Regime::Uniform),
            "trajectory" => Some(Regime::Trajectory),
            _ => None,
        }
    }
}

/// Per-joint sampling boxes for the uniform regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranges {
    pub q: Vec<[f64; 2]>,
    pub qd: Vec<[f64; 2]>,
    pub tau: Vec<[f64; 2]>,
}

impl Ranges {
    /// Full angle range, ±20 rad/s, torque on the actuated joint only.
    pub fn default_for(system: System) -> Self {
        match system {
            System::Cartpole => Self {
                q: vec![[-1.0, 1.0], [-PI, PI]],
                qd: vec![[-20.0, 20.0], [-20.0, 20.0]],
                tau: vec![[-5.0, 5.0], [0.0, 0.0]],
            },
            System::Furuta => Self {
                q: vec![[-PI, PI], [-PI, PI]],
                qd: vec![[-20.0, 20.0], [-20.0, 20.0]],
                tau: vec![[-0.1, 0.1], [0.0, 0.0]],
            },
        }
    }

    pub fn contains(&self, s: &Sample) -> bool {
        let inside = |r: &[[f64; 2]], x: &[f64]| r.iter().zip(x).all(|(b, v)| *v >= b[0] && *v <= b[1]);
        inside(&self.q, &s.q) && inside(&self.qd, &s.qd) && inside(&self.tau, &s.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format: String,
    pub version: u32,
    pub system: System,
    pub regime: Regime,
    pub seed: u64,
    pub dof: usize,
    pub n_samples: usize,
    /// Sampling period of trajectory data.
    pub dt: Option<f64>,
    pub state_noise: f64,
    pub action_noise: f64,
    /// Whether the labels include the plant's viscous friction.
    pub friction: bool,
    pub plant_hash: String,
    pub plant: PlantParams,
    pub ranges: Option<Ranges>,
    /// Samples per episode, in order.
    pub episodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: Metadata,
    pub samples: Vec<Sample>,
}

/// SHA-256 of the canonical JSON of the plant constants.
pub fn plant_hash(p: &PlantParams) -> String {
    let json = serde_json::to_vec(p).expect("plant params serialize");
    hex::encode(Sha256::digest(&json))
}

fn arr(x: [f64; 2]) -> Vec<f64> {
    x.to_vec()
}

fn sample_range<R: Rng>(rng: &mut R, b: [f64; 2]) -> f64 {
    if b[1] > b[0] {
        rng.random_range(b[0]..=b[1])
    } else {
        b[0]
    }
}

/// i.i.d. states and torques with frictionless analytic accelerations.
pub fn generate_uniform(plant: &PlantParams, n: usize, ranges: &Ranges, seed: u64) -> Dataset {
    let ideal = plant.frictionless();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let q = [sample_range(&mut rng, ranges.q[0]), sample_range(&mut rng, ranges.q[1])];
        let qd = [sample_range(&mut rng, ranges.qd[0]), sample_range(&mut rng, ranges.qd[1])];
        let tau = [sample_range(&mut rng, ranges.tau[0]), sample_range(&mut rng, ranges.tau[1])];
        if let Ok(qdd) = ideal.accel(q, qd, tau) {
            samples.push(Sample { q: arr(q), qd: arr(qd), tau: arr(tau), qdd: arr(qdd) });
        }
    }
    Dataset {
        meta: Metadata {
            format: FORMAT.into(),
            version: VERSION,
            system: plant.system(),
            regime: Regime::Uniform,
            seed,
            dof: 2,
            n_samples: n,
            dt: None,
            state_noise: 0.0,
            action_noise: 0.0,
            friction: false,
            plant_hash: plant_hash(plant),
            plant: *plant,
            ranges: Some(ranges.clone()),
            episodes: vec![],
        },
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub episodes: usize,
    /// Seconds of recorded data per episode.
    pub duration: f64,
    pub state_noise: f64,
    pub action_noise: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { episodes: 10, duration: 30.0, state_noise: 1e-3, action_noise: 1e-2 }
    }
}

fn episode_seed(master: u64, episode: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((episode as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn simulate_episode(plant: &PlantParams, cfg: &TrajectoryConfig, seed: u64, episode: usize) -> Result<Vec<Sample>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode));
    let state_noise = Normal::new(0.0, cfg.state_noise).expect("non-negative sigma");
    let action_noise = Normal::new(0.0, cfg.action_noise).expect("non-negative sigma");
    let kept = (cfg.duration / DT).round() as usize;
    let steps = kept + 2;

    let mut controller = SwingUp::new(*plant, plant.swingup_gains());
    let mut q = vec![rng.random_range(-0.05..0.05), rng.random_range(-0.2..0.2)];
    let mut qd = vec![0.0, rng.random_range(-0.2..0.2)];
    let mut rec_q = Vec::with_capacity(steps);
    let mut rec_qd = Vec::with_capacity(steps);
    let mut rec_tau = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = controller.control(k as f64 * DT, [q[0], q[1]], [qd[0], qd[1]]) + action_noise.sample(&mut rng);
        let tau = vec![u, 0.0];
        rec_q.push(q.iter().map(|x| x + state_noise.sample(&mut rng)).collect::<Vec<_>>());
        rec_qd.push(qd.iter().map(|x| x + state_noise.sample(&mut rng)).collect::<Vec<_>>());
        rec_tau.push(tau.clone());
        let (qn, vn) = rk4_step(plant, &q, &qd, &tau, DT).ok_or(DataError::Simulation { episode, step: k })?;
        (q, qd) = (qn, vn);
    }
    Ok((1..=kept)
        .map(|k| Sample {
            q: rec_q[k].clone(),
            qd: rec_qd[k].clone(),
            tau: rec_tau[k].clone(),
            qdd: (0..2).map(|i| (rec_qd[k + 1][i] - rec_qd[k - 1][i]) / (2.0 * DT)).collect(),
        })
        .collect())
}

/// Swing-up episodes of the plant with viscous friction, with noisy
/// observations and torques; labels by central differences of the recorded
/// velocities, episode endpoints dropped.
pub fn generate_trajectory(plant: &PlantParams, cfg: &TrajectoryConfig, seed: u64, exec: Exec) -> Result<Dataset, DataError> {
    let episodes = exec.map_range(cfg.episodes, |e| simulate_episode(plant, cfg, seed, e));
    let mut samples = Vec::new();
    let mut lengths = Vec::with_capacity(cfg.episodes);
    for e in episodes {
        let e = e?;
        lengths.push(e.len());
        samples.extend(e);
    }
    Ok(Dataset {
        meta: Metadata {
            format: FORMAT.into(),
            version: VERSION,
            system: plant.system(),
            regime: Regime::Trajectory,
            seed,
            dof: 2,
            n_samples: samples.len(),
            dt: Some(DT),
            state_noise: cfg.state_noise,
            action_noise: cfg.action_noise,
            friction: true,
            plant_hash: plant_hash(plant),
            plant: *plant,
            ranges: None,
            episodes: lengths,
        },
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.meta.dof
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        serde_json::to_writer(&mut w, &self.meta).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, &s.flat()).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("in-memory write");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(DataError::Parse { line: 1, reason: "missing metadata".into() })??;
        let meta: Metadata = serde_json::from_str(&first).map_err(|e| DataError::Parse { line: 1, reason: e.to_string() })?;
        if meta.format != FORMAT {
            return Err(DataError::Parse { line: 1, reason: format!("unknown format `{}`", meta.format) });
        }
        if meta.version != VERSION {
            return Err(DataError::Version(meta.version));
        }
        let width = 4 * meta.dof;
        let mut samples = Vec::with_capacity(meta.n_samples);
        for (k, line) in lines.enumerate() {
            let line_no = k + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| DataError::Parse { line: line_no, reason };
            let values: Vec<Option<f64>> = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if values.len() != width {
                return Err(bad(format!("expected {width} values, got {}", values.len())));
            }
            let values: Vec<f64> = values
                .into_iter()
                .map(|v| v.filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("non-finite value".into()))?;
            samples.push(Sample::from_flat(&values, meta.dof));
        }
        if samples.len() != meta.n_samples {
            return Err(DataError::Parse {
                line: samples.len() + 2,
                reason: format!("metadata declares {} samples, found {}", meta.n_samples, samples.len()),
            });
        }
        Ok(Self { meta, samples })
    }

    /// Plain or gzip-compressed JSON Lines.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 2];
        let n = f.read(&mut magic)?;
        drop(f);
        let f = File::open(path)?;
        if n == 2 && magic == [0x1f, 0x8b] {
            Self::read(BufReader::new(flate2::read::GzDecoder::new(f)))
        } else {
            Self::read(BufReader::new(f))
        }
    }

    /// Deterministic shuffled split into `(train, validation)`.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * validation_fraction).round() as usize;
        let n_val = n_val.min(self.len());
        let val = idx[..n_val].iter().map(|&i| self.samples[i].clone()).collect();
        let train = idx[n_val..].iter().map(|&i| self.samples[i].clone()).collect();
        (train, val)
    }

    /// First state of every episode and the torques recorded along it.
    pub fn episode_slices(&self) -> Vec<&[Sample]> {
        let mut out = Vec::new();
        let mut start = 0;
        for &len in &self.meta.episodes {
            out.push(&self.samples[start..start + len]);
            start += len;
        }
        out
    }
}
