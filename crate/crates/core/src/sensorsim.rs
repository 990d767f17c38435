//! Sensor placement, distance-matrix simulation, measurement augmentation
//! and network input encoding.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{HandSkeleton, JointPositions};

/// Marker for a measurement that never arrived.
pub const MISSING: f64 = -1.0;
/// Largest admissible range between two sensors, meters.
pub const MAX_RANGE: f64 = 0.5;
/// Largest admissible sensor offset from its landmark, meters.
pub const MAX_OFFSET: f64 = 0.02;
/// Default outward (dorsal) sensor offset: the sensor package sits on the skin.
pub const DEFAULT_OFFSET: f64 = 0.004;
/// Default input scale for [`encode_input`].
pub const DEFAULT_D_MAX: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("unsupported sensor count {0} (expected 5..=8)")]
    UnsupportedCount(usize),
    #[error("unknown landmark `{0}`")]
    UnknownLandmark(String),
    #[error("sensor offset {0} m exceeds the {MAX_OFFSET} m limit")]
    OffsetTooLarge(f64),
    #[error("distance matrix must be square with {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid distance matrix entry {value} at ({i}, {j})")]
    InvalidEntry { i: usize, j: usize, value: f64 },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SensorError>;

/// One sensor: a landmark plus an offset in that landmark's segment frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub landmark: String,
    /// Landmark index in the skeleton ordering.
    pub index: usize,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub attachments: Vec<Attachment>,
}

const TIPS: [&str; 5] = ["thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip"];

impl SensorLayout {
    pub fn new(attachments: Vec<Attachment>) -> Result<Self> {
        for a in &attachments {
            let off = Vector3::from(a.offset);
            if !off.iter().all(|v| v.is_finite()) || off.norm() > MAX_OFFSET + 1e-15 {
                return Err(SensorError::OffsetTooLarge(off.norm()));
            }
        }
        Ok(Self { attachments })
    }

    /// Sensors at named landmarks with the default dorsal offset.
    pub fn at_landmarks(skeleton: &HandSkeleton, names: &[&str]) -> Result<Self> {
        let attachments = names
            .iter()
            .map(|&name| {
                let index = skeleton
                    .landmark_index(name)
                    .ok_or_else(|| SensorError::UnknownLandmark(name.to_string()))?;
                Ok(Attachment {
                    landmark: name.to_string(),
                    index,
                    offset: [0.0, DEFAULT_OFFSET, 0.0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(attachments)
    }

    pub fn len(&self) -> usize {
        self.attachments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        let n = self.len();
        n * n.saturating_sub(1) / 2
    }

    /// Perturbs every offset by isotropic Gaussian noise, keeping each
    /// offset within [`MAX_OFFSET`].
    pub fn jittered(&self, sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(SensorError::InvalidConfig(format!("sensor jitter {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let attachments = self
            .attachments
            .iter()
            .map(|a| {
                let mut off = Vector3::from(a.offset)
                    + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                let n = off.norm();
                if n > MAX_OFFSET {
                    off *= MAX_OFFSET / n;
                }
                Attachment {
                    offset: [off.x, off.y, off.z],
                    ..a.clone()
                }
            })
            .collect();
        Self::new(attachments)
    }

    /// World positions of the sensors for a pose.
    pub fn sensor_positions(&self, points: &JointPositions) -> Result<Vec<Vector3<f64>>> {
        self.attachments
            .iter()
            .map(|a| {
                if a.index >= points.len() {
                    return Err(SensorError::UnknownLandmark(a.landmark.clone()));
                }
                Ok(points.points[a.index] + points.frames[a.index] * Vector3::from(a.offset))
            })
            .collect()
    }
}

/// Standard layouts for 5 to 8 sensors.
///
/// 5: fingertips; 6: + wrist; 7: fingertips + index_root + pinky_root;
/// 8: the 7-sensor layout + wrist.
pub fn standard_layout(skeleton: &HandSkeleton, n: usize) -> Result<SensorLayout> {
    let mut names: Vec<&str> = TIPS.to_vec();
    match n {
        5 => {}
        6 => names.push("wrist"),
        7 => names.extend(["index_root", "pinky_root"]),
        8 => names.extend(["index_root", "pinky_root", "wrist"]),
        _ => return Err(SensorError::UnsupportedCount(n)),
    }
    SensorLayout::at_landmarks(skeleton, &names)
}

/// N x N matrix of pairwise ranges in meters; `-1` marks a missing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Validates the diagonal / range / sentinel invariants.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(SensorError::Shape {
                expected: n * n,
                got: data.len(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                let ok = if i == j {
                    v == 0.0
                } else {
                    v == MISSING || (v.is_finite() && (0.0..=MAX_RANGE).contains(&v))
                };
                if !ok {
                    return Err(SensorError::InvalidEntry { i, j, value: v });
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(SensorError::Shape {
                    expected: n,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == MISSING
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == MISSING).count()
    }

    pub fn off_diagonal_count(&self) -> usize {
        self.n * self.n.saturating_sub(1)
    }
}

/// Noiseless pairwise ranges between the layout's sensors.
pub fn measure(points: &JointPositions, layout: &SensorLayout) -> Result<DistanceMatrix> {
    let pos = layout.sensor_positions(points)?;
    let n = pos.len();
    let mut m = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (pos[i] - pos[j]).norm().min(MAX_RANGE);
            m.set(i, j, d);
            m.set(j, i, d);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Gaussian range noise, meters.
    pub noise_sigma: f64,
    /// Per off-diagonal entry probability of a dropout.
    pub mask_prob: f64,
    /// Per-sensor placement perturbation applied once per domain, meters.
    pub sensor_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.001,
            mask_prob: 0.01,
            sensor_jitter: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SensorError::InvalidConfig(format!("noise_sigma {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) && self.mask_prob != 1.0 {
            return Err(SensorError::InvalidConfig(format!("mask_prob {}", self.mask_prob)));
        }
        if !(self.sensor_jitter.is_finite() && self.sensor_jitter >= 0.0) {
            return Err(SensorError::InvalidConfig(format!(
                "sensor_jitter {}",
                self.sensor_jitter
            )));
        }
        Ok(())
    }
}

/// Masks and perturbs each off-diagonal entry independently.
///
/// Deterministic in `cfg.seed`; use [`augment_with`] to draw from a shared
/// generator when augmenting a whole dataset.
pub fn augment(m: &DistanceMatrix, cfg: &AugmentConfig) -> Result<DistanceMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_with(m, cfg, &mut rng)
}

pub fn augment_with<R: Rng + ?Sized>(
    m: &DistanceMatrix,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<DistanceMatrix> {
    cfg.validate()?;
    let normal = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("sigma validated");
    let mut out = m.clone();
    let n = m.n();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = m.get(i, j);
            if v == MISSING {
                continue;
            }
            // draw both variates every time so the noise stream does not
            // depend on which entries were masked
            let drop = rng.random::<f64>() < cfg.mask_prob;
            let noise = if cfg.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            let value = if drop {
                MISSING
            } else {
                (v + noise).clamp(0.0, MAX_RANGE)
            };
            out.set(i, j, value);
        }
    }
    Ok(out)
}

/// Scales valid entries by `1 / d_max`; the `-1` sentinel passes through.
pub fn encode_input(m: &DistanceMatrix, d_max: f64) -> Vec<f64> {
    m.as_slice()
        .iter()
        .map(|&v| if v == MISSING { MISSING } else { v / d_max })
        .collect()
}
