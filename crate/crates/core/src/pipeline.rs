//! Dataset generation and file formats, sim-to-real training, the
//! experiment runners and streaming inference.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    default_skeleton, forward_kinematics, monotone_cubic, normalize_pose, sample_pose_sequences, DofKind,
    HandSkeleton, JointAngles, KinematicsError, NormalizationFrame, PoseBasis, BASIS_SIZE, KEYFRAME_SPACING,
};
use crate::posenet::{
    fit_basis_from_sequences, HeadKind, Metrics, ModelConfig, ModelState, NearestNeighbor, PoseNetError,
    TrainConfig, TrainReport, Variant, WindowDataset, NUM_SERVOS,
};
use crate::sensorsim::{
    augment_with, encode_input, measure, standard_layout, AugmentConfig, DistanceMatrix, SensorError, SensorLayout,
    DEFAULT_D_MAX, MAX_RANGE, MISSING,
};
use nalgebra::{Rotation3, Vector3};

pub const DEFAULT_HUMAN_POSES: usize = 46_000;
pub const DEFAULT_FINETUNE_POSES: usize = 5_000;
pub const DEFAULT_MECH_FRAMES: usize = 30_000;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const FINETUNE_LR: f64 = 1e-4;
/// Streams with more malformed lines than this fraction are aborted.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{malformed} of {lines} stream lines malformed; aborting")]
    StreamAborted { malformed: usize, lines: usize },
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    PoseNet(#[from] PoseNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub i: usize,
    /// Sequence the frame belongs to; windows never cross sequences.
    pub seq: usize,
    /// Raw distance matrix in meters, `-1` for missing entries.
    pub d: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub servo: Option<Vec<f64>>,
}

impl FrameRecord {
    pub fn matrix(&self) -> Result<DistanceMatrix> {
        Ok(DistanceMatrix::from_rows(&self.d)?)
    }

    pub fn target(&self) -> Vec<f64> {
        match (&self.joints, &self.servo) {
            (Some(j), _) => j.iter().flatten().copied().collect(),
            (None, Some(s)) => s.clone(),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<FrameRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        self.records.first().map(|r| if r.joints.is_some() { HeadKind::PoseBasis } else { HeadKind::Servo })
    }

    pub fn n_sensors(&self) -> usize {
        self.records.first().map_or(0, |r| r.d.len())
    }

    /// Fraction of off-diagonal entries marked missing.
    pub fn masked_fraction(&self) -> f64 {
        let n = self.n_sensors();
        let total = self.len() * n * n.saturating_sub(1);
        if total == 0 {
            return 0.0;
        }
        let missing: usize = self
            .records
            .iter()
            .map(|r| r.d.iter().flatten().filter(|&&v| v == MISSING).count())
            .sum();
        missing as f64 / total as f64
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Parses and validates JSON lines: every matrix must satisfy the
    /// distance-matrix invariants and all records must share one size and
    /// one target kind.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut kind = None;
        let mut n = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |msg: String| PipelineError::Format { line: lineno + 1, msg };
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            rec.matrix().map_err(|e| fail(e.to_string()))?;
            let k = match (&rec.joints, &rec.servo) {
                (Some(_), None) => HeadKind::PoseBasis,
                (None, Some(s)) if s.len() == NUM_SERVOS => HeadKind::Servo,
                _ => return Err(fail("record needs exactly one of `joints` or `servo` (5 values)".into())),
            };
            if *kind.get_or_insert(k) != k {
                return Err(fail("mixed target kinds".into()));
            }
            if *n.get_or_insert(rec.d.len()) != rec.d.len() {
                return Err(fail("mixed matrix sizes".into()));
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    /// Index ranges of consecutive records sharing a sequence id.
    pub fn sequences(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for k in 1..=self.records.len() {
            if k == self.records.len() || self.records[k].seq != self.records[start].seq {
                if k > start {
                    out.push(start..k);
                }
                start = k;
            }
        }
        out
    }

    /// 80/10/10 split by sequence.
    pub fn split(&self, seed: u64) -> (Dataset, Dataset, Dataset) {
        let mut seqs = self.sequences();
        seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = seqs.len();
        let n_val = (n / 10).max(usize::from(n >= 3));
        let n_test = n_val;
        let n_train = n - n_val - n_test;
        let take = |rs: &[std::ops::Range<usize>]| {
            let mut rs = rs.to_vec();
            rs.sort_by_key(|r| r.start);
            Dataset {
                records: rs.into_iter().flat_map(|r| self.records[r].iter().cloned()).collect(),
            }
        };
        (
            take(&seqs[..n_train]),
            take(&seqs[n_train..n_train + n_val]),
            take(&seqs[n_train + n_val..]),
        )
    }

    /// Sliding windows of encoded matrices over every sequence.
    pub fn windows(&self, window: usize, d_max: f64) -> Result<WindowDataset> {
        let dim = self.records.first().map_or(0, |r| r.target().len());
        let mut ds = WindowDataset::new(self.n_sensors(), window, dim);
        for range in self.sequences() {
            let recs = &self.records[range];
            let frames = recs
                .iter()
                .map(|r| Ok(encode_input(&r.matrix()?, d_max)))
                .collect::<Result<Vec<_>>>()?;
            ds.push_sequence(frames, recs.iter().map(FrameRecord::target).collect())?;
        }
        Ok(ds)
    }

    /// Records that end a full window, in window order.
    pub fn window_ends(&self, window: usize) -> Vec<usize> {
        self.sequences()
            .into_iter()
            .flat_map(|r| (r.start + window.saturating_sub(1)).max(r.start)..r.end)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub n_sensors: usize,
    /// Noise, masking and the once-per-domain sensor jitter.
    pub augment: AugmentConfig,
    pub sequence_length: usize,
    /// Mixed into the pose sampler seed so domains draw different poses.
    pub pose_seed: u64,
    pub d_max: f64,
    /// Peak wrist flexion (rad); deviation peaks at half of it. The hand
    /// frame does not see the wrist joint, but a wrist-mounted sensor does.
    pub wrist_motion: f64,
    /// Where a wrist sensor sits relative to the wrist joint.
    pub wrist_sensor_offset: [f64; 3],
    /// Peak slip of a wrist sensor's strap around its mount point, per
    /// axis, meters.
    pub wrist_slip: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            n_sensors: 7,
            augment: AugmentConfig { mask_prob: 0.008, ..AugmentConfig::default() },
            sequence_length: 100,
            pose_seed: 0,
            d_max: DEFAULT_D_MAX,
            wrist_motion: 0.8,
            wrist_sensor_offset: [0.0, 0.006, -0.018],
            wrist_slip: 0.02,
        }
    }
}

impl DomainConfig {
    /// The real-world stand-in: moved sensors, doubled noise, other poses.
    pub fn shifted(&self) -> Self {
        let mut out = self.clone();
        out.augment.sensor_jitter = 0.003;
        out.augment.noise_sigma *= 2.0;
        out.augment.seed = self.augment.seed.wrapping_add(1);
        out.pose_seed = self.pose_seed.wrapping_add(0x5eed);
        out
    }

    /// Light noise for the servo rig.
    pub fn mechanical() -> Self {
        Self {
            augment: AugmentConfig {
                noise_sigma: 0.0005,
                mask_prob: 0.005,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    /// The servo rig at the noise level of a recorded session: the shifted
    /// domain's 2 mm range noise, masking kept under 1%.
    pub fn mechanical_recorded() -> Self {
        let mut out = Self::mechanical();
        out.augment.noise_sigma = 2.0 * AugmentConfig::default().noise_sigma;
        out.augment.mask_prob = 0.008;
        out
    }
}

/// A kinematic hand driven by one flexion servo per finger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechHand {
    pub servos: [f64; NUM_SERVOS],
}

impl MechHand {
    /// Servo values are clamped into `[-0.5, 0.5]`.
    pub fn new(servos: [f64; NUM_SERVOS]) -> Self {
        Self {
            servos: servos.map(|s| s.clamp(-0.5, 0.5)),
        }
    }

    /// Flexion DOFs follow their servo linearly across their full range;
    /// every other DOF stays at its limit-clamped rest value.
    pub fn angles(&self, skeleton: &HandSkeleton) -> JointAngles {
        JointAngles(
            skeleton
                .dofs()
                .iter()
                .map(|dof| match (dof.kind, dof.finger) {
                    (DofKind::Flexion, Some(f)) => dof.min + (self.servos[f.index()] + 0.5) * dof.span(),
                    _ => dof.clamp(0.0),
                })
                .collect(),
        )
    }
}

fn sensor_layout(domain: &DomainConfig, skeleton: &HandSkeleton) -> Result<SensorLayout> {
    let mut attachments = standard_layout(skeleton, domain.n_sensors)?.attachments;
    for a in attachments.iter_mut().filter(|a| a.index == skeleton.root()) {
        a.offset = domain.wrist_sensor_offset;
    }
    let layout = SensorLayout::new(attachments)?;
    Ok(layout.jittered(domain.augment.sensor_jitter, domain.augment.seed.wrapping_add(0x1a7))?)
}

/// Smooth wrist flexion/deviation rotations, one per frame.
fn wrist_track(peak: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<Rotation3<f64>> {
    if peak == 0.0 {
        return vec![Rotation3::identity(); len];
    }
    let n_keys = (len - 1).div_ceil(KEYFRAME_SPACING) + 1;
    let mut track = |amp: f64| {
        let keys: Vec<f64> = (0..n_keys).map(|_| rng.random_range(-amp..=amp)).collect();
        monotone_cubic(&keys, KEYFRAME_SPACING, len)
    };
    let flex = track(peak);
    let dev = track(0.5 * peak);
    flex.iter()
        .zip(&dev)
        .map(|(&f, &d)| Rotation3::from_axis_angle(&Vector3::x_axis(), f) * Rotation3::from_axis_angle(&Vector3::y_axis(), d))
        .collect()
}

/// Smooth per-axis offsets in `[-peak, peak]`, one per frame.
fn slip_track(peak: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    if peak == 0.0 {
        return vec![[0.0; 3]; len];
    }
    let n_keys = (len - 1).div_ceil(KEYFRAME_SPACING) + 1;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let keys: Vec<f64> = (0..n_keys).map(|_| rng.random_range(-peak..=peak)).collect();
            monotone_cubic(&keys, KEYFRAME_SPACING, len)
        })
        .collect();
    (0..len).map(|t| [axes[0][t], axes[1][t], axes[2][t]]).collect()
}

fn sequence_lengths(total: usize, len: usize) -> Result<Vec<usize>> {
    if len < crate::kinematics::MIN_SEQUENCE_LEN || total < len.min(crate::kinematics::MIN_SEQUENCE_LEN) {
        return Err(PipelineError::Invalid(format!("{total} frames in sequences of {len}")));
    }
    let mut out = vec![len; total / len];
    let rest = total % len;
    if rest >= crate::kinematics::MIN_SEQUENCE_LEN || out.is_empty() {
        out.push(rest);
    } else if rest > 0 {
        *out.last_mut().expect("non-empty") += rest;
    }
    Ok(out)
}

/// Simulated human-hand corpus with joint targets in the normalized frame.
pub fn gen_human_dataset(domain: &DomainConfig, poses: usize, seed: u64) -> Result<Dataset> {
    let skel = default_skeleton();
    let layout = sensor_layout(domain, &skel)?;
    let frame = NormalizationFrame::for_skeleton(&skel)?;
    let lengths = sequence_lengths(poses, domain.sequence_length)?;
    let max_len = *lengths.iter().max().unwrap_or(&0);
    let seqs = sample_pose_sequences(&skel, lengths.len(), max_len, seed ^ domain.pose_seed.rotate_left(17))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.augment.seed.rotate_left(33));
    let mut wrist_rng = ChaCha8Rng::seed_from_u64(seed ^ domain.pose_seed.rotate_left(41) ^ 0x3c1);
    let wrist_sensor = layout.attachments.iter().position(|a| a.index == skel.root());
    let mut frame_layout = layout.clone();
    let mut records = Vec::with_capacity(poses);
    for (s, (seq, &len)) in seqs.iter().zip(&lengths).enumerate() {
        let wrist = wrist_track(domain.wrist_motion, len, &mut wrist_rng);
        let slip = slip_track(domain.wrist_slip, len, &mut wrist_rng);
        for ((theta, w), dx) in seq[..len].iter().zip(wrist).zip(slip) {
            let mut pose = forward_kinematics(&skel, theta)?;
            let joints = normalize_pose(&pose, frame)?;
            pose.frames[skel.root()] = w;
            if let Some(k) = wrist_sensor {
                let base = layout.attachments[k].offset;
                frame_layout.attachments[k].offset = std::array::from_fn(|a| base[a] + dx[a]);
            }
            let m = augment_with(&measure(&pose, &frame_layout)?, &domain.augment, &mut rng)?;
            records.push(FrameRecord {
                i: records.len(),
                seq: s,
                d: m.rows(),
                joints: Some(joints.points.iter().map(|p| [p.x, p.y, p.z]).collect()),
                servo: None,
            });
        }
    }
    Ok(Dataset { records })
}

/// Mechanical-hand corpus: smooth servo trajectories and their matrices.
pub fn gen_mech_dataset(domain: &DomainConfig, frames: usize, seed: u64) -> Result<Dataset> {
    let skel = default_skeleton();
    let layout = sensor_layout(domain, &skel)?;
    let lengths = sequence_lengths(frames, domain.sequence_length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(frames);
    for (s, &len) in lengths.iter().enumerate() {
        let n_keys = (len - 1).div_ceil(KEYFRAME_SPACING) + 1;
        let tracks: Vec<Vec<f64>> = (0..NUM_SERVOS)
            .map(|_| {
                let keys: Vec<f64> = (0..n_keys).map(|_| rng.random_range(-0.5..=0.5)).collect();
                monotone_cubic(&keys, KEYFRAME_SPACING, len)
            })
            .collect();
        for t in 0..len {
            let hand = MechHand::new(std::array::from_fn(|k| tracks[k][t]));
            let pose = forward_kinematics(&skel, &hand.angles(&skel))?;
            let m = augment_with(&measure(&pose, &layout)?, &domain.augment, &mut rng)?;
            records.push(FrameRecord {
                i: records.len(),
                seq: s,
                d: m.rows(),
                joints: None,
                servo: Some(hand.servos.to_vec()),
            });
        }
    }
    Ok(Dataset { records })
}

/// Pose basis fitted on a dedicated draw from the pose sampler.
pub fn default_basis(seed: u64) -> Result<PoseBasis> {
    let seqs = sample_pose_sequences(&default_skeleton(), 200, 100, seed ^ 0xba515)?;
    Ok(fit_basis_from_sequences(&seqs, BASIS_SIZE)?)
}

/// Settings shared by the training commands; loadable from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub domain: DomainConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Trains a fresh model on `train`; head kind follows the dataset.
pub fn pretrain(
    train: &Dataset,
    val: Option<&Dataset>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    d_max: f64,
) -> Result<(ModelState, TrainReport)> {
    let mut mc = model.clone();
    mc.head = train
        .head_kind()
        .ok_or(PipelineError::PoseNet(PoseNetError::EmptyDataset))?;
    mc.n_sensors = train.n_sensors();
    let basis = match mc.head {
        HeadKind::PoseBasis => Some(default_basis(mc.seed)?),
        HeadKind::Servo => None,
    };
    let mut state = ModelState::new(mc, basis)?;
    let report = finetune(&mut state, train, val, cfg, d_max)?;
    Ok((state, report))
}

/// Continues training every parameter of `state` on `train`.
pub fn finetune(
    state: &mut ModelState,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    d_max: f64,
) -> Result<TrainReport> {
    let window = state.config.window;
    let tw = train.windows(window, d_max)?;
    let vw = val.map(|v| v.windows(window, d_max)).transpose()?;
    Ok(state.train(&tw, vw.as_ref(), cfg)?)
}

pub fn evaluate(state: &ModelState, test: &Dataset, d_max: f64) -> Result<Metrics> {
    Ok(state.evaluate(&test.windows(state.config.window, d_max)?)?)
}

/// Nearest-neighbor baseline metrics on the windows' final frames.
pub fn evaluate_baseline(train: &Dataset, test: &Dataset, window: usize) -> Result<Metrics> {
    let matrices = train
        .records
        .iter()
        .map(FrameRecord::matrix)
        .collect::<Result<Vec<_>>>()?;
    let nn = NearestNeighbor::new(&matrices, train.records.iter().map(FrameRecord::target).collect())?;
    let ends = test.window_ends(window);
    let queries = ends
        .iter()
        .map(|&i| test.records[i].matrix())
        .collect::<Result<Vec<_>>>()?;
    let hits = nn.nearest_batch(&queries)?;
    let preds: Vec<Vec<f64>> = hits.iter().map(|&h| nn.pose(h).to_vec()).collect();
    let targets: Vec<Vec<f64>> = ends.iter().map(|&i| test.records[i].target()).collect();
    let trefs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let head = test.head_kind().ok_or(PipelineError::PoseNet(PoseNetError::EmptyDataset))?;
    Ok(crate::posenet::evaluate_predictions(head, &default_skeleton(), &preds, &trefs)?)
}

/// A plain table rendered as CSV or aligned text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.headers.join(",") + "\n";
        for r in &self.rows {
            out += &(r.join(",") + "\n");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cols = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let parts: Vec<String> = (0..cols)
                .map(|i| format!("{:<w$}", cells.get(i).map_or("", String::as_str), w = widths[i]))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&self.headers, &mut out);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule, &mut out);
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub losses: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_of(&self, v: Variant) -> f64 {
        self.rows.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.mean)
    }

    /// Full model strictly below every ablation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let full = self.mean_of(Variant::Full);
        for r in &self.rows {
            if r.variant != Variant::Full && !(full < r.mean) {
                return Err(format!("full {full:.5} is not below {} {:.5}", r.variant.name(), r.mean));
            }
        }
        Ok(())
    }

    pub fn table(&self) -> Table {
        let mut headers = vec!["variant".to_string(), "params".to_string()];
        headers.extend(self.seeds.iter().map(|s| format!("seed {s}")));
        headers.push("mean".into());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.variant.name().to_string(), r.params.to_string()];
                row.extend(r.losses.iter().map(|l| format!("{l:.5}")));
                row.push(format!("{:.5}", r.mean));
                row
            })
            .collect();
        Table { headers, rows }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains the four variants per seed on one split of `data` and reports
/// their mean test error.
pub fn run_ablations(
    data: &Dataset,
    seeds: &[u64],
    model: &ModelConfig,
    cfg: &TrainConfig,
    d_max: f64,
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(PipelineError::Invalid(format!("ablations need at least 3 seeds, got {}", seeds.len())));
    }
    let (train, _, test) = data.split(0);
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut losses = Vec::new();
        let mut params = 0;
        for &seed in seeds {
            let mc = ModelConfig { seed, ..v.apply(model) };
            let tc = TrainConfig { seed, ..cfg.clone() };
            let (state, _) = pretrain(&train, None, &mc, &tc, d_max)?;
            params = state.param_count();
            losses.push(evaluate(&state, &test, d_max)?.mean);
        }
        rows.push(AblationRow {
            variant: v,
            params,
            mean: mean(&losses),
            losses,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRow {
    pub n: usize,
    pub pairs: usize,
    pub errors: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SensorRow>,
}

impl SensorTable {
    pub fn mean_of(&self, n: usize) -> f64 {
        self.rows.iter().find(|r| r.n == n).map_or(f64::NAN, |r| r.mean)
    }

    /// Strict decrease 5 > 6 > 7 and a smaller 7 -> 8 gain than 6 -> 7.
    pub fn check(&self) -> std::result::Result<(), String> {
        let e = |n| self.mean_of(n);
        let (e5, e6, e7, e8) = (e(5), e(6), e(7), e(8));
        if !(e5 > e6 && e6 > e7) {
            return Err(format!("errors not decreasing: {e5:.3} / {e6:.3} / {e7:.3}"));
        }
        if !(e7 - e8 < e6 - e7) {
            return Err(format!("no plateau: 6->7 gain {:.3}, 7->8 gain {:.3}", e6 - e7, e7 - e8));
        }
        Ok(())
    }

    pub fn table(&self) -> Table {
        let mut headers = vec!["sensors".to_string(), "pairs".to_string()];
        headers.extend(self.seeds.iter().map(|s| format!("seed {s} (cm)")));
        headers.push("mean (cm)".into());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.n.to_string(), r.pairs.to_string()];
                row.extend(r.errors.iter().map(|l| format!("{l:.3}")));
                row.push(format!("{:.3}", r.mean));
                row
            })
            .collect();
        Table { headers, rows }
    }
}

/// Joint error per sensor count; each count sees the same pose sequences.
pub fn run_sensor_study(
    counts: &[usize],
    domain: &DomainConfig,
    poses: usize,
    seeds: &[u64],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<SensorTable> {
    if seeds.is_empty() {
        return Err(PipelineError::Invalid("sensor study needs a seed".into()));
    }
    let mut rows = Vec::new();
    for &n in counts {
        let dom = DomainConfig { n_sensors: n, ..domain.clone() };
        let data = gen_human_dataset(&dom, poses, 0)?;
        let (train, _, test) = data.split(0);
        let mut errors = Vec::new();
        for &seed in seeds {
            let mc = ModelConfig { seed, ..model.clone() };
            let tc = TrainConfig { seed, ..cfg.clone() };
            let (state, _) = pretrain(&train, None, &mc, &tc, dom.d_max)?;
            errors.push(evaluate(&state, &test, dom.d_max)?.mean);
        }
        rows.push(SensorRow {
            n,
            pairs: n * (n - 1) / 2,
            mean: mean(&errors),
            errors,
        });
    }
    Ok(SensorTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Serializes matrices in the acquisition wire format: one
/// `F,<frame>,<i>,<j>,<mm|-1>` line per off-diagonal entry, then `E,<frame>`.
pub fn encode_stream<W: Write>(matrices: &[DistanceMatrix], w: &mut W) -> Result<()> {
    for (f, m) in matrices.iter().enumerate() {
        for i in 0..m.n() {
            for j in 0..m.n() {
                if i == j {
                    continue;
                }
                let v = m.get(i, j);
                if v == MISSING {
                    writeln!(w, "F,{f},{i},{j},-1")?;
                } else {
                    writeln!(w, "F,{f},{i},{j},{:.3}", v * 1000.0)?;
                }
            }
        }
        writeln!(w, "E,{f}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames: usize,
    pub lines: usize,
    pub malformed: usize,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub frames_per_second: f64,
}

fn parse_entry(parts: &[&str], n: usize) -> Option<(usize, usize, usize, f64)> {
    if parts.len() != 5 {
        return None;
    }
    let frame = parts[1].parse().ok()?;
    let i: usize = parts[2].parse().ok()?;
    let j: usize = parts[3].parse().ok()?;
    if i >= n || j >= n || i == j {
        return None;
    }
    let v = if parts[4] == "-1" {
        MISSING
    } else {
        let mm: f64 = parts[4].parse().ok()?;
        let m = mm / 1000.0;
        if !(m.is_finite() && (0.0..=MAX_RANGE).contains(&m)) {
            return None;
        }
        m
    };
    Some((frame, i, j, v))
}

struct Streamer<'a, W> {
    model: &'a ModelState,
    d_max: f64,
    out: &'a mut W,
    window: VecDeque<Vec<f64>>,
    current: Vec<f64>,
    current_frame: Option<usize>,
    stats: StreamStats,
    latency_sum: f64,
}

impl<W: Write> Streamer<'_, W> {
    fn fresh(n: usize) -> Vec<f64> {
        let mut m = vec![MISSING; n * n];
        for i in 0..n {
            m[i * n + i] = 0.0;
        }
        m
    }

    fn emit(&mut self, frame: usize) -> Result<()> {
        let t0 = Instant::now();
        let n = self.model.config.n_sensors;
        let m = DistanceMatrix::from_row_major(n, std::mem::replace(&mut self.current, Self::fresh(n)))?;
        self.window.pop_front();
        self.window.push_back(encode_input(&m, self.d_max));
        let frames: Vec<Vec<f64>> = self.window.iter().cloned().collect();
        let pred = self.model.forward_window(&frames)?.flatten();
        let mut text = format!("P,{frame}");
        for v in pred {
            let _ = write!(text, ",{v}");
        }
        writeln!(self.out, "{text}")?;
        let dt = t0.elapsed().as_secs_f64() * 1000.0;
        self.latency_sum += dt;
        self.stats.max_latency_ms = self.stats.max_latency_ms.max(dt);
        self.stats.frames += 1;
        self.current_frame = None;
        Ok(())
    }

    /// Returns false for a malformed line.
    fn line(&mut self, line: &str) -> Result<bool> {
        let n = self.model.config.n_sensors;
        let parts: Vec<&str> = line.split(',').collect();
        match parts[0] {
            "F" => {
                let Some((frame, i, j, v)) = parse_entry(&parts, n) else {
                    return Ok(false);
                };
                // a lost end marker: close the previous frame first
                if let Some(c) = self.current_frame.filter(|&c| c != frame) {
                    self.emit(c)?;
                }
                self.current_frame = Some(frame);
                self.current[i * n + j] = v;
                Ok(true)
            }
            "E" if parts.len() == 2 => match parts[1].parse::<usize>() {
                Ok(frame) => {
                    if let Some(c) = self.current_frame.filter(|&c| c != frame) {
                        self.emit(c)?;
                    }
                    self.emit(frame)?;
                    Ok(true)
                }
                Err(_) => Ok(false),
            },
            _ => Ok(false),
        }
    }
}

fn check_malformed(stats: &StreamStats, min_lines: usize) -> Result<()> {
    if stats.lines >= min_lines && stats.malformed as f64 > MAX_MALFORMED_FRACTION * stats.lines as f64 {
        return Err(PipelineError::StreamAborted {
            malformed: stats.malformed,
            lines: stats.lines,
        });
    }
    Ok(())
}

/// Sliding-window inference over a line stream.
///
/// Entries that never arrive for a frame stay missing; a frame whose end
/// marker is lost is closed when the next frame starts. The window is
/// zero-padded until `T` frames have been seen. Each frame emits
/// `P,<frame>,<v0>,<v1>,...` with the flattened prediction. Malformed
/// lines are skipped and counted; the stream is aborted once they exceed
/// 1% of the lines read.
pub fn stream_infer<R: BufRead, W: Write>(input: R, model: &ModelState, d_max: f64, out: &mut W) -> Result<StreamStats> {
    let n = model.config.n_sensors;
    let mut s = Streamer {
        model,
        d_max,
        out,
        window: std::iter::repeat_with(|| vec![0.0; n * n]).take(model.config.window).collect(),
        current: Streamer::<W>::fresh(n),
        current_frame: None,
        stats: StreamStats::default(),
        latency_sum: 0.0,
    };
    let start = Instant::now();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        s.stats.lines += 1;
        if !s.line(line)? {
            s.stats.malformed += 1;
            check_malformed(&s.stats, 100)?;
        }
    }
    if let Some(c) = s.current_frame {
        s.emit(c)?;
    }
    check_malformed(&s.stats, 0)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut stats = s.stats;
    if stats.frames > 0 {
        stats.mean_latency_ms = s.latency_sum / stats.frames as f64;
        stats.frames_per_second = stats.frames as f64 / elapsed.max(1e-9);
    }
    Ok(stats)
}
