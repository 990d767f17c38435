//! Articulated hand model: skeleton, forward kinematics, PCA pose basis,
//! pose-sequence sampling and rigid pose normalization.
//!
//! The skeleton has 23 landmarks: the wrist root, a 4-landmark chain per
//! finger (base, middle-1, middle-2, tip) and two rigid palm landmarks
//! (`index_root`, `pinky_root`). Its 22 rotational DOFs are listed in the
//! shipped `config/default_skeleton.toml`, which doubles as the schema
//! reference for custom skeleton files.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of landmarks in a full hand skeleton.
pub const NUM_LANDMARKS: usize = 23;
/// Number of articulated degrees of freedom.
pub const NUM_DOF: usize = 22;
/// Pose-basis coefficient count used by the decoder head.
pub const BASIS_SIZE: usize = 12;
/// Frames between random keyframes in sampled pose sequences.
pub const KEYFRAME_SPACING: usize = 20;
/// Minimum sampled sequence length (one model window).
pub const MIN_SEQUENCE_LEN: usize = 5;

const DEFAULT_SKELETON_TOML: &str = include_str!("../config/default_skeleton.toml");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("angle {value} for DOF `{dof}` outside limits [{min}, {max}]")]
    OutOfLimits {
        dof: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("pose basis needs more rows than components (rows = {rows}, k = {k})")]
    TooFewSamples { rows: usize, k: usize },
    #[error("angle corpus has zero variance")]
    ZeroVariance,
    #[error("angle corpus contains non-finite values")]
    NonFinite,
    #[error("degenerate pose: wrist, middle base and index base are collinear")]
    Degenerate,
    #[error("failed to read skeleton config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse skeleton config: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, KinematicsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Pinky,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Pinky => "pinky",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DofKind {
    Flexion,
    Abduction,
    Twist,
}

/// Skeleton file layout (see `config/default_skeleton.toml`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub root: String,
    #[serde(rename = "segment")]
    pub segments: Vec<SegmentConfig>,
    #[serde(rename = "dof")]
    pub dofs: Vec<DofConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub parent: String,
    pub child: String,
    pub length: f64,
    pub direction: [f64; 3],
    #[serde(default)]
    pub finger: Option<Finger>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DofConfig {
    pub name: String,
    pub segment: String,
    pub kind: DofKind,
    pub axis: [f64; 3],
    pub min: f64,
    pub max: f64,
}

/// A rigid bone from a parent landmark to a child landmark.
#[derive(Debug, Clone)]
pub struct Segment {
    pub parent: usize,
    pub child: usize,
    pub length: f64,
    /// Unit direction in the wrist frame at rest.
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Dof {
    pub name: String,
    /// Index into [`HandSkeleton::segments`].
    pub segment: usize,
    pub kind: DofKind,
    /// Unit rotation axis in the rest (wrist) frame.
    pub axis: Unit<Vector3<f64>>,
    pub min: f64,
    pub max: f64,
    pub finger: Option<Finger>,
}

impl Dof {
    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone)]
pub struct HandSkeleton {
    landmarks: Vec<String>,
    fingers: Vec<Option<Finger>>,
    segments: Vec<Segment>,
    dofs: Vec<Dof>,
    /// Bit `a` of `ancestors[l]` is set when landmark `a` lies strictly
    /// above `l` in the tree.
    ancestors: Vec<u64>,
    /// DOF indices grouped by segment, in composition order.
    segment_dofs: Vec<Vec<usize>>,
}

impl HandSkeleton {
    pub fn from_config(cfg: &SkeletonConfig) -> Result<Self> {
        let mut landmarks = vec![cfg.root.clone()];
        let mut fingers = vec![None];
        let mut segments = Vec::with_capacity(cfg.segments.len());
        for seg in &cfg.segments {
            let parent = landmarks.iter().position(|n| *n == seg.parent).ok_or_else(|| {
                KinematicsError::InvalidSkeleton(format!(
                    "segment `{}` references parent `{}` before it is defined",
                    seg.child, seg.parent
                ))
            })?;
            if landmarks.contains(&seg.child) {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "landmark `{}` has more than one parent",
                    seg.child
                )));
            }
            if !(seg.length.is_finite() && seg.length > 0.0) {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "segment `{}` has non-positive length {}",
                    seg.child, seg.length
                )));
            }
            let dir = Vector3::from(seg.direction);
            let norm = dir.norm();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "segment `{}` has a zero direction",
                    seg.child
                )));
            }
            landmarks.push(seg.child.clone());
            fingers.push(seg.finger);
            segments.push(Segment {
                parent,
                child: landmarks.len() - 1,
                length: seg.length,
                direction: dir / norm,
            });
        }
        if landmarks.len() > 64 {
            return Err(KinematicsError::InvalidSkeleton(
                "at most 64 landmarks are supported".into(),
            ));
        }

        let mut dofs = Vec::with_capacity(cfg.dofs.len());
        let mut segment_dofs = vec![Vec::new(); segments.len()];
        for d in &cfg.dofs {
            let segment = segments
                .iter()
                .position(|s| landmarks[s.child] == d.segment)
                .ok_or_else(|| {
                    KinematicsError::InvalidSkeleton(format!(
                        "DOF `{}` names unknown segment `{}`",
                        d.name, d.segment
                    ))
                })?;
            if dofs.iter().any(|o: &Dof| o.name == d.name) {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "duplicate DOF name `{}`",
                    d.name
                )));
            }
            if !(d.min.is_finite() && d.max.is_finite() && d.min < d.max) {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "DOF `{}` has an empty limit interval",
                    d.name
                )));
            }
            let axis = Vector3::from(d.axis);
            if axis.norm() < 1e-12 {
                return Err(KinematicsError::InvalidSkeleton(format!(
                    "DOF `{}` has a zero axis",
                    d.name
                )));
            }
            segment_dofs[segment].push(dofs.len());
            dofs.push(Dof {
                name: d.name.clone(),
                segment,
                kind: d.kind,
                axis: Unit::new_normalize(axis),
                min: d.min,
                max: d.max,
                finger: fingers[segments[segment].child],
            });
        }

        let mut ancestors = vec![0u64; landmarks.len()];
        for seg in &segments {
            ancestors[seg.child] = ancestors[seg.parent] | (1u64 << seg.parent);
        }

        Ok(Self {
            landmarks,
            fingers,
            segments,
            dofs,
            ancestors,
            segment_dofs,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SkeletonConfig = toml::from_str(text)?;
        Self::from_config(&cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn landmarks(&self) -> &[String] {
        &self.landmarks
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn dofs(&self) -> &[Dof] {
        &self.dofs
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn num_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// The root landmark always comes first.
    pub fn root(&self) -> usize {
        0
    }

    pub fn landmark_index(&self, name: &str) -> Option<usize> {
        self.landmarks.iter().position(|n| n == name)
    }

    pub fn finger_of(&self, landmark: usize) -> Option<Finger> {
        self.fingers.get(landmark).copied().flatten()
    }

    /// Landmarks with a finger tag and no children.
    pub fn fingertips(&self) -> Vec<usize> {
        (0..self.landmarks.len())
            .filter(|&l| {
                self.fingers[l].is_some() && !self.segments.iter().any(|s| s.parent == l)
            })
            .collect()
    }

    /// True when `ancestor` lies strictly above `landmark`.
    pub fn is_ancestor(&self, ancestor: usize, landmark: usize) -> bool {
        self.ancestors[landmark] & (1u64 << ancestor) != 0
    }

    /// Landmarks whose position is moved by the segment ending at `child`.
    fn moved_by(&self, child: usize, landmark: usize) -> bool {
        landmark == child || self.is_ancestor(child, landmark)
    }

    pub fn rest_pose(&self) -> JointPositions {
        forward_kinematics(self, &JointAngles::zeros(self.num_dofs()))
            .expect("zero angles are always inside the shipped limits")
    }

    pub fn check_limits(&self, theta: &JointAngles) -> Result<()> {
        if theta.len() != self.dofs.len() {
            return Err(KinematicsError::Dimension {
                expected: self.dofs.len(),
                got: theta.len(),
            });
        }
        for (dof, &v) in self.dofs.iter().zip(theta.as_slice()) {
            if !v.is_finite() || v < dof.min - 1e-12 || v > dof.max + 1e-12 {
                return Err(KinematicsError::OutOfLimits {
                    dof: dof.name.clone(),
                    value: v,
                    min: dof.min,
                    max: dof.max,
                });
            }
        }
        Ok(())
    }

    /// Clamps every angle into its limit interval, returning how many moved.
    pub fn clamp_angles(&self, theta: &mut JointAngles) -> usize {
        let mut clamped = 0;
        for (dof, v) in self.dofs.iter().zip(theta.0.iter_mut()) {
            let c = dof.clamp(*v);
            if c != *v {
                clamped += 1;
                *v = c;
            }
        }
        clamped
    }
}

/// The compiled-in 18 cm hand.
pub fn default_skeleton() -> HandSkeleton {
    HandSkeleton::from_toml_str(DEFAULT_SKELETON_TOML)
        .expect("shipped default skeleton config is valid")
}

/// The shipped skeleton config text, for writing a template file.
pub fn default_skeleton_toml() -> &'static str {
    DEFAULT_SKELETON_TOML
}

/// Joint angle vector, one entry per DOF, radians.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngles(pub Vec<f64>);

impl JointAngles {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Landmark positions (meters) with the orientation of each landmark's
/// incoming segment. Frames are identity for points that did not come out
/// of forward kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub points: Vec<Vector3<f64>>,
    pub frames: Vec<Rotation3<f64>>,
}

impl JointPositions {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let frames = vec![Rotation3::identity(); points.len()];
        Self { points, frames }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `[x0, y0, z0, x1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        Self::from_points(
            values
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    /// Applies `p -> rotation * p + translation` to points and frames.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            frames: self.frames.iter().map(|f| rotation * f).collect(),
        }
    }
}

/// Forward kinematics: landmark positions in the wrist frame.
pub fn forward_kinematics(skeleton: &HandSkeleton, theta: &JointAngles) -> Result<JointPositions> {
    skeleton.check_limits(theta)?;
    Ok(fk_unchecked(skeleton, theta.as_slice(), None))
}

/// Positions plus `d point / d theta` for every DOF.
///
/// `jacobian[k][l]` is the derivative of landmark `l` with respect to DOF
/// `k`; it is zero unless `l` hangs below the segment that DOF drives.
pub fn forward_kinematics_with_jacobian(
    skeleton: &HandSkeleton,
    theta: &JointAngles,
) -> Result<(JointPositions, Vec<Vec<Vector3<f64>>>)> {
    skeleton.check_limits(theta)?;
    let mut axes = vec![(Vector3::zeros(), Vector3::zeros()); skeleton.num_dofs()];
    let pose = fk_unchecked(skeleton, theta.as_slice(), Some(&mut axes));
    let n = skeleton.num_landmarks();
    let jacobian = skeleton
        .dofs
        .iter()
        .zip(&axes)
        .map(|(dof, (axis, pivot))| {
            let child = skeleton.segments[dof.segment].child;
            (0..n)
                .map(|l| {
                    if skeleton.moved_by(child, l) {
                        axis.cross(&(pose.points[l] - pivot))
                    } else {
                        Vector3::zeros()
                    }
                })
                .collect()
        })
        .collect();
    Ok((pose, jacobian))
}

/// Records `(world axis, pivot)` per DOF when `axes` is given.
fn fk_unchecked(
    skeleton: &HandSkeleton,
    theta: &[f64],
    mut axes: Option<&mut Vec<(Vector3<f64>, Vector3<f64>)>>,
) -> JointPositions {
    let n = skeleton.num_landmarks();
    let mut points = vec![Vector3::zeros(); n];
    let mut frames = vec![Rotation3::identity(); n];
    for (s, seg) in skeleton.segments.iter().enumerate() {
        let pivot = points[seg.parent];
        let mut rot = frames[seg.parent];
        for &k in &skeleton.segment_dofs[s] {
            let dof = &skeleton.dofs[k];
            if let Some(axes) = axes.as_deref_mut() {
                axes[k] = (rot * dof.axis.into_inner(), pivot);
            }
            rot *= Rotation3::from_axis_angle(&dof.axis, theta[k]);
        }
        points[seg.child] = pivot + rot * (seg.direction * seg.length);
        frames[seg.child] = rot;
    }
    JointPositions { points, frames }
}

/// PCA model over joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBasis {
    pub mean: DVector<f64>,
    /// K x D, orthonormal rows sorted by descending variance.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl PoseBasis {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    /// theta = mean + coeffs^T * components (no clamping).
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<JointAngles> {
        if coeffs.len() != self.k() {
            return Err(KinematicsError::Dimension {
                expected: self.k(),
                got: coeffs.len(),
            });
        }
        let c = DVector::from_column_slice(coeffs);
        let theta = &self.mean + self.components.transpose() * c;
        Ok(JointAngles(theta.as_slice().to_vec()))
    }

    pub fn project(&self, theta: &JointAngles) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(KinematicsError::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let centered = DVector::from_column_slice(theta.as_slice()) - &self.mean;
        Ok((&self.components * centered).as_slice().to_vec())
    }
}

/// Fits the top-`k` principal directions of an `M x D` angle corpus.
pub fn fit_pose_basis(corpus: &DMatrix<f64>, k: usize) -> Result<PoseBasis> {
    let (m, d) = corpus.shape();
    if m <= k || k == 0 || k > d {
        return Err(KinematicsError::TooFewSamples { rows: m, k });
    }
    if corpus.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite);
    }
    let mean = corpus.row_mean().transpose();
    let mut centered = corpus.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let total: f64 = cov.diagonal().iter().sum();
    if total <= 1e-24 {
        return Err(KinematicsError::ZeroVariance);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = DMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        components.row_mut(row).copy_from(&v.transpose());
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PoseBasis {
        mean,
        components,
        explained_variance,
    })
}

/// Result of decoding basis coefficients into a pose.
#[derive(Debug, Clone)]
pub struct DecodedPose {
    pub angles: JointAngles,
    pub positions: JointPositions,
    /// Number of angles that had to be clamped into their limits.
    pub clamped: usize,
}

pub fn decode_pose(basis: &PoseBasis, coeffs: &[f64], skeleton: &HandSkeleton) -> Result<DecodedPose> {
    let mut angles = basis.reconstruct(coeffs)?;
    if angles.len() != skeleton.num_dofs() {
        return Err(KinematicsError::Dimension {
            expected: skeleton.num_dofs(),
            got: angles.len(),
        });
    }
    let clamped = skeleton.clamp_angles(&mut angles);
    let positions = forward_kinematics(skeleton, &angles)?;
    Ok(DecodedPose {
        angles,
        positions,
        clamped,
    })
}

/// Smooth random pose sequences: keyframes every [`KEYFRAME_SPACING`]
/// frames joined by monotone piecewise-cubic interpolation.
///
/// Within a keyframe the flexion DOFs of one finger share a common curl
/// level (plus a small per-joint perturbation); abduction and twist DOFs
/// are independent. Every keyframe angle stays inside its limits, and the
/// monotone interpolant never leaves the hull of its neighboring keyframes.
pub fn sample_pose_sequences(
    skeleton: &HandSkeleton,
    count: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Vec<JointAngles>>> {
    if length < MIN_SEQUENCE_LEN {
        return Err(KinematicsError::Dimension {
            expected: MIN_SEQUENCE_LEN,
            got: length,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = skeleton.num_dofs();
    let n_keys = (length - 1).div_ceil(KEYFRAME_SPACING) + 1;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let keys: Vec<Vec<f64>> = (0..n_keys).map(|_| sample_keyframe(skeleton, &mut rng)).collect();
        let mut seq = Vec::with_capacity(length);
        let mut tracks = vec![Vec::with_capacity(length); d];
        for (k, track) in tracks.iter_mut().enumerate() {
            let ys: Vec<f64> = keys.iter().map(|kf| kf[k]).collect();
            *track = monotone_cubic(&ys, KEYFRAME_SPACING, length);
        }
        for t in 0..length {
            let mut theta = JointAngles((0..d).map(|k| tracks[k][t]).collect());
            skeleton.clamp_angles(&mut theta);
            seq.push(theta);
        }
        out.push(seq);
    }
    Ok(out)
}

/// Standard deviation of the per-joint perturbation around a finger's curl
/// level, as a fraction of the joint's range.
const CURL_JITTER: f64 = 0.1;

fn sample_keyframe(skeleton: &HandSkeleton, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let curls: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>());
    skeleton
        .dofs()
        .iter()
        .map(|dof| {
            let u = match (dof.kind, dof.finger) {
                (DofKind::Flexion, Some(f)) => {
                    let e: f64 = rng.sample(StandardNormal);
                    (curls[f.index()] + CURL_JITTER * e).clamp(0.0, 1.0)
                }
                _ => rng.random::<f64>(),
            };
            dof.min + u * dof.span()
        })
        .collect()
}

/// Fritsch-Butland monotone cubic Hermite through knots `spacing` samples
/// apart, evaluated at `length` integer positions.
pub fn monotone_cubic(knots: &[f64], spacing: usize, length: usize) -> Vec<f64> {
    let h = spacing as f64;
    let n = knots.len();
    if n == 1 {
        return vec![knots[0]; length];
    }
    let slopes: Vec<f64> = knots.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut tangents = vec![0.0; n];
    tangents[0] = slopes[0];
    tangents[n - 1] = slopes[n - 2];
    for i in 1..n - 1 {
        let (a, b) = (slopes[i - 1], slopes[i]);
        tangents[i] = if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
    }
    (0..length)
        .map(|t| {
            let seg = (t / spacing).min(n - 2);
            let s = (t - seg * spacing) as f64 / h;
            let (s2, s3) = (s * s, s * s * s);
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            h00 * knots[seg]
                + h10 * h * tangents[seg]
                + h01 * knots[seg + 1]
                + h11 * h * tangents[seg + 1]
        })
        .collect()
}

/// Landmark indices used to define the normalized hand frame.
#[derive(Debug, Clone, Copy)]
pub struct NormalizationFrame {
    pub wrist: usize,
    pub middle_base: usize,
    pub index_base: usize,
}

impl NormalizationFrame {
    pub fn for_skeleton(skeleton: &HandSkeleton) -> Result<Self> {
        let find = |name: &str| {
            skeleton.landmark_index(name).ok_or_else(|| {
                KinematicsError::InvalidSkeleton(format!("missing landmark `{name}`"))
            })
        };
        Ok(Self {
            wrist: find("wrist")?,
            middle_base: find("middle_base")?,
            index_base: find("index_base")?,
        })
    }
}

impl Default for NormalizationFrame {
    /// Indices of the default skeleton.
    fn default() -> Self {
        Self {
            wrist: 0,
            middle_base: 9,
            index_base: 5,
        }
    }
}

/// Rigidly moves a pose so the wrist sits at the origin, the middle-finger
/// base on +Z and the index-finger base in the X-Z half plane with x > 0.
pub fn normalize_pose(points: &JointPositions, frame: NormalizationFrame) -> Result<JointPositions> {
    let (rotation, translation) = normalizing_transform(points, frame)?;
    Ok(points.transformed(&rotation, &translation))
}

/// The `(R, t)` with `p -> R p + t` that [`normalize_pose`] applies.
pub fn normalizing_transform(
    points: &JointPositions,
    frame: NormalizationFrame,
) -> Result<(Rotation3<f64>, Vector3<f64>)> {
    let n = points.len();
    if frame.wrist >= n || frame.middle_base >= n || frame.index_base >= n {
        return Err(KinematicsError::Dimension {
            expected: frame.wrist.max(frame.middle_base).max(frame.index_base) + 1,
            got: n,
        });
    }
    let w = points.points[frame.wrist];
    let to_middle = points.points[frame.middle_base] - w;
    let to_index = points.points[frame.index_base] - w;
    let zn = to_middle.norm();
    if zn < 1e-9 {
        return Err(KinematicsError::Degenerate);
    }
    let z = to_middle / zn;
    let xr = to_index - z * to_index.dot(&z);
    let xn = xr.norm();
    if xn < 1e-9 * to_index.norm().max(1e-9) || xn < 1e-12 {
        return Err(KinematicsError::Degenerate);
    }
    let x = xr / xn;
    let y = z.cross(&x);
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rotation = Rotation3::from_matrix_unchecked(m);
    Ok((rotation, -(rotation * w)))
}

/// Pairwise landmark distance matrix, row-major.
pub fn pairwise_distances(points: &JointPositions) -> Vec<f64> {
    let n = points.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (points.points[i] - points.points[j]).norm();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_angles(skel: &HandSkeleton, rng: &mut ChaCha8Rng) -> JointAngles {
        JointAngles(
            skel.dofs()
                .iter()
                .map(|d| d.min + rng.random::<f64>() * d.span())
                .collect(),
        )
    }

    #[test]
    fn default_skeleton_shape() {
        let s = default_skeleton();
        assert_eq!(s.num_landmarks(), NUM_LANDMARKS);
        assert_eq!(s.num_dofs(), NUM_DOF);
        assert_eq!(s.segments().len(), NUM_LANDMARKS - 1);
        // exactly one root: every landmark but the first is some segment's child
        let mut children: Vec<usize> = s.segments().iter().map(|g| g.child).collect();
        children.sort_unstable();
        assert_eq!(children, (1..NUM_LANDMARKS).collect::<Vec<_>>());
        for seg in s.segments() {
            assert!(seg.length > 0.0);
            assert!((seg.direction.norm() - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.fingertips().len(), 5);
        assert!(s.landmark_index("index_root").is_some());
        assert!(s.landmark_index("pinky_root").is_some());
    }

    #[test]
    fn wrist_at_origin_and_rest_pose() {
        let s = default_skeleton();
        let rest = s.rest_pose();
        assert_eq!(rest.points[0], Vector3::zeros());
        // rest pose is already in the normalized frame
        let nf = NormalizationFrame::for_skeleton(&s).unwrap();
        let norm = normalize_pose(&rest, nf).unwrap();
        for (a, b) in norm.points.iter().zip(&rest.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn middle_chain_length_table() {
        let s = default_skeleton();
        let lengths: f64 = ["middle_m1", "middle_m2", "middle_tip"]
            .iter()
            .map(|n| {
                let c = s.landmark_index(n).unwrap();
                s.segments().iter().find(|g| g.child == c).unwrap().length
            })
            .sum();
        // 0.045 + 0.030 + 0.023
        assert!((lengths - 0.098).abs() < 1e-12);
    }

    #[test]
    fn out_of_limit_angle_names_dof() {
        let s = default_skeleton();
        let mut theta = JointAngles::zeros(NUM_DOF);
        theta.0[8] = 5.0;
        match forward_kinematics(&s, &theta) {
            Err(KinematicsError::OutOfLimits { dof, .. }) => assert_eq!(dof, s.dofs()[8].name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tip_flexion_is_local() {
        let s = default_skeleton();
        let k = s.dofs().iter().position(|d| d.name == "index_dip_flexion").unwrap();
        let mut theta = JointAngles::zeros(NUM_DOF);
        theta.0[k] = 0.3;
        let a = forward_kinematics(&s, &theta).unwrap();
        theta.0[k] += 0.1;
        let b = forward_kinematics(&s, &theta).unwrap();
        let tip = s.landmark_index("index_tip").unwrap();
        for l in 0..NUM_LANDMARKS {
            if l == tip {
                assert!((a.points[l] - b.points[l]).norm() > 1e-4);
            } else {
                assert_eq!(a.points[l], b.points[l], "landmark {}", s.landmarks()[l]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = random_angles(&s, &mut rng);
        for (v, d) in theta.0.iter_mut().zip(s.dofs()) {
            *v = v.clamp(d.min + 1e-3, d.max - 1e-3);
        }
        let (_, jac) = forward_kinematics_with_jacobian(&s, &theta).unwrap();
        let h = 1e-6;
        for k in 0..NUM_DOF {
            let mut tp = theta.clone();
            tp.0[k] += h;
            let mut tm = theta.clone();
            tm.0[k] -= h;
            let p = forward_kinematics(&s, &tp).unwrap();
            let m = forward_kinematics(&s, &tm).unwrap();
            for l in 0..NUM_LANDMARKS {
                let fd = (p.points[l] - m.points[l]) / (2.0 * h);
                assert!((fd - jac[k][l]).norm() < 1e-8, "dof {k} landmark {l}");
            }
        }
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let row = [0.1, 0.2, 0.3];
        let corpus = DMatrix::from_fn(10, 3, |_, j| row[j]);
        assert!(matches!(fit_pose_basis(&corpus, 2), Err(KinematicsError::ZeroVariance)));
        assert!((corpus.row_mean()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn too_few_rows_rejected() {
        let corpus = DMatrix::from_fn(3, 5, |i, j| (i * j) as f64);
        assert!(matches!(
            fit_pose_basis(&corpus, 3),
            Err(KinematicsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn rank_two_family_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let base: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = 50;
        let mut corpus = DMatrix::zeros(m, d);
        for i in 0..m {
            let (a, b) = (rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
            for j in 0..d {
                corpus[(i, j)] = base[j] + a * u[j] + b * v[j];
            }
        }
        let basis = fit_pose_basis(&corpus, 2).unwrap();
        // oracle: direct projection onto the fitted rows then back
        for i in 0..m {
            let row: Vec<f64> = corpus.row(i).iter().copied().collect();
            let c = basis.project(&JointAngles(row.clone())).unwrap();
            let back = basis.reconstruct(&c).unwrap();
            for (x, y) in back.0.iter().zip(&row) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn complete_basis_is_exact_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus = DMatrix::from_fn(40, NUM_DOF, |_, _| rng.random::<f64>());
        let basis = fit_pose_basis(&corpus, NUM_DOF).unwrap();
        let gram = &basis.components * basis.components.transpose();
        assert!((gram - DMatrix::identity(NUM_DOF, NUM_DOF)).amax() < 1e-6);
        for w in basis.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for i in 0..40 {
            let row = JointAngles(corpus.row(i).iter().copied().collect());
            let back = basis.reconstruct(&basis.project(&row).unwrap()).unwrap();
            for (x, y) in back.0.iter().zip(&row.0) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn decode_zero_coeffs_is_mean_pose() {
        let s = default_skeleton();
        let seqs = sample_pose_sequences(&s, 4, 60, 1).unwrap();
        let rows: Vec<&JointAngles> = seqs.iter().flatten().collect();
        let corpus = DMatrix::from_fn(rows.len(), NUM_DOF, |i, j| rows[i].0[j]);
        let basis = fit_pose_basis(&corpus, BASIS_SIZE).unwrap();
        let dec = decode_pose(&basis, &[0.0; BASIS_SIZE], &s).unwrap();
        let mut mean = JointAngles(basis.mean.as_slice().to_vec());
        s.clamp_angles(&mut mean);
        assert_eq!(dec.positions, forward_kinematics(&s, &mean).unwrap());
    }

    #[test]
    fn decode_complete_basis_round_trip() {
        let s = default_skeleton();
        let seqs = sample_pose_sequences(&s, 6, 60, 2).unwrap();
        let rows: Vec<&JointAngles> = seqs.iter().flatten().collect();
        let corpus = DMatrix::from_fn(rows.len(), NUM_DOF, |i, j| rows[i].0[j]);
        let basis = fit_pose_basis(&corpus, NUM_DOF).unwrap();
        for theta in rows.iter().step_by(17) {
            let c = basis.project(theta).unwrap();
            let dec = decode_pose(&basis, &c, &s).unwrap();
            for (x, y) in dec.angles.0.iter().zip(&theta.0) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn decode_random_coeffs_counts_clamps() {
        let s = default_skeleton();
        let seqs = sample_pose_sequences(&s, 4, 60, 9).unwrap();
        let rows: Vec<&JointAngles> = seqs.iter().flatten().collect();
        let corpus = DMatrix::from_fn(rows.len(), NUM_DOF, |i, j| rows[i].0[j]);
        let basis = fit_pose_basis(&corpus, BASIS_SIZE).unwrap();
        let dec = decode_pose(&basis, &[40.0; BASIS_SIZE], &s).unwrap();
        assert!(dec.clamped > 0);
        check_segment_lengths(&s, &dec.positions);
    }

    #[test]
    fn short_sequence_is_exact_length_and_in_limits() {
        let s = default_skeleton();
        let seqs = sample_pose_sequences(&s, 1, 5, 42).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 5);
        for t in &seqs[0] {
            s.check_limits(t).unwrap();
        }
        assert!(sample_pose_sequences(&s, 1, 4, 42).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = default_skeleton();
        let a = sample_pose_sequences(&s, 3, 30, 7).unwrap();
        let b = sample_pose_sequences(&s, 3, 30, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_pose_sequences(&s, 3, 30, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_marginals_cover_limits() {
        let s = default_skeleton();
        let seqs = sample_pose_sequences(&s, 100, 100, 123).unwrap();
        for (k, dof) in s.dofs().iter().enumerate() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in seqs.iter().flatten() {
                lo = lo.min(t.0[k]);
                hi = hi.max(t.0[k]);
            }
            assert!((hi - lo) >= 0.8 * dof.span(), "{}: {lo}..{hi}", dof.name);
        }
    }

    #[test]
    fn collinear_landmarks_rejected() {
        let mut pts = vec![Vector3::zeros(); NUM_LANDMARKS];
        pts[9] = Vector3::new(0.0, 0.0, 0.08);
        pts[5] = Vector3::new(0.0, 0.0, 0.05);
        let jp = JointPositions::from_points(pts);
        assert!(matches!(
            normalize_pose(&jp, NormalizationFrame::default()),
            Err(KinematicsError::Degenerate)
        ));
    }

    fn check_segment_lengths(s: &HandSkeleton, p: &JointPositions) {
        for seg in s.segments() {
            let len = (p.points[seg.child] - p.points[seg.parent]).norm();
            assert!((len - seg.length).abs() < 1e-9);
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random::<f64>() * 6.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fk_preserves_segment_lengths(seed in any::<u64>()) {
            let s = default_skeleton();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_angles(&s, &mut rng);
            let p = forward_kinematics(&s, &theta).unwrap();
            check_segment_lengths(&s, &p);
            prop_assert_eq!(p.points[0], Vector3::zeros());
        }

        #[test]
        fn normalization_is_rigid_idempotent_and_invariant(seed in any::<u64>()) {
            let s = default_skeleton();
            let nf = NormalizationFrame::for_skeleton(&s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_angles(&s, &mut rng);
            let r0 = random_rotation(&mut rng);
            let pose = forward_kinematics(&s, &theta).unwrap()
                .transformed(&r0, &Vector3::new(0.3, -0.2, 0.1));
            let n1 = normalize_pose(&pose, nf).unwrap();
            let n2 = normalize_pose(&n1, nf).unwrap();
            let r = random_rotation(&mut rng);
            let t = Vector3::new(rng.random::<f64>(), -rng.random::<f64>(), 0.5);
            let n3 = normalize_pose(&pose.transformed(&r, &t), nf).unwrap();
            for l in 0..NUM_LANDMARKS {
                prop_assert!((n1.points[l] - n2.points[l]).norm() < 1e-9);
                prop_assert!((n1.points[l] - n3.points[l]).norm() < 1e-9);
            }
            let d0 = pairwise_distances(&pose);
            let d1 = pairwise_distances(&n1);
            let worst = d0.iter().zip(&d1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(worst < 1e-9);
        }
    }
}
