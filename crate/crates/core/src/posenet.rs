//! Encoder-decoder pose regressor, its ablation variants and the
//! nearest-neighbor baseline.
//!
//! Per frame, every row of the encoded distance matrix passes through a
//! shared MLP (`Z1`), multi-head self-attention mixes the sensor rows
//! (`Z2`) and the two are concatenated (`Z3`). The flattened `Z3` goes
//! through the decoder MLP (`Z4`), an LSTM summarizes the `T` frames of a
//! window and a head MLP emits either pose-basis coefficients (decoded
//! through forward kinematics) or servo commands.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    default_skeleton, forward_kinematics_with_jacobian, Finger, HandSkeleton, JointAngles, JointPositions,
    KinematicsError, PoseBasis, BASIS_SIZE,
};
use crate::nn::{
    adam_step, glorot_uniform, linear_backward, linear_forward, lstm_sequence, lstm_sequence_backward,
    mha_backward, mha_forward, read_checkpoint, relu, relu_backward, write_checkpoint, AdamConfig, AdamState,
    GradCheckable, LstmCache, LstmParams, MhaCache, MhaParams, NnError, ParamId, ParamSet, Tensor,
};
use crate::sensorsim::DistanceMatrix;

/// Servo channels of the mechanical hand, one per finger.
pub const NUM_SERVOS: usize = 5;
/// Fingertip discrepancy above which a pseudo-ground-truth frame is dropped.
pub const PSEUDO_GT_THRESHOLD: f64 = 0.004;

#[derive(Debug, Error)]
pub enum PoseNetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window needs {expected} frames, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("zero-norm vector at entry {0}")]
    ZeroNorm(usize),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PoseNetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    PoseBasis,
    Servo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_sensors: usize,
    pub enc_hidden: usize,
    pub enc_out: usize,
    pub attention: bool,
    pub skip: bool,
    pub sequence: bool,
    pub window: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub attn_out: usize,
    pub dec_hidden: usize,
    pub dec_out: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub head: HeadKind,
    pub basis_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_sensors: 7,
            enc_hidden: 32,
            enc_out: 32,
            attention: true,
            skip: true,
            sequence: true,
            window: 5,
            heads: 2,
            head_dim: 64,
            attn_out: 64,
            dec_hidden: 256,
            dec_out: 256,
            lstm_hidden: 256,
            head_hidden: 128,
            head: HeadKind::PoseBasis,
            basis_size: BASIS_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn servo() -> Self {
        Self {
            head: HeadKind::Servo,
            ..Self::default()
        }
    }

    /// Width of one `Z3` row.
    pub fn z3_width(&self) -> usize {
        match (self.attention, self.skip) {
            (true, true) => self.enc_out + self.attn_out,
            (true, false) => self.attn_out,
            (false, _) => self.enc_out,
        }
    }

    /// Input width of the decoder MLP.
    pub fn flatten_width(&self) -> usize {
        self.n_sensors * self.z3_width()
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            HeadKind::PoseBasis => self.basis_size,
            HeadKind::Servo => NUM_SERVOS,
        }
    }

    /// Width of the final prediction vector: 23 x 3 joints or 5 servos.
    pub fn target_dim(&self, skeleton: &HandSkeleton) -> usize {
        match self.head {
            HeadKind::PoseBasis => 3 * skeleton.num_landmarks(),
            HeadKind::Servo => NUM_SERVOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.enc_hidden,
            self.enc_out,
            self.head_dim,
            self.attn_out,
            self.dec_hidden,
            self.dec_out,
            self.lstm_hidden,
            self.head_hidden,
            self.basis_size,
        ];
        if self.n_sensors < 2 {
            return Err(PoseNetError::Config(format!("n_sensors = {}", self.n_sensors)));
        }
        if self.window == 0 {
            return Err(PoseNetError::Config("window must be at least 1".into()));
        }
        if !(1..=4).contains(&self.heads) {
            return Err(PoseNetError::Config(format!("heads = {} (allowed 1-4)", self.heads)));
        }
        if widths.contains(&0) {
            return Err(PoseNetError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Frames that actually reach the network; the sequence-free variant
    /// only looks at the last one.
    fn frames_used(&self) -> usize {
        if self.sequence {
            self.window
        } else {
            1
        }
    }
}

/// The four variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    NoSeq,
    NoAtten,
    NoSkip,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoSeq, Variant::NoAtten, Variant::NoSkip, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoSeq => "w/o seq.",
            Variant::NoAtten => "w/o atten.",
            Variant::NoSkip => "w/o skip",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.attention = true;
        cfg.skip = true;
        cfg.sequence = true;
        match self {
            Variant::NoSeq => cfg.sequence = false,
            Variant::NoAtten => cfg.attention = false,
            Variant::NoSkip => cfg.skip = false,
            Variant::Full => {}
        }
        cfg
    }
}

#[derive(Debug, Clone)]
struct Ids {
    enc: [ParamId; 4],
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: Option<ParamId>,
    dec: [ParamId; 4],
    lstm: Option<[ParamId; 3]>,
    head: [ParamId; 4],
}

/// Windows of `T` consecutive encoded frames with the target of the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    n: usize,
    window: usize,
    target_dim: usize,
    frames: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    ends: Vec<usize>,
}

impl WindowDataset {
    pub fn new(n: usize, window: usize, target_dim: usize) -> Self {
        Self {
            n,
            window,
            target_dim,
            frames: Vec::new(),
            targets: Vec::new(),
            ends: Vec::new(),
        }
    }

    /// Appends one contiguous sequence; every offset with `T - 1` frames of
    /// history inside the sequence becomes a window.
    pub fn push_sequence(&mut self, frames: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<()> {
        if frames.len() != targets.len() {
            return Err(PoseNetError::Shape(format!(
                "{} frames but {} targets",
                frames.len(),
                targets.len()
            )));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != self.n * self.n) {
            return Err(PoseNetError::Shape(format!("frame of {} values for n = {}", f.len(), self.n)));
        }
        if let Some(t) = targets.iter().find(|t| t.len() != self.target_dim) {
            return Err(PoseNetError::Shape(format!(
                "target of {} values, expected {}",
                t.len(),
                self.target_dim
            )));
        }
        let start = self.frames.len();
        let len = frames.len();
        self.frames.extend(frames);
        self.targets.extend(targets);
        if len >= self.window {
            self.ends.extend(start + self.window - 1..start + len);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.n
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn frames(&self, i: usize) -> &[Vec<f64>] {
        let e = self.ends[i];
        &self.frames[e + 1 - self.window..=e]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[self.ends[i]]
    }

    /// Encoded matrix of the last frame of window `i`.
    pub fn last_frame(&self, i: usize) -> &[f64] {
        &self.frames[self.ends[i]]
    }

    /// Windows selected by index, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut out = self.clone();
        out.ends = keep.iter().map(|&i| self.ends[i]).collect();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Joints(JointPositions),
    Servo(Vec<f64>),
}

impl Prediction {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Prediction::Joints(j) => j.flatten(),
            Prediction::Servo(s) => s.clone(),
        }
    }
}

struct Cache {
    batch: usize,
    x: Tensor,
    e_pre: Tensor,
    e_act: Tensor,
    z1: Tensor,
    mha: Option<MhaCache>,
    flat: Tensor,
    d_pre: Tensor,
    d_act: Tensor,
    lstm: Option<LstmCache>,
    f: Tensor,
    h_pre: Tensor,
    h_act: Tensor,
    out: Tensor,
}

/// Output of a pose-basis head after decoding.
struct Decoded {
    joints: Vec<f64>,
    /// `d joints / d coeffs`, row-major `K x 3L`.
    jac: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub basis: Option<PoseBasis>,
    skeleton: HandSkeleton,
    ids: Ids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Windows drawn per epoch; `None` uses the whole training set.
    pub windows_per_epoch: Option<usize>,
    /// Cosine schedule from `lr` down to `lr * final_lr_scale`.
    pub final_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            clip_norm: 5.0,
            windows_per_epoch: None,
            final_lr_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-joint error in cm, or mean absolute servo error.
    pub mean: f64,
    pub max: f64,
    /// `(finger, mean error)` for the five fingers.
    pub per_finger: Vec<(String, f64)>,
    pub windows: usize,
}

fn linear_params(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<[ParamId; 2]> {
    let w = ps.add(format!("{name}.w"), glorot_uniform(fan_in, fan_out, rng))?;
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok([w, b])
}

fn mlp_params(
    ps: &mut ParamSet,
    name: &str,
    widths: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<[ParamId; 4]> {
    let [w0, b0] = linear_params(ps, &format!("{name}0"), widths[0], widths[1], rng)?;
    let [w1, b1] = linear_params(ps, &format!("{name}1"), widths[1], widths[2], rng)?;
    Ok([w0, b0, w1, b1])
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(&[a.rows(), ca + cb]);
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..ca].copy_from_slice(a.row(r));
        row[ca..].copy_from_slice(b.row(r));
    }
    out
}

fn split_cols(x: &Tensor, at: usize) -> (Tensor, Tensor) {
    let c = x.cols();
    let mut a = Tensor::zeros(&[x.rows(), at]);
    let mut b = Tensor::zeros(&[x.rows(), c - at]);
    for r in 0..x.rows() {
        a.row_mut(r).copy_from_slice(&x.row(r)[..at]);
        b.row_mut(r).copy_from_slice(&x.row(r)[at..]);
    }
    (a, b)
}

impl ModelState {
    /// Fresh model with the default skeleton. Pose-basis heads need a basis.
    pub fn new(config: ModelConfig, basis: Option<PoseBasis>) -> Result<Self> {
        Self::with_skeleton(config, basis, default_skeleton())
    }

    pub fn with_skeleton(config: ModelConfig, basis: Option<PoseBasis>, skeleton: HandSkeleton) -> Result<Self> {
        config.validate()?;
        let basis = match config.head {
            HeadKind::PoseBasis => {
                let b = basis.ok_or_else(|| PoseNetError::Config("pose-basis head needs a basis".into()))?;
                if b.k() != config.basis_size || b.dim() != skeleton.num_dofs() {
                    return Err(PoseNetError::Config(format!(
                        "basis is {}x{}, model needs {}x{}",
                        b.k(),
                        b.dim(),
                        config.basis_size,
                        skeleton.num_dofs()
                    )));
                }
                Some(b)
            }
            HeadKind::Servo => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let enc = mlp_params(&mut ps, "enc", [c.n_sensors, c.enc_hidden, c.enc_out], &mut rng)?;
        let (mut wq, mut wk, mut wv, mut wo) = (Vec::new(), Vec::new(), Vec::new(), None);
        if c.attention {
            for h in 0..c.heads {
                wq.push(ps.add(format!("attn.wq{h}"), glorot_uniform(c.enc_out, c.head_dim, &mut rng))?);
                wk.push(ps.add(format!("attn.wk{h}"), glorot_uniform(c.enc_out, c.head_dim, &mut rng))?);
                wv.push(ps.add(format!("attn.wv{h}"), glorot_uniform(c.enc_out, c.head_dim, &mut rng))?);
            }
            wo = Some(ps.add("attn.wo", glorot_uniform(c.heads * c.head_dim, c.attn_out, &mut rng))?);
        }
        let dec = mlp_params(&mut ps, "dec", [c.flatten_width(), c.dec_hidden, c.dec_out], &mut rng)?;
        let (lstm, head_in) = if c.sequence {
            let h = c.lstm_hidden;
            let wx = ps.add("lstm.wx", glorot_uniform(c.dec_out, 4 * h, &mut rng))?;
            let wh = ps.add("lstm.wh", glorot_uniform(h, 4 * h, &mut rng))?;
            let mut bias = Tensor::zeros(&[1, 4 * h]);
            bias.data_mut()[h..2 * h].fill(1.0);
            let b = ps.add("lstm.b", bias)?;
            (Some([wx, wh, b]), h)
        } else {
            (None, c.dec_out)
        };
        let head = mlp_params(&mut ps, "head", [head_in, c.head_hidden, c.outputs()], &mut rng)?;
        Ok(Self {
            config,
            params: ps,
            basis,
            skeleton,
            ids: Ids {
                enc,
                wq,
                wk,
                wv,
                wo,
                dec,
                lstm,
                head,
            },
        })
    }

    pub fn skeleton(&self) -> &HandSkeleton {
        &self.skeleton
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn target_dim(&self) -> usize {
        self.config.target_dim(&self.skeleton)
    }

    fn p(&self, id: ParamId) -> &Tensor {
        self.params.value(id)
    }

    fn mha_tensors(&self) -> Option<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
        self.ids.wo?;
        let get = |ids: &[ParamId]| ids.iter().map(|&i| self.p(i).clone()).collect::<Vec<_>>();
        Some((get(&self.ids.wq), get(&self.ids.wk), get(&self.ids.wv)))
    }

    fn check_matrix(&self, m: &[f64]) -> Result<()> {
        let n = self.config.n_sensors;
        if m.len() != n * n {
            return Err(PoseNetError::Shape(format!("matrix of {} values for n = {n}", m.len())));
        }
        Ok(())
    }

    /// `Z3` for one encoded `N x N` matrix.
    pub fn encode(&self, m: &[f64]) -> Result<Tensor> {
        self.check_matrix(m)?;
        let n = self.config.n_sensors;
        let x = Tensor::matrix(n, n, m.to_vec())?;
        let (z3, ..) = self.encode_rows(&x)?;
        Ok(z3)
    }

    /// Encoder over stacked frames: returns `(Z3, e_pre, e_act, Z1, mha)`.
    fn encode_rows(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor, Option<MhaCache>)> {
        let [w0, b0, w1, b1] = self.ids.enc;
        let e_pre = linear_forward(x, self.p(w0), self.p(b0))?;
        let e_act = relu(&e_pre);
        let z1 = linear_forward(&e_act, self.p(w1), self.p(b1))?;
        let (z3, mha) = match self.mha_tensors() {
            Some((wq, wk, wv)) => {
                let wo = self.p(self.ids.wo.expect("attention enabled"));
                let params = MhaParams { wq: &wq, wk: &wk, wv: &wv, wo };
                let (z2, cache) = mha_forward(&z1, self.config.n_sensors, &params)?;
                let z3 = if self.config.skip { concat_cols(&z1, &z2) } else { z2 };
                (z3, Some(cache))
            }
            None => (z1.clone(), None),
        };
        Ok((z3, e_pre, e_act, z1, mha))
    }

    /// Stacks windows into encoder rows ordered frame-major, then window,
    /// then sensor.
    fn batch_input(&self, windows: &[&[Vec<f64>]]) -> Result<Tensor> {
        let n = self.config.n_sensors;
        let t_total = self.config.window;
        let used = self.config.frames_used();
        let b = windows.len();
        let mut data = Vec::with_capacity(used * b * n * n);
        for t in t_total - used..t_total {
            for w in windows {
                if w.len() != t_total {
                    return Err(PoseNetError::WindowLength {
                        expected: t_total,
                        got: w.len(),
                    });
                }
                self.check_matrix(&w[t])?;
                data.extend_from_slice(&w[t]);
            }
        }
        Ok(Tensor::matrix(used * b * n, n, data)?)
    }

    fn forward_cached(&self, x: Tensor, batch: usize) -> Result<Cache> {
        let (z3, e_pre, e_act, z1, mha) = self.encode_rows(&x)?;
        let used = self.config.frames_used();
        let flat = z3.reshape(&[used * batch, self.config.flatten_width()])?;
        let [w0, b0, w1, b1] = self.ids.dec;
        let d_pre = linear_forward(&flat, self.p(w0), self.p(b0))?;
        let d_act = relu(&d_pre);
        let z4 = linear_forward(&d_act, self.p(w1), self.p(b1))?;
        let (f, lstm) = match self.ids.lstm {
            Some([wx, wh, b]) => {
                let xs: Vec<Tensor> = (0..used).map(|t| z4.slice_rows(t * batch, batch)).collect();
                let params = LstmParams { wx: self.p(wx), wh: self.p(wh), b: self.p(b) };
                let (h, cache) = lstm_sequence(&xs, &params)?;
                (h, Some(cache))
            }
            None => (z4, None),
        };
        let [w0, b0, w1, b1] = self.ids.head;
        let h_pre = linear_forward(&f, self.p(w0), self.p(b0))?;
        let h_act = relu(&h_pre);
        let out = linear_forward(&h_act, self.p(w1), self.p(b1))?;
        Ok(Cache {
            batch,
            x,
            e_pre,
            e_act,
            z1,
            mha,
            flat,
            d_pre,
            d_act,
            lstm,
            f,
            h_pre,
            h_act,
            out,
        })
    }

    /// Accumulates parameter gradients from `d out` and returns `d x`.
    fn backward(&mut self, cache: &Cache, dout: &Tensor) -> Result<Tensor> {
        let batch = cache.batch;
        let used = self.config.frames_used();

        let [w0, b0, w1, b1] = self.ids.head;
        let g1 = linear_backward(&cache.h_act, self.p(w1), dout)?;
        let dh = relu_backward(&cache.h_pre, &g1.dx);
        let g0 = linear_backward(&cache.f, self.p(w0), &dh)?;
        self.accumulate(&[(w1, g1.dw), (b1, g1.db), (w0, g0.dw), (b0, g0.db)])?;

        let dz4 = match (self.ids.lstm, &cache.lstm) {
            (Some([wx, wh, b]), Some(lc)) => {
                let params = LstmParams { wx: self.p(wx), wh: self.p(wh), b: self.p(b) };
                let g = lstm_sequence_backward(lc, &params, &g0.dx)?;
                let mut dz4 = Tensor::zeros(&[used * batch, self.config.dec_out]);
                let width = self.config.dec_out;
                for (t, dx) in g.dxs.iter().enumerate() {
                    dz4.data_mut()[t * batch * width..(t + 1) * batch * width].copy_from_slice(dx.data());
                }
                self.accumulate(&[(wx, g.dwx), (wh, g.dwh), (b, g.db)])?;
                dz4
            }
            _ => g0.dx,
        };

        let [w0, b0, w1, b1] = self.ids.dec;
        let g1 = linear_backward(&cache.d_act, self.p(w1), &dz4)?;
        let dd = relu_backward(&cache.d_pre, &g1.dx);
        let g0 = linear_backward(&cache.flat, self.p(w0), &dd)?;
        self.accumulate(&[(w1, g1.dw), (b1, g1.db), (w0, g0.dw), (b0, g0.db)])?;

        let rows = used * batch * self.config.n_sensors;
        let dz3 = g0.dx.reshape(&[rows, self.config.z3_width()])?;
        let dz1 = match (&cache.mha, self.mha_tensors()) {
            (Some(mc), Some((wq, wk, wv))) => {
                let (mut dz1, dz2) = if self.config.skip {
                    split_cols(&dz3, self.config.enc_out)
                } else {
                    (Tensor::zeros(cache.z1.shape()), dz3)
                };
                let wo_id = self.ids.wo.expect("attention enabled");
                let params = MhaParams { wq: &wq, wk: &wk, wv: &wv, wo: self.p(wo_id) };
                let g = mha_backward(mc, &params, &dz2)?;
                dz1.add_assign(&g.dz1)?;
                let mut grads = vec![(wo_id, g.dwo)];
                grads.extend(self.ids.wq.clone().into_iter().zip(g.dwq));
                grads.extend(self.ids.wk.clone().into_iter().zip(g.dwk));
                grads.extend(self.ids.wv.clone().into_iter().zip(g.dwv));
                self.accumulate(&grads)?;
                dz1
            }
            _ => dz3,
        };

        let [w0, b0, w1, b1] = self.ids.enc;
        let g1 = linear_backward(&cache.e_act, self.p(w1), &dz1)?;
        let de = relu_backward(&cache.e_pre, &g1.dx);
        let g0 = linear_backward(&cache.x, self.p(w0), &de)?;
        self.accumulate(&[(w1, g1.dw), (b1, g1.db), (w0, g0.dw), (b0, g0.db)])?;
        Ok(g0.dx)
    }

    fn accumulate(&mut self, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            self.params.grad_mut(*id).add_assign(g)?;
        }
        Ok(())
    }

    /// Coefficients to joints (flattened, meters); clamped angles get zero
    /// gradient.
    fn decode(&self, coeffs: &[f64], want_jac: bool) -> Result<Decoded> {
        let basis = self.basis.as_ref().expect("pose-basis head");
        let mut angles = basis.reconstruct(coeffs)?;
        let mut inside = vec![true; angles.len()];
        for ((a, dof), ok) in angles.0.iter_mut().zip(self.skeleton.dofs()).zip(&mut inside) {
            let c = dof.clamp(*a);
            *ok = c == *a;
            *a = c;
        }
        let (pose, jac) = forward_kinematics_with_jacobian(&self.skeleton, &angles)?;
        let joints = pose.flatten();
        let jac = want_jac.then(|| {
            let d = joints.len();
            let k = basis.k();
            let mut out = vec![0.0; k * d];
            for (dof, col) in jac.iter().enumerate() {
                if !inside[dof] {
                    continue;
                }
                for j in 0..k {
                    let c = basis.components[(j, dof)];
                    if c == 0.0 {
                        continue;
                    }
                    let row = &mut out[j * d..(j + 1) * d];
                    for (l, v) in col.iter().enumerate() {
                        row[3 * l] += c * v.x;
                        row[3 * l + 1] += c * v.y;
                        row[3 * l + 2] += c * v.z;
                    }
                }
            }
            out
        });
        Ok(Decoded { joints, jac })
    }

    /// Final predictions as flat vectors (joints in meters or servo values).
    fn head_outputs(&self, out: &Tensor, want_jac: bool) -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>)> {
        match self.config.head {
            HeadKind::Servo => Ok(((0..out.rows()).map(|r| out.row(r).to_vec()).collect(), vec![None; out.rows()])),
            HeadKind::PoseBasis => {
                let mut preds = Vec::with_capacity(out.rows());
                let mut jacs = Vec::with_capacity(out.rows());
                for r in 0..out.rows() {
                    let d = self.decode(out.row(r), want_jac)?;
                    preds.push(d.joints);
                    jacs.push(d.jac);
                }
                Ok((preds, jacs))
            }
        }
    }

    /// Predictions for a batch of windows.
    pub fn predict_batch(&self, windows: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch_input(windows)?;
        let cache = self.forward_cached(x, windows.len())?;
        Ok(self.head_outputs(&cache.out, false)?.0)
    }

    pub fn forward_window(&self, frames: &[Vec<f64>]) -> Result<Prediction> {
        let flat = self.predict_batch(&[frames])?.remove(0);
        Ok(match self.config.head {
            HeadKind::PoseBasis => Prediction::Joints(JointPositions::from_flat(&flat)),
            HeadKind::Servo => Prediction::Servo(flat),
        })
    }

    /// Predictions for every window of `ds`, in order.
    pub fn predict_dataset(&self, ds: &WindowDataset) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ds.len());
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(256) {
            let windows: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| ds.frames(i)).collect();
            out.extend(self.predict_batch(&windows)?);
        }
        Ok(out)
    }

    /// MSE over the batch; fills parameter gradients (after zeroing) and
    /// returns `(loss, d input rows)`.
    pub fn loss_and_gradients(&mut self, windows: &[&[Vec<f64>]], targets: &[&[f64]]) -> Result<(f64, Tensor)> {
        let x = self.batch_input(windows)?;
        self.loss_and_gradients_rows(x, targets)
    }

    fn loss_and_gradients_rows(&mut self, x: Tensor, targets: &[&[f64]]) -> Result<(f64, Tensor)> {
        let batch = targets.len();
        let dim = self.target_dim();
        if let Some(t) = targets.iter().find(|t| t.len() != dim) {
            return Err(PoseNetError::Shape(format!("target of {} values, expected {dim}", t.len())));
        }
        let cache = self.forward_cached(x, batch)?;
        let (preds, jacs) = self.head_outputs(&cache.out, true)?;
        let norm = (batch * dim) as f64;
        let mut loss = 0.0;
        let mut dout = Tensor::zeros(cache.out.shape());
        let k = cache.out.cols();
        for (r, (p, t)) in preds.iter().zip(targets).enumerate() {
            let dp: Vec<f64> = p.iter().zip(t.iter()).map(|(a, b)| 2.0 * (a - b) / norm).collect();
            loss += p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / norm;
            let row = dout.row_mut(r);
            match &jacs[r] {
                None => row.copy_from_slice(&dp),
                Some(jac) => {
                    for (j, v) in row.iter_mut().enumerate().take(k) {
                        *v = jac[j * dim..(j + 1) * dim].iter().zip(&dp).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(PoseNetError::NonFinite);
        }
        self.params.zero_grads();
        let dx = self.backward(&cache, &dout)?;
        Ok((loss, dx))
    }

    fn loss_rows(&self, x: Tensor, targets: &[Vec<f64>]) -> Result<f64> {
        let cache = self.forward_cached(x, targets.len())?;
        let (preds, _) = self.head_outputs(&cache.out, false)?;
        let norm = (targets.len() * self.target_dim()) as f64;
        Ok(preds
            .iter()
            .zip(targets)
            .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / norm)
    }

    /// Mean-squared error of the predictions over a dataset.
    pub fn dataset_loss(&self, ds: &WindowDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(PoseNetError::EmptyDataset);
        }
        let preds = self.predict_dataset(ds)?;
        let mut total = 0.0;
        for (i, p) in preds.iter().enumerate() {
            total += p.iter().zip(ds.target(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (ds.len() * ds.target_dim()) as f64)
    }

    pub fn check_dataset(&self, ds: &WindowDataset) -> Result<()> {
        if ds.n_sensors() != self.config.n_sensors || ds.window() != self.config.window {
            return Err(PoseNetError::Mismatch(format!(
                "dataset has n = {}, T = {}; model has n = {}, T = {}",
                ds.n_sensors(),
                ds.window(),
                self.config.n_sensors,
                self.config.window
            )));
        }
        if ds.target_dim() != self.target_dim() {
            return Err(PoseNetError::Mismatch(format!(
                "dataset targets have {} values, model predicts {}",
                ds.target_dim(),
                self.target_dim()
            )));
        }
        Ok(())
    }

    /// Minibatch Adam on the final-frame MSE.
    pub fn train(&mut self, train: &WindowDataset, val: Option<&WindowDataset>, cfg: &TrainConfig) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(PoseNetError::EmptyDataset);
        }
        self.check_dataset(train)?;
        if let Some(v) = val {
            self.check_dataset(v)?;
        }
        let mut adam = AdamState::new(&self.params, AdamConfig { lr: cfg.lr, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let per_epoch = cfg.windows_per_epoch.unwrap_or(train.len()).min(train.len()).max(1);
        let batch = cfg.batch_size.max(1);
        let steps_per_epoch = per_epoch.div_ceil(batch);
        let total_steps = (steps_per_epoch * cfg.epochs).max(1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut report = TrainReport::default();
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut seen = 0usize;
            for chunk in order[..per_epoch].chunks(batch) {
                let windows: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| train.frames(i)).collect();
                let targets: Vec<&[f64]> = chunk.iter().map(|&i| train.target(i)).collect();
                let (loss, _) = self.loss_and_gradients(&windows, &targets)?;
                sum += loss * chunk.len() as f64;
                seen += chunk.len();
                self.params.clip_grad_norm(cfg.clip_norm);
                let progress = step as f64 / total_steps as f64;
                let scale = cfg.final_lr_scale + (1.0 - cfg.final_lr_scale) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                adam.config.lr = cfg.lr * scale;
                adam_step(&mut self.params, &mut adam)?;
                step += 1;
            }
            report.train_loss.push(sum / seen as f64);
            if let Some(v) = val {
                report.val_loss.push(self.dataset_loss(v)?);
            }
        }
        Ok(report)
    }

    /// Joint error (cm) for pose-basis heads, absolute servo error otherwise.
    pub fn evaluate(&self, ds: &WindowDataset) -> Result<Metrics> {
        self.check_dataset(ds)?;
        let preds = self.predict_dataset(ds)?;
        let targets: Vec<&[f64]> = (0..ds.len()).map(|i| ds.target(i)).collect();
        evaluate_predictions(self.config.head, &self.skeleton, &preds, &targets)
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the binary checkpoint at `path` and the config next to it
    /// with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut extra = Vec::new();
        if let Some(b) = &self.basis {
            extra.push(("basis.mean".to_string(), Tensor::from_vec(&[b.dim()], b.mean.as_slice().to_vec())?));
            let mut comps = Vec::with_capacity(b.k() * b.dim());
            for r in 0..b.k() {
                comps.extend(b.components.row(r).iter());
            }
            extra.push(("basis.components".to_string(), Tensor::matrix(b.k(), b.dim(), comps)?));
            extra.push(("basis.variance".to_string(), Tensor::from_vec(&[b.k()], b.explained_variance.clone())?));
        }
        let mut entries: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        entries.extend(extra.iter().map(|(n, t)| (n.as_str(), t)));
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &entries)?;
        std::fs::write(Self::sidecar(path), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(Self::sidecar(path))?)?;
        let entries = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let basis = match config.head {
            HeadKind::PoseBasis => {
                let (mean, comps, var) = match (find("basis.mean"), find("basis.components"), find("basis.variance")) {
                    (Some(m), Some(c), Some(v)) => (m, c, v),
                    _ => return Err(PoseNetError::Mismatch("pose basis missing from checkpoint".into())),
                };
                Some(PoseBasis {
                    mean: nalgebra::DVector::from_column_slice(mean.data()),
                    components: nalgebra::DMatrix::from_row_slice(comps.rows(), comps.cols(), comps.data()),
                    explained_variance: var.data().to_vec(),
                })
            }
            HeadKind::Servo => None,
        };
        let mut model = Self::new(config, basis)?;
        model.params.load_values(&entries).map_err(|e| PoseNetError::Mismatch(e.to_string()))?;
        Ok(model)
    }

    /// Zeroes the last head layer, making every prediction the basis mean
    /// (or zero servo commands).
    pub fn zero_head_output(&mut self) {
        let [_, _, w1, b1] = self.ids.head;
        self.params.value_mut(w1).fill(0.0);
        self.params.value_mut(b1).fill(0.0);
    }
}

/// Finite-difference view of a model's batch loss over every parameter
/// and every input coordinate. The loss is multiplied by `scale`.
pub struct ModelGradCheck {
    pub model: ModelState,
    pub x: Tensor,
    pub targets: Vec<Vec<f64>>,
    pub scale: f64,
    offsets: Vec<usize>,
}

impl ModelGradCheck {
    pub fn new(model: ModelState, windows: &[&[Vec<f64>]], targets: &[&[f64]], scale: f64) -> Result<Self> {
        let x = model.batch_input(windows)?;
        let mut offsets = vec![0];
        for p in model.params.iter() {
            offsets.push(offsets.last().unwrap() + p.value.len());
        }
        Ok(Self {
            model,
            x,
            targets: targets.iter().map(|t| t.to_vec()).collect(),
            scale,
            offsets,
        })
    }

    fn n_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let p = self.offsets.partition_point(|&o| o <= i) - 1;
        (p, i - self.offsets[p])
    }
}

impl GradCheckable for ModelGradCheck {
    fn num_coords(&self) -> usize {
        self.n_params() + self.x.len()
    }

    fn coord(&self, i: usize) -> f64 {
        if i < self.n_params() {
            let (p, j) = self.locate(i);
            self.model.params.value(ParamId(p)).data()[j]
        } else {
            self.x.data()[i - self.n_params()]
        }
    }

    fn set_coord(&mut self, i: usize, value: f64) {
        if i < self.n_params() {
            let (p, j) = self.locate(i);
            self.model.params.value_mut(ParamId(p)).data_mut()[j] = value;
        } else {
            let n = self.n_params();
            self.x.data_mut()[i - n] = value;
        }
    }

    fn loss(&self) -> std::result::Result<f64, NnError> {
        self.model
            .loss_rows(self.x.clone(), &self.targets)
            .map(|l| l * self.scale)
            .map_err(|e| NnError::Shape { op: "model", detail: e.to_string() })
    }

    fn gradient(&self) -> std::result::Result<Vec<f64>, NnError> {
        let mut m = self.model.clone();
        let targets: Vec<&[f64]> = self.targets.iter().map(Vec::as_slice).collect();
        let (_, dx) = m
            .loss_and_gradients_rows(self.x.clone(), &targets)
            .map_err(|e| NnError::Shape { op: "model", detail: e.to_string() })?;
        let mut g: Vec<f64> = m.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect();
        g.extend_from_slice(dx.data());
        g.iter_mut().for_each(|v| *v *= self.scale);
        Ok(g)
    }
}

/// Metrics from flat predictions and targets.
pub fn evaluate_predictions(
    head: HeadKind,
    skeleton: &HandSkeleton,
    preds: &[Vec<f64>],
    targets: &[&[f64]],
) -> Result<Metrics> {
    if preds.len() != targets.len() {
        return Err(PoseNetError::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(PoseNetError::EmptyDataset);
    }
    let mut finger_sum = [0.0; 5];
    let mut finger_count = [0usize; 5];
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut max = 0.0f64;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(PoseNetError::Shape(format!("prediction of {} values, target {}", p.len(), t.len())));
        }
        match head {
            HeadKind::PoseBasis => {
                for l in 0..p.len() / 3 {
                    let e = (0..3).map(|a| (p[3 * l + a] - t[3 * l + a]).powi(2)).sum::<f64>().sqrt() * 100.0;
                    sum += e;
                    count += 1;
                    max = max.max(e);
                    if let Some(f) = skeleton.finger_of(l) {
                        finger_sum[f.index()] += e;
                        finger_count[f.index()] += 1;
                    }
                }
            }
            HeadKind::Servo => {
                for (s, (a, b)) in p.iter().zip(t.iter()).enumerate() {
                    let e = (a - b).abs();
                    sum += e;
                    count += 1;
                    max = max.max(e);
                    finger_sum[s] += e;
                    finger_count[s] += 1;
                }
            }
        }
    }
    let per_finger = Finger::ALL
        .iter()
        .map(|f| {
            let i = f.index();
            let m = if finger_count[i] > 0 { finger_sum[i] / finger_count[i] as f64 } else { 0.0 };
            (f.name().to_string(), m)
        })
        .collect();
    Ok(Metrics {
        mean: sum / count as f64,
        max,
        per_finger,
        windows: preds.len(),
    })
}

/// Cosine-similarity lookup over flattened distance matrices.
#[derive(Debug, Clone)]
pub struct NearestNeighbor {
    dim: usize,
    /// Unit-normalized keys, row-major.
    keys: Vec<f64>,
    poses: Vec<Vec<f64>>,
}

impl NearestNeighbor {
    pub fn new(matrices: &[DistanceMatrix], poses: Vec<Vec<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(PoseNetError::EmptyDataset);
        }
        if matrices.len() != poses.len() {
            return Err(PoseNetError::Shape(format!("{} matrices for {} poses", matrices.len(), poses.len())));
        }
        let dim = matrices[0].as_slice().len();
        let mut keys = Vec::with_capacity(dim * matrices.len());
        for (i, m) in matrices.iter().enumerate() {
            let v = m.as_slice();
            if v.len() != dim {
                return Err(PoseNetError::Shape(format!("entry {i} has {} values, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(PoseNetError::ZeroNorm(i));
            }
            keys.extend(v.iter().map(|x| x / norm));
        }
        Ok(Self { dim, keys, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Index of the most similar entry; ties go to the lowest index.
    pub fn nearest(&self, query: &DistanceMatrix) -> Result<usize> {
        Ok(self.nearest_batch(std::slice::from_ref(query))?[0])
    }

    pub fn query(&self, query: &DistanceMatrix) -> Result<&[f64]> {
        Ok(&self.poses[self.nearest(query)?])
    }

    pub fn nearest_batch(&self, queries: &[DistanceMatrix]) -> Result<Vec<usize>> {
        let mut qs = Vec::with_capacity(queries.len() * self.dim);
        for (i, q) in queries.iter().enumerate() {
            let v = q.as_slice();
            if v.len() != self.dim {
                return Err(PoseNetError::Shape(format!("query has {} values, expected {}", v.len(), self.dim)));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(PoseNetError::ZeroNorm(i));
            }
            qs.extend(v.iter().map(|x| x / norm));
        }
        let n = self.len();
        let block = 2048;
        let mut best = vec![(f64::NEG_INFINITY, 0usize); queries.len()];
        let mut sims = vec![0.0; queries.len() * block];
        for start in (0..n).step_by(block) {
            let cols = block.min(n - start);
            let keys = &self.keys[start * self.dim..(start + cols) * self.dim];
            let out = &mut sims[..queries.len() * cols];
            crate::nn::tensor::gemm_slices(queries.len(), self.dim, cols, &qs, false, keys, true, out, 0.0);
            for (q, b) in best.iter_mut().enumerate() {
                for (j, &s) in out[q * cols..(q + 1) * cols].iter().enumerate() {
                    if s > b.0 {
                        *b = (s, start + j);
                    }
                }
            }
        }
        Ok(best.into_iter().map(|(_, i)| i).collect())
    }

    pub fn pose(&self, i: usize) -> &[f64] {
        &self.poses[i]
    }
}

/// Keeps a frame unless some fingertip of the two poses differs by more
/// than `threshold` meters.
pub fn pseudo_gt_filter(
    pred: &JointPositions,
    vision: &JointPositions,
    skeleton: &HandSkeleton,
    threshold: f64,
) -> Result<bool> {
    let n = skeleton.num_landmarks();
    if pred.len() != n || vision.len() != n {
        return Err(PoseNetError::Shape(format!(
            "poses have {} and {} landmarks, skeleton has {n}",
            pred.len(),
            vision.len()
        )));
    }
    Ok(skeleton
        .fingertips()
        .into_iter()
        .all(|t| (pred.points[t] - vision.points[t]).norm() <= threshold))
}

/// Basis fitted on sampled joint-angle sequences.
pub fn fit_basis_from_sequences(seqs: &[Vec<JointAngles>], k: usize) -> Result<PoseBasis> {
    let rows: usize = seqs.iter().map(Vec::len).sum();
    let dim = seqs.first().and_then(|s| s.first()).map(JointAngles::len).ok_or(PoseNetError::EmptyDataset)?;
    let mut data = Vec::with_capacity(rows * dim);
    for a in seqs.iter().flatten() {
        data.extend_from_slice(a.as_slice());
    }
    Ok(crate::kinematics::fit_pose_basis(&nalgebra::DMatrix::from_row_slice(rows, dim, &data), k)?)
}
