//! Batched LSTM cell with backpropagation through time.
//!
//! Gate blocks in the packed `4H` weight columns are ordered
//! input, forget, candidate, output.

use super::tensor::{gemm, matmul, Tensor};
use super::{NnError, Result};

#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a> {
    /// `in x 4H`
    pub wx: &'a Tensor,
    /// `H x 4H`
    pub wh: &'a Tensor,
    /// `1 x 4H`
    pub b: &'a Tensor,
}

impl LstmParams<'_> {
    pub fn hidden(&self) -> usize {
        self.wh.rows()
    }

    fn validate(&self, input: usize) -> Result<usize> {
        let h = self.hidden();
        if self.wx.rows() != input || self.wx.cols() != 4 * h || self.wh.cols() != 4 * h || self.b.len() != 4 * h {
            return Err(NnError::Shape {
                op: "lstm",
                detail: format!(
                    "W_x {:?}, W_h {:?}, b {:?} for input width {input}",
                    self.wx.shape(),
                    self.wh.shape(),
                    self.b.shape()
                ),
            });
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Tensor,
    prev: LstmState,
    /// Activated gates `[i | f | g | o]`, `B x 4H`.
    gates: Tensor,
    tanh_c: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn lstm_step(x: &Tensor, state: &LstmState, params: &LstmParams<'_>) -> Result<(LstmState, LstmStepCache)> {
    let hdim = params.validate(x.cols())?;
    let batch = x.rows();
    if state.h.shape() != [batch, hdim] || state.c.shape() != [batch, hdim] {
        return Err(NnError::Shape {
            op: "lstm_step",
            detail: format!("state {:?} for batch {batch}, hidden {hdim}", state.h.shape()),
        });
    }
    let mut gates = Tensor::zeros(&[batch, 4 * hdim]);
    for r in 0..batch {
        gates.row_mut(r).copy_from_slice(params.b.data());
    }
    gemm(x, false, params.wx, false, &mut gates, 1.0)?;
    gemm(&state.h, false, params.wh, false, &mut gates, 1.0)?;
    let mut next = LstmState::zeros(batch, hdim);
    let mut tanh_c = Tensor::zeros(&[batch, hdim]);
    for r in 0..batch {
        let g = gates.row_mut(r);
        for j in 0..hdim {
            g[j] = sigmoid(g[j]);
            g[hdim + j] = sigmoid(g[hdim + j]);
            g[2 * hdim + j] = g[2 * hdim + j].tanh();
            g[3 * hdim + j] = sigmoid(g[3 * hdim + j]);
        }
        let g = gates.row(r);
        let cp = state.c.row(r);
        let (crow, trow) = (next.c.row_mut(r), tanh_c.row_mut(r));
        for j in 0..hdim {
            crow[j] = g[hdim + j] * cp[j] + g[j] * g[2 * hdim + j];
            trow[j] = crow[j].tanh();
        }
        let hrow = next.h.row_mut(r);
        for j in 0..hdim {
            hrow[j] = g[3 * hdim + j] * tanh_c.data()[r * hdim + j];
        }
    }
    let cache = LstmStepCache {
        x: x.clone(),
        prev: state.clone(),
        gates,
        tanh_c,
    };
    Ok((next, cache))
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStepCache>,
}

impl LstmCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the cell from a zero state and returns the final hidden state.
pub fn lstm_sequence(xs: &[Tensor], params: &LstmParams<'_>) -> Result<(Tensor, LstmCache)> {
    let first = xs.first().ok_or(NnError::Shape {
        op: "lstm_sequence",
        detail: "empty sequence".into(),
    })?;
    let mut state = LstmState::zeros(first.rows(), params.hidden());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = lstm_step(x, &state, params)?;
        steps.push(cache);
        state = next;
    }
    Ok((state.h, LstmCache { steps }))
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub dxs: Vec<Tensor>,
    pub dwx: Tensor,
    pub dwh: Tensor,
    pub db: Tensor,
}

/// Backpropagation through time from a gradient on the final hidden state.
pub fn lstm_sequence_backward(cache: &LstmCache, params: &LstmParams<'_>, dfinal: &Tensor) -> Result<LstmGrads> {
    let hdim = params.hidden();
    let mut dwx = Tensor::zeros(params.wx.shape());
    let mut dwh = Tensor::zeros(params.wh.shape());
    let mut db = Tensor::zeros(&[1, 4 * hdim]);
    let batch = dfinal.rows();
    if dfinal.cols() != hdim {
        return Err(NnError::Shape {
            op: "lstm_sequence_backward",
            detail: format!("dF {:?}", dfinal.shape()),
        });
    }
    let mut dh = dfinal.clone();
    let mut dc = Tensor::zeros(&[batch, hdim]);
    let mut dxs = vec![Tensor::zeros(&[0]); cache.steps.len()];
    let mut dpre = Tensor::zeros(&[batch, 4 * hdim]);
    for (t, step) in cache.steps.iter().enumerate().rev() {
        for r in 0..batch {
            let g = step.gates.row(r);
            let tc = step.tanh_c.row(r);
            let cp = step.prev.c.row(r);
            let dhr = &dh.data()[r * hdim..(r + 1) * hdim];
            let dcr = &mut dc.data_mut()[r * hdim..(r + 1) * hdim];
            let dp = &mut dpre.data_mut()[r * 4 * hdim..(r + 1) * 4 * hdim];
            for j in 0..hdim {
                let (i, f, gg, o) = (g[j], g[hdim + j], g[2 * hdim + j], g[3 * hdim + j]);
                let dct = dcr[j] + dhr[j] * o * (1.0 - tc[j] * tc[j]);
                dp[j] = dct * gg * i * (1.0 - i);
                dp[hdim + j] = dct * cp[j] * f * (1.0 - f);
                dp[2 * hdim + j] = dct * i * (1.0 - gg * gg);
                dp[3 * hdim + j] = dhr[j] * tc[j] * o * (1.0 - o);
                dcr[j] = dct * f;
            }
        }
        gemm(&step.x, true, &dpre, false, &mut dwx, 1.0)?;
        gemm(&step.prev.h, true, &dpre, false, &mut dwh, 1.0)?;
        for r in 0..batch {
            for (a, v) in db.data_mut().iter_mut().zip(dpre.row(r)) {
                *a += v;
            }
        }
        dxs[t] = matmul(&dpre, false, params.wx, true)?;
        dh = matmul(&dpre, false, params.wh, true)?;
    }
    Ok(LstmGrads { dxs, dwx, dwh, db })
}
