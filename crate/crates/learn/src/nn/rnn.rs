//! Single-layer LSTM / GRU sequence classifiers.
//!
//! Gates use the logistic sigmoid and the candidate state and cell output use
//! tanh. The final hidden state feeds a dense softmax layer. During training a
//! dropout mask is drawn once per sequence for the inputs and once for the
//! recurrent state and reused at every step; at inference no dropout is
//! applied, so prediction is deterministic.
//!
//! Parameter layout (`G` gates, `H` hidden units, `D` inputs, `K` classes):
//! `Wx[G*H x D] | Wh[G*H x H] | b[G*H] | Wo[K x H] | bo[K]`.
//! LSTM gate order is input, forget, candidate, output; GRU gate order is
//! update, reset, candidate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, fit_loop, glorot, softmax_in_place, Schedule, TrainHistory, Trainable};
use crate::error::{LearnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub cell: CellKind,
    pub hidden: usize,
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_dropout")]
    pub recurrent_dropout: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl RnnParams {
    pub fn new(cell: CellKind, hidden: usize, batch_size: usize) -> Self {
        Self {
            cell,
            hidden,
            batch_size,
            dropout: default_dropout(),
            recurrent_dropout: default_dropout(),
            schedule: Schedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rnn {
    cell: CellKind,
    input_dim: usize,
    hidden: usize,
    n_classes: usize,
    dropout: f64,
    recurrent_dropout: f64,
    params: Vec<f64>,
}

struct Offsets {
    wx: usize,
    wh: usize,
    b: usize,
    wo: usize,
    bo: usize,
    end: usize,
}

struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    h_masked: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations, `G*H`.
    gates: Vec<f64>,
    /// LSTM: tanh(c_t). GRU: reset-gated masked state `r * h~`.
    aux: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Rnn {
    pub fn new(cell: CellKind, input_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut net = Self {
            cell,
            input_dim,
            hidden,
            n_classes,
            dropout: 0.0,
            recurrent_dropout: 0.0,
            params: Vec::new(),
        };
        let off = net.offsets();
        net.params = vec![0.0; off.end];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gh = cell.gates() * hidden;
        glorot(&mut rng, input_dim, gh, &mut net.params[off.wx..off.wh]);
        glorot(&mut rng, hidden, gh, &mut net.params[off.wh..off.b]);
        glorot(&mut rng, hidden, n_classes, &mut net.params[off.wo..off.bo]);
        if cell == CellKind::Lstm {
            net.params[off.b + hidden..off.b + 2 * hidden]
                .iter_mut()
                .for_each(|b| *b = 1.0);
        }
        net
    }

    fn offsets(&self) -> Offsets {
        let gh = self.cell.gates() * self.hidden;
        let wx = 0;
        let wh = wx + gh * self.input_dim;
        let b = wh + gh * self.hidden;
        let wo = b + gh;
        let bo = wo + self.n_classes * self.hidden;
        Offsets {
            wx,
            wh,
            b,
            wo,
            bo,
            end: bo + self.n_classes,
        }
    }

    pub fn fit(
        x: &[Vec<Vec<f64>>],
        y: &[usize],
        n_classes: usize,
        validation: Option<(&[Vec<Vec<f64>>], &[usize])>,
        params: &RnnParams,
        seed: u64,
    ) -> Result<(Self, TrainHistory)> {
        let (steps, dim) = check_sequences(x, y, n_classes)?;
        if let Some((vx, vy)) = validation {
            if !vx.is_empty() {
                let (vs, vd) = check_sequences(vx, vy, n_classes)?;
                if vs != steps || vd != dim {
                    return Err(LearnError::RaggedSequences {
                        index: 0,
                        expected: steps,
                        got: vs,
                    });
                }
            }
        }
        if params.hidden == 0 {
            return Err(LearnError::InvalidHyperparameter("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&params.dropout) || !(0.0..1.0).contains(&params.recurrent_dropout) {
            return Err(LearnError::InvalidHyperparameter("dropout must lie in [0, 1)".into()));
        }
        let validation = validation.filter(|(vx, _)| !vx.is_empty());
        let mut net = Self::new(params.cell, dim, params.hidden, n_classes, seed);
        net.dropout = params.dropout;
        net.recurrent_dropout = params.recurrent_dropout;
        let stochastic = params.dropout > 0.0 || params.recurrent_dropout > 0.0;
        let history = fit_loop(
            &mut net,
            x,
            y,
            validation,
            params.batch_size,
            &params.schedule,
            seed,
            stochastic,
        )?;
        Ok((net, history))
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    pub fn cell(&self) -> CellKind {
        self.cell
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn masks(&self, rng: Option<&mut ChaCha8Rng>) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let Some(rng) = rng else {
            return (None, None);
        };
        let mut draw = |n: usize, p: f64| {
            (p > 0.0).then(|| {
                (0..n)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect::<Vec<f64>>()
            })
        };
        let mx = draw(self.input_dim, self.dropout);
        let mh = draw(self.hidden, self.recurrent_dropout);
        (mx, mh)
    }

    fn run(&self, seq: &[Vec<f64>], mx: Option<&[f64]>, mh: Option<&[f64]>) -> (Vec<Step>, Vec<f64>) {
        let h = self.hidden;
        let off = self.offsets();
        let gh = self.cell.gates() * h;
        let wx = &self.params[off.wx..off.wh];
        let wh = &self.params[off.wh..off.b];
        let bias = &self.params[off.b..off.wo];
        let mut state = vec![0.0; h];
        let mut cell = vec![0.0; h];
        let mut steps = Vec::with_capacity(seq.len());
        for xt in seq {
            let x: Vec<f64> = match mx {
                Some(m) => xt.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => xt.clone(),
            };
            let h_masked: Vec<f64> = match mh {
                Some(m) => state.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => state.clone(),
            };
            let mut pre = bias.to_vec();
            matvec_add(&mut pre, wx, &x);
            let (gates, aux, new_state, new_cell) = match self.cell {
                CellKind::Lstm => {
                    matvec_add(&mut pre, wh, &h_masked);
                    let mut g = vec![0.0; gh];
                    for u in 0..h {
                        g[u] = sigmoid(pre[u]);
                        g[h + u] = sigmoid(pre[h + u]);
                        g[2 * h + u] = pre[2 * h + u].tanh();
                        g[3 * h + u] = sigmoid(pre[3 * h + u]);
                    }
                    let c: Vec<f64> = (0..h).map(|u| g[h + u] * cell[u] + g[u] * g[2 * h + u]).collect();
                    let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
                    let hn: Vec<f64> = (0..h).map(|u| g[3 * h + u] * tc[u]).collect();
                    (g, tc, hn, c)
                }
                CellKind::Gru => {
                    // Update and reset gates see the full recurrent input.
                    matvec_add(&mut pre[..2 * h], &wh[..2 * h * h], &h_masked);
                    let mut g = vec![0.0; gh];
                    for u in 0..2 * h {
                        g[u] = sigmoid(pre[u]);
                    }
                    let rh: Vec<f64> = (0..h).map(|u| g[h + u] * h_masked[u]).collect();
                    matvec_add(&mut pre[2 * h..], &wh[2 * h * h..], &rh);
                    for u in 0..h {
                        g[2 * h + u] = pre[2 * h + u].tanh();
                    }
                    let hn: Vec<f64> = (0..h)
                        .map(|u| g[u] * state[u] + (1.0 - g[u]) * g[2 * h + u])
                        .collect();
                    (g, rh, hn, Vec::new())
                }
            };
            steps.push(Step {
                x,
                h_prev: std::mem::replace(&mut state, new_state),
                h_masked,
                c_prev: std::mem::replace(&mut cell, new_cell),
                gates,
                aux,
            });
        }
        (steps, state)
    }

    fn output(&self, state: &[f64]) -> Vec<f64> {
        let off = self.offsets();
        let mut logits = self.params[off.bo..off.end].to_vec();
        matvec_add(&mut logits, &self.params[off.wo..off.bo], state);
        softmax_in_place(&mut logits);
        logits
    }

    pub fn predict_proba(&self, seq: &[Vec<f64>]) -> Vec<f64> {
        let (_, state) = self.run(seq, None, None);
        self.output(&state)
    }

    pub fn loss(&self, x: &[Vec<Vec<f64>>], y: &[usize]) -> f64 {
        super::mean_loss(self, x, y)
    }

    /// Mean cross-entropy and gradient with dropout disabled.
    pub fn loss_and_gradient(&self, x: &[Vec<Vec<f64>>], y: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (s, &l) in x.iter().zip(y) {
            loss += self.backprop(s, l, &mut grad, None, None);
        }
        let n = x.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    fn backprop(
        &self,
        seq: &[Vec<f64>],
        label: usize,
        grad: &mut [f64],
        mx: Option<&[f64]>,
        mh: Option<&[f64]>,
    ) -> f64 {
        let h = self.hidden;
        let d = self.input_dim;
        let off = self.offsets();
        let (steps, state) = self.run(seq, mx, mh);
        let probs = self.output(&state);
        let loss = cross_entropy(&probs, label);

        let mut dlogits = probs;
        dlogits[label] -= 1.0;
        let wo = &self.params[off.wo..off.bo];
        let mut dh = vec![0.0; h];
        for (k, dl) in dlogits.iter().enumerate() {
            grad[off.bo + k] += dl;
            for u in 0..h {
                grad[off.wo + k * h + u] += dl * state[u];
                dh[u] += dl * wo[k * h + u];
            }
        }

        let wh = &self.params[off.wh..off.b];
        let mut dc = vec![0.0; h];
        let mut da = vec![0.0; self.cell.gates() * h];
        for step in steps.iter().rev() {
            let g = &step.gates;
            let mut dh_masked = vec![0.0; h];
            let mut dh_prev = vec![0.0; h];
            match self.cell {
                CellKind::Lstm => {
                    let tc = &step.aux;
                    for u in 0..h {
                        let (i, f, c_hat, o) = (g[u], g[h + u], g[2 * h + u], g[3 * h + u]);
                        let d_o = dh[u] * tc[u];
                        let dcu = dc[u] + dh[u] * o * (1.0 - tc[u] * tc[u]);
                        da[u] = dcu * c_hat * i * (1.0 - i);
                        da[h + u] = dcu * step.c_prev[u] * f * (1.0 - f);
                        da[2 * h + u] = dcu * i * (1.0 - c_hat * c_hat);
                        da[3 * h + u] = d_o * o * (1.0 - o);
                        dc[u] = dcu * f;
                    }
                    for (r, dar) in da.iter().enumerate() {
                        let row = &wh[r * h..(r + 1) * h];
                        let grow = &mut grad[off.wh + r * h..off.wh + (r + 1) * h];
                        for u in 0..h {
                            grow[u] += dar * step.h_masked[u];
                            dh_masked[u] += dar * row[u];
                        }
                    }
                }
                CellKind::Gru => {
                    let rh = &step.aux;
                    for u in 0..h {
                        let (z, n) = (g[u], g[2 * h + u]);
                        dh_prev[u] += dh[u] * z;
                        da[u] = dh[u] * (step.h_prev[u] - n) * z * (1.0 - z);
                        da[2 * h + u] = dh[u] * (1.0 - z) * (1.0 - n * n);
                    }
                    // candidate: pre_n += Un (r * h~)
                    let mut d_rh = vec![0.0; h];
                    for o in 0..h {
                        let dan = da[2 * h + o];
                        let r_idx = 2 * h + o;
                        let row = &wh[r_idx * h..(r_idx + 1) * h];
                        let grow = &mut grad[off.wh + r_idx * h..off.wh + (r_idx + 1) * h];
                        for u in 0..h {
                            grow[u] += dan * rh[u];
                            d_rh[u] += dan * row[u];
                        }
                    }
                    for u in 0..h {
                        let r = g[h + u];
                        da[h + u] = d_rh[u] * step.h_masked[u] * r * (1.0 - r);
                        dh_masked[u] += d_rh[u] * r;
                    }
                    for r_idx in 0..2 * h {
                        let dar = da[r_idx];
                        let row = &wh[r_idx * h..(r_idx + 1) * h];
                        let grow = &mut grad[off.wh + r_idx * h..off.wh + (r_idx + 1) * h];
                        for u in 0..h {
                            grow[u] += dar * step.h_masked[u];
                            dh_masked[u] += dar * row[u];
                        }
                    }
                }
            }
            for (r, dar) in da.iter().enumerate() {
                grad[off.b + r] += dar;
                let grow = &mut grad[off.wx + r * d..off.wx + (r + 1) * d];
                for (gw, xv) in grow.iter_mut().zip(&step.x) {
                    *gw += dar * xv;
                }
            }
            for u in 0..h {
                let m = mh.map_or(1.0, |m| m[u]);
                dh_prev[u] += dh_masked[u] * m;
            }
            dh = dh_prev;
        }
        loss
    }
}

fn check_sequences(x: &[Vec<Vec<f64>>], y: &[usize], n_classes: usize) -> Result<(usize, usize)> {
    if x.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(LearnError::LengthMismatch {
            features: x.len(),
            labels: y.len(),
        });
    }
    let steps = x[0].len();
    if steps == 0 {
        return Err(LearnError::RaggedSequences {
            index: 0,
            expected: 1,
            got: 0,
        });
    }
    let dim = x[0][0].len();
    for (index, seq) in x.iter().enumerate() {
        if seq.len() != steps {
            return Err(LearnError::RaggedSequences {
                index,
                expected: steps,
                got: seq.len(),
            });
        }
        if let Some(row) = seq.iter().find(|r| r.len() != dim) {
            return Err(LearnError::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
    }
    if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
        return Err(LearnError::LabelOutOfRange { label, n_classes });
    }
    Ok((steps, dim))
}

impl Trainable for Rnn {
    type Sample = Vec<Vec<f64>>;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate(
        &self,
        seq: &Vec<Vec<f64>>,
        label: usize,
        grad: &mut [f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> f64 {
        let (mx, mh) = self.masks(rng);
        self.backprop(seq, label, grad, mx.as_deref(), mh.as_deref())
    }

    fn sample_loss(&self, seq: &Vec<Vec<f64>>, label: usize) -> f64 {
        cross_entropy(&self.predict_proba(seq), label)
    }
}
