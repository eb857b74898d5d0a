use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::{math, Error, Graph, Result, Tensor, Var};

/// Gate order used for parameter names and iteration: forget, input,
/// candidate, output.
pub const GATE_NAMES: [&str; 4] = ["f", "i", "c", "a"];

/// One LSTM layer. Every gate matrix is (hidden, hidden + input) and acts on
/// the concatenation `[h_{t-1}, x_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_a: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_a: Tensor,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        let w = || Tensor::zeros(&[hidden, hidden + input]).map(Tensor::with_grad);
        let b = || Tensor::zeros(&[hidden]).map(Tensor::with_grad);
        Ok(LstmLayerParams {
            w_f: w()?,
            w_i: w()?,
            w_c: w()?,
            w_a: w()?,
            b_f: b()?,
            b_i: b()?,
            b_c: b()?,
            b_a: b()?,
        })
    }

    /// Weights uniform in [-1/sqrt(hidden), 1/sqrt(hidden)], biases zero
    /// except the forget bias, which starts at +1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(input, hidden)?;
        let bound = 1.0 / math::sqrt(hidden as f64);
        for w in [&mut p.w_f, &mut p.w_i, &mut p.w_c, &mut p.w_a] {
            w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        p.b_f.data_mut().iter_mut().for_each(|v| *v = 1.0);
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_f.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.shape()[1] - self.hidden_dim()
    }

    /// `[w_f, w_i, w_c, w_a, b_f, b_i, b_c, b_a]`
    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_f, &self.w_i, &self.w_c, &self.w_a, &self.b_f, &self.b_i, &self.b_c, &self.b_a]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_c,
            &mut self.w_a,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_a,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> LstmLayerVars {
        let [w_f, w_i, w_c, w_a, b_f, b_i, b_c, b_a] = self.tensors().map(|t| g.param(t));
        LstmLayerVars {
            w_f,
            w_i,
            w_c,
            w_a,
            b_f,
            b_i,
            b_c,
            b_a,
        }
    }
}

/// Stacked LSTM whose hidden size equals the squeezed channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayerParams>,
}

impl LstmParams {
    pub fn zeros(channels: usize, num_layers: usize) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|_| LstmLayerParams::zeros(channels, channels))
            .collect::<Result<_>>()?;
        Ok(LstmParams { layers })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, num_layers: usize, rng: &mut R) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|_| LstmLayerParams::init(channels, channels, rng))
            .collect::<Result<_>>()?;
        Ok(LstmParams { layers })
    }

    pub fn bind(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut())
    }
}

/// Graph handles of one layer's parameters, in the order of
/// [`LstmLayerParams::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayerVars {
    pub w_f: Var,
    pub w_i: Var,
    pub w_c: Var,
    pub w_a: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_c: Var,
    pub b_a: Var,
}

impl LstmLayerVars {
    pub fn from_slice(v: &[Var]) -> Self {
        LstmLayerVars {
            w_f: v[0],
            w_i: v[1],
            w_c: v[2],
            w_a: v[3],
            b_f: v[4],
            b_i: v[5],
            b_c: v[6],
            b_a: v[7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmVars {
    pub layers: Vec<LstmLayerVars>,
}

/// Hidden and cell state of one layer for a batch: both (N, hidden).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Result<Self> {
        let h = g.constant(&[batch, hidden], vec![0.0; batch * hidden])?;
        let c = g.constant(&[batch, hidden], vec![0.0; batch * hidden])?;
        Ok(LstmState { h, c })
    }
}

/// Gate matrices transposed once so a sequence reuses them at every step.
struct Prepared {
    wt: [Var; 4],
    b: [Var; 4],
    input: usize,
    hidden: usize,
}

fn prepare(g: &mut Graph, layer: &LstmLayerVars) -> Result<Prepared> {
    let ws = g.shape(layer.w_f).to_vec();
    if ws.len() != 2 || ws[1] <= ws[0] {
        return Err(Error::shape("lstm", "weights", format!("gate matrix {:?} must be (C, C + C_in)", ws)));
    }
    let hidden = ws[0];
    for (w, name) in [(layer.w_i, "w_i"), (layer.w_c, "w_c"), (layer.w_a, "w_a")] {
        if g.shape(w) != ws.as_slice() {
            return Err(Error::shape("lstm", name, format!("{:?} vs w_f {:?}", g.shape(w), ws)));
        }
    }
    for b in [layer.b_f, layer.b_i, layer.b_c, layer.b_a] {
        if g.shape(b) != [hidden] {
            return Err(Error::shape("lstm", "bias", format!("{:?}, expected [{}]", g.shape(b), hidden)));
        }
    }
    let wt = [
        g.transpose(layer.w_f)?,
        g.transpose(layer.w_i)?,
        g.transpose(layer.w_c)?,
        g.transpose(layer.w_a)?,
    ];
    Ok(Prepared {
        wt,
        b: [layer.b_f, layer.b_i, layer.b_c, layer.b_a],
        input: ws[1] - hidden,
        hidden,
    })
}

fn step(g: &mut Graph, x: Var, state: &LstmState, p: &Prepared) -> Result<LstmState> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != p.input {
        return Err(Error::shape("lstm_cell_step", "input", format!("x_t {:?}, layer expects {} inputs", xs, p.input)));
    }
    if g.shape(state.h) != [xs[0], p.hidden] || g.shape(state.c) != [xs[0], p.hidden] {
        return Err(Error::shape("lstm_cell_step", "state", format!("state must be ({}, {})", xs[0], p.hidden)));
    }
    let hx = g.concat_last(state.h, x)?;
    let mut pre = [hx; 4];
    for k in 0..4 {
        let m = g.matmul(hx, p.wt[k])?;
        pre[k] = g.add_bias(m, p.b[k])?;
    }
    let f = g.sigmoid(pre[0]);
    let i = g.sigmoid(pre[1]);
    let cand = g.tanh(pre[2]);
    let o = g.sigmoid(pre[3]);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// One LSTM step for a batch of inputs `x_t` (N, C_in):
///
/// ```text
/// f = sigmoid(W_f [h, x] + b_f)    i = sigmoid(W_i [h, x] + b_i)
/// c~ = tanh(W_C [h, x] + b_C)      c' = f * c + i * c~
/// a = sigmoid(W_a [h, x] + b_a)    h' = a * tanh(c')
/// ```
pub fn lstm_cell_step(g: &mut Graph, x_t: Var, state: &LstmState, layer: &LstmLayerVars) -> Result<LstmState> {
    let p = prepare(g, layer)?;
    step(g, x_t, state, &p)
}

/// Runs the stacked LSTM over an (N, T, C) embedding from zero state and
/// returns the last layer's hidden sequence, (N, T, hidden).
pub fn recursion(g: &mut Graph, embedding: Var, lstm: &LstmVars) -> Result<Var> {
    let es = g.shape(embedding).to_vec();
    if es.len() != 3 {
        return Err(Error::shape("recursion", "embedding rank", format!("expected (N,T,C), got {:?}", es)));
    }
    if lstm.layers.is_empty() {
        return Err(Error::Empty("recursion layers"));
    }
    let (n, t) = (es[0], es[1]);
    let mut seq: Vec<Var> = (0..t).map(|ti| g.slice_time(embedding, ti)).collect::<Result<_>>()?;
    for layer in &lstm.layers {
        let p = prepare(g, layer)?;
        let mut state = LstmState::zeros(g, n, p.hidden)?;
        let mut out = Vec::with_capacity(t);
        for &x in &seq {
            state = step(g, x, &state, &p)?;
            out.push(state.h);
        }
        seq = out;
    }
    g.stack_time(&seq)
}
