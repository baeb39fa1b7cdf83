//! Linear, GRU, LSTM and the frequency-then-time LSTM bottleneck.
//! Parameter names and gate orders follow PyTorch (`r, z, n` for GRU,
//! `i, f, g, o` for LSTM) so exported checkpoints bind without reshuffling.

use serde_json::json;

use super::params::{Binder, Init};
use super::{expect_shape, matvec, sigmoid, Frame, Layer};
use crate::error::{Error, Result};

/// `y = W x + b` applied independently at every bin.
#[derive(Debug, Clone)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    /// `[output][input]`
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Linear {
    pub fn new(b: &mut Binder, name: &str, input: usize, output: usize, bins: usize) -> Self {
        let init = Init::fan_in(input);
        let w = b.take(&format!("{name}.weight"), &[output, input], init);
        let bias = b.take(&format!("{name}.bias"), &[output], init);
        b.layer(name, "Linear", json!({}), (bins, input), (bins, output));
        Self {
            input,
            output,
            w,
            b: bias,
        }
    }

    pub fn from_weights(input: usize, output: usize, w: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if w.len() != input * output || b.len() != output {
            return Err(Error::Contract("linear weight or bias size mismatch".into()));
        }
        Ok(Self { input, output, w, b })
    }

    #[inline]
    pub fn apply(&self, x: &[f32], y: &mut [f32]) {
        matvec(&self.w, &self.b, x, y);
    }
}

impl Layer for Linear {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        expect_shape(x, x.bins, self.input, "linear")?;
        let mut y = Frame::zeros(x.bins, self.output);
        for f in 0..x.bins {
            self.apply(x.at(f), y.at_mut(f));
        }
        Ok(y)
    }
}

/// Gate pre-activations `b_ih + b_hh + W_ih x + W_hh h` for `rows` gates.
#[derive(Debug, Clone)]
struct Recurrent {
    input: usize,
    hidden: usize,
    w_ih: Vec<f32>,
    w_hh: Vec<f32>,
    b_ih: Vec<f32>,
    b_hh: Vec<f32>,
}

impl Recurrent {
    fn bind(b: &mut Binder, name: &str, suffix: &str, gates: usize, input: usize, hidden: usize) -> Self {
        let init = Init::fan_in(hidden);
        let rows = gates * hidden;
        Self {
            input,
            hidden,
            w_ih: b.take(&format!("{name}.weight_ih_l0{suffix}"), &[rows, input], init),
            w_hh: b.take(&format!("{name}.weight_hh_l0{suffix}"), &[rows, hidden], init),
            b_ih: b.take(&format!("{name}.bias_ih_l0{suffix}"), &[rows], init),
            b_hh: b.take(&format!("{name}.bias_hh_l0{suffix}"), &[rows], init),
        }
    }

    fn from_weights(
        gates: usize,
        input: usize,
        hidden: usize,
        w_ih: Vec<f32>,
        w_hh: Vec<f32>,
        b_ih: Vec<f32>,
        b_hh: Vec<f32>,
    ) -> Result<Self> {
        let rows = gates * hidden;
        if w_ih.len() != rows * input || w_hh.len() != rows * hidden || b_ih.len() != rows || b_hh.len() != rows {
            return Err(Error::Contract("recurrent weight size mismatch".into()));
        }
        Ok(Self {
            input,
            hidden,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        })
    }

    /// Gate pre-activations `(W_ih x + b_ih, W_hh h + b_hh)`.
    fn gates(&self, x: &[f32], h: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let rows = self.b_ih.len();
        let (mut gi, mut gh) = (vec![0.0f32; rows], vec![0.0f32; rows]);
        matvec(&self.w_ih, &self.b_ih, x, &mut gi);
        matvec(&self.w_hh, &self.b_hh, h, &mut gh);
        (gi, gh)
    }
}

/// Single-layer unidirectional GRU.
#[derive(Debug, Clone)]
pub struct Gru {
    r: Recurrent,
}

impl Gru {
    pub fn new(b: &mut Binder, name: &str, input: usize, hidden: usize) -> Self {
        let r = Recurrent::bind(b, name, "", 3, input, hidden);
        b.layer(name, "GRU", json!({ "hidden": hidden }), (1, input), (1, hidden));
        Self { r }
    }

    pub fn from_weights(
        input: usize,
        hidden: usize,
        w_ih: Vec<f32>,
        w_hh: Vec<f32>,
        b_ih: Vec<f32>,
        b_hh: Vec<f32>,
    ) -> Result<Self> {
        Ok(Self {
            r: Recurrent::from_weights(3, input, hidden, w_ih, w_hh, b_ih, b_hh)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.r.hidden
    }

    pub fn input(&self) -> usize {
        self.r.input
    }

    /// One recurrence step, updating `h` in place.
    pub fn cell(&self, h: &mut [f32], x: &[f32]) {
        let hs = self.r.hidden;
        let (gi, gh) = self.r.gates(x, h);
        for j in 0..hs {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[hs + j] + gh[hs + j]);
            let n = (gi[2 * hs + j] + r * gh[2 * hs + j]).tanh();
            h[j] = (1.0 - z) * n + z * h[j];
        }
    }
}

impl Layer for Gru {
    type State = Vec<f32>;

    fn init_state(&self) -> Vec<f32> {
        vec![0.0; self.r.hidden]
    }

    fn step(&self, h: &mut Vec<f32>, x: &Frame) -> Result<Frame> {
        if x.data.len() != self.r.input {
            return Err(Error::Contract(format!(
                "gru expects {} input features, got {}",
                self.r.input,
                x.data.len()
            )));
        }
        if h.len() != self.r.hidden {
            return Err(Error::Contract(format!(
                "gru hidden size {} does not match state of {}",
                self.r.hidden,
                h.len()
            )));
        }
        self.cell(h, &x.data);
        Ok(Frame::vector(h.clone()))
    }
}

/// Single-layer unidirectional LSTM.
#[derive(Debug, Clone)]
pub struct Lstm {
    r: Recurrent,
}

/// `(h, c)` of one LSTM.
pub type LstmState = (Vec<f32>, Vec<f32>);

impl Lstm {
    /// `suffix` is `""` or `"_reverse"` for the backward direction of a
    /// bidirectional PyTorch LSTM.
    pub fn new(b: &mut Binder, name: &str, suffix: &str, input: usize, hidden: usize) -> Self {
        Self {
            r: Recurrent::bind(b, name, suffix, 4, input, hidden),
        }
    }

    pub fn from_weights(
        input: usize,
        hidden: usize,
        w_ih: Vec<f32>,
        w_hh: Vec<f32>,
        b_ih: Vec<f32>,
        b_hh: Vec<f32>,
    ) -> Result<Self> {
        Ok(Self {
            r: Recurrent::from_weights(4, input, hidden, w_ih, w_hh, b_ih, b_hh)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.r.hidden
    }

    pub fn zero_state(&self) -> LstmState {
        (vec![0.0; self.r.hidden], vec![0.0; self.r.hidden])
    }

    pub fn cell(&self, st: &mut LstmState, x: &[f32]) {
        let hs = self.r.hidden;
        let (h, c) = st;
        let (gi, gh) = self.r.gates(x, h);
        for j in 0..hs {
            let pre = |g: usize| gi[g * hs + j] + gh[g * hs + j];
            let i = sigmoid(pre(0));
            let f = sigmoid(pre(1));
            let g = pre(2).tanh();
            let o = sigmoid(pre(3));
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
}

impl Layer for Lstm {
    type State = LstmState;

    fn init_state(&self) -> LstmState {
        self.zero_state()
    }

    fn step(&self, st: &mut LstmState, x: &Frame) -> Result<Frame> {
        if x.data.len() != self.r.input {
            return Err(Error::Contract(format!(
                "lstm expects {} input features, got {}",
                self.r.input,
                x.data.len()
            )));
        }
        self.cell(st, &x.data);
        Ok(Frame::vector(st.0.clone()))
    }
}

/// Frequency-then-time LSTM bottleneck on a `[bins × C]` frame.
///
/// A bidirectional LSTM scans the bins of the current frame, its two
/// hidden sequences are projected back to `C` and added to the input. Then
/// every bin runs its own causal LSTM over time (weights shared across
/// bins), again projected to `C` and added.
#[derive(Debug, Clone)]
pub struct FtLstm {
    bins: usize,
    channels: usize,
    f_fwd: Lstm,
    f_bwd: Lstm,
    f_proj: Linear,
    t_lstm: Lstm,
    t_proj: Linear,
}

impl FtLstm {
    pub fn new(b: &mut Binder, name: &str, bins: usize, channels: usize, hidden: usize) -> Self {
        let f_name = format!("{name}.f_lstm");
        let f_fwd = Lstm::new(b, &f_name, "", channels, hidden);
        let f_bwd = Lstm::new(b, &f_name, "_reverse", channels, hidden);
        b.layer(
            &f_name,
            "LSTM",
            json!({ "hidden": hidden, "bidirectional": true, "axis": "frequency" }),
            (bins, channels),
            (bins, 2 * hidden),
        );
        let f_proj = Linear::new(b, &format!("{name}.f_proj"), 2 * hidden, channels, bins);
        let t_name = format!("{name}.t_lstm");
        let t_lstm = Lstm::new(b, &t_name, "", channels, hidden);
        b.layer(
            &t_name,
            "LSTM",
            json!({ "hidden": hidden, "bidirectional": false, "axis": "time" }),
            (bins, channels),
            (bins, hidden),
        );
        let t_proj = Linear::new(b, &format!("{name}.t_proj"), hidden, channels, bins);
        Self {
            bins,
            channels,
            f_fwd,
            f_bwd,
            f_proj,
            t_lstm,
            t_proj,
        }
    }
}

impl Layer for FtLstm {
    /// Time-LSTM state per bin.
    type State = Vec<LstmState>;

    fn init_state(&self) -> Self::State {
        vec![self.t_lstm.zero_state(); self.bins]
    }

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame> {
        expect_shape(x, self.bins, self.channels, "ftlstm")?;
        let hs = self.f_fwd.hidden();
        let mut both = vec![0.0f32; self.bins * 2 * hs];
        let mut st = self.f_fwd.zero_state();
        for f in 0..self.bins {
            self.f_fwd.cell(&mut st, x.at(f));
            both[f * 2 * hs..f * 2 * hs + hs].copy_from_slice(&st.0);
        }
        let mut st = self.f_bwd.zero_state();
        for f in (0..self.bins).rev() {
            self.f_bwd.cell(&mut st, x.at(f));
            both[f * 2 * hs + hs..(f + 1) * 2 * hs].copy_from_slice(&st.0);
        }
        let mut y = x.clone();
        let mut proj = vec![0.0f32; self.channels];
        for f in 0..self.bins {
            self.f_proj.apply(&both[f * 2 * hs..(f + 1) * 2 * hs], &mut proj);
            for (v, p) in y.at_mut(f).iter_mut().zip(&proj) {
                *v += p;
            }
        }
        for (f, st) in state.iter_mut().enumerate() {
            self.t_lstm.cell(st, y.at(f));
            self.t_proj.apply(&st.0, &mut proj);
            for (v, p) in y.at_mut(f).iter_mut().zip(&proj) {
                *v += p;
            }
        }
        Ok(y)
    }
}
