//! Forward graph of the attention LSTM, recorded on a [`Tape`].
//!
//! Training binds the parameters as differentiable leaves and differentiates
//! the recorded graph; inference binds them as constants and reads values.
//! Both paths run the same graph-building code.

use crate::error::{Error, Result};
use crate::numkern::{Matrix, Tape, Var};

use super::params::{
    Activation, AttentionParams, HeadParams, Linear, LstmLayerParams, ModelConfig, ModelParams,
};

#[derive(Debug, Clone)]
struct BoundLayer {
    w_x: Var,
    w_h: Var,
    b: Var,
    hidden: usize,
}

#[derive(Debug, Clone)]
struct BoundLinear {
    weight: Var,
    bias: Option<Var>,
}

/// Model parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    layers: Vec<BoundLayer>,
    attention: BoundLinear,
    hidden: Option<BoundLinear>,
    output: BoundLinear,
    activation: Activation,
    all: Vec<Var>,
}

impl BoundParams {
    /// Registers every tensor of `params`. With `trainable` false they become
    /// constants and no gradient bookkeeping happens.
    pub fn bind(
        tape: &mut Tape,
        params: &ModelParams,
        activation: Activation,
        trainable: bool,
    ) -> Self {
        let mut all = Vec::new();
        let mut reg = |tape: &mut Tape, m: &Matrix| {
            let v = if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            };
            all.push(v);
            v
        };
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                w_x: reg(tape, &l.w_x),
                w_h: reg(tape, &l.w_h),
                b: reg(tape, &l.b),
                hidden: l.hidden_size(),
            })
            .collect();
        let mut linear = |tape: &mut Tape, l: &Linear| BoundLinear {
            weight: reg(tape, &l.weight),
            bias: l.bias.as_ref().map(|b| reg(tape, b)),
        };
        let attention = linear(tape, &params.attention);
        let hidden = params.head.hidden.as_ref().map(|l| linear(tape, l));
        let output = linear(tape, &params.head.output);
        Self {
            layers,
            attention,
            hidden,
            output,
            activation,
            all,
        }
    }

    /// Tape handles in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.all
    }

    /// Accumulated gradients in [`ModelParams::tensors`] order.
    pub fn grads(&self, tape: &Tape) -> Vec<Matrix> {
        self.all.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Handles to the attention intermediates of one sample.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `1 x H`
    pub context: Var,
    /// `1 x H`, column sum of the hidden sequence.
    pub summation: Var,
    /// `L x H`
    pub energies: Var,
    /// `L x 1`, energies dotted with the summation vector.
    pub scores: Var,
    /// `L x 1`, softmax of the scores.
    pub weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `1 x 1` prediction.
    pub y: Var,
    /// `L x H` output sequence of the last LSTM layer.
    pub hidden: Var,
    pub attention: Option<AttentionVars>,
}

/// One LSTM step given the already-projected input row `x_proj = W_x x + b`.
fn cell(
    tape: &mut Tape,
    x_proj: Var,
    w_h: Var,
    hidden: usize,
    prev: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let gates = match prev {
        Some((h_prev, _)) => {
            let rec = tape.matmul_bt(h_prev, w_h)?;
            tape.add(x_proj, rec)?
        }
        None => x_proj,
    };
    let i_pre = tape.slice_cols(gates, 0, hidden)?;
    let f_pre = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let g_pre = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let o_pre = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let ig = tape.hadamard(i, g)?;
    let c = match prev {
        Some((_, c_prev)) => {
            let f = tape.sigmoid(f_pre);
            let fc = tape.hadamard(f, c_prev)?;
            tape.add(fc, ig)?
        }
        // c_prev = 0, so the forget term vanishes.
        None => ig,
    };
    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    Ok((h, c))
}

fn lstm_layer(tape: &mut Tape, layer: &BoundLayer, x: Var) -> Result<Var> {
    let len = tape.value(x).rows();
    let proj = tape.matmul_bt(x, layer.w_x)?;
    let proj = tape.add_bias(proj, layer.b)?;
    let mut state = None;
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let row = tape.row(proj, t)?;
        let (h, c) = cell(tape, row, layer.w_h, layer.hidden, state)?;
        outputs.push(h);
        state = Some((h, c));
    }
    tape.stack_rows(&outputs)
}

fn linear(tape: &mut Tape, l: &BoundLinear, x: Var) -> Result<Var> {
    let y = tape.matmul_bt(x, l.weight)?;
    match l.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Stacked LSTM over an `L x input_size` sequence; returns the last layer's `L x H` outputs.
pub fn build_lstm(tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::Length("input sequence is empty".into()));
    }
    let mut seq = x;
    for layer in &bound.layers {
        seq = lstm_layer(tape, layer, seq)?;
    }
    Ok(seq)
}

/// Sample-level attention over an `L x H` hidden sequence.
pub fn build_attention(tape: &mut Tape, bound: &BoundParams, h: Var) -> Result<AttentionVars> {
    let summation = tape.sum_rows(h);
    let energies = linear(tape, &bound.attention, h)?;
    let scores = tape.matmul_bt(energies, summation)?;
    let weights = tape.softmax(scores)?;
    let wt = tape.transpose(weights);
    let context = tape.matmul(wt, h)?;
    Ok(AttentionVars {
        context,
        summation,
        energies,
        scores,
        weights,
    })
}

/// Regression head on `concat(pooled, summation)`.
pub fn build_head(
    tape: &mut Tape,
    bound: &BoundParams,
    pooled: Var,
    summation: Var,
) -> Result<Var> {
    let z = tape.concat_cols(pooled, summation)?;
    let z = match &bound.hidden {
        Some(hidden) => {
            let a = linear(tape, hidden, z)?;
            match bound.activation {
                Activation::Identity => a,
                Activation::Tanh => tape.tanh(a),
            }
        }
        None => z,
    };
    linear(tape, &bound.output, z)
}

/// Full model on a preprocessed `L x input_size` signal.
pub fn build_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    x: &Matrix,
) -> Result<ForwardVars> {
    if x.cols() != config.input_size {
        return Err(Error::shape(
            "model_forward",
            format!(
                "signal has {} channels, model expects input_size={}",
                x.cols(),
                config.input_size
            ),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::Length("input sequence is empty".into()));
    }
    let xv = tape.constant(x.clone());
    let hidden = build_lstm(tape, bound, xv)?;
    if config.use_attention {
        let att = build_attention(tape, bound, hidden)?;
        let y = build_head(tape, bound, att.context, att.summation)?;
        Ok(ForwardVars {
            y,
            hidden,
            attention: Some(att),
        })
    } else {
        let summation = tape.sum_rows(hidden);
        let last = tape.row(hidden, tape.value(hidden).rows() - 1)?;
        let y = build_head(tape, bound, last, summation)?;
        Ok(ForwardVars {
            y,
            hidden,
            attention: None,
        })
    }
}

/// Attention intermediates for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub context: Vec<f64>,
    pub summation: Vec<f64>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    pub energies: Matrix,
}

impl AttentionOutput {
    fn read(tape: &Tape, v: &AttentionVars) -> Self {
        Self {
            context: tape.value(v.context).as_slice().to_vec(),
            summation: tape.value(v.summation).as_slice().to_vec(),
            weights: tape.value(v.weights).as_slice().to_vec(),
            scores: tape.value(v.scores).as_slice().to_vec(),
            energies: tape.value(v.energies).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y: f64,
    /// Present for the attention model.
    pub attention: Option<AttentionOutput>,
}

fn bind_layers(tape: &mut Tape, layers: &[LstmLayerParams]) -> Vec<BoundLayer> {
    layers
        .iter()
        .map(|l| BoundLayer {
            w_x: tape.constant(l.w_x.clone()),
            w_h: tape.constant(l.w_h.clone()),
            b: tape.constant(l.b.clone()),
            hidden: l.hidden_size(),
        })
        .collect()
}

fn bare(layers: Vec<BoundLayer>, attention: BoundLinear) -> BoundParams {
    let output = attention.clone();
    BoundParams {
        layers,
        attention,
        hidden: None,
        output,
        activation: Activation::Identity,
        all: Vec::new(),
    }
}

fn bind_linear(tape: &mut Tape, l: &Linear) -> BoundLinear {
    BoundLinear {
        weight: tape.constant(l.weight.clone()),
        bias: l.bias.as_ref().map(|b| tape.constant(b.clone())),
    }
}

/// One LSTM step on plain vectors. Returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    layer: &LstmLayerParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hidden = layer.hidden_size();
    if x_t.len() != layer.input_size() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x {} / h {} / c {} for D_in={}, H={hidden}",
                x_t.len(),
                h_prev.len(),
                c_prev.len(),
                layer.input_size()
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = &bind_layers(&mut tape, std::slice::from_ref(layer))[0];
    let x = tape.constant(Matrix::row_vector(x_t));
    let h0 = tape.constant(Matrix::row_vector(h_prev));
    let c0 = tape.constant(Matrix::row_vector(c_prev));
    let proj = tape.matmul_bt(x, bound.w_x)?;
    let proj = tape.add_bias(proj, bound.b)?;
    let (h, c) = cell(&mut tape, proj, bound.w_h, hidden, Some((h0, c0)))?;
    Ok((
        tape.value(h).as_slice().to_vec(),
        tape.value(c).as_slice().to_vec(),
    ))
}

/// Stacked LSTM on an `L x D` sequence, returning the last layer's `L x H` outputs.
pub fn lstm_forward(layers: &[LstmLayerParams], x: &Matrix) -> Result<Matrix> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("no LSTM layers".into()))?;
    if x.cols() != first.input_size() {
        return Err(Error::shape(
            "lstm_forward",
            format!("{} channels for D_in={}", x.cols(), first.input_size()),
        ));
    }
    let mut tape = Tape::new();
    let bound_layers = bind_layers(&mut tape, layers);
    let dummy = BoundLinear {
        weight: tape.constant(Matrix::zeros(1, 1)),
        bias: None,
    };
    let bound = bare(bound_layers, dummy);
    let xv = tape.constant(x.clone());
    let h = build_lstm(&mut tape, &bound, xv)?;
    Ok(tape.value(h).clone())
}

/// Attention pooling of an `L x H` hidden sequence.
pub fn attention_forward(h: &Matrix, attn: &AttentionParams) -> Result<AttentionOutput> {
    if h.rows() == 0 {
        return Err(Error::Length("empty hidden sequence".into()));
    }
    let hidden = h.cols();
    if attn.weight.shape() != (hidden, hidden) {
        return Err(Error::shape(
            "attention_forward",
            format!("W_a {:?} for H={hidden}", attn.weight.shape()),
        ));
    }
    let mut tape = Tape::new();
    let a = bind_linear(&mut tape, attn);
    let bound = bare(Vec::new(), a);
    let hv = tape.constant(h.clone());
    let vars = build_attention(&mut tape, &bound, hv)?;
    Ok(AttentionOutput::read(&tape, &vars))
}

/// Head output for pooled vector `pooled` and summation `s`.
pub fn head_forward(
    pooled: &[f64],
    s: &[f64],
    head: &HeadParams,
    activation: Activation,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hidden = head.hidden.as_ref().map(|l| bind_linear(&mut tape, l));
    let output = bind_linear(&mut tape, &head.output);
    let bound = BoundParams {
        layers: Vec::new(),
        attention: output.clone(),
        hidden,
        output,
        activation,
        all: Vec::new(),
    };
    let c = tape.constant(Matrix::row_vector(pooled));
    let sv = tape.constant(Matrix::row_vector(s));
    let y = build_head(&mut tape, &bound, c, sv)?;
    tape.value(y).item()
}

/// Predicted step count for one preprocessed signal.
pub fn model_forward(params: &ModelParams, config: &ModelConfig, x: &Matrix) -> Result<Prediction> {
    params.check(config)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config.head_activation, false);
    let out = build_forward(&mut tape, &bound, config, x)?;
    Ok(Prediction {
        y: tape.value(out.y).item()?,
        attention: out
            .attention
            .as_ref()
            .map(|a| AttentionOutput::read(&tape, a)),
    })
}
