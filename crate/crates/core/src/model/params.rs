use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Matrix;

/// Shape of the regression head placed after pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `2H -> H -> 1`.
    #[default]
    TwoLayer,
    /// `2H -> 1`.
    SingleLayer,
}

/// Nonlinearity between the two head layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub use_attention: bool,
    #[serde(default = "default_true")]
    pub attention_bias: bool,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub head_activation: Activation,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        use_attention: bool,
    ) -> Self {
        Self {
            input_size,
            hidden_size,
            num_layers,
            use_attention,
            attention_bias: true,
            head: HeadKind::TwoLayer,
            head_activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 4].contains(&self.input_size) {
            return Err(Error::InvalidArgument(format!(
                "input_size must be 1, 3 or 4, got {}",
                self.input_size
            )));
        }
        if self.hidden_size == 0 || self.num_layers == 0 {
            return Err(Error::InvalidArgument(
                "hidden_size and num_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    /// `4H x D_in`
    pub w_x: Matrix,
    /// `4H x H`
    pub w_h: Matrix,
    /// `4H x 1`
    pub b: Matrix,
}

impl LstmLayerParams {
    pub fn hidden_size(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input_size(&self) -> usize {
        self.w_x.cols()
    }

    fn check(&self, input_size: usize, hidden: usize) -> Result<()> {
        let ok = self.w_x.shape() == (4 * hidden, input_size)
            && self.w_h.shape() == (4 * hidden, hidden)
            && self.b.shape() == (4 * hidden, 1);
        if !ok {
            return Err(Error::shape(
                "lstm layer",
                format!(
                    "w_x {:?}, w_h {:?}, b {:?} for D_in={input_size}, H={hidden}",
                    self.w_x.shape(),
                    self.w_h.shape(),
                    self.b.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// A dense layer `y = W x + b` acting on column vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }
}

/// `W_a: H x H`, optional `b_a: H x 1`.
pub type AttentionParams = Linear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `W_1: H x 2H`, `b_1: H x 1`. Absent for the single-layer head.
    pub hidden: Option<Linear>,
    /// `W_2: 1 x H`, `b_2: 1 x 1` (or `1 x 2H` for the single-layer head).
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LstmLayerParams>,
    pub attention: AttentionParams,
    pub head: HeadParams,
}

impl ModelParams {
    /// Uniform `[-1/√H, 1/√H]` weights, zero biases, forget-gate bias 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        for k in 0..config.num_layers {
            let d_in = if k == 0 { config.input_size } else { h };
            let w_x = uniform(4 * h, d_in);
            let w_h = uniform(4 * h, h);
            let mut b = Matrix::zeros(4 * h, 1);
            for r in h..2 * h {
                b.set(r, 0, 1.0);
            }
            layers.push(LstmLayerParams { w_x, w_h, b });
        }

        let attention = Linear {
            weight: uniform(h, h),
            bias: config.attention_bias.then(|| Matrix::zeros(h, 1)),
        };

        let head = match config.head {
            HeadKind::TwoLayer => HeadParams {
                hidden: Some(Linear {
                    weight: uniform(h, 2 * h),
                    bias: Some(Matrix::zeros(h, 1)),
                }),
                output: Linear {
                    weight: uniform(1, h),
                    bias: Some(Matrix::zeros(1, 1)),
                },
            },
            HeadKind::SingleLayer => HeadParams {
                hidden: None,
                output: Linear {
                    weight: uniform(1, 2 * h),
                    bias: Some(Matrix::zeros(1, 1)),
                },
            },
        };

        Ok(Self {
            layers,
            attention,
            head,
        })
    }

    /// Checks every tensor against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let h = config.hidden_size;
        if self.layers.len() != config.num_layers {
            return Err(Error::shape(
                "model params",
                format!(
                    "{} layers for num_layers={}",
                    self.layers.len(),
                    config.num_layers
                ),
            ));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let d_in = if k == 0 { config.input_size } else { h };
            layer.check(d_in, h)?;
        }
        let attn_ok = self.attention.weight.shape() == (h, h)
            && self
                .attention
                .bias
                .as_ref()
                .is_none_or(|b| b.shape() == (h, 1))
            && self.attention.bias.is_some() == config.attention_bias;
        let head_ok = match (config.head, &self.head.hidden) {
            (HeadKind::TwoLayer, Some(hidden)) => {
                hidden.weight.shape() == (h, 2 * h)
                    && hidden.bias.as_ref().is_none_or(|b| b.shape() == (h, 1))
                    && self.head.output.weight.shape() == (1, h)
            }
            (HeadKind::SingleLayer, None) => self.head.output.weight.shape() == (1, 2 * h),
            _ => false,
        } && self
            .head
            .output
            .bias
            .as_ref()
            .is_none_or(|b| b.shape() == (1, 1));
        if !attn_ok || !head_ok {
            return Err(Error::shape(
                "model params",
                format!(
                    "attention/head tensors do not fit H={h} and {:?}",
                    config.head
                ),
            ));
        }
        Ok(())
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.w_x, &l.w_h, &l.b]);
        }
        push_linear(&mut out, &self.attention);
        if let Some(hidden) = &self.head.hidden {
            push_linear(&mut out, hidden);
        }
        push_linear(&mut out, &self.head.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
        }
        push_linear_mut(&mut out, &mut self.attention);
        if let Some(hidden) = &mut self.head.hidden {
            push_linear_mut(&mut out, hidden);
        }
        push_linear_mut(&mut out, &mut self.head.output);
        out
    }

    /// Names matching [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.layers.len() {
            for n in ["w_x", "w_h", "b"] {
                out.push(format!("lstm.{k}.{n}"));
            }
        }
        out.push("attention.weight".into());
        if self.attention.bias.is_some() {
            out.push("attention.bias".into());
        }
        if let Some(hidden) = &self.head.hidden {
            out.push("head.hidden.weight".into());
            if hidden.bias.is_some() {
                out.push("head.hidden.bias".into());
            }
        }
        out.push("head.output.weight".into());
        if self.head.output.bias.is_some() {
            out.push("head.output.bias".into());
        }
        out
    }

    /// Replaces every tensor, in canonical order, checking shapes.
    pub fn assign(&mut self, values: Vec<Matrix>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::shape(
                "assign",
                format!("{} tensors for {} slots", values.len(), slots.len()),
            ));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(
                    "assign",
                    format!("{:?} into {:?}", v.shape(), slot.shape()),
                ));
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }
}

fn push_linear<'a>(out: &mut Vec<&'a Matrix>, l: &'a Linear) {
    out.push(&l.weight);
    if let Some(b) = &l.bias {
        out.push(b);
    }
}

fn push_linear_mut<'a>(out: &mut Vec<&'a mut Matrix>, l: &'a mut Linear) {
    out.push(&mut l.weight);
    if let Some(b) = &mut l.bias {
        out.push(b);
    }
}
