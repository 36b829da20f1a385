//! Many-to-one attention LSTM.
//!
//! A stacked unidirectional LSTM maps an `L x input_size` signal to hidden
//! states `h` (`L x H`). The attention layer projects each state to an energy
//! row `e_t = W_a h_t + b_a`, scores it against the summation vector
//! `s = Σ_t h_t`, and takes the softmax of the scores as pooling weights. The
//! head regresses the step count from `concat(context, s)`. Without attention
//! the last hidden state takes the place of the context.

mod forward;
mod params;

pub use forward::{
    attention_forward, build_attention, build_forward, build_head, build_lstm, head_forward,
    lstm_cell_step, lstm_forward, model_forward, AttentionOutput, AttentionVars, BoundParams,
    ForwardVars, Prediction,
};
pub use params::{
    Activation, AttentionParams, HeadKind, HeadParams, Linear, LstmLayerParams, ModelConfig,
    ModelParams,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::{fd_gradient, max_relative_error, sigmoid, Matrix, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    /// Straight-line LSTM step written independently of the tape.
    fn oracle_cell(l: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let mut pre = vec![0.0; 4 * n];
        for (r, p) in pre.iter_mut().enumerate() {
            let mut acc = l.b.get(r, 0);
            for (j, xj) in x.iter().enumerate() {
                acc += l.w_x.get(r, j) * xj;
            }
            for (j, hj) in h.iter().enumerate() {
                acc += l.w_h.get(r, j) * hj;
            }
            *p = acc;
        }
        let mut h_new = vec![0.0; n];
        let mut c_new = vec![0.0; n];
        for k in 0..n {
            let i = 1.0 / (1.0 + (-pre[k]).exp());
            let f = 1.0 / (1.0 + (-pre[n + k]).exp());
            let g = pre[2 * n + k].tanh();
            let o = 1.0 / (1.0 + (-pre[3 * n + k]).exp());
            c_new[k] = f * c[k] + i * g;
            h_new[k] = o * c_new[k].tanh();
        }
        (h_new, c_new)
    }

    fn zero_layer(d_in: usize, h: usize) -> LstmLayerParams {
        LstmLayerParams {
            w_x: Matrix::zeros(4 * h, d_in),
            w_h: Matrix::zeros(4 * h, h),
            b: Matrix::zeros(4 * h, 1),
        }
    }

    #[test]
    fn zero_cell_outputs_zero() {
        let l = zero_layer(3, 4);
        let (h, c) = lstm_cell_step(&l, &[1.0, -2.0, 5.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_memory() {
        let mut l = zero_layer(1, 1);
        l.b.set(1, 0, 10.0); // forget
        l.b.set(2, 0, 0.3); // cell candidate
        let (_, c) = lstm_cell_step(&l, &[0.0], &[0.2], &[0.8]).unwrap();
        let f = sigmoid(10.0);
        assert!(f >= 0.9999);
        let expected = f * 0.8 + 0.5 * 0.3f64.tanh();
        assert!((c[0] - expected).abs() < 1e-15);
        assert!((c[0] - (0.8 + 0.5 * 0.3f64.tanh())).abs() < 1e-4);
    }

    #[test]
    fn cell_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let l = LstmLayerParams {
                w_x: random_matrix(&mut rng, 8, 3, 1.0),
                w_h: random_matrix(&mut rng, 8, 2, 1.0),
                b: random_matrix(&mut rng, 8, 1, 1.0),
            };
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (h1, c1) = lstm_cell_step(&l, &x, &h, &c).unwrap();
            let (h2, c2) = oracle_cell(&l, &x, &h, &c);
            for (a, b) in h1.iter().zip(&h2).chain(c1.iter().zip(&c2)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let l = zero_layer(2, 3);
        assert!(lstm_cell_step(&l, &[0.0], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_cell_step(&l, &[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
    }

    fn random_params(rng_seed: u64, cfg: &ModelConfig) -> ModelParams {
        let mut p = ModelParams::init(cfg, rng_seed).unwrap();
        // Spread biases away from zero so every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0xabc);
        for t in p.tensors_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    #[test]
    fn stacked_forward_matches_oracle_and_single_step() {
        let cfg = ModelConfig::new(3, 2, 2, true);
        let p = random_params(5, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 7, 3, 1.0);
        let h = lstm_forward(&p.layers, &x).unwrap();

        let mut seq: Vec<Vec<f64>> = (0..7).map(|t| x.row(t).to_vec()).collect();
        for l in &p.layers {
            let (mut hs, mut cs) = (vec![0.0; 2], vec![0.0; 2]);
            for row in seq.iter_mut() {
                let (h2, c2) = oracle_cell(l, row, &hs, &cs);
                hs = h2.clone();
                cs = c2;
                *row = h2;
            }
        }
        for t in 0..7 {
            for k in 0..2 {
                assert!((h.get(t, k) - seq[t][k]).abs() <= 1e-12);
            }
        }

        let one = Matrix::from_rows(&[x.row(0)]);
        let h1 = lstm_forward(&p.layers, &one).unwrap();
        let (a, _) = lstm_cell_step(&p.layers[0], x.row(0), &[0.0; 2], &[0.0; 2]).unwrap();
        let (b, _) = lstm_cell_step(&p.layers[1], &a, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h1.row(0), &b[..]);
    }

    #[test]
    fn empty_sequence_is_a_length_error() {
        let cfg = ModelConfig::new(1, 2, 1, true);
        let p = ModelParams::init(&cfg, 0).unwrap();
        let x = Matrix::zeros(0, 1);
        assert!(matches!(
            lstm_forward(&p.layers, &x),
            Err(crate::Error::Length(_))
        ));
        assert!(model_forward(&p, &cfg, &x).is_err());
    }

    #[test]
    fn attention_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 1, 3, 1.0);
        let attn = Linear {
            weight: random_matrix(&mut rng, 3, 3, 1.0),
            bias: Some(random_matrix(&mut rng, 3, 1, 1.0)),
        };
        let out = attention_forward(&h, &attn).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.context, h.row(0));
        assert_eq!(out.summation, h.row(0));
    }

    #[test]
    fn attention_identical_rows() {
        let h = Matrix::from_rows(&[[0.2, -0.4], [0.2, -0.4]]);
        let attn = Linear {
            weight: Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]),
            bias: Some(Matrix::column_vector(&[0.1, 0.2])),
        };
        let out = attention_forward(&h, &attn).unwrap();
        assert_eq!(out.weights, vec![0.5, 0.5]);
        for (c, v) in out.context.iter().zip([0.2, -0.4]) {
            assert!((c - v).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_computed_scores() {
        let h = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [-1.0, 0.5]]);
        let attn = Linear {
            weight: Matrix::identity(2),
            bias: Some(Matrix::zeros(2, 1)),
        };
        let out = attention_forward(&h, &attn).unwrap();
        // s = [0, 3.5]; scores = h · s.
        assert_eq!(out.summation, vec![0.0, 3.5]);
        assert_eq!(out.scores, vec![7.0, 3.5, 1.75]);
        let z: f64 = [7.0f64, 3.5, 1.75].iter().map(|v| v.exp()).sum();
        let w: Vec<f64> = [7.0f64, 3.5, 1.75].iter().map(|v| v.exp() / z).collect();
        for (a, b) in out.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
        let c0 = w[0] * 1.0 + w[1] * 0.0 + w[2] * -1.0;
        let c1 = w[0] * 2.0 + w[1] * 1.0 + w[2] * 0.5;
        assert!((out.context[0] - c0).abs() < 1e-15);
        assert!((out.context[1] - c1).abs() < 1e-15);
    }

    fn two_layer_head(h: usize) -> HeadParams {
        HeadParams {
            hidden: Some(Linear {
                weight: Matrix::zeros(h, 2 * h),
                bias: Some(Matrix::zeros(h, 1)),
            }),
            output: Linear {
                weight: Matrix::zeros(1, h),
                bias: Some(Matrix::zeros(1, 1)),
            },
        }
    }

    #[test]
    fn head_constant_model() {
        let mut head = two_layer_head(3);
        head.output.bias = Some(Matrix::scalar(7.0));
        let y = head_forward(
            &[1.0, 2.0, 3.0],
            &[4.0, 5.0, 6.0],
            &head,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(y, 7.0);

        head.hidden.as_mut().unwrap().weight = Matrix::filled(3, 6, 0.7);
        let y = head_forward(&[1.0, -2.0, 3.0], &[9.0, 5.0, 6.0], &head, Activation::Tanh).unwrap();
        assert_eq!(y, 7.0);
    }

    #[test]
    fn head_hand_computed() {
        // H = 2: W1 (2x4), b1, W2 (1x2), b2.
        let head = HeadParams {
            hidden: Some(Linear {
                weight: Matrix::from_rows(&[[1.0, 0.0, 2.0, -1.0], [0.5, 1.0, 0.0, 1.0]]),
                bias: Some(Matrix::column_vector(&[0.1, -0.2])),
            }),
            output: Linear {
                weight: Matrix::from_rows(&[[2.0, -3.0]]),
                bias: Some(Matrix::scalar(0.5)),
            },
        };
        let (c, s) = ([1.0, 2.0], [3.0, 4.0]);
        // hidden = [1 + 6 - 4 + 0.1, 0.5 + 2 + 4 - 0.2] = [3.1, 6.3]
        // y = 6.2 - 18.9 + 0.5 = -12.2
        let y = head_forward(&c, &s, &head, Activation::Identity).unwrap();
        assert!((y + 12.2).abs() < 1e-12);
        let yt = head_forward(&c, &s, &head, Activation::Tanh).unwrap();
        let expected = 2.0 * 3.1f64.tanh() - 3.0 * 6.3f64.tanh() + 0.5;
        assert!((yt - expected).abs() < 1e-12);

        let single = HeadParams {
            hidden: None,
            output: Linear {
                weight: Matrix::from_rows(&[[1.0, 1.0, 1.0, 1.0]]),
                bias: Some(Matrix::scalar(-1.0)),
            },
        };
        assert_eq!(
            head_forward(&c, &s, &single, Activation::Identity).unwrap(),
            9.0
        );
    }

    #[test]
    fn single_timestep_attention_equals_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..5 {
            let cfg_a = ModelConfig::new(4, 3, 2, true);
            let cfg_n = ModelConfig::new(4, 3, 2, false);
            let p = random_params(seed, &cfg_a);
            let x = random_matrix(&mut rng, 1, 4, 1.0);
            let ya = model_forward(&p, &cfg_a, &x).unwrap().y;
            let yn = model_forward(&p, &cfg_n, &x).unwrap().y;
            assert!((ya - yn).abs() < 1e-12, "{ya} vs {yn}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_channels() {
        let cfg = ModelConfig::new(1, 4, 2, true);
        let p = random_params(3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 25, 1, 1.0);
        let a = model_forward(&p, &cfg, &x).unwrap();
        let b = model_forward(&p, &cfg, &x).unwrap();
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a, b);
        assert!(model_forward(&p, &cfg, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn variable_lengths_share_params() {
        let cfg = ModelConfig::new(1, 4, 2, true);
        let p = random_params(4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for len in [1, 2, 10, 1000] {
            let x = random_matrix(&mut rng, len, 1, 1.0);
            let out = model_forward(&p, &cfg, &x).unwrap();
            assert!(out.y.is_finite());
            let w = out.attention.unwrap().weights;
            assert_eq!(w.len(), len);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reversing_input_changes_hidden_states() {
        let cfg = ModelConfig::new(1, 4, 2, true);
        let p = random_params(6, &cfg);
        let x = Matrix::column_vector(&[0.0, 0.1, 0.5, 0.9, 1.0, 0.3]);
        let rev = Matrix::column_vector(&[0.3, 1.0, 0.9, 0.5, 0.1, 0.0]);
        let a = lstm_forward(&p.layers, &x).unwrap();
        let b = lstm_forward(&p.layers, &rev).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = ModelConfig::new(1, 4, 2, true);
        let mut p = random_params(12, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 10, 1, 1.0);
        let y0 = model_forward(&p, &cfg, &x).unwrap().y;
        let target = y0 + 0.75;

        let loss = |params: &ModelParams, tape: &mut Tape| -> crate::Result<(f64, BoundParams)> {
            let bound = BoundParams::bind(tape, params, cfg.head_activation, true);
            let out = build_forward(tape, &bound, &cfg, &x)?;
            let t = tape.constant(Matrix::scalar(target));
            let d = tape.sub(out.y, t)?;
            let a = tape.abs(d);
            tape.backward(a)?;
            Ok((tape.value(a).item()?, bound))
        };
        let mut tape = Tape::new();
        let (_, bound) = loss(&p, &mut tape).unwrap();
        let analytic = bound.grads(&tape);

        let mut flat: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
        let numeric = fd_gradient(
            |m| {
                let mut q = p.clone();
                q.assign(m.to_vec())?;
                Ok((model_forward(&q, &cfg, &x)?.y - target).abs())
            },
            &mut flat,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        p.assign(flat).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_simplex_and_convexity(seed in 0u64..10_000, len in 1usize..20, hidden in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, len, hidden, 1.0);
            let attn = Linear {
                weight: random_matrix(&mut rng, hidden, hidden, 2.0),
                bias: Some(random_matrix(&mut rng, hidden, 1, 1.0)),
            };
            let out = attention_forward(&h, &attn).unwrap();
            let total: f64 = out.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(out.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            for k in 0..hidden {
                let col = h.column(k);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.context[k] >= lo - 1e-12 && out.context[k] <= hi + 1e-12);
            }
        }

        #[test]
        fn prefix_consistency(seed in 0u64..10_000, len in 2usize..15, cut in 1usize..15) {
            let cut = cut.min(len);
            let cfg = ModelConfig::new(3, 3, 2, true);
            let p = random_params(seed, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, len, 3, 1.0);
            let full = lstm_forward(&p.layers, &x).unwrap();
            let rows: Vec<&[f64]> = (0..cut).map(|t| x.row(t)).collect();
            let prefix = lstm_forward(&p.layers, &Matrix::from_rows(&rows)).unwrap();
            for t in 0..cut {
                prop_assert_eq!(prefix.row(t), full.row(t));
            }
            prop_assert!(full.as_slice().iter().all(|v| v.abs() < 1.0));
        }
    }
}
