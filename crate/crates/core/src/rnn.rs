//! LSTM cell, bidirectional layer, and the time-subsampling pyramidal encoder.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Binder, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One LSTM cell. Gate order within the stacked `4H` dimension is fixed:
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    /// Input-to-gates weights, `[4H, D]`.
    pub w_x: Tensor,
    /// Hidden-to-gates weights, `[4H, H]`.
    pub w_h: Tensor,
    /// Gate biases, `[4H]`; forget slice initialized to 1.
    pub b: Tensor,
}

fn uniform_init(rng: &mut ChaCha12Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape, data).expect("numel matches")
}

impl LstmParams {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        let w_x = uniform_init(rng, vec![4 * hidden, input], input);
        let w_h = uniform_init(rng, vec![4 * hidden, hidden], hidden);
        let mut b = Tensor::zeros(vec![4 * hidden]);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmParams { w_x, w_h, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(vec![4 * hidden, input]),
            w_h: Tensor::zeros(vec![4 * hidden, hidden]),
            b: Tensor::zeros(vec![4 * hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn insert_into(&self, prefix: &str, map: &mut BTreeMap<String, Tensor>) {
        map.insert(format!("{prefix}.w_x"), self.w_x.clone());
        map.insert(format!("{prefix}.w_h"), self.w_h.clone());
        map.insert(format!("{prefix}.b"), self.b.clone());
    }

    pub fn take_from(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |suffix: &str| {
            map.get(&format!("{prefix}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{suffix}")))
        };
        Ok(LstmParams {
            w_x: get("w_x")?,
            w_h: get("w_h")?,
            b: get("b")?,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LstmVars {
        LstmVars {
            w_x: g.leaf(self.w_x.clone(), trainable),
            w_h: g.leaf(self.w_h.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
            hidden: self.hidden_size(),
        }
    }

    pub fn bind_in(&self, b: &mut Binder, prefix: &str) -> LstmVars {
        LstmVars {
            w_x: b.leaf(format!("{prefix}.w_x"), &self.w_x),
            w_h: b.leaf(format!("{prefix}.w_h"), &self.w_h),
            b: b.leaf(format!("{prefix}.b"), &self.b),
            hidden: self.hidden_size(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_x"), &mut self.w_x);
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Graph-bound LSTM parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

/// LSTM state as one packed `[2H]` node: hidden in the first half, cell in
/// the second.
pub type LstmState = Var;

impl LstmVars {
    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        g.constant(Tensor::zeros(vec![2 * self.hidden]))
    }

    /// Hidden half of a packed state.
    pub fn hidden_of(&self, g: &mut Graph, state: LstmState) -> Result<Var> {
        g.slice(state, 0, 0, self.hidden)
    }
}

/// One LSTM recurrence step on input `x`; returns the packed next state.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, x: Var, state: LstmState) -> Result<LstmState> {
    let wx = g.matvec(p.w_x, x)?;
    let pre = g.add(wx, p.b)?;
    lstm_step_pregate(g, p, pre, state)
}

/// LSTM step where `W_x x + b` has already been computed (batched upstream).
pub fn lstm_step_pregate(
    g: &mut Graph,
    p: &LstmVars,
    pre: Var,
    state: LstmState,
) -> Result<LstmState> {
    let h = p.hidden_of(g, state)?;
    let hh = g.matvec(p.w_h, h)?;
    let gates = g.add(pre, hh)?;
    g.lstm_cell(gates, state)
}

/// Output of one bidirectional layer.
pub struct BlstmOut {
    /// `[T, 2H]`: forward states concatenated with backward states per step.
    pub output: Var,
    /// Forward-direction hidden half after the last frame.
    pub final_fwd_h: Var,
    pub final_fwd_c: Var,
    /// Backward-direction hidden half after its last step (the first frame).
    pub final_bwd_h: Var,
    pub final_bwd_c: Var,
}

/// Runs a forward and a backward pass over `xs` (`[T, D]`) and concatenates
/// the two state sequences at each step.
pub fn blstm_forward(g: &mut Graph, fwd: &LstmVars, bwd: &LstmVars, xs: Var) -> Result<BlstmOut> {
    let (t_len, _d) = g.value(xs).dims2()?;
    if t_len == 0 {
        return Err(Error::EmptySequence("blstm_forward"));
    }
    // One batched input transform and one fused recurrence per direction.
    type RunOut = (Var, Var, Var);
    let run = |g: &mut Graph, p: &LstmVars, reversed: bool| -> Result<RunOut> {
        let wt = g.transpose(p.w_x)?;
        let xt = g.matmul(xs, wt)?;
        let pre_all = g.add_rows(xt, p.b)?;
        let seq = g.lstm_seq(pre_all, p.w_h, reversed)?;
        let hs = g.slice(seq, 0, 0, t_len)?;
        let final_t = if reversed { 0 } else { t_len - 1 };
        let final_h = g.row(seq, final_t)?;
        let final_c = g.row(seq, t_len)?;
        Ok((hs, final_h, final_c))
    };
    let (hs_f, final_fwd_h, final_fwd_c) = run(g, fwd, false)?;
    let (hs_b, final_bwd_h, final_bwd_c) = run(g, bwd, true)?;
    let output = g.concat(&[hs_f, hs_b], 1)?;
    Ok(BlstmOut {
        output,
        final_fwd_h,
        final_fwd_c,
        final_bwd_h,
        final_bwd_c,
    })
}

/// Concatenates consecutive frame pairs: `[T, D] -> [ceil(T/2), 2D]`.
/// Odd-length inputs repeat the final frame.
pub fn pyramidal_subsample(g: &mut Graph, xs: Var) -> Result<Var> {
    let (t_len, d) = g.value(xs).dims2()?;
    let even = if t_len % 2 == 0 {
        xs
    } else {
        let last = g.slice(xs, 0, t_len - 1, 1)?;
        g.concat(&[xs, last], 0)?
    };
    // Row-major layout makes pairing a pure reshape.
    g.reshape(even, vec![t_len.div_ceil(2), 2 * d])
}

/// Stacked-BLSTM encoder configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Hidden units per direction in every layer.
    pub hidden: usize,
    /// One flag per layer; `true` halves the time axis (pair-concatenation)
    /// before that layer consumes its input.
    pub subsample: Vec<bool>,
}

impl EncoderConfig {
    pub fn layers(&self) -> usize {
        self.subsample.len()
    }

    /// Output dimension of the encoder memory.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Memory length for an input of `t` frames: `ceil(t / 2^k)` for `k`
    /// subsampling layers.
    pub fn output_len(&self, t: usize) -> usize {
        self.subsample
            .iter()
            .fold(t, |acc, &s| if s { acc.div_ceil(2) } else { acc })
    }

    /// Per-layer input dimension given the raw feature dimension.
    fn layer_input_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers());
        let mut d = input_dim;
        for &s in &self.subsample {
            if s {
                d *= 2;
            }
            dims.push(d);
            d = self.output_dim();
        }
        dims
    }
}

#[derive(Clone, Debug)]
pub struct BlstmLayerParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<BlstmLayerParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, input_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let layers = cfg
            .layer_input_dims(input_dim)
            .into_iter()
            .map(|d| BlstmLayerParams {
                fwd: LstmParams::init(d, cfg.hidden, rng),
                bwd: LstmParams::init(d, cfg.hidden, rng),
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn insert_into(&self, prefix: &str, map: &mut BTreeMap<String, Tensor>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.fwd.insert_into(&format!("{prefix}.l{i}.fwd"), map);
            layer.bwd.insert_into(&format!("{prefix}.l{i}.bwd"), map);
        }
    }

    pub fn take_from(
        prefix: &str,
        layers: usize,
        map: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            out.push(BlstmLayerParams {
                fwd: LstmParams::take_from(&format!("{prefix}.l{i}.fwd"), map)?,
                bwd: LstmParams::take_from(&format!("{prefix}.l{i}.bwd"), map)?,
            });
        }
        Ok(EncoderParams { layers: out })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| (l.fwd.bind(g, trainable), l.bwd.bind(g, trainable)))
                .collect(),
        }
    }

    pub fn bind_in(&self, b: &mut Binder, prefix: &str) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    (
                        l.fwd.bind_in(b, &format!("{prefix}.l{i}.fwd")),
                        l.bwd.bind_in(b, &format!("{prefix}.l{i}.bwd")),
                    )
                })
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.fwd.visit_mut(&format!("{prefix}.l{i}.fwd"), f);
            l.bwd.visit_mut(&format!("{prefix}.l{i}.bwd"), f);
        }
    }
}

pub struct EncoderVars {
    pub layers: Vec<(LstmVars, LstmVars)>,
}

/// Encoder output: the memory the attender consumes plus the final states
/// that seed the decoder.
pub struct Encoded {
    /// `[U, 2H]`
    pub memory: Var,
    /// `[2H]`: forward and backward final hidden states, concatenated.
    pub final_h: Var,
    /// `[2H]`: forward and backward final cell states, concatenated.
    pub final_c: Var,
}

/// Runs the stacked pyramidal BLSTM over `xs`.
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, vars: &EncoderVars, xs: Var) -> Result<Encoded> {
    if cfg.layers() == 0 {
        return Err(Error::Config("encoder must have at least one layer".into()));
    }
    let mut cur = xs;
    let mut last: Option<BlstmOut> = None;
    for (i, (fwd, bwd)) in vars.layers.iter().enumerate() {
        if cfg.subsample[i] {
            cur = pyramidal_subsample(g, cur)?;
        }
        let out = blstm_forward(g, fwd, bwd, cur)?;
        cur = out.output;
        last = Some(out);
    }
    let top = last.expect("at least one layer");
    let final_h = g.concat(&[top.final_fwd_h, top.final_bwd_h], 0)?;
    let final_c = g.concat(&[top.final_fwd_c, top.final_bwd_c], 0)?;
    Ok(Encoded {
        memory: cur,
        final_h,
        final_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, ParamMap};
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_give_zero_state() {
        let mut g = Graph::new();
        let p = LstmParams::zeros(3, 2).bind(&mut g, false);
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let st = p.zero_state(&mut g);
        let next = lstm_step(&mut g, &p, x, st).unwrap();
        assert_eq!(g.value(next).data(), &[0.0; 4]);
    }

    #[test]
    fn single_unit_hand_trace() {
        // One unit, one input; every weight 0.5, every bias 0.
        let mut p = LstmParams::zeros(1, 1);
        p.w_x.data_mut().fill(0.5);
        p.w_h.data_mut().fill(0.5);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let x = g.constant(Tensor::vector(vec![1.0]));
        let st = pv.zero_state(&mut g);
        let next = lstm_step(&mut g, &pv, x, st).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5);
        let f = sig(0.5);
        let cand = 0.5_f64.tanh();
        let o = sig(0.5);
        let c_exp = f * 0.0 + i * cand;
        let h_exp = o * c_exp.tanh();
        assert!((g.value(next).data()[1] - c_exp).abs() < 1e-12);
        assert!((g.value(next).data()[0] - h_exp).abs() < 1e-12);
    }

    #[test]
    fn forget_bias_only_decays_cell_analytically() {
        // Zero weights, zero biases except forget = 1: c' = sigma(1) * c.
        let p = LstmParams::zeros(2, 2);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let x = g.constant(Tensor::vector(vec![0.3, -0.7]));
        let mut bias = Tensor::zeros(vec![8]);
        for v in &mut bias.data_mut()[2..4] {
            *v = 1.0;
        }
        let pv = LstmVars {
            b: g.leaf(bias, false),
            ..pv
        };
        let sig1 = 1.0 / (1.0 + (-1.0_f64).exp());
        let mut state = g.constant(Tensor::vector(vec![0.0, 0.0, 1.0, -2.0]));
        let mut expected = [1.0, -2.0];
        for _ in 0..4 {
            state = lstm_step(&mut g, &pv, x, state).unwrap();
            for e in &mut expected {
                *e *= sig1;
            }
            let got = &g.value(state).data()[2..4];
            assert!((got[0] - expected[0]).abs() < 1e-12);
            assert!((got[1] - expected[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_is_deterministic() {
        let p = LstmParams::init(3, 4, &mut rng(3));
        let run = || {
            let mut g = Graph::new();
            let pv = p.bind(&mut g, false);
            let x = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let st = pv.zero_state(&mut g);
            let next = lstm_step(&mut g, &pv, x, st).unwrap();
            g.value(next).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn chained_steps_gradient_matches_finite_differences() {
        let p = LstmParams::init(2, 3, &mut rng(7));
        let mut params = ParamMap::new();
        params.insert("w_x".into(), p.w_x.clone());
        params.insert("w_h".into(), p.w_h.clone());
        params.insert("b".into(), p.b.clone());
        let xs: Vec<Tensor> = (0..5)
            .map(|i| Tensor::vector(vec![0.3 * i as f64 - 0.5, 0.1 * i as f64]))
            .collect();
        let builder = move |g: &mut Graph, pm: &BTreeMap<String, crate::autodiff::Var>| {
            let pv = LstmVars {
                w_x: pm["w_x"],
                w_h: pm["w_h"],
                b: pm["b"],
                hidden: 3,
            };
            let mut state = pv.zero_state(g);
            for x in &xs {
                let xv = g.constant(x.clone());
                state = lstm_step(g, &pv, xv, state)?;
            }
            let h = pv.hidden_of(g, state)?;
            Ok(g.sum(h))
        };
        let report = check(&builder, &params, 1e-4, 1e-5, 1e-4).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }

    #[test]
    fn blstm_degenerate_length_one() {
        let fwd = LstmParams::init(3, 2, &mut rng(1));
        let bwd = LstmParams::init(3, 2, &mut rng(2));
        let mut g = Graph::new();
        let fv = fwd.bind(&mut g, false);
        let bv = bwd.bind(&mut g, false);
        let xs = g.constant(Tensor::new(vec![1, 3], vec![0.5, -0.5, 1.0]).unwrap());
        let out = blstm_forward(&mut g, &fv, &bv, xs).unwrap();
        assert_eq!(g.value(out.output).shape(), &[1, 4]);

        // Both directions see the same single frame.
        let x = g.constant(Tensor::vector(vec![0.5, -0.5, 1.0]));
        let stf = fv.zero_state(&mut g);
        let sf = lstm_step(&mut g, &fv, x, stf).unwrap();
        let stb = bv.zero_state(&mut g);
        let sb = lstm_step(&mut g, &bv, x, stb).unwrap();
        let row = g.value(out.output).data().to_vec();
        assert_eq!(&row[0..2], &g.value(sf).data()[0..2]);
        assert_eq!(&row[2..4], &g.value(sb).data()[0..2]);
    }

    #[test]
    fn blstm_reversal_symmetry() {
        let a = LstmParams::init(2, 3, &mut rng(10));
        let b = LstmParams::init(2, 3, &mut rng(11));
        let frames = vec![
            vec![0.1, 0.9],
            vec![-0.4, 0.2],
            vec![0.7, 0.7],
            vec![0.0, -1.0],
        ];
        let run = |fwd: &LstmParams, bwd: &LstmParams, rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let fv = fwd.bind(&mut g, false);
            let bv = bwd.bind(&mut g, false);
            let xs = g.constant(Tensor::from_rows(rows).unwrap());
            let out = blstm_forward(&mut g, &fv, &bv, xs).unwrap();
            g.value(out.output)
                .data()
                .chunks(6)
                .map(|c| c.to_vec())
                .collect::<Vec<_>>()
        };
        let fwd_run = run(&a, &b, &frames);
        let mut rev_frames = frames.clone();
        rev_frames.reverse();
        let rev_run = run(&b, &a, &rev_frames);
        // Reversing input and swapping directions reverses the sequence and
        // swaps the halves of each step vector.
        for (t, row) in fwd_run.iter().enumerate() {
            let r = &rev_run[fwd_run.len() - 1 - t];
            let swapped: Vec<f64> = r[3..6].iter().chain(&r[0..3]).cloned().collect();
            for (x, y) in row.iter().zip(&swapped) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blstm_shape_contract() {
        let fwd = LstmParams::init(3, 4, &mut rng(20));
        let bwd = LstmParams::init(3, 4, &mut rng(21));
        let mut g = Graph::new();
        let fv = fwd.bind(&mut g, false);
        let bv = bwd.bind(&mut g, false);
        let xs = g.constant(Tensor::zeros(vec![7, 3]));
        let out = blstm_forward(&mut g, &fv, &bv, xs).unwrap();
        assert_eq!(g.value(out.output).shape(), &[7, 8]);
    }

    #[test]
    fn subsample_even_and_odd() {
        let mut g = Graph::new();
        let xs = g.constant(
            Tensor::from_rows(&[
                vec![1.0, 2.0],
                vec![3.0, 4.0],
                vec![5.0, 6.0],
                vec![7.0, 8.0],
            ])
            .unwrap(),
        );
        let s = pyramidal_subsample(&mut g, xs).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 4]);
        assert_eq!(g.value(s).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(s).row(1), &[5.0, 6.0, 7.0, 8.0]);

        let odd = g.constant(
            Tensor::from_rows(&[
                vec![1.0],
                vec![2.0],
                vec![3.0],
                vec![4.0],
                vec![5.0],
            ])
            .unwrap(),
        );
        let so = pyramidal_subsample(&mut g, odd).unwrap();
        assert_eq!(g.value(so).shape(), &[3, 2]);
        assert_eq!(g.value(so).row(2), &[5.0, 5.0]);
    }

    #[test]
    fn two_subsample_layers_quarter_the_rate() {
        // 100 input frames -> 25 after two pair-concatenations.
        let cfg = EncoderConfig {
            hidden: 2,
            subsample: vec![true, true],
        };
        assert_eq!(cfg.output_len(100), 25);
        assert_eq!(cfg.output_len(32), 8);
        let video = EncoderConfig {
            hidden: 2,
            subsample: vec![false, false],
        };
        assert_eq!(video.output_len(8), 8);
    }

    #[test]
    fn output_len_matches_actual_encoder_for_all_small_lengths() {
        let cfg = EncoderConfig {
            hidden: 2,
            subsample: vec![true, true],
        };
        let params = EncoderParams::init(&cfg, 3, &mut rng(40));
        for t in 1..=64 {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, false);
            let xs = g.constant(Tensor::zeros(vec![t, 3]));
            let enc = encode(&mut g, &cfg, &vars, xs).unwrap();
            assert_eq!(g.value(enc.memory).shape()[0], cfg.output_len(t), "t={t}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            hidden: 2,
            subsample: vec![true],
        };
        let enc_params = EncoderParams::init(&cfg, 2, &mut rng(50));
        let mut params = ParamMap::new();
        enc_params.insert_into("enc", &mut params);
        let frames = Tensor::from_rows(&[
            vec![0.2, -0.1],
            vec![0.5, 0.3],
            vec![-0.8, 0.9],
            vec![0.1, 0.1],
            vec![0.0, -0.6],
        ])
        .unwrap();
        let cfg2 = cfg.clone();
        let builder = move |g: &mut Graph, pm: &BTreeMap<String, crate::autodiff::Var>| {
            let lv = |p: &str| LstmVars {
                w_x: pm[&format!("{p}.w_x")],
                w_h: pm[&format!("{p}.w_h")],
                b: pm[&format!("{p}.b")],
                hidden: 2,
            };
            let vars = EncoderVars {
                layers: vec![(lv("enc.l0.fwd"), lv("enc.l0.bwd"))],
            };
            let xs = g.constant(frames.clone());
            let enc = encode(g, &cfg2, &vars, xs)?;
            let m = g.tanh(enc.memory);
            let s1 = g.sum(m);
            let s2 = g.sum(enc.final_c);
            g.add(s1, s2)
        };
        let report = check(&builder, &params, 1e-4, 1e-4, 1e-3).unwrap();
        assert!(report.passes(0.99), "{}", report.summary());
    }
}
