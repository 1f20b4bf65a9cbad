//! Learned per-step modality fusion.
//!
//! Each modality owns a small scoring LSTM whose hidden state is projected to
//! one sigmoid unit. At every fusion step the per-modality scalar scores go
//! through a softmax and the incoming feature vectors are blended by the
//! resulting weights. Because the scorer is recurrent, the weights can drift
//! over a single utterance as one stream degrades.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Binder, Graph, Var};
use crate::error::{Error, Result};
use crate::rnn::{lstm_step, LstmParams, LstmState, LstmVars};
use crate::tensor::Tensor;

/// Parameters of one modality's scoring branch: an LSTM over that modality's
/// feature sequence plus a one-unit output layer.
#[derive(Clone, Debug)]
pub struct ScorerBranchParams {
    pub lstm: LstmParams,
    /// `[1, Z]`
    pub w: Tensor,
    /// `[1]`
    pub b: Tensor,
}

/// Independent scoring branches, one per modality (weights are not shared).
#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub branches: Vec<ScorerBranchParams>,
}

impl ScorerParams {
    pub fn init(modalities: usize, feature_dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        use rand::Rng;
        let branches = (0..modalities)
            .map(|_| {
                let s = 1.0 / (hidden as f64).sqrt();
                let w: Vec<f64> = (0..hidden).map(|_| rng.random_range(-s..s)).collect();
                ScorerBranchParams {
                    lstm: LstmParams::init(feature_dim, hidden, rng),
                    w: Tensor::new(vec![1, hidden], w).expect("numel"),
                    b: Tensor::zeros(vec![1]),
                }
            })
            .collect();
        ScorerParams { branches }
    }

    pub fn modalities(&self) -> usize {
        self.branches.len()
    }

    pub fn insert_into(&self, prefix: &str, map: &mut BTreeMap<String, Tensor>) {
        for (m, br) in self.branches.iter().enumerate() {
            br.lstm.insert_into(&format!("{prefix}.m{m}.lstm"), map);
            map.insert(format!("{prefix}.m{m}.w"), br.w.clone());
            map.insert(format!("{prefix}.m{m}.b"), br.b.clone());
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (m, br) in self.branches.iter_mut().enumerate() {
            br.lstm.visit_mut(&format!("{prefix}.m{m}.lstm"), f);
            f(format!("{prefix}.m{m}.w"), &mut br.w);
            f(format!("{prefix}.m{m}.b"), &mut br.b);
        }
    }

    pub fn take_from(prefix: &str, modalities: usize, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut branches = Vec::with_capacity(modalities);
        for m in 0..modalities {
            let get = |suffix: &str| {
                map.get(&format!("{prefix}.m{m}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("missing parameter {prefix}.m{m}.{suffix}"))
                    })
            };
            branches.push(ScorerBranchParams {
                lstm: LstmParams::take_from(&format!("{prefix}.m{m}.lstm"), map)?,
                w: get("w")?,
                b: get("b")?,
            });
        }
        Ok(ScorerParams { branches })
    }
}

struct BoundBranch {
    lstm: LstmVars,
    w: Var,
    b: Var,
}

/// One fusion step's outcome.
pub struct FusionStep {
    /// Blended feature vector, same dimension as the inputs.
    pub fused: Var,
    /// Softmax weights over modalities, `[M]`, in input order.
    pub weights: Var,
    /// The weight values, extracted for telemetry.
    pub alphas: Vec<f64>,
}

/// A scorer instance bound to one graph, carrying the running per-modality
/// LSTM states for the utterance currently being decoded. Use one instance
/// per in-flight utterance.
pub struct ModalityScorer {
    branches: Vec<BoundBranch>,
    states: Vec<LstmState>,
}

impl ModalityScorer {
    pub fn new(g: &mut Graph, params: &ScorerParams, trainable: bool) -> Self {
        let branches: Vec<BoundBranch> = params
            .branches
            .iter()
            .map(|br| BoundBranch {
                lstm: br.lstm.bind(g, trainable),
                w: g.leaf(br.w.clone(), trainable),
                b: g.leaf(br.b.clone(), trainable),
            })
            .collect();
        let states = branches.iter().map(|br| br.lstm.zero_state(g)).collect();
        ModalityScorer { branches, states }
    }

    pub fn bind_in(b: &mut Binder, params: &ScorerParams, prefix: &str) -> Self {
        let branches: Vec<BoundBranch> = params
            .branches
            .iter()
            .enumerate()
            .map(|(m, br)| BoundBranch {
                lstm: br.lstm.bind_in(b, &format!("{prefix}.m{m}.lstm")),
                w: b.leaf(format!("{prefix}.m{m}.w"), &br.w),
                b: b.leaf(format!("{prefix}.m{m}.b"), &br.b),
            })
            .collect();
        let states = branches.iter().map(|br| br.lstm.zero_state(b.g)).collect();
        ModalityScorer { branches, states }
    }

    pub fn modalities(&self) -> usize {
        self.branches.len()
    }

    /// Zeroes every branch's running state (start of a new utterance).
    /// Idempotent.
    pub fn reset(&mut self, g: &mut Graph) {
        self.states = self
            .branches
            .iter()
            .map(|br| br.lstm.zero_state(g))
            .collect();
    }

    /// Clones the running states, so a caller can fork them per beam
    /// hypothesis and restore with [`ModalityScorer::set_states`].
    pub fn states(&self) -> Vec<LstmState> {
        self.states.clone()
    }

    pub fn set_states(&mut self, states: Vec<LstmState>) {
        self.states = states;
    }

    /// Advances `modality`'s scoring LSTM on feature `f` and returns the
    /// sigmoid score in `(0, 1)` as a `[1]` node. State is retained, so the
    /// score at a step depends on the whole history seen so far.
    pub fn score(&mut self, g: &mut Graph, modality: usize, f: Var) -> Result<Var> {
        let n = self.branches.len();
        let br = self
            .branches
            .get(modality)
            .ok_or_else(|| Error::Contract(format!("unknown modality id {modality} (have {n})")))?;
        let state = lstm_step(g, &br.lstm, f, self.states[modality])?;
        self.states[modality] = state;
        let h = br.lstm.hidden_of(g, state)?;
        let proj = g.matvec(br.w, h)?;
        let z = g.add(proj, br.b)?;
        Ok(g.sigmoid(z))
    }

    /// Scores every modality's feature, softmaxes the scores, and returns the
    /// weighted sum. Fully differentiable through both the scorer and the
    /// feature branches.
    pub fn fuse(&mut self, g: &mut Graph, contexts: &[(usize, Var)]) -> Result<FusionStep> {
        if contexts.len() < 2 {
            return Err(Error::Contract(format!(
                "fuse requires at least 2 modalities, got {}",
                contexts.len()
            )));
        }
        let dim = g.value(contexts[0].1).shape().to_vec();
        for &(_, c) in &contexts[1..] {
            if g.value(c).shape() != dim {
                return Err(Error::dim("fuse", &dim, g.value(c).shape()));
            }
        }
        let mut scores = Vec::with_capacity(contexts.len());
        for &(m, c) in contexts {
            scores.push(self.score(g, m, c)?);
        }
        let stacked = g.concat(&scores, 0)?;
        let weights = g.softmax_last_dim(stacked, None)?;
        let alphas = g.value(weights).data().to_vec();
        let mut fused: Option<Var> = None;
        for (i, &(_, c)) in contexts.iter().enumerate() {
            let a = g.slice(weights, 0, i, 1)?;
            let term = g.mul_scalar(c, a)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(FusionStep {
            fused: fused.expect("at least two contexts"),
            weights,
            alphas,
        })
    }
}

/// General form over equal-length raw feature streams: fuses the streams
/// frame by frame into one `[T, D]` sequence. The recognizer itself fuses
/// per-decoding-step context vectors instead, which tolerates different
/// stream rates; this entry point serves equal-rate feature-level fusion.
pub fn fuse_streams(
    g: &mut Graph,
    scorer: &mut ModalityScorer,
    streams: &[(usize, Var)],
) -> Result<Var> {
    if streams.len() < 2 {
        return Err(Error::Contract(format!(
            "fuse_streams requires at least 2 modalities, got {}",
            streams.len()
        )));
    }
    let (t_len, d) = g.value(streams[0].1).dims2()?;
    for &(_, s) in streams {
        let shape = g.value(s).shape();
        if shape != [t_len, d] {
            return Err(Error::dim("fuse_streams", &[t_len, d], shape));
        }
    }
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut frame = Vec::with_capacity(streams.len());
        for &(m, s) in streams {
            frame.push((m, g.row(s, t)?));
        }
        let step = scorer.fuse(g, &frame)?;
        rows.push(step.fused);
    }
    let flat = g.concat(&rows, 0)?;
    g.reshape(flat, vec![t_len, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn zero_scorer(modalities: usize, dim: usize, hidden: usize) -> ScorerParams {
        ScorerParams {
            branches: (0..modalities)
                .map(|_| ScorerBranchParams {
                    lstm: LstmParams::zeros(dim, hidden),
                    w: Tensor::zeros(vec![1, hidden]),
                    b: Tensor::zeros(vec![1]),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_output_weights_score_half() {
        let params = zero_scorer(2, 3, 2);
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let f = g.constant(Tensor::vector(vec![5.0, -3.0, 0.2]));
        let z = sc.score(&mut g, 0, f).unwrap();
        assert_eq!(g.value(z).data(), &[0.5]);
    }

    #[test]
    fn score_state_advances_between_calls() {
        // Nonzero recurrent weights: the same input scored twice in a row
        // gives different values because the LSTM state moved.
        let mut params = zero_scorer(1, 2, 2);
        params.branches[0].lstm.w_x.data_mut().fill(0.6);
        params.branches[0].lstm.w_h.data_mut().fill(0.8);
        params.branches[0].w.data_mut().fill(1.0);
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let f = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let z1 = sc.score(&mut g, 0, f).unwrap();
        let z2 = sc.score(&mut g, 0, f).unwrap();
        assert_ne!(g.value(z1).data()[0], g.value(z2).data()[0]);
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let params = ScorerParams::init(2, 4, 3, &mut rng(9));
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let mut r = rng(10);
        for i in 0..1000 {
            let f = g.constant(Tensor::vector(
                (0..4).map(|_| r.random_range(-10.0..10.0)).collect(),
            ));
            let z = sc.score(&mut g, i % 2, f).unwrap();
            let v = g.value(z).data()[0];
            assert!(v > 0.0 && v < 1.0, "score {v} escaped (0,1)");
        }
    }

    #[test]
    fn unknown_modality_is_a_contract_error() {
        let params = zero_scorer(2, 2, 2);
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let f = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            sc.score(&mut g, 2, f),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn equal_scores_split_evenly_and_average_inputs() {
        let params = zero_scorer(2, 3, 2);
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let ca = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let cv = g.constant(Tensor::vector(vec![-1.0, 0.0, 5.0]));
        let step = sc.fuse(&mut g, &[(0, ca), (1, cv)]).unwrap();
        assert_eq!(step.alphas, vec![0.5, 0.5]);
        assert_eq!(g.value(step.fused).data(), &[0.0, 1.0, 4.0]);
    }

    #[test]
    fn m_equal_scores_give_uniform_weights() {
        for m in 2..=4 {
            let params = zero_scorer(m, 2, 2);
            let mut g = Graph::new();
            let mut sc = ModalityScorer::new(&mut g, &params, false);
            let contexts: Vec<(usize, Var)> = (0..m)
                .map(|i| {
                    let c = g.constant(Tensor::vector(vec![i as f64, 1.0]));
                    (i, c)
                })
                .collect();
            let step = sc.fuse(&mut g, &contexts).unwrap();
            for &a in &step.alphas {
                assert!((a - 1.0 / m as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_contexts_are_a_fixed_point() {
        let params = ScorerParams::init(2, 3, 4, &mut rng(12));
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let c = Tensor::vector(vec![0.4, -1.2, 7.0]);
        let ca = g.constant(c.clone());
        let cv = g.constant(c.clone());
        let step = sc.fuse(&mut g, &[(0, ca), (1, cv)]).unwrap();
        for (a, b) in g.value(step.fused).data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_dims_and_single_modality() {
        let params = ScorerParams::init(2, 3, 2, &mut rng(13));
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let ca = g.constant(Tensor::vector(vec![0.0; 3]));
        let bad = g.constant(Tensor::vector(vec![0.0; 4]));
        assert!(matches!(
            sc.fuse(&mut g, &[(0, ca), (1, bad)]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            sc.fuse(&mut g, &[(0, ca)]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reset_restores_fresh_scores_and_is_idempotent() {
        let params = ScorerParams::init(1, 2, 3, &mut rng(14));
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let f = g.constant(Tensor::vector(vec![0.9, -0.4]));
        let z1 = sc.score(&mut g, 0, f).unwrap();
        let z1 = g.value(z1).data()[0];
        sc.reset(&mut g);
        sc.reset(&mut g);
        let z2 = sc.score(&mut g, 0, f).unwrap();
        let z2 = g.value(z2).data()[0];
        assert_eq!(z1, z2);
    }

    #[test]
    fn weights_sum_to_one_and_fused_stays_in_envelope() {
        let params = ScorerParams::init(2, 3, 4, &mut rng(15));
        let mut r = rng(16);
        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let ca = g.constant(Tensor::vector(a.clone()));
            let cv = g.constant(Tensor::vector(v.clone()));
            let step = sc.fuse(&mut g, &[(0, ca), (1, cv)]).unwrap();
            assert!((step.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for ((&f, &x), &y) in g.value(step.fused).data().iter().zip(&a).zip(&v) {
                let lo = x.min(y) - 1e-12;
                let hi = x.max(y) + 1e-12;
                assert!(f >= lo && f <= hi);
            }
        }
    }

    #[test]
    fn fuse_streams_matches_per_step_fusion() {
        let params = ScorerParams::init(2, 2, 3, &mut rng(17));
        let rows_a = vec![vec![0.1, 0.2], vec![0.3, -0.1], vec![0.0, 0.5]];
        let rows_v = vec![vec![-0.2, 0.9], vec![0.7, 0.7], vec![0.4, -0.4]];

        let mut g = Graph::new();
        let mut sc = ModalityScorer::new(&mut g, &params, false);
        let sa = g.constant(Tensor::from_rows(&rows_a).unwrap());
        let sv = g.constant(Tensor::from_rows(&rows_v).unwrap());
        let fused = fuse_streams(&mut g, &mut sc, &[(0, sa), (1, sv)]).unwrap();
        assert_eq!(g.value(fused).shape(), &[3, 2]);

        let mut g2 = Graph::new();
        let mut sc2 = ModalityScorer::new(&mut g2, &params, false);
        for t in 0..3 {
            let ca = g2.constant(Tensor::vector(rows_a[t].clone()));
            let cv = g2.constant(Tensor::vector(rows_v[t].clone()));
            let step = sc2.fuse(&mut g2, &[(0, ca), (1, cv)]).unwrap();
            assert_eq!(g.value(fused).row(t), g2.value(step.fused).data());
        }
    }
}
