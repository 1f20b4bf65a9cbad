//! Content-based attention: energies, normalized weights, context vector.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Binder, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Parameters of one content attender.
///
/// Energy of memory row `h_u` against decoder state `s`:
/// `e_u = v . tanh(W_h h_u + W_s s + b)`.
#[derive(Clone, Debug)]
pub struct AttenderParams {
    /// `[A, E]`
    pub w_h: Tensor,
    /// `[A, S]`
    pub w_s: Tensor,
    /// `[A]`
    pub v: Tensor,
    /// `[A]`
    pub b: Tensor,
}

impl AttenderParams {
    pub fn init(attn: usize, memory_dim: usize, state_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let u = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha12Rng| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-s..s)).collect();
            Tensor::new(shape, data).expect("numel matches")
        };
        AttenderParams {
            w_h: u(vec![attn, memory_dim], memory_dim, rng),
            w_s: u(vec![attn, state_dim], state_dim, rng),
            v: u(vec![attn], attn, rng),
            b: Tensor::zeros(vec![attn]),
        }
    }

    pub fn insert_into(&self, prefix: &str, map: &mut BTreeMap<String, Tensor>) {
        map.insert(format!("{prefix}.w_h"), self.w_h.clone());
        map.insert(format!("{prefix}.w_s"), self.w_s.clone());
        map.insert(format!("{prefix}.v"), self.v.clone());
        map.insert(format!("{prefix}.b"), self.b.clone());
    }

    pub fn take_from(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |suffix: &str| {
            map.get(&format!("{prefix}.{suffix}"))
                .cloned()
                .ok_or_else(|| {
                    crate::error::Error::Checkpoint(format!("missing parameter {prefix}.{suffix}"))
                })
        };
        Ok(AttenderParams {
            w_h: get("w_h")?,
            w_s: get("w_s")?,
            v: get("v")?,
            b: get("b")?,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttenderVars {
        AttenderVars {
            w_h: g.leaf(self.w_h.clone(), trainable),
            w_s: g.leaf(self.w_s.clone(), trainable),
            v: g.leaf(self.v.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    pub fn bind_in(&self, b: &mut Binder, prefix: &str) -> AttenderVars {
        AttenderVars {
            w_h: b.leaf(format!("{prefix}.w_h"), &self.w_h),
            w_s: b.leaf(format!("{prefix}.w_s"), &self.w_s),
            v: b.leaf(format!("{prefix}.v"), &self.v),
            b: b.leaf(format!("{prefix}.b"), &self.b),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.w_s"), &mut self.w_s);
        f(format!("{prefix}.v"), &mut self.v);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttenderVars {
    pub w_h: Var,
    pub w_s: Var,
    pub v: Var,
    pub b: Var,
}

/// An attender pointed at one utterance's memory, with the memory-side
/// projection `W_h h_u` computed once and reused every decoding step.
pub struct Attender {
    vars: AttenderVars,
    memory: Var,
    /// `[U, A]`
    projected: Var,
    mask: Option<Vec<bool>>,
}

impl Attender {
    pub fn new(
        g: &mut Graph,
        vars: AttenderVars,
        memory: Var,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let wt = g.transpose(vars.w_h)?;
        let projected = g.matmul(memory, wt)?;
        Ok(Attender {
            vars,
            memory,
            projected,
            mask,
        })
    }

    pub fn memory(&self) -> Var {
        self.memory
    }

    /// Unnormalized energies against decoder state `s`: `[U]`.
    pub fn energies(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let ws = g.matvec(self.vars.w_s, s)?;
        let shift = g.add(ws, self.vars.b)?;
        let pre = g.add_rows(self.projected, shift)?;
        let act = g.tanh(pre);
        g.matvec(act, self.vars.v)
    }

    /// Normalized weights and the attention-weighted context vector.
    pub fn attend(&self, g: &mut Graph, s: Var) -> Result<(Var, Var)> {
        let e = self.energies(g, s)?;
        let weights = g.softmax_last_dim(e, self.mask.as_deref())?;
        let context = g.vecmat(weights, self.memory)?;
        Ok((context, weights))
    }
}

/// One-shot energy computation (the per-step entry point used by tests and
/// telemetry tooling; decode loops use [`Attender`] to reuse the projection).
pub fn energies(
    g: &mut Graph,
    vars: AttenderVars,
    s: Var,
    memory: Var,
) -> Result<Var> {
    let att = Attender::new(g, vars, memory, None)?;
    att.energies(g, s)
}

/// One-shot attention: `(context, weights)`.
pub fn attend(
    g: &mut Graph,
    vars: AttenderVars,
    s: Var,
    memory: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let att = Attender::new(g, vars, memory, mask.map(|m| m.to_vec()))?;
    att.attend(g, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_memory(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_v_gives_zero_energies() {
        let mut r = rng(1);
        let mut p = AttenderParams::init(3, 4, 2, &mut r);
        p.v = Tensor::zeros(vec![3]);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mem = g.constant(random_memory(5, 4, &mut r));
        let s = g.constant(Tensor::vector(vec![0.3, -0.4]));
        let e = energies(&mut g, pv, s, mem).unwrap();
        assert_eq!(g.value(e).data(), &[0.0; 5]);
    }

    #[test]
    fn single_row_energy_matches_direct_formula() {
        let mut r = rng(2);
        let p = AttenderParams::init(3, 4, 2, &mut r);
        let mem_row: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let s_data = [0.7, -0.2];
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mem = g.constant(Tensor::new(vec![1, 4], mem_row.clone()).unwrap());
        let s = g.constant(Tensor::vector(s_data.to_vec()));
        let e = energies(&mut g, pv, s, mem).unwrap();

        // Direct scalar evaluation of v . tanh(W_h h + W_s s + b).
        let mut expected = 0.0;
        for a in 0..3 {
            let mut t = p.b.data()[a];
            for (j, &h) in mem_row.iter().enumerate() {
                t += p.w_h.data()[a * 4 + j] * h;
            }
            for (j, &sv) in s_data.iter().enumerate() {
                t += p.w_s.data()[a * 2 + j] * sv;
            }
            expected += p.v.data()[a] * t.tanh();
        }
        assert!((g.value(e).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn permuting_memory_rows_permutes_energies() {
        let mut r = rng(3);
        let p = AttenderParams::init(3, 4, 2, &mut r);
        let mem = random_memory(4, 4, &mut r);
        let perm = [2usize, 0, 3, 1];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&i| mem.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let run = |m: &Tensor| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g, false);
            let mv = g.constant(m.clone());
            let s = g.constant(Tensor::vector(vec![0.1, 0.9]));
            let e = energies(&mut g, pv, s, mv).unwrap();
            g.value(e).data().to_vec()
        };
        let base = run(&mem);
        let perm_e = run(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(perm_e[k], base[i]);
        }
    }

    #[test]
    fn attend_single_row_returns_that_row() {
        let mut r = rng(4);
        let p = AttenderParams::init(3, 4, 2, &mut r);
        let mem = random_memory(1, 4, &mut r);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mv = g.constant(mem.clone());
        let s = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let (ctx, w) = attend(&mut g, pv, s, mv, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), mem.data());
    }

    #[test]
    fn identical_rows_give_that_row_back() {
        let mut r = rng(5);
        let p = AttenderParams::init(3, 4, 2, &mut r);
        let row: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mem = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mv = g.constant(mem);
        let s = g.constant(Tensor::vector(vec![-0.3, 0.8]));
        let (ctx, _) = attend(&mut g, pv, s, mv, None).unwrap();
        for (a, b) in g.value(ctx).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_matches_direct_summation() {
        let mut r = rng(6);
        let p = AttenderParams::init(4, 5, 3, &mut r);
        let mem = random_memory(3, 5, &mut r);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mv = g.constant(mem.clone());
        let s = g.constant(Tensor::vector(vec![0.2, -0.9, 0.4]));
        let (ctx, w) = attend(&mut g, pv, s, mv, None).unwrap();

        let weights = g.value(w).data().to_vec();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Independent loop over rows.
        let mut expected = vec![0.0; 5];
        for (u, &alpha) in weights.iter().enumerate() {
            for (j, e) in expected.iter_mut().enumerate() {
                *e += alpha * mem.row(u)[j];
            }
        }
        for (a, b) in g.value(ctx).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_stays_in_memory_envelope() {
        let mut r = rng(7);
        let p = AttenderParams::init(4, 3, 2, &mut r);
        for trial in 0..50 {
            let mem = random_memory(6, 3, &mut r);
            let mut g = Graph::new();
            let pv = p.bind(&mut g, false);
            let mv = g.constant(mem.clone());
            let s = g.constant(Tensor::vector(vec![
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
            ]));
            let (ctx, _) = attend(&mut g, pv, s, mv, None).unwrap();
            for j in 0..3 {
                let col: Vec<f64> = (0..6).map(|u| mem.row(u)[j]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let c = g.value(ctx).data()[j];
                assert!(c >= lo - 1e-12 && c <= hi + 1e-12, "trial {trial}");
            }
        }
    }

    #[test]
    fn masked_rows_get_zero_weight_and_all_masked_errors() {
        let mut r = rng(8);
        let p = AttenderParams::init(3, 2, 2, &mut r);
        let mem = random_memory(3, 2, &mut r);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let mv = g.constant(mem);
        let s = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let (_, w) = attend(&mut g, pv, s, mv, Some(&[true, false, true])).unwrap();
        assert_eq!(g.value(w).data()[1], 0.0);

        let all = attend(&mut g, pv, s, mv, Some(&[false, false, false]));
        assert!(matches!(all, Err(Error::InvalidMask(_))));
    }
}
