//! Finite-difference verification of backward gradients.
//!
//! The numeric side rebuilds the forward pass from scratch for every
//! perturbed coordinate, so it shares no code path with `Graph::backward`.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

/// Builds a loss node from fresh leaves for the given parameter values.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, Var>) -> Result<Var>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, Var>) -> Result<Var> {
        self(g, params)
    }
}

fn forward(builder: &dyn LossBuilder, params: &ParamMap, trainable: bool) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
        .collect();
    let loss = builder.build(&mut g, &vars)?;
    Ok((g, loss))
}

/// Loss value plus backward gradients for every parameter.
pub fn analytic_gradients(builder: &dyn LossBuilder, params: &ParamMap) -> Result<(f64, ParamMap)> {
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, t)| (k.clone(), g.trainable(t.clone())))
        .collect();
    let loss = builder.build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut grads = ParamMap::new();
    for (k, v) in &vars {
        let data = g
            .grad(*v)
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0.0; params[k].numel()]);
        grads.insert(k.clone(), Tensor::new(params[k].shape().to_vec(), data)?);
    }
    Ok((g.value(loss).data()[0], grads))
}

/// Central finite differences with step `h`, one full rebuild per coordinate.
pub fn numeric_gradients(builder: &dyn LossBuilder, params: &ParamMap, h: f64) -> Result<ParamMap> {
    let mut grads = ParamMap::new();
    for name in params.keys() {
        let n = params[name].numel();
        let mut gdata = vec![0.0; n];
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let (gp, lp) = forward(builder, &plus, false)?;
            let up = gp.value(lp).data()[0];

            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let (gm, lm) = forward(builder, &minus, false)?;
            let down = gm.value(lm).data()[0];

            gdata[i] = (up - down) / (2.0 * h);
        }
        grads.insert(
            name.clone(),
            Tensor::new(params[name].shape().to_vec(), gdata)?,
        );
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub coordinates: usize,
    pub within_tol: usize,
    pub within_loose: usize,
    pub worst: Option<(String, usize, f64)>,
}

impl GradReport {
    /// Passes when at least `frac` of coordinates meet the tight tolerance and
    /// every coordinate meets the loose one.
    pub fn passes(&self, frac: f64) -> bool {
        self.within_loose == self.coordinates
            && (self.within_tol as f64) >= frac * self.coordinates as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{}/{} within tol, {}/{} within loose tol, worst {:?}",
            self.within_tol, self.coordinates, self.within_loose, self.coordinates, self.worst
        )
    }
}

/// Relative error with an absolute floor: coordinates where both gradients are
/// below `abs_floor` count as matching.
pub fn compare_gradients(
    analytic: &ParamMap,
    numeric: &ParamMap,
    rel_tol: f64,
    loose_tol: f64,
    abs_floor: f64,
) -> GradReport {
    let mut report = GradReport {
        coordinates: 0,
        within_tol: 0,
        within_loose: 0,
        worst: None,
    };
    for (name, at) in analytic {
        let nt = &numeric[name];
        for (i, (&a, &n)) in at.data().iter().zip(nt.data()).enumerate() {
            report.coordinates += 1;
            let rel = if a.abs() <= abs_floor && n.abs() <= abs_floor {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs()).max(abs_floor)
            };
            if rel <= rel_tol {
                report.within_tol += 1;
            }
            if rel <= loose_tol {
                report.within_loose += 1;
            }
            if report.worst.as_ref().map_or(true, |(_, _, w)| rel > *w) {
                report.worst = Some((name.clone(), i, rel));
            }
        }
    }
    report
}

/// One-call convenience: analytic vs numeric for a loss builder.
pub fn check(
    builder: &dyn LossBuilder,
    params: &ParamMap,
    h: f64,
    rel_tol: f64,
    loose_tol: f64,
) -> Result<GradReport> {
    let (_, analytic) = analytic_gradients(builder, params)?;
    let numeric = numeric_gradients(builder, params, h)?;
    Ok(compare_gradients(&analytic, &numeric, rel_tol, loose_tol, 1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut params = ParamMap::new();
        params.insert("a".into(), random_tensor(&mut rng, &[3, 4]));
        params.insert("b".into(), random_tensor(&mut rng, &[4, 2]));
        let builder = |g: &mut Graph, p: &BTreeMap<String, Var>| {
            let c = g.matmul(p["a"], p["b"])?;
            Ok(g.sum(c))
        };
        let report = check(&builder, &params, 1e-5, 1e-6, 1e-5).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }

    #[test]
    fn sigmoid_gradient_at_0p3() {
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::vector(vec![0.3]));
        let builder = |g: &mut Graph, p: &BTreeMap<String, Var>| {
            let y = g.sigmoid(p["x"]);
            Ok(g.sum(y))
        };
        let (_, analytic) = analytic_gradients(&builder, &params).unwrap();
        let numeric = numeric_gradients(&builder, &params, 1e-5).unwrap();
        let a = analytic["x"].data()[0];
        let n = numeric["x"].data()[0];
        assert!((a - n).abs() < 1e-8, "{a} vs {n}");
    }

    #[test]
    fn concat_slice_routing_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut params = ParamMap::new();
        params.insert("a".into(), random_tensor(&mut rng, &[2, 3]));
        params.insert("b".into(), random_tensor(&mut rng, &[2, 2]));
        let builder = |g: &mut Graph, p: &BTreeMap<String, Var>| {
            let c = g.concat(&[p["a"], p["b"]], 1)?;
            // Pull the pieces back apart asymmetrically so routing errors show.
            let left = g.slice(c, 1, 0, 2)?;
            let right = g.slice(c, 1, 2, 3)?;
            let lt = g.tanh(left);
            let ls = g.sum(lt);
            let rs = g.sum(right);
            let doubled = g.scale(rs, 2.0);
            g.add(ls, doubled)
        };
        let report = check(&builder, &params, 1e-5, 1e-6, 1e-5).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut params = ParamMap::new();
        params.insert("w".into(), random_tensor(&mut rng, &[3, 3]));
        params.insert("v".into(), random_tensor(&mut rng, &[3]));
        params.insert("b".into(), random_tensor(&mut rng, &[3]));
        params.insert("s".into(), random_tensor(&mut rng, &[1]));
        let builder = |g: &mut Graph, p: &BTreeMap<String, Var>| {
            let mv = g.matvec(p["w"], p["v"])?;
            let shifted = g.add(mv, p["b"])?;
            let sm = g.softmax_last_dim(shifted, None)?;
            let ctx = g.vecmat(sm, p["w"])?;
            let scaled = g.mul_scalar(ctx, p["s"])?;
            let wt = g.transpose(p["w"])?;
            let rowsum = g.add_rows(wt, scaled)?;
            let sq = g.mul(rowsum, rowsum)?;
            Ok(g.sum(sq))
        };
        let report = check(&builder, &params, 1e-5, 1e-6, 1e-5).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut params = ParamMap::new();
        params.insert("logits".into(), random_tensor(&mut rng, &[3, 5]));
        let builder = |g: &mut Graph, p: &BTreeMap<String, Var>| {
            g.cross_entropy_ls(p["logits"], &[1, 4, 0], 0.1, Some(&[true, true, false]))
        };
        let report = check(&builder, &params, 1e-5, 1e-6, 1e-5).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let mut params = ParamMap::new();
        params.insert("x".into(), random_tensor(&mut rng, &[2, 4]));
        let mask = [true, false, true, true, true, true, false, true];
        let builder = move |g: &mut Graph, p: &BTreeMap<String, Var>| {
            let y = g.softmax_last_dim(p["x"], Some(&mask))?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        };
        let report = check(&builder, &params, 1e-5, 1e-6, 1e-5).unwrap();
        assert!(report.passes(1.0), "{}", report.summary());
    }
}
