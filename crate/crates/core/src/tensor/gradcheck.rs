//! Central-difference gradient checking.
//!
//! The function under test runs in f32 (the training path); the difference
//! quotient is formed in f64. The function is evaluated twice at the base
//! point and must agree bit-for-bit — stochastic functions (unfrozen
//! dropout) are rejected rather than silently mis-checked.

use super::{Graph, NodeId, Result, Tensor, TensorError};

pub const DEFAULT_EPS: f32 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (tensor index, coordinate) of the worst disagreement
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued builder over the given input tensors, at eps = 1e-3.
pub fn gradcheck<F>(f: F, points: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    gradcheck_eps(f, points, DEFAULT_EPS)
}

pub fn gradcheck_eps<F>(f: F, points: &[Tensor], eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // Two fresh builds must agree bit-for-bit, otherwise f is stochastic
    // (e.g. dropout masks drawn from an unfixed stream) and the check is
    // meaningless.
    let eval_f32 = |pts: &[Tensor]| -> Result<f32> {
        let mut g = Graph::new();
        let vars: Vec<NodeId> = pts.iter().map(|t| g.var(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(TensorError::State("gradcheck requires a scalar-valued function".into()));
        }
        Ok(g.scalar_value(loss))
    };
    let base_a = eval_f32(points)?;
    let base_b = eval_f32(points)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    // Analytic gradients at the base point come from the f64 rule mirror
    // over the recorded tape; the same tape is replayed in f64 for the
    // central differences, so masks and index draws made during
    // construction stay frozen across perturbations and both sides of the
    // comparison carry f64 precision.
    let mut g = Graph::new();
    let vars: Vec<NodeId> = points.iter().map(|t| g.var(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let analytic_all = g.grads_f64(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, t)| analytic_all[v].clone().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let eps = eps as f64;
    let mut overrides = std::collections::HashMap::new();
    for (ti, t) in points.iter().enumerate() {
        let base: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        for ci in 0..t.len() {
            let mut pert = base.clone();
            pert[ci] = base[ci] + eps;
            overrides.insert(vars[ti], pert.clone());
            let plus = g.replay_f64(&overrides, loss)?;
            pert[ci] = base[ci] - eps;
            overrides.insert(vars[ti], pert);
            let minus = g.replay_f64(&overrides, loss)?;
            overrides.remove(&vars[ti]);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ci);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_checks_exactly() {
        let c = Tensor::vector(vec![0.5, -1.25, 2.0, 0.75]);
        let x = Tensor::vector(vec![1.0, 2.0, -0.5, 0.25]);
        let cc = c.clone();
        let report = gradcheck(
            move |g, vars| {
                let cn = g.constant(cc.clone());
                let prod = g.mul(cn, vars[0])?;
                g.sum_all(prod)
            },
            &[x],
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn cosine_similarity_checks_at_random_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::vector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::vector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = gradcheck(|g, vars| g.cosine_sim(vars[0], vars[1]), &[a, b]).unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_of_linear_map_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let x = Tensor::matrix(4, 1, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let xc = x.clone();
        let report = gradcheck(
            move |g, vars| {
                let xn = g.constant(xc.clone());
                let logits = g.matmul(vars[0], xn)?; // [5,1]
                let one = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
                let rowvec = g.matmul_nt(one, logits)?; // [1,5]
                g.cross_entropy_rows(rowvec, vec![2])
            },
            &[w],
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let counter = AtomicU32::new(0);
        let x = Tensor::vector(vec![1.0]);
        let err = gradcheck(
            move |g, vars| {
                let c = counter.fetch_add(1, Ordering::SeqCst) as f32;
                let noise = g.constant(Tensor::vector(vec![c]));
                let y = g.add(vars[0], noise)?;
                g.sum_all(y)
            },
            &[x],
        );
        assert!(matches!(err, Err(TensorError::NonDeterministic)));
    }
}
