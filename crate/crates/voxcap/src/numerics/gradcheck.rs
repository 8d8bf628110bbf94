//! Central-difference gradient checking for graph-built losses.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares `analytic` (the gradient of `loss_fn` at `x0`) against central
/// differences with step `eps`. Relative error per coordinate is
/// `|fd - an| / max(1, |an|, |fd|)`.
pub fn grad_check(
    x0: &Tensor,
    analytic: &Tensor,
    eps: f64,
    loss_fn: impl Fn(&Tensor) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.shape() != x0.shape() {
        return Err(Error::shape(
            format!("gradient of {:?}", x0.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    analytic.ensure_finite("analytic gradient")?;
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        xp.data_mut()[i] += eps;
        let fp = loss_fn(&xp)?;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= eps;
        let fm = loss_fn(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference probe at coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let an = analytic.data()[i];
        let rel = (fd - an).abs() / 1.0_f64.max(an.abs()).max(fd.abs());
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        checked: x0.len(),
        max_rel_err: max_rel,
        worst_index: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::SeedRng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn randn(shape: &[usize], rng: &mut SeedRng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // loss = sum(x^2), correct grad = 2x; feed 3x instead.
        let x0 = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let wrong = x0.scale(3.0);
        let rep = grad_check(&x0, &wrong, EPS, |x| {
            Ok(x.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!rep.passes(TOL), "rel err {}", rep.max_rel_err);

        let right = x0.scale(2.0);
        let rep = grad_check(&x0, &right, EPS, |x| {
            Ok(x.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(rep.passes(TOL), "rel err {}", rep.max_rel_err);
    }

    fn mlp_loss(x: &Tensor, w1: &Tensor, w2: &Tensor, target: usize) -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false);
        let w1n = g.leaf(w1.clone(), false);
        let w2n = g.leaf(w2.clone(), false);
        mlp_graph(&mut g, xn, w1n, w2n, target).map(|out| g.value(out).item())
    }

    fn mlp_graph(
        g: &mut Graph,
        x: crate::numerics::NodeId,
        w1: crate::numerics::NodeId,
        w2: crate::numerics::NodeId,
        target: usize,
    ) -> Result<crate::numerics::NodeId> {
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let h = g.matmul(x, w1)?;
        let h = g.layer_norm(h, gamma, beta, 1e-5)?;
        let h = g.gelu(h)?;
        let logits = g.matmul(h, w2)?;
        let lp = g.log_softmax_rows(logits)?;
        let picked = g.pick_per_row(lp, &[target, target])?;
        let s = g.sum_all(picked)?;
        g.scale(s, -0.5)
    }

    #[test]
    fn mlp_chain_gradients_match_central_differences() {
        // Exercises matmul, layer_norm, gelu, log_softmax, pick, scale together.
        let mut rng = SeedRng::new(21);
        let x0 = randn(&[2, 3], &mut rng);
        let w1 = randn(&[3, 4], &mut rng);
        let w2 = randn(&[4, 5], &mut rng);

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let w1n = g.leaf(w1.clone(), true);
        let w2n = g.leaf(w2.clone(), true);
        let out = mlp_graph(&mut g, xn, w1n, w2n, 2).unwrap();
        let grads = g.backward(out).unwrap();

        let rep = grad_check(&x0, grads.get(xn).unwrap(), EPS, |x| {
            mlp_loss(x, &w1, &w2, 2)
        })
        .unwrap();
        assert!(rep.passes(TOL), "x rel err {}", rep.max_rel_err);

        let rep = grad_check(&w1, grads.get(w1n).unwrap(), EPS, |w| {
            mlp_loss(&x0, w, &w2, 2)
        })
        .unwrap();
        assert!(rep.passes(TOL), "w1 rel err {}", rep.max_rel_err);

        let rep = grad_check(&w2, grads.get(w2n).unwrap(), EPS, |w| {
            mlp_loss(&x0, &w1, w, 2)
        })
        .unwrap();
        assert!(rep.passes(TOL), "w2 rel err {}", rep.max_rel_err);
    }

    fn cosine_temp_loss(a: &Tensor, b: &Tensor, log_inv_tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let an = g.leaf(a.clone(), false);
        let bn = g.leaf(b.clone(), false);
        let tn = g.leaf(Tensor::scalar(log_inv_tau), false);
        let out = cosine_temp_graph(&mut g, an, bn, tn)?;
        Ok(g.value(out).item())
    }

    fn cosine_temp_graph(
        g: &mut Graph,
        a: crate::numerics::NodeId,
        b: crate::numerics::NodeId,
        log_inv_tau: crate::numerics::NodeId,
    ) -> Result<crate::numerics::NodeId> {
        let an = g.l2_normalize_rows(a)?;
        let bn = g.l2_normalize_rows(b)?;
        let bt = g.transpose(bn)?;
        let sims = g.matmul(an, bt)?;
        let inv_tau = g.exp(log_inv_tau)?;
        let logits = g.mul_scalar_node(sims, inv_tau)?;
        let lp = g.log_softmax_rows(logits)?;
        let diag = g.pick_per_row(lp, &[0, 1, 2])?;
        let s = g.sum_all(diag)?;
        g.scale(s, -1.0 / 3.0)
    }

    #[test]
    fn cosine_similarity_with_learned_temperature_gradients() {
        // Exercises l2_normalize_rows, transpose, exp, mul_scalar_node.
        let mut rng = SeedRng::new(33);
        let a0 = randn(&[3, 4], &mut rng);
        let b0 = randn(&[3, 4], &mut rng);
        let lt0 = 0.7;

        let mut g = Graph::new();
        let an = g.leaf(a0.clone(), true);
        let bn = g.leaf(b0.clone(), true);
        let tn = g.leaf(Tensor::scalar(lt0), true);
        let out = cosine_temp_graph(&mut g, an, bn, tn).unwrap();
        let grads = g.backward(out).unwrap();

        let rep = grad_check(&a0, grads.get(an).unwrap(), EPS, |a| {
            cosine_temp_loss(a, &b0, lt0)
        })
        .unwrap();
        assert!(rep.passes(TOL), "a rel err {}", rep.max_rel_err);

        let rep = grad_check(&b0, grads.get(bn).unwrap(), EPS, |b| {
            cosine_temp_loss(&a0, b, lt0)
        })
        .unwrap();
        assert!(rep.passes(TOL), "b rel err {}", rep.max_rel_err);

        let t0 = Tensor::scalar(lt0);
        let rep = grad_check(&t0, grads.get(tn).unwrap(), EPS, |t| {
            cosine_temp_loss(&a0, &b0, t.item())
        })
        .unwrap();
        assert!(rep.passes(TOL), "tau rel err {}", rep.max_rel_err);
    }

    #[test]
    fn attention_style_block_gradients() {
        // Scaled dot-product attention with additive mask, bias adds, sigmoid
        // gating, column slicing, and mean pooling.
        let mut rng = SeedRng::new(55);
        let x0 = randn(&[4, 6], &mut rng);
        let wq = randn(&[6, 6], &mut rng);
        let bias = randn(&[6], &mut rng);
        let mask = {
            let mut m = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                for j in 0..4 {
                    if j > i {
                        m.data_mut()[i * 4 + j] = -1e9;
                    }
                }
            }
            m
        };

        let build = |g: &mut Graph, x: crate::numerics::NodeId| -> Result<crate::numerics::NodeId> {
            let wqn = g.constant(wq.clone());
            let bn = g.constant(bias.clone());
            let mn = g.constant(mask.clone());
            let q = g.matmul(x, wqn)?;
            let q = g.add_bias(q, bn)?;
            let qh = g.slice_cols(q, 0, 3)?;
            let kh = g.slice_cols(q, 3, 6)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / 3.0_f64.sqrt())?;
            let scores = g.add(scores, mn)?;
            let attn = g.softmax_rows(scores)?;
            let out = g.matmul(attn, qh)?;
            let gate = g.sigmoid(out)?;
            let mixed = g.mul(out, gate)?;
            let pooled = g.mean_pool_rows(mixed)?;
            let sq = g.square(pooled)?;
            g.mean_all(sq)
        };

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let out = build(&mut g, xn).unwrap();
        let grads = g.backward(out).unwrap();

        let rep = grad_check(&x0, grads.get(xn).unwrap(), EPS, |x| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone(), false);
            build(&mut g, xn).map(|o| g.value(o).item())
        })
        .unwrap();
        assert!(rep.passes(TOL), "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn gather_and_abs_gradients() {
        // abs kink avoided by keeping probe points away from zero.
        let mut rng = SeedRng::new(77);
        let mut x0 = randn(&[2, 4], &mut rng);
        for v in x0.data_mut().iter_mut() {
            if v.abs() < 0.2 {
                *v += 0.5 * v.signum().max(0.5);
            }
        }
        let offsets = [1usize, 3, 0, 5, 7, 2];

        let build = |g: &mut Graph, x: crate::numerics::NodeId| -> Result<crate::numerics::NodeId> {
            let gathered = g.gather_flat(x, &offsets, &[3, 2])?;
            let a = g.abs(gathered)?;
            let sr = g.sum_rows(a)?;
            let sq = g.square(sr)?;
            g.sum_all(sq)
        };

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let out = build(&mut g, xn).unwrap();
        let grads = g.backward(out).unwrap();

        let rep = grad_check(&x0, grads.get(xn).unwrap(), EPS, |x| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone(), false);
            build(&mut g, xn).map(|o| g.value(o).item())
        })
        .unwrap();
        assert!(rep.passes(TOL), "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn entropy_chain_gradients() {
        // Row entropies from softmax/log_softmax composition, then the ES
        // penalty. Probe logits chosen so no entropy sits near the margin kink.
        let x0 = Tensor::from_vec(&[2, 3], vec![3.0, 0.1, -0.2, 0.3, 0.25, 0.2]).unwrap();

        let build = |g: &mut Graph, x: crate::numerics::NodeId| -> Result<crate::numerics::NodeId> {
            let p = g.softmax_rows(x)?;
            let lp = g.log_softmax_rows(x)?;
            let plp = g.mul(p, lp)?;
            let neg_h = g.sum_rows(plp)?;
            let h = g.scale(neg_h, -1.0)?;
            let pen = g.es_penalty(h, 0.5, 0.2)?;
            g.mean_all(pen)
        };

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let out = build(&mut g, xn).unwrap();
        let grads = g.backward(out).unwrap();

        let rep = grad_check(&x0, grads.get(xn).unwrap(), EPS, |x| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone(), false);
            build(&mut g, xn).map(|o| g.value(o).item())
        })
        .unwrap();
        assert!(rep.passes(TOL), "rel err {}", rep.max_rel_err);
    }
}
