//! Training objectives: symmetric contrastive alignment, weighted L2-L1
//! reconstruction, token cross-entropy, and the two stage combiners.
//!
//! Each loss has a graph builder (differentiable) and, where useful, a plain
//! function over tensors for evaluation paths.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::Tensor;

/// Symmetric CLIP loss over pooled embeddings. Rows are cosine-normalized
/// internally; `log_inv_tau` is a [1]-shaped node holding log(1/τ) so the
/// temperature can be a trainable leaf.
pub fn clip_loss_graph(
    g: &mut Graph,
    z_fmri_hat: NodeId,
    z_video: NodeId,
    log_inv_tau: NodeId,
) -> Result<NodeId> {
    let (b, d) = {
        let s = g.value(z_fmri_hat).shape();
        if s.len() != 2 {
            return Err(Error::shape("[B, d] embeddings", format!("{s:?}")));
        }
        (s[0], s[1])
    };
    if g.value(z_video).shape() != [b, d] {
        return Err(Error::shape(
            format!("[{b}, {d}] video embeddings"),
            format!("{:?}", g.value(z_video).shape()),
        ));
    }
    if b == 0 {
        return Err(Error::validation("empty contrastive batch"));
    }
    let zh = g.l2_normalize_rows(z_fmri_hat)?;
    let zv = g.l2_normalize_rows(z_video)?;
    let zvt = g.transpose(zv)?;
    let sims = g.matmul(zh, zvt)?;
    let inv_tau = g.exp(log_inv_tau)?;
    let logits = g.mul_scalar_node(sims, inv_tau)?;
    let diag: Vec<usize> = (0..b).collect();

    let lsm_f2v = g.log_softmax_rows(logits)?;
    let pos_f2v = g.pick_per_row(lsm_f2v, &diag)?;
    let s1 = g.sum_all(pos_f2v)?;

    let logits_t = g.transpose(logits)?;
    let lsm_v2f = g.log_softmax_rows(logits_t)?;
    let pos_v2f = g.pick_per_row(lsm_v2f, &diag)?;
    let s2 = g.sum_all(pos_v2f)?;

    let total = g.add(s1, s2)?;
    g.scale(total, -1.0 / b as f64)
}

/// Plain-tensor CLIP loss used by evaluation and retrieval reporting.
pub fn clip_loss(z_fmri_hat: &Tensor, z_video: &Tensor, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::validation(format!("tau {tau} must be positive")));
    }
    let mut g = Graph::new();
    let zh = g.constant(z_fmri_hat.clone());
    let zv = g.constant(z_video.clone());
    let lit = g.constant(Tensor::from_vec(&[1], vec![(1.0 / tau).ln()])?);
    let loss = clip_loss_graph(&mut g, zh, zv, lit)?;
    Ok(g.value(loss).item())
}

/// Weighted L2-L1 reconstruction over per-sample token matrices:
/// (1/(N·L))·Σ_n Σ_l [(1−α)·‖z−x‖₂² + α·‖z−x‖₁].
pub fn recon_l2l1_graph(
    g: &mut Graph,
    pairs: &[(NodeId, NodeId)],
    alpha: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} outside [0, 1]")));
    }
    if pairs.is_empty() {
        return Err(Error::validation("empty reconstruction batch"));
    }
    let shape0 = g.value(pairs[0].0).shape().to_vec();
    if shape0.len() != 2 {
        return Err(Error::shape("[L, d] token matrices", format!("{shape0:?}")));
    }
    let l = shape0[0];
    let mut terms = Vec::with_capacity(pairs.len());
    for &(x, z) in pairs {
        for node in [x, z] {
            if g.value(node).shape() != shape0.as_slice() {
                return Err(Error::shape(
                    format!("{shape0:?} token matrices"),
                    format!("{:?}", g.value(node).shape()),
                ));
            }
        }
        let nx = g.scale(x, -1.0)?;
        let diff = g.add(z, nx)?;
        let sq = g.square(diff)?;
        let l2 = g.sum_all(sq)?;
        let ab = g.abs(diff)?;
        let l1 = g.sum_all(ab)?;
        let l2w = g.scale(l2, 1.0 - alpha)?;
        let l1w = g.scale(l1, alpha)?;
        terms.push(g.add(l2w, l1w)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / (pairs.len() * l) as f64)
}

/// Plain-tensor form of the reconstruction loss.
pub fn recon_l2l1_loss(x: &[Tensor], z: &[Tensor], alpha: f64) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::shape(
            format!("{} fMRI token sets", x.len()),
            format!("{}", z.len()),
        ));
    }
    let mut g = Graph::new();
    let pairs: Vec<(NodeId, NodeId)> = x
        .iter()
        .zip(z)
        .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())))
        .collect();
    let loss = recon_l2l1_graph(&mut g, &pairs, alpha)?;
    Ok(g.value(loss).item())
}

/// Token cross-entropy summed over the supplied (loss-bearing) positions of
/// each sample and divided by the batch size. Callers pass only answer-region
/// logits rows and their target ids; masked positions never reach this point.
pub fn ce_loss_graph(g: &mut Graph, per_sample: &[(NodeId, Vec<usize>)]) -> Result<NodeId> {
    if per_sample.is_empty() {
        return Err(Error::validation("empty cross-entropy batch"));
    }
    let mut terms = Vec::with_capacity(per_sample.len());
    for (logits, targets) in per_sample {
        let shape = g.value(*logits).shape();
        if shape.len() != 2 {
            return Err(Error::shape("[T, V] logits", format!("{shape:?}")));
        }
        let (t, v) = (shape[0], shape[1]);
        if targets.len() != t {
            return Err(Error::shape(
                format!("{t} target ids"),
                format!("{}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::validation(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let lsm = g.log_softmax_rows(*logits)?;
        let picked = g.pick_per_row(lsm, targets)?;
        terms.push(g.sum_all(picked)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, -1.0 / per_sample.len() as f64)
}

pub fn stage1_total_graph(
    g: &mut Graph,
    l_clip: NodeId,
    l_recon: NodeId,
    beta: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation(format!("beta {beta} outside [0, 1]")));
    }
    let a = g.scale(l_clip, beta)?;
    let b = g.scale(l_recon, 1.0 - beta)?;
    g.add(a, b)
}

pub fn stage2_total_graph(
    g: &mut Graph,
    l_ce: NodeId,
    l_da: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    let a = g.scale(l_ce, lambda)?;
    let b = g.scale(l_da, 1.0 - lambda)?;
    g.add(a, b)
}

pub fn stage1_total(l_clip: f64, l_recon: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation(format!("beta {beta} outside [0, 1]")));
    }
    Ok(beta * l_clip + (1.0 - beta) * l_recon)
}

pub fn stage2_total(l_ce: f64, l_da: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * l_ce + (1.0 - lambda) * l_da)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::SeedRng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeedRng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn clip_single_sample_is_zero() {
        let z = rand(&[1, 8], 1);
        let zh = rand(&[1, 8], 2);
        assert_eq!(clip_loss(&zh, &z, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn clip_orthonormal_identity_pairs() {
        // s(i,j) = 1 on the diagonal, 0 off it, τ = 1.
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        let got = clip_loss(&z, &z, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((expect - 0.62652).abs() < 5e-6);
    }

    #[test]
    fn clip_uniform_similarities_hit_2_log_b() {
        for b in [2usize, 4, 8] {
            let mut z = Tensor::zeros(&[b, 4]);
            for r in 0..b {
                z.data_mut()[r * 4] = 1.0;
                z.data_mut()[r * 4 + 1] = 2.0;
            }
            let got = clip_loss(&z, &z, 0.07).unwrap();
            let expect = 2.0 * (b as f64).ln();
            assert!((got - expect).abs() < 1e-9, "B={b}: {got} vs {expect}");
        }
        let mut z4 = Tensor::zeros(&[4, 3]);
        for r in 0..4 {
            z4.data_mut()[r * 3] = 1.0;
        }
        assert!((clip_loss(&z4, &z4, 1.0).unwrap() - 2.77259).abs() < 5e-6);
    }

    #[test]
    fn clip_invariant_to_row_rescaling() {
        let zh = rand(&[5, 6], 3);
        let zv = rand(&[5, 6], 4);
        let base = clip_loss(&zh, &zv, 0.05).unwrap();
        let mut scaled = zh.clone();
        // Power-of-two rescale of one row keeps normalization bit-exact.
        for c in 0..6 {
            scaled.data_mut()[2 * 6 + c] *= 4.0;
        }
        assert_eq!(clip_loss(&scaled, &zv, 0.05).unwrap(), base);
    }

    #[test]
    fn clip_rejects_zero_norm_rows() {
        let mut zh = rand(&[3, 4], 5);
        for c in 0..4 {
            zh.data_mut()[4 + c] = 0.0;
        }
        let zv = rand(&[3, 4], 6);
        assert!(clip_loss(&zh, &zv, 0.05).is_err());
    }

    #[test]
    fn clip_decreases_as_margin_grows() {
        // Embeddings interpolate toward their paired partner as t grows, which
        // raises the diagonal similarity while off-diagonals stay put.
        let zv = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let base = rand(&[3, 3], 7);
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let t = k as f64 / 4.0 * 0.9;
            let mut zh = base.scale(1.0 - t);
            zh.axpy(&zv, t);
            let loss = clip_loss(&zh, &zv, 0.5).unwrap();
            assert!(loss < prev, "not monotone at t={t}: {loss} vs {prev}");
            prev = loss;
        }
    }

    #[test]
    fn recon_pinned_values() {
        let x = vec![Tensor::zeros(&[1, 2])];
        let z = vec![Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap()];
        assert!((recon_l2l1_loss(&x, &z, 0.0).unwrap() - 25.0).abs() < 1e-12);
        assert!((recon_l2l1_loss(&x, &z, 1.0).unwrap() - 7.0).abs() < 1e-12);
        assert!((recon_l2l1_loss(&x, &z, 0.5).unwrap() - 16.0).abs() < 1e-12);
        let same = vec![rand(&[4, 3], 8)];
        assert_eq!(recon_l2l1_loss(&same, &same, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn recon_continuous_in_alpha() {
        let x = vec![rand(&[3, 4], 9)];
        let z = vec![rand(&[3, 4], 10)];
        let at = |a: f64| recon_l2l1_loss(&x, &z, a).unwrap();
        let (l2, l1) = (at(0.0), at(1.0));
        for k in 0..=10 {
            let a = k as f64 / 10.0;
            let expect = (1.0 - a) * l2 + a * l1;
            assert!((at(a) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_uniform_and_batch_mean() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 4], 0.7));
        let loss = ce_loss_graph(&mut g, &[(logits, vec![0, 3, 2])]).unwrap();
        let expect = 3.0 * 4.0f64.ln();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
        assert!((expect - 4.1589).abs() < 5e-5);

        // Probability ~1 on every true token drives the loss toward zero.
        let mut g = Graph::new();
        let mut sharp = Tensor::zeros(&[2, 3]);
        sharp.data_mut()[1] = 200.0;
        sharp.data_mut()[3 + 2] = 200.0;
        let node = g.constant(sharp);
        let loss = ce_loss_graph(&mut g, &[(node, vec![1, 2])]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);

        // Batch of two sequences averages their summed terms.
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 4], 0.0));
        let b = g.constant(Tensor::full(&[4, 4], 0.0));
        let loss = ce_loss_graph(&mut g, &[(a, vec![0, 1]), (b, vec![0, 1, 2, 3])]).unwrap();
        let expect = (2.0 + 4.0) * 4.0f64.ln() / 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[2, 4], 0.0));
        assert!(ce_loss_graph(&mut g, &[(logits, vec![0, 4])]).is_err());
    }

    #[test]
    fn combiners_are_exact_convex_mixes() {
        assert_eq!(stage1_total(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(stage1_total(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(stage1_total(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(stage2_total(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(stage2_total(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(stage2_total(2.0, 1.0, 0.5).unwrap(), 1.5);
        assert!(stage1_total(1.0, 1.0, 1.2).is_err());
        assert!(stage2_total(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn stage1_composite_grad_check() {
        // Gradient through clip + recon + combiner w.r.t. the fMRI-side
        // embeddings and the temperature leaf.
        let zh0 = rand(&[4, 5], 11);
        let zv = rand(&[4, 5], 12);
        let xt = rand(&[3, 5], 13);
        let zt0 = rand(&[3, 5], 14);
        let tau0 = Tensor::from_vec(&[1], vec![(1.0f64 / 0.08).ln()]).unwrap();

        let eval = |zh: &Tensor, zt: &Tensor, lit: &Tensor| {
            let mut g = Graph::new();
            let zh_n = g.leaf(zh.clone(), true);
            let zv_n = g.constant(zv.clone());
            let lit_n = g.leaf(lit.clone(), true);
            let l_clip = clip_loss_graph(&mut g, zh_n, zv_n, lit_n).unwrap();
            let x_n = g.constant(xt.clone());
            let z_n = g.leaf(zt.clone(), true);
            let l_rec = recon_l2l1_graph(&mut g, &[(x_n, z_n)], 0.4).unwrap();
            let total = stage1_total_graph(&mut g, l_clip, l_rec, 0.6).unwrap();
            let v = g.value(total).item();
            let grads = g.backward(total).unwrap();
            (v, grads.get(zh_n).cloned(), grads.get(z_n).cloned(), grads.get(lit_n).cloned())
        };

        let (_, g_zh, g_zt, g_tau) = eval(&zh0, &zt0, &tau0);
        let rep = grad_check(&zh0, &g_zh.unwrap(), 1e-5, |x| Ok(eval(x, &zt0, &tau0).0)).unwrap();
        assert!(rep.passes(1e-4), "zh: {}", rep.max_rel_err);
        // L1 kink sits at zero difference; random continuous values avoid it.
        let rep = grad_check(&zt0, &g_zt.unwrap(), 1e-5, |x| Ok(eval(&zh0, x, &tau0).0)).unwrap();
        assert!(rep.passes(1e-4), "zt: {}", rep.max_rel_err);
        let rep = grad_check(&tau0, &g_tau.unwrap(), 1e-5, |x| Ok(eval(&zh0, &zt0, x).0)).unwrap();
        assert!(rep.passes(1e-4), "tau: {}", rep.max_rel_err);
    }

    #[test]
    fn ce_grad_check() {
        let logits0 = rand(&[3, 5], 15);
        let targets = vec![2usize, 0, 4];
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let n = g.leaf(x.clone(), true);
            let loss = ce_loss_graph(&mut g, &[(n, targets.clone())]).unwrap();
            let v = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (v, grads.get(n).cloned().unwrap())
        };
        let (_, analytic) = eval(&logits0);
        let rep = grad_check(&logits0, &analytic, 1e-5, |x| Ok(eval(x).0)).unwrap();
        assert!(rep.passes(1e-4), "{}", rep.max_rel_err);
    }
}
