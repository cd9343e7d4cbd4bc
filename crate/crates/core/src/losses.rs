//! Supervised, agreement and diversity losses, built from differentiable
//! graph ops. Every pixel-level quantity is averaged over batch and pixels.

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Probabilities are floored at this value inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// One-hot ground truth `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap<T: Float = f32>(Tensor<T>);

impl<T: Float> LabelMap<T> {
    /// Encodes `n` row-major class-index masks of `h * w` pixels each.
    pub fn one_hot(classes: &[u8], n: usize, num_classes: usize, h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        if classes.len() != n * hw {
            return dim_err(format!("{} class ids for {n} masks of {h}x{w}", classes.len()));
        }
        let mut data = vec![T::zero(); n * num_classes * hw];
        for b in 0..n {
            for j in 0..hw {
                let c = classes[b * hw + j] as usize;
                if c >= num_classes {
                    return contract_err(format!("class id {c} outside 0..{num_classes}"));
                }
                data[(b * num_classes + c) * hw + j] = T::one();
            }
        }
        Ok(Self(Tensor::new(vec![n, num_classes, h, w], data)?))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Logged loss terms of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_sup: f64,
    pub l_cot: f64,
    pub l_div: f64,
    pub lambda_cot: f64,
    pub lambda_div: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_sup: f64, l_cot: f64, l_div: f64, lambda_cot: f64, lambda_div: f64) -> Self {
        let mut b = Self { l_sup, l_cot, l_div, lambda_cot, lambda_div, total: 0.0 };
        b.total = b.recompose();
        b
    }

    /// `l_sup + lambda_cot * l_cot + lambda_div * l_div`.
    pub fn recompose(&self) -> f64 {
        self.l_sup + self.lambda_cot * self.l_cot + self.lambda_div * self.l_div
    }
}

fn pixels<T: Float>(g: &Graph<T>, v: Var) -> Result<f64> {
    match *g.shape(v) {
        [n, _, h, w] => Ok((n * h * w) as f64),
        ref s => dim_err(format!("expected a [N, C, H, W] map, got {s:?}")),
    }
}

/// `ln(max(p, LOG_FLOOR))`.
pub fn safe_log<T: Float>(g: &mut Graph<T>, p: Var) -> Var {
    let c = g.clamp(p, T::of(LOG_FLOOR), T::infinity());
    g.log(c)
}

/// Pixel-wise cross-entropy against one-hot targets, as a positive
/// negative log-likelihood averaged over batch and pixels.
pub fn sup_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: &LabelMap<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return dim_err(format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape()));
    }
    let y = g.constant(target.0.clone());
    masked_cross_entropy(g, pred, y, pixels(g, pred)?)
}

/// `-sum(weights * log pred) / normalizer`; `weights` is a constant map.
pub fn masked_cross_entropy<T: Float>(g: &mut Graph<T>, pred: Var, weights: Var, normalizer: f64) -> Result<Var> {
    let lp = safe_log(g, pred);
    let prod = g.mul(weights, lp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::of(-1.0 / normalizer)))
}

/// Per-pixel Shannon entropy `[N, 1, H, W]`, with `0 ln 0 = 0`.
pub fn entropy_map<T: Float>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let lp = safe_log(g, p);
    let plp = g.mul(p, lp)?;
    let s = g.channel_sum(plp)?;
    Ok(g.neg(s))
}

/// Mean per-pixel entropy.
pub fn mean_entropy<T: Float>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let h = entropy_map(g, p)?;
    Ok(g.mean(h))
}

/// Jensen-Shannon agreement of `k >= 2` predictions:
/// mean over pixels of `H(mean_i p_i) - mean_i H(p_i)`.
pub fn jsd_agreement<T: Float>(g: &mut Graph<T>, preds: &[Var]) -> Result<Var> {
    if preds.len() < 2 {
        return contract_err(format!("agreement needs at least 2 predictions, got {}", preds.len()));
    }
    let k = preds.len();
    let mut acc = preds[0];
    for &p in &preds[1..] {
        acc = g.add(acc, p)?;
    }
    let avg = g.scale(acc, T::of(1.0 / k as f64));
    let h_avg = mean_entropy(g, avg)?;
    let mut h_sum = mean_entropy(g, preds[0])?;
    for &p in &preds[1..] {
        let h = mean_entropy(g, p)?;
        h_sum = g.add(h_sum, h)?;
    }
    let h_mean = g.scale(h_sum, T::of(1.0 / k as f64));
    g.sub(h_avg, h_mean)
}

/// Soft cross-entropy `H(p, q) = -sum_c p_c ln q_c`, averaged over pixels.
/// `p` should be a constant (see [`Graph::detach`]).
pub fn soft_cross_entropy<T: Float>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return dim_err(format!("soft cross-entropy: {:?} vs {:?}", g.shape(p), g.shape(q)));
    }
    masked_cross_entropy(g, q, p, pixels(g, q)?)
}

/// `KL(p || q)` averaged over pixels.
pub fn kl_divergence<T: Float>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let ce = soft_cross_entropy(g, p, q)?;
    let hp = mean_entropy(g, p)?;
    g.sub(ce, hp)
}

/// One direction of the diversity coupling between models `a` and `b`:
/// model `a`'s clean prediction on some images, and model `b`'s prediction
/// on adversarial examples generated against `a` from the same images.
#[derive(Clone, Copy, Debug)]
pub struct DivTerm {
    pub clean_target: Var,
    pub peer_on_adversarial: Option<Var>,
}

/// Sum over directions of `H(f^a(x), f^b(g^a(x)))`. Clean targets are detached.
pub fn div_loss<T: Float>(g: &mut Graph<T>, terms: &[DivTerm]) -> Result<Var> {
    if terms.is_empty() {
        return contract_err("diversity loss needs at least one term");
    }
    let mut total: Option<Var> = None;
    for (i, t) in terms.iter().enumerate() {
        let Some(q) = t.peer_on_adversarial else {
            return contract_err(format!("diversity term {i} has no adversarial counterpart"));
        };
        let p = g.detach(t.clean_target);
        let h = soft_cross_entropy(g, p, q)?;
        total = Some(match total {
            Some(acc) => g.add(acc, h)?,
            None => h,
        });
    }
    Ok(total.expect("at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(g: &mut Graph<f64>, c: usize, data: &[f64]) -> Var {
        let n = data.len() / c;
        g.constant(Tensor::new(vec![1, c, 1, n], data.to_vec()).unwrap())
    }

    #[test]
    fn sup_loss_values() {
        let mut g = Graph::<f64>::new();
        let y = LabelMap::one_hot(&[0], 1, 2, 1, 1).unwrap();
        let p = map(&mut g, 2, &[0.9, 0.1]);
        let l = sup_loss(&mut g, p, &y).unwrap();
        assert!((g.value(l).item() - 0.9f64.ln().abs()).abs() < 1e-12);

        let exact = map(&mut g, 2, &[1.0, 0.0]);
        let l = sup_loss(&mut g, exact, &y).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let y4 = LabelMap::one_hot(&[3, 1], 1, 4, 1, 2).unwrap();
        let uniform = map(&mut g, 4, &[0.25; 8]);
        let l = sup_loss(&mut g, uniform, &y4).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sup_loss_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let y = LabelMap::one_hot(&[0, 1], 1, 2, 1, 2).unwrap();
        let p = map(&mut g, 2, &[0.5, 0.5]);
        assert!(matches!(sup_loss(&mut g, p, &y), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn one_hot_rejects_bad_class() {
        assert!(LabelMap::<f32>::one_hot(&[0, 4], 1, 4, 1, 2).is_err());
        let y = LabelMap::<f32>::one_hot(&[2, 0], 1, 3, 1, 2).unwrap();
        assert_eq!(y.tensor().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn entropy_values() {
        let mut g = Graph::<f64>::new();
        let p = map(&mut g, 3, &[0.5, 0.25, 0.25]);
        let h = entropy_map(&mut g, p).unwrap();
        assert!((g.value(h).item() - 1.5 * 2f64.ln()).abs() < 1e-12);
        let one_hot = map(&mut g, 3, &[0.0, 1.0, 0.0]);
        let h = entropy_map(&mut g, one_hot).unwrap();
        assert_eq!(g.value(h).item(), 0.0);
        let u = map(&mut g, 5, &[0.2; 5]);
        let h = entropy_map(&mut g, u).unwrap();
        assert!((g.value(h).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_identical_and_opposite() {
        let mut g = Graph::<f64>::new();
        let a = map(&mut g, 2, &[0.3, 0.7]);
        let b = map(&mut g, 2, &[0.3, 0.7]);
        let j = jsd_agreement(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(j).item(), 0.0);
        let p = map(&mut g, 2, &[1.0, 0.0]);
        let q = map(&mut g, 2, &[0.0, 1.0]);
        let j = jsd_agreement(&mut g, &[p, q]).unwrap();
        assert!((g.value(j).item() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(jsd_agreement(&mut g, &[p]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn soft_cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let p = map(&mut g, 2, &[0.5, 0.5]);
        let q = map(&mut g, 2, &[0.5, 0.5]);
        let h = soft_cross_entropy(&mut g, p, q).unwrap();
        assert!((g.value(h).item() - 2f64.ln()).abs() < 1e-12);
        let p = map(&mut g, 2, &[1.0, 0.0]);
        let q = map(&mut g, 2, &[0.9, 0.1]);
        let h = soft_cross_entropy(&mut g, p, q).unwrap();
        assert!((g.value(h).item() + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = map(&mut g, 3, &[0.2, 0.5, 0.3]);
        let k = kl_divergence(&mut g, p, p).unwrap();
        assert!(g.value(k).item().abs() < 1e-15);
    }

    #[test]
    fn div_loss_detaches_targets_and_requires_counterparts() {
        let mut g = Graph::<f64>::new();
        let clean = g.variable(Tensor::new(vec![1, 2, 1, 1], vec![0.6, 0.4]).unwrap());
        let adv = g.variable(Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.7]).unwrap());
        let l = div_loss(&mut g, &[DivTerm { clean_target: clean, peer_on_adversarial: Some(adv) }]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(clean).is_none());
        let grad = g.grad(adv).unwrap();
        assert!((grad[0] + 0.6 / 0.3).abs() < 1e-12);
        assert!((grad[1] + 0.4 / 0.7).abs() < 1e-12);
        let missing = DivTerm { clean_target: clean, peer_on_adversarial: None };
        assert!(matches!(div_loss(&mut g, &[missing]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn bundle_recomposes() {
        let b = LossBundle::new(0.7, 0.2, 1.3, 0.5, 0.05);
        assert!((b.total - (0.7 + 0.1 + 0.065)).abs() < 1e-12);
    }
}
