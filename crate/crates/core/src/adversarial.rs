//! Adversarial examples: FGSM against the ground truth for labeled images,
//! VAT power iteration for unlabeled ones. Generation runs the model in eval
//! mode with its parameters recorded as constants, so it never touches them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::losses::{kl_divergence, sup_loss, LabelMap};
use crate::rng::{self, Purpose};
use crate::segnet::SegModel;
use crate::tensor::{Float, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    /// L-infinity budget of FGSM.
    pub eps_fgsm: f64,
    /// Per-image L2 budget of VAT.
    pub eps_vat: f64,
    /// Probe scale of the VAT power iteration.
    pub xi: f64,
    pub n_power: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self { eps_fgsm: 0.03, eps_vat: 10.0, xi: 1e-6, n_power: 1 }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_fgsm > 0.0 && self.eps_vat > 0.0 && self.xi > 0.0 && self.n_power > 0) {
            return Err(Error::Config(format!("adversarial settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Adversarial images and the model's clean eval-mode prediction on the
/// originals, which serves as the detached target of the diversity loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Adversarial<T: Float = f32> {
    pub images: Tensor<T>,
    pub clean: Tensor<T>,
}

/// `x + eps * sign(grad)`, with `sign(0) = 0`.
pub fn signed_step<T: Float>(x: &Tensor<T>, grad: &[T], eps: f64) -> Result<Tensor<T>> {
    if grad.len() != x.numel() {
        return dim_err(format!("gradient of {} values for input {:?}", grad.len(), x.shape()));
    }
    let eps = T::of(eps);
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| if g > T::zero() { v + eps } else if g < T::zero() { v - eps } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Gradient of the supervised loss with respect to the input, and the clean prediction.
pub fn input_gradient<T: Float>(model: &SegModel<T>, x: &Tensor<T>, y: &LabelMap<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.variable(x.clone());
    let mut unused = rng::stream(0, Purpose::Dropout, 0);
    let p = bound.forward(&mut g, xv, false, &mut unused)?;
    let loss = sup_loss(&mut g, p, y)?;
    g.backward(loss)?;
    let grad = g.take_grad(xv).unwrap_or_else(|| vec![T::zero(); x.numel()]);
    Ok((grad, g.value(p).clone()))
}

/// Fast gradient sign method. Outputs are not clamped to the pixel range.
pub fn fgsm<T: Float>(model: &SegModel<T>, x: &Tensor<T>, y: Option<&LabelMap<T>>, eps: f64) -> Result<Adversarial<T>> {
    let Some(y) = y else {
        return contract_err("FGSM needs labels for its input batch");
    };
    let (grad, clean) = input_gradient(model, x, y)?;
    Ok(Adversarial { images: signed_step(x, &grad, eps)?, clean })
}

fn per_image_norms<T: Float>(v: &[T], n: usize) -> Vec<f64> {
    let per = v.len() / n;
    v.chunks(per).map(|c| c.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()).collect()
}

/// Rescales every image of `v` to L2 norm `scale`; images with zero norm are zeroed
/// and their indices returned.
fn normalize_per_image<T: Float>(v: &mut [T], n: usize, scale: f64) -> Vec<usize> {
    let per = v.len() / n;
    let norms = per_image_norms(v, n);
    let mut degenerate = Vec::new();
    for (i, (chunk, &norm)) in v.chunks_mut(per).zip(&norms).enumerate() {
        if norm > 0.0 && norm.is_finite() {
            let f = scale / norm;
            chunk.iter_mut().for_each(|x| *x = T::of(x.as_f64() * f));
        } else {
            chunk.iter_mut().for_each(|x| *x = T::zero());
            degenerate.push(i);
        }
    }
    degenerate
}

/// `KL(f(x) || f(x + r))` averaged over pixels, eval mode.
pub fn smoothness<T: Float>(model: &SegModel<T>, x: &Tensor<T>, r: &Tensor<T>) -> Result<f64> {
    let p = model.predict(x)?;
    let q = model.predict(&x.zip_map(r, |a, b| a + b)?)?;
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p), g.constant(q));
    let kl = kl_divergence(&mut g, pv, qv)?;
    Ok(g.value(kl).item().as_f64())
}

/// Virtual adversarial perturbation: power iteration from a random unit
/// direction towards the direction of steepest KL increase, scaled to `eps`
/// per image. Images whose direction collapses to zero come back unchanged.
pub fn vat_perturbation<T: Float, R: Rng + ?Sized>(
    model: &SegModel<T>,
    x: &Tensor<T>,
    eps: f64,
    xi: f64,
    n_power: usize,
    rng: &mut R,
) -> Result<Adversarial<T>> {
    let n = match *x.shape() {
        [n, _, _, _] if n > 0 => n,
        ref s => return dim_err(format!("VAT expects a non-empty [N, C, H, W] batch, got {s:?}")),
    };
    let clean = model.predict(x)?;
    let mut d: Vec<T> = (0..x.numel()).map(|_| T::of(StandardNormal.sample(rng))).collect();
    normalize_per_image(&mut d, n, 1.0);
    let mut degenerate = Vec::new();
    for _ in 0..n_power {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let target = g.constant(clean.clone());
        let xv = g.constant(x.clone());
        let r = g.variable(Tensor::new(x.shape().to_vec(), d.iter().map(|&v| v * T::of(xi)).collect())?);
        let xr = g.add(xv, r)?;
        let mut unused = rng::stream(0, Purpose::Dropout, 0);
        let q = bound.forward(&mut g, xr, false, &mut unused)?;
        let kl = kl_divergence(&mut g, target, q)?;
        g.backward(kl)?;
        d = g.take_grad(r).unwrap_or_else(|| vec![T::zero(); x.numel()]);
        degenerate = normalize_per_image(&mut d, n, 1.0);
    }
    if !degenerate.is_empty() {
        log::warn!("VAT direction vanished for images {degenerate:?}; returning them unperturbed");
    }
    normalize_per_image(&mut d, n, eps);
    for &i in &degenerate {
        let per = d.len() / n;
        d[i * per..(i + 1) * per].iter_mut().for_each(|v| *v = T::zero());
    }
    let r = Tensor::new(x.shape().to_vec(), d)?;
    Ok(Adversarial { images: x.zip_map(&r, |a, b| a + b)?, clean })
}

/// Adversarial examples targeted on one model for its labeled batch (FGSM)
/// and the shared unlabeled batch (VAT).
#[derive(Clone, Debug, Default)]
pub struct AdversarialSet<T: Float = f32> {
    pub labeled: Option<Adversarial<T>>,
    pub unlabeled: Option<Adversarial<T>>,
}

impl<T: Float> AdversarialSet<T> {
    pub fn count(&self) -> usize {
        [&self.labeled, &self.unlabeled].iter().filter_map(|a| a.as_ref()).map(|a| a.images.shape()[0]).sum()
    }

    /// Adversarial images and clean targets, labeled first, stacked along the batch.
    pub fn stacked(&self) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        let parts: Vec<&Adversarial<T>> = [&self.labeled, &self.unlabeled].into_iter().flatten().collect();
        if parts.is_empty() {
            return Ok(None);
        }
        let images: Vec<&Tensor<T>> = parts.iter().map(|a| &a.images).collect();
        let clean: Vec<&Tensor<T>> = parts.iter().map(|a| &a.clean).collect();
        Ok(Some((Tensor::stack_batch(&images)?, Tensor::stack_batch(&clean)?)))
    }
}

/// FGSM on the labeled batch and VAT on the unlabeled batch. The VAT power
/// iteration is evaluated in f64: a probe of `xi = 1e-6` vanishes below f32
/// resolution for intensities near 1.
pub fn generate_for_batch<T: Float, R: Rng + ?Sized>(
    model: &SegModel<T>,
    labeled: Option<(&Tensor<T>, &LabelMap<T>)>,
    unlabeled: Option<&Tensor<T>>,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<AdversarialSet<T>> {
    cfg.validate()?;
    let labeled = match labeled {
        Some((x, y)) if x.shape()[0] > 0 => Some(fgsm(model, x, Some(y), cfg.eps_fgsm)?),
        _ => None,
    };
    let unlabeled = match unlabeled {
        Some(u) if u.shape()[0] > 0 => {
            let wide = model.cast::<f64>();
            let a = vat_perturbation(&wide, &u.cast::<f64>(), cfg.eps_vat, cfg.xi, cfg.n_power, rng)?;
            Some(Adversarial { images: a.images.cast(), clean: a.clean.cast() })
        }
        _ => None,
    };
    Ok(AdversarialSet { labeled, unlabeled })
}
