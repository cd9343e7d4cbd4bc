//! Single-model semi-supervised baselines: pseudo-labels, mean teacher and VAT.

use rand::Rng;

use super::steps::LabeledBatch;
use crate::adversarial::vat_perturbation;
use crate::data::AugmentSpec;
use crate::error::{contract_err, Error, Result};
use crate::losses::{kl_divergence, masked_cross_entropy, sup_loss, LossBundle};
use crate::rng::StreamRng;
use crate::segnet::{copy_params, SegModel};
use crate::tensor::{Adam, Float, Graph, Tensor, Var};

use super::steps::augment_images;

/// Marks the `ceil(alpha_pct / 100 * n)` most confident pixels; ties go to the lower index.
pub fn select_confident<T: Float>(confidence: &[T], alpha_pct: f64) -> Vec<bool> {
    let n = confidence.len();
    let keep = ((alpha_pct / 100.0 * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| confidence[j].partial_cmp(&confidence[i]).expect("finite confidence").then(i.cmp(&j)));
    let mut mask = vec![false; n];
    order[..keep].iter().for_each(|&i| mask[i] = true);
    mask
}

/// One-hot targets of the confident pixels of each image, zeros elsewhere,
/// and the number of selected pixels.
fn pseudo_targets(p: &Tensor, alpha_pct: f64) -> (Tensor, usize) {
    let (n, c, hw) = (p.shape()[0], p.shape()[1], p.shape()[2] * p.shape()[3]);
    let d = p.data();
    let mut out = vec![0.0f32; d.len()];
    let mut selected = 0;
    for b in 0..n {
        let mut conf = vec![0.0f32; hw];
        let mut cls = vec![0usize; hw];
        for j in 0..hw {
            for ch in 0..c {
                let v = d[(b * c + ch) * hw + j];
                if ch == 0 || v > conf[j] {
                    conf[j] = v;
                    cls[j] = ch;
                }
            }
        }
        for (j, keep) in select_confident(&conf, alpha_pct).into_iter().enumerate() {
            if keep {
                out[(b * c + cls[j]) * hw + j] = 1.0;
                selected += 1;
            }
        }
    }
    (Tensor::new(p.shape().to_vec(), out).expect("same shape"), selected)
}

fn apply_update(model: &mut SegModel, opt: &mut Adam, g: &mut Graph, bound: &crate::segnet::BoundModel, total: Var, bundle: LossBundle) -> Result<LossBundle> {
    if ![bundle.l_sup, bundle.l_cot, bundle.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms {bundle:?}")));
    }
    g.backward(total)?;
    model.collect_grads(g, bound)?;
    opt.step(model.params_mut())?;
    Ok(bundle)
}

/// Supervised loss plus `weight` times the cross-entropy of the unlabeled
/// predictions against their own detached argmax on the top `alpha_pct`
/// percent most confident pixels of each image.
pub fn pseudo_label_step(
    model: &mut SegModel,
    opt: &mut Adam,
    labeled: &LabeledBatch,
    unlabeled: Option<&Tensor>,
    alpha_pct: f64,
    weight: f64,
    dropout: &mut StreamRng,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(labeled.images.clone());
    let p = bound.forward(&mut g, x, true, dropout)?;
    let l_sup = sup_loss(&mut g, p, &labeled.labels)?;
    let mut total = l_sup;
    let mut l_pl = 0.0;
    if let (true, Some(u)) = (weight > 0.0, unlabeled) {
        let xu = g.constant(u.clone());
        let pu = bound.forward(&mut g, xu, true, dropout)?;
        let (targets, selected) = pseudo_targets(g.value(pu), alpha_pct);
        let t = g.constant(targets);
        let l = masked_cross_entropy(&mut g, pu, t, selected.max(1) as f64)?;
        l_pl = g.value(l).item() as f64;
        let w = g.scale(l, weight as f32);
        total = g.add(total, w)?;
    }
    let bundle = LossBundle::new(g.value(l_sup).item() as f64, l_pl, 0.0, weight, 0.0);
    apply_update(model, opt, &mut g, &bound, total, bundle)
}

/// Teacher parameters tracked as an exponential moving average of the student.
#[derive(Clone, Debug)]
pub struct MeanTeacherState {
    pub teacher: SegModel,
    pub ema_alpha: f64,
}

impl MeanTeacherState {
    pub fn new(student: &SegModel, ema_alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_alpha) {
            return contract_err(format!("ema_alpha {ema_alpha} outside [0, 1]"));
        }
        let mut teacher = student.clone();
        copy_params(&mut teacher, student)?;
        teacher.params_mut().iter_mut().for_each(|p| p.grad = None);
        Ok(Self { teacher, ema_alpha })
    }

    pub fn update(&mut self, student: &SegModel) -> Result<()> {
        ema_update(&mut self.teacher, student, self.ema_alpha)
    }
}

/// `teacher = alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update<T: Float>(teacher: &mut SegModel<T>, student: &SegModel<T>, alpha: f64) -> Result<()> {
    if teacher.config() != student.config() {
        return contract_err("EMA between differently configured models");
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// Student supervised loss plus `weight` times the squared L2 distance between
/// the student's prediction on an augmented unlabeled image and the teacher's
/// prediction on the original, warped with the same geometry. The teacher
/// then takes its EMA step.
#[allow(clippy::too_many_arguments)]
pub fn mean_teacher_step<R: Rng + ?Sized>(
    student: &mut SegModel,
    opt: &mut Adam,
    state: &mut MeanTeacherState,
    labeled: &LabeledBatch,
    unlabeled: Option<&Tensor>,
    weight: f64,
    augment: &AugmentSpec,
    dropout: &mut StreamRng,
    aug_rng: &mut R,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let x = g.constant(labeled.images.clone());
    let p = bound.forward(&mut g, x, true, dropout)?;
    let l_sup = sup_loss(&mut g, p, &labeled.labels)?;
    let mut total = l_sup;
    let mut l_cons = 0.0;
    if let (true, Some(u)) = (weight > 0.0, unlabeled) {
        let target = state.teacher.predict(u)?;
        let mut xs = u.clone();
        let draws = augment_images(&mut xs, augment, aug_rng)?;
        let (c, h, w) = (target.shape()[1], target.shape()[2], target.shape()[3]);
        let per = c * h * w;
        let mut warped = Vec::with_capacity(target.numel());
        for (j, d) in draws.iter().enumerate() {
            warped.extend(d.apply_planes(&target.data()[j * per..(j + 1) * per], c, h, w)?);
        }
        let t = g.constant(Tensor::new(target.shape().to_vec(), warped)?);
        let xv = g.constant(xs);
        let ps = bound.forward(&mut g, xv, true, dropout)?;
        let diff = g.sub(ps, t)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        let pixels = (u.shape()[0] * h * w) as f32;
        let l = g.scale(s, 1.0 / pixels);
        l_cons = g.value(l).item() as f64;
        let wl = g.scale(l, weight as f32);
        total = g.add(total, wl)?;
    }
    let bundle = LossBundle::new(g.value(l_sup).item() as f64, l_cons, 0.0, weight, 0.0);
    let bundle = apply_update(student, opt, &mut g, &bound, total, bundle)?;
    state.update(student)?;
    Ok(bundle)
}

/// Supervised loss plus `weight * KL(f(x) || f(x + r_adv))` on the unlabeled batch.
#[allow(clippy::too_many_arguments)]
pub fn vat_baseline_step(
    model: &mut SegModel,
    opt: &mut Adam,
    labeled: &LabeledBatch,
    unlabeled: Option<&Tensor>,
    weight: f64,
    adv: &crate::adversarial::AdvConfig,
    dropout: &mut StreamRng,
    vat_rng: &mut StreamRng,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(labeled.images.clone());
    let p = bound.forward(&mut g, x, true, dropout)?;
    let l_sup = sup_loss(&mut g, p, &labeled.labels)?;
    let mut total = l_sup;
    let mut l_vat = 0.0;
    if let (true, Some(u)) = (weight > 0.0, unlabeled) {
        let wide = model.cast::<f64>();
        let a = vat_perturbation(&wide, &u.cast::<f64>(), adv.eps_vat, adv.xi, adv.n_power, vat_rng)?;
        let clean = g.constant(a.clean.cast());
        let xa = g.constant(a.images.cast());
        let q = bound.forward(&mut g, xa, true, dropout)?;
        let l = kl_divergence(&mut g, clean, q)?;
        l_vat = g.value(l).item() as f64;
        let wl = g.scale(l, weight as f32);
        total = g.add(total, wl)?;
    }
    let bundle = LossBundle::new(g.value(l_sup).item() as f64, l_vat, 0.0, weight, 0.0);
    apply_update(model, opt, &mut g, &bound, total, bundle)
}
