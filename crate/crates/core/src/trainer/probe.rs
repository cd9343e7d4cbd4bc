//! A trainee coupled to a frozen reference through the diversity loss alone.

use rand::seq::SliceRandom;

use super::config::CoTrainConfig;
use super::eval::{evaluate, LossMeter};
use super::steps::{draw_labeled, supervised_step, Views};
use crate::adversarial::{fgsm, vat_perturbation};
use crate::data::{split, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{soft_cross_entropy, LossBundle};
use crate::rng::{self, Purpose};
use crate::schedule::lr_at;
use crate::segnet::SegModel;
use crate::tensor::{Adam, Graph, Tensor};

const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub epoch: u32,
    /// Mean foreground validation DSC of the trainee, in percent.
    pub trainee_dsc: f64,
    pub l_div: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCurve {
    pub eps: f64,
    pub reference_dsc: f64,
    pub points: Vec<ProbePoint>,
}

impl ProbeCurve {
    /// Reference DSC minus the trainee's DSC after the last epoch.
    pub fn final_gap(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| self.reference_dsc - p.trainee_dsc)
    }
}

/// Trains one model with supervision on every training image.
pub fn fit_reference(cfg: &CoTrainConfig, data: &Dataset) -> Result<SegModel> {
    let full = split(data, 1.0, cfg.seed)?;
    let model = SegModel::init_indexed(cfg.model, cfg.seed, 0)?;
    let mut views = Views::new(vec![model], cfg.adam, cfg.seed);
    let iters = cfg.iters_per_epoch.unwrap_or_else(|| full.labeled.len().div_ceil(cfg.batch_size));
    for epoch in 0..cfg.reference_epochs {
        views.set_lr(lr_at(epoch, cfg.adam.lr, cfg.lr_decay_every, cfg.lr_decay_factor));
        for _ in 0..iters {
            let batch = draw_labeled(
                &full.labeled,
                cfg.batch_size,
                full.num_classes,
                cfg.augment.as_ref(),
                &mut views.data[0],
                &mut views.augment[0],
            )?;
            supervised_step(&mut views.models[0], &mut views.optimizers[0], &batch, &mut views.dropout[0])?;
        }
    }
    Ok(views.models.remove(0))
}

fn batched<F>(x: &Tensor, mut f: F) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&Tensor) -> Result<(Tensor, Tensor)>,
{
    let n = x.shape()[0];
    let (mut imgs, mut cleans) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(CHUNK) {
        let (i, c) = f(&x.slice_batch(start, (start + CHUNK).min(n))?)?;
        imgs.push(i);
        cleans.push(c);
    }
    let ir: Vec<&Tensor> = imgs.iter().collect();
    let cr: Vec<&Tensor> = cleans.iter().collect();
    Ok((Tensor::stack_batch(&ir)?, Tensor::stack_batch(&cr)?))
}

/// Adversarial examples against the frozen reference and its clean
/// predictions: FGSM with L-infinity budget `eps` on labeled images, VAT with
/// per-pixel RMS budget `eps` on unlabeled ones. The reference never changes
/// and the probe does not augment, so these are computed once.
pub fn reference_adversarials(reference: &SegModel, sp: &DatasetSplit, eps: f64, cfg: &CoTrainConfig) -> Result<(Tensor, Tensor)> {
    let size = sp.labeled.image_size();
    let hw = size * size;
    let (mut parts_i, mut parts_c) = (Vec::new(), Vec::new());
    let all_l: Vec<usize> = (0..sp.labeled.len()).collect();
    for chunk in all_l.chunks(CHUNK) {
        let (x, y) = sp.labeled.batch(chunk);
        let a = fgsm(reference, &x, Some(&sp.labeled.label_map(&y, sp.num_classes)?), eps)?;
        parts_i.push(a.images);
        parts_c.push(a.clean);
    }
    let mut imgs = Tensor::stack_batch(&parts_i.iter().collect::<Vec<_>>())?;
    let mut cleans = Tensor::stack_batch(&parts_c.iter().collect::<Vec<_>>())?;
    if !sp.unlabeled.is_empty() {
        let all_u: Vec<usize> = (0..sp.unlabeled.len()).collect();
        let xu = sp.unlabeled.batch(&all_u);
        let wide = reference.cast::<f64>();
        let mut vat_rng = rng::stream(cfg.seed, Purpose::Vat, 0);
        let eps_vat = eps * (hw as f64).sqrt();
        let (ui, uc) = batched(&xu, |x| {
            let a = vat_perturbation(&wide, &x.cast::<f64>(), eps_vat, cfg.adv.xi, cfg.adv.n_power, &mut vat_rng)?;
            Ok((a.images.cast(), a.clean.cast()))
        })?;
        imgs = Tensor::stack_batch(&[&imgs, &ui])?;
        cleans = Tensor::stack_batch(&[&cleans, &uc])?;
    }
    Ok((imgs, cleans))
}

/// Trains `trainee` only through `H(f_ref(x), f_trainee(g_ref(x)))` and
/// records its validation DSC after every epoch. The reverse direction of the
/// diversity loss has no path to the trainee's parameters and is not computed.
pub fn div_only_probe(
    reference: &SegModel,
    trainee: &SegModel,
    sp: &DatasetSplit,
    eps: f64,
    cfg: &CoTrainConfig,
) -> Result<(ProbeCurve, SegModel)> {
    let reference_dsc = evaluate(&[reference], &sp.validation, sp.num_classes)?.dsc_avg_mean();
    let (adv, clean) = reference_adversarials(reference, sp, eps, cfg)?;
    let mut model = trainee.clone();
    let mut opt = Adam::new(cfg.adam, model.params());
    let mut dropout = rng::stream(cfg.seed, Purpose::Dropout, 1);
    let mut order_rng = rng::stream(cfg.seed, Purpose::Data, 1);
    let n = adv.shape()[0];
    let iters = cfg.iters_per_epoch.unwrap_or_else(|| n.div_ceil(cfg.batch_size));
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut points = Vec::new();
    for epoch in 0..cfg.probe_epochs {
        opt.set_lr(lr_at(epoch, cfg.adam.lr, cfg.lr_decay_every, cfg.lr_decay_factor));
        let mut meter = LossMeter::default();
        for _ in 0..iters {
            if pos + cfg.batch_size > order.len() {
                order = (0..n).collect();
                order.shuffle(&mut order_rng);
                pos = 0;
            }
            let idx = &order[pos..pos + cfg.batch_size.min(n)];
            pos += idx.len();
            let pick = |t: &Tensor| -> Result<Tensor> {
                let rows = idx.iter().map(|&i| t.slice_batch(i, i + 1)).collect::<Result<Vec<_>>>()?;
                Tensor::stack_batch(&rows.iter().collect::<Vec<_>>())
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(pick(&adv)?);
            let target = g.constant(pick(&clean)?);
            let q = bound.forward(&mut g, x, true, &mut dropout)?;
            let l = soft_cross_entropy(&mut g, target, q)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("probe loss at epoch {epoch}, eps {eps}")));
            }
            meter.add(&LossBundle::new(0.0, 0.0, value, 0.0, 1.0));
            g.backward(l)?;
            model.collect_grads(&g, &bound)?;
            opt.step(model.params_mut())?;
        }
        let dsc = evaluate(&[&model], &sp.validation, sp.num_classes)?.dsc_avg_mean();
        points.push(ProbePoint { epoch: epoch + 1, trainee_dsc: dsc, l_div: meter.mean().l_div });
    }
    Ok((ProbeCurve { eps, reference_dsc, points }, model))
}

/// Reference fit plus one probe per configured eps, all from the same trainee initialization.
pub fn run_probe(cfg: &CoTrainConfig, data: &Dataset) -> Result<(SegModel, Vec<ProbeCurve>)> {
    cfg.validate()?;
    let reference = fit_reference(cfg, data)?;
    let sp = split(data, cfg.probe_labeled_ratio, cfg.seed)?;
    let trainee = SegModel::init_indexed(cfg.model, cfg.seed, 1)?;
    let curves = cfg
        .probe_eps
        .iter()
        .map(|&eps| div_only_probe(&reference, &trainee, &sp, eps, cfg).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok((reference, curves))
}
