//! Co-training loop, baselines and the diversity probe.

mod baselines;
mod config;
mod eval;
mod pairs;
mod probe;
mod steps;

pub use baselines::{
    ema_update, mean_teacher_step, pseudo_label_step, select_confident, vat_baseline_step, MeanTeacherState,
};
pub use config::{CoTrainConfig, Method};
pub use eval::{evaluate, predict_set, EpochRecord, EvalScores};
pub use pairs::PairSampler;
pub use probe::{div_only_probe, fit_reference, reference_adversarials, run_probe, ProbeCurve, ProbePoint};
pub use steps::{augment_images, cotrain_step, draw_labeled, supervised_step, LabeledBatch, UnlabeledCursor, Views};

use std::time::Instant;

use eval::LossMeter;
use steps::SHARED_STREAM;

use crate::data::DatasetSplit;
use crate::error::{contract_err, Error, Result};
use crate::losses::LossBundle;
use crate::rng::{self, Purpose};
use crate::schedule::lr_at;
use crate::segnet::SegModel;

/// Result of a training run. `models` are the evaluated networks (the
/// teacher for mean teacher).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Vec<SegModel>,
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, kept apart from the records so that
    /// those stay reproducible byte for byte.
    pub epoch_seconds: Vec<f64>,
    /// Diagnostic of a non-finite loss that stopped the run.
    pub aborted: Option<String>,
}

/// Called after every epoch with its record and the evaluated models.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &[SegModel]) -> Result<()> + 'a;

/// Runs `cfg.epochs` epochs of the configured method on `sp`.
pub fn train(cfg: &CoTrainConfig, sp: &DatasetSplit, hook: &mut EpochHook<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sp.labeled.is_empty() {
        return contract_err("the labeled pool is empty");
    }
    if cfg.model.num_classes != sp.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, data has {}",
            cfg.model.num_classes, sp.num_classes
        )));
    }
    if sp.unlabeled.is_empty() && cfg.method != Method::Independent {
        log::warn!("unlabeled pool is empty; agreement and VAT terms are skipped");
    }
    let k = if cfg.method.is_cotraining() { cfg.views } else { 1 };
    let models = (0..k)
        .map(|i| SegModel::init_indexed(cfg.model, cfg.seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut views = Views::new(models, cfg.adam, cfg.seed);
    let mut teacher = match cfg.method {
        Method::MeanTeacher => Some(MeanTeacherState::new(&views.models[0], cfg.ema_alpha)?),
        Method::DivProbe => return contract_err("the diversity probe runs through run_probe"),
        _ => None,
    };
    let mut sampler = if k >= 2 { Some(PairSampler::new(k, cfg.seed)?) } else { None };
    let mut cursor = UnlabeledCursor::new(cfg.seed);
    let mut shared_aug = rng::stream(cfg.seed, Purpose::Augment, SHARED_STREAM);
    let mut vat_rng = rng::stream(cfg.seed, Purpose::Vat, SHARED_STREAM);
    let iters = cfg.iterations(sp.unlabeled.len());
    let b = cfg.batch_size;
    let c = sp.num_classes;
    let aug = cfg.augment.as_ref();

    let mut out = TrainOutcome { models: Vec::new(), records: Vec::new(), epoch_seconds: Vec::new(), aborted: None };
    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg.adam.lr, cfg.lr_decay_every, cfg.lr_decay_factor);
        views.set_lr(lr);
        let (lambda_cot, lambda_div) = cfg.weights(epoch);
        let mut meter = LossMeter::default();
        for it in 0..iters {
            let mut u = cursor.next_batch(&sp.unlabeled, b);
            if let (Some(x), Some(spec)) = (u.as_mut(), aug) {
                augment_images(x, spec, &mut shared_aug)?;
            }
            let step: Result<LossBundle> = if let Some(sampler) = sampler.as_mut() {
                let (i, j) = sampler.next_pair();
                let bi = draw_labeled(&sp.labeled, b, c, aug, &mut views.data[i], &mut views.augment[i])?;
                let bj = draw_labeled(&sp.labeled, b, c, aug, &mut views.data[j], &mut views.augment[j])?;
                cotrain_step(&mut views, (i, j), [&bi, &bj], u.as_ref(), lambda_cot, lambda_div, &cfg.adv)
            } else {
                let batch = draw_labeled(&sp.labeled, b, c, aug, &mut views.data[0], &mut views.augment[0])?;
                let (model, opt, dropout) = (&mut views.models[0], &mut views.optimizers[0], &mut views.dropout[0]);
                match cfg.method {
                    Method::PseudoLabel => {
                        pseudo_label_step(model, opt, &batch, u.as_ref(), cfg.pseudo_alpha(epoch), lambda_cot, dropout)
                    }
                    Method::MeanTeacher => {
                        let state = teacher.as_mut().expect("teacher exists for mean teacher");
                        let spec = cfg.augment.unwrap_or_default();
                        mean_teacher_step(model, opt, state, &batch, u.as_ref(), lambda_cot, &spec, dropout, &mut shared_aug)
                    }
                    Method::VatBaseline => {
                        vat_baseline_step(model, opt, &batch, u.as_ref(), lambda_cot, &cfg.adv, dropout, &mut vat_rng)
                    }
                    _ => supervised_step(model, opt, &batch, dropout),
                }
            };
            match step {
                Ok(bundle) => meter.add(&bundle),
                Err(Error::NonFinite(msg)) => {
                    let diag = format!("epoch {} iteration {it}: {msg}", epoch + 1);
                    log::error!("aborting: {diag}");
                    out.aborted = Some(diag);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let evaluated: Vec<&SegModel> = match &teacher {
            Some(t) => vec![&t.teacher],
            None => views.model_refs(),
        };
        let scores = evaluate(&evaluated, &sp.validation, c)?;
        let record = EpochRecord::new(epoch + 1, cfg.method.tag(), cfg.seed, &scores, meter.mean(), lr);
        log::info!(
            "{} seed {} epoch {}: dsc avg {:.2} vote {:.2}, l_sup {:.4} l_cot {:.4} l_div {:.4}",
            cfg.method,
            cfg.seed,
            record.epoch,
            record.dsc_avg_mean(),
            record.dsc_vote_mean(),
            record.losses.l_sup,
            record.losses.l_cot,
            record.losses.l_div
        );
        let owned: Vec<SegModel> = evaluated.into_iter().cloned().collect();
        hook(&record, &owned)?;
        out.records.push(record);
        out.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    out.models = match teacher {
        Some(t) => vec![t.teacher],
        None => views.models,
    };
    Ok(out)
}
