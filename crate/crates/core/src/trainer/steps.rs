use rand::Rng;

use crate::adversarial::{generate_for_batch, AdvConfig};
use crate::data::{AugmentDraw, AugmentSpec, LabeledSet, UnlabeledPool};
use crate::error::{contract_err, Error, Result};
use crate::losses::{div_loss, jsd_agreement, sup_loss, DivTerm, LabelMap, LossBundle};
use crate::rng::{self, Purpose, StreamRng};
use crate::segnet::SegModel;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

/// A labeled batch after augmentation.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: LabelMap,
}

/// Draws `b` labeled samples with replacement and augments each one.
pub fn draw_labeled<R: Rng + ?Sized>(
    set: &LabeledSet,
    b: usize,
    num_classes: usize,
    augment: Option<&AugmentSpec>,
    data_rng: &mut R,
    aug_rng: &mut R,
) -> Result<LabeledBatch> {
    if set.is_empty() {
        return contract_err("the labeled pool is empty");
    }
    let idx: Vec<usize> = (0..b).map(|_| data_rng.random_range(0..set.len())).collect();
    let (mut images, mut classes) = set.batch(&idx);
    if let Some(spec) = augment {
        let n = set.image_size();
        let hw = n * n;
        for j in 0..b {
            let d = AugmentDraw::sample(spec, aug_rng);
            let img = d.apply_image(&images.data()[j * hw..(j + 1) * hw], n, n)?;
            images.data_mut()[j * hw..(j + 1) * hw].copy_from_slice(&img);
            let m = d.apply_mask(&classes[j * hw..(j + 1) * hw], n, n)?;
            classes[j * hw..(j + 1) * hw].copy_from_slice(&m);
        }
    }
    let labels = set.label_map(&classes, num_classes)?;
    Ok(LabeledBatch { images, labels })
}

/// Augments each image of a `[n, 1, H, W]` batch with its own draw.
pub fn augment_images<R: Rng + ?Sized>(x: &mut Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Vec<AugmentDraw>> {
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    (0..n)
        .map(|j| {
            let d = AugmentDraw::sample(spec, rng);
            let img = d.apply_image(&x.data()[j * hw..(j + 1) * hw], h, w)?;
            x.data_mut()[j * hw..(j + 1) * hw].copy_from_slice(&img);
            Ok(d)
        })
        .collect()
}

/// Epoch-wise pass over the unlabeled pool in shuffled batches of `b`.
#[derive(Clone, Debug)]
pub struct UnlabeledCursor {
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl UnlabeledCursor {
    pub fn new(seed: u64) -> Self {
        Self { order: Vec::new(), pos: 0, rng: rng::stream(seed, Purpose::Data, SHARED_STREAM) }
    }

    /// Next batch, reshuffling when fewer than `b` images remain.
    pub fn next_batch(&mut self, pool: &UnlabeledPool, b: usize) -> Option<Tensor> {
        if pool.is_empty() {
            return None;
        }
        let b = b.min(pool.len());
        if self.order.len() != pool.len() || self.pos + b > self.order.len() {
            use rand::seq::SliceRandom;
            self.order = (0..pool.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + b];
        self.pos += b;
        Some(pool.batch(idx))
    }
}

/// Stream index shared by all models (unlabeled draws and their augmentation).
pub(crate) const SHARED_STREAM: u64 = 1 << 20;

/// The models of an ensemble with their optimizers and private random streams.
#[derive(Clone, Debug)]
pub struct Views {
    pub models: Vec<SegModel>,
    pub optimizers: Vec<Adam>,
    pub dropout: Vec<StreamRng>,
    pub vat: Vec<StreamRng>,
    pub data: Vec<StreamRng>,
    pub augment: Vec<StreamRng>,
}

impl Views {
    pub fn new(models: Vec<SegModel>, adam: AdamConfig, seed: u64) -> Self {
        let k = models.len() as u64;
        let streams = |p: Purpose| (0..k).map(|i| rng::stream(seed, p, i)).collect();
        Self {
            optimizers: models.iter().map(|m| Adam::new(adam, m.params())).collect(),
            models,
            dropout: streams(Purpose::Dropout),
            vat: streams(Purpose::Vat),
            data: streams(Purpose::Data),
            augment: streams(Purpose::Augment),
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optimizers.iter_mut().for_each(|o| o.set_lr(lr));
    }

    pub fn model_refs(&self) -> Vec<&SegModel> {
        self.models.iter().collect()
    }
}

fn finite(b: &LossBundle) -> Result<()> {
    if [b.l_sup, b.l_cot, b.l_div, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss terms {b:?}")))
    }
}

/// One supervised update of a single model.
pub fn supervised_step(
    model: &mut SegModel,
    opt: &mut Adam,
    batch: &LabeledBatch,
    dropout: &mut StreamRng,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let p = bound.forward(&mut g, x, true, dropout)?;
    let loss = sup_loss(&mut g, p, &batch.labels)?;
    let bundle = LossBundle::new(g.value(loss).item() as f64, 0.0, 0.0, 0.0, 0.0);
    finite(&bundle)?;
    g.backward(loss)?;
    model.collect_grads(&g, &bound)?;
    opt.step(model.params_mut())?;
    Ok(bundle)
}

/// One inner iteration of co-training on the pair `(a, b)`.
///
/// `labeled` holds the batches of `a` and `b` in that order. The agreement
/// term uses every model's prediction on `unlabeled`, but only `a` and `b`
/// are updated. Terms whose weight is zero are not evaluated at all, so with
/// both weights at zero the update equals two independent supervised steps.
#[allow(clippy::too_many_arguments)]
pub fn cotrain_step(
    views: &mut Views,
    pair: (usize, usize),
    labeled: [&LabeledBatch; 2],
    unlabeled: Option<&Tensor>,
    lambda_cot: f64,
    lambda_div: f64,
    adv: &AdvConfig,
) -> Result<LossBundle> {
    let (a, b) = pair;
    if a == b || a >= views.len() || b >= views.len() {
        return contract_err(format!("invalid model pair ({a}, {b}) for {} views", views.len()));
    }
    let mut g = Graph::new();
    let bound: Vec<_> = (0..views.len())
        .map(|i| views.models[i].bind(&mut g, i == a || i == b))
        .collect();

    let mut sup = Vec::with_capacity(2);
    for (&m, batch) in [a, b].iter().zip(labeled) {
        let x = g.constant(batch.images.clone());
        let p = bound[m].forward(&mut g, x, true, &mut views.dropout[m])?;
        sup.push(sup_loss(&mut g, p, &batch.labels)?);
    }
    let l_sup = g.add(sup[0], sup[1])?;
    let mut total = l_sup;

    let mut l_cot_value = 0.0;
    if let (true, Some(u)) = (lambda_cot > 0.0, unlabeled) {
        let x = g.constant(u.clone());
        let preds = (0..views.len())
            .map(|i| bound[i].forward(&mut g, x, true, &mut views.dropout[i]))
            .collect::<Result<Vec<_>>>()?;
        let l_cot = jsd_agreement(&mut g, &preds)?;
        l_cot_value = g.value(l_cot).item() as f64;
        let w = g.scale(l_cot, lambda_cot as f32);
        total = g.add(total, w)?;
    }

    let mut l_div_value = 0.0;
    if lambda_div > 0.0 {
        let mut terms = Vec::with_capacity(2);
        for (src, peer, batch) in [(a, b, labeled[0]), (b, a, labeled[1])] {
            let set = generate_for_batch(
                &views.models[src],
                Some((&batch.images, &batch.labels)),
                unlabeled,
                adv,
                &mut views.vat[src],
            )?;
            let (images, clean) = set.stacked()?.expect("labeled batch is never empty");
            let xa = g.constant(images);
            let q = bound[peer].forward(&mut g, xa, true, &mut views.dropout[peer])?;
            terms.push(DivTerm { clean_target: g.constant(clean), peer_on_adversarial: Some(q) });
        }
        let l_div = div_loss(&mut g, &terms)?;
        l_div_value = g.value(l_div).item() as f64;
        let w = g.scale(l_div, lambda_div as f32);
        total = g.add(total, w)?;
    }

    let bundle = LossBundle::new(g.value(l_sup).item() as f64, l_cot_value, l_div_value, lambda_cot, lambda_div);
    finite(&bundle)?;
    g.backward(total)?;
    for m in [a, b] {
        views.models[m].collect_grads(&g, &bound[m])?;
        let params = views.models[m].params_mut();
        views.optimizers[m].step(params)?;
    }
    Ok(bundle)
}
