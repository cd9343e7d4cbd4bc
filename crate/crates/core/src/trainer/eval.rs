use crate::data::LabeledSet;
use crate::error::Result;
use crate::losses::LossBundle;
use crate::metrics::{argmax, score, soft_vote, ClassScores, SegMask};
use crate::segnet::SegModel;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 8;

/// Eval-mode class probabilities for every image of `set`, `[n, C, H, W]`.
pub fn predict_set(model: &SegModel, set: &LabeledSet) -> Result<Tensor> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let parts = idx
        .chunks(EVAL_CHUNK)
        .map(|c| model.predict(&set.batch(c).0))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::stack_batch(&refs)
}

/// Validation scores of an ensemble. DSC values are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScores {
    pub per_model: Vec<ClassScores>,
    pub vote: ClassScores,
}

impl EvalScores {
    /// Per-class DSC averaged over models.
    pub fn dsc_avg(&self) -> Vec<f64> {
        let k = self.per_model.len() as f64;
        let classes = self.vote.dsc.len();
        (0..classes).map(|c| self.per_model.iter().map(|s| s.dsc[c]).sum::<f64>() / k).collect()
    }

    pub fn dsc_avg_mean(&self) -> f64 {
        let v = self.dsc_avg();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn hd_avg(&self) -> f64 {
        self.per_model.iter().map(ClassScores::mean_hd).sum::<f64>() / self.per_model.len() as f64
    }
}

fn percent(mut s: ClassScores) -> ClassScores {
    s.dsc.iter_mut().for_each(|d| *d *= 100.0);
    s
}

pub fn evaluate(models: &[&SegModel], set: &LabeledSet, num_classes: usize) -> Result<EvalScores> {
    let truth: Vec<SegMask> = (0..set.len()).map(|i| set.seg_mask(i)).collect();
    let probs = models.iter().map(|m| predict_set(m, set)).collect::<Result<Vec<_>>>()?;
    let per_model = probs
        .iter()
        .map(|p| Ok(percent(score(&argmax(p)?, &truth, num_classes, 1.0)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = probs.iter().collect();
    let (_, voted) = soft_vote(&refs)?;
    let vote = percent(score(&voted, &truth, num_classes, 1.0)?);
    Ok(EvalScores { per_model, vote })
}

/// One row of the per-epoch metric record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Completed epochs, starting at 1.
    pub epoch: u32,
    pub method: String,
    pub seed: u64,
    pub dsc_avg: Vec<f64>,
    pub dsc_vote: Vec<f64>,
    pub hd_avg: f64,
    pub hd_vote: f64,
    pub losses: LossBundle,
    pub lr: f64,
}

impl EpochRecord {
    pub fn new(epoch: u32, method: &str, seed: u64, scores: &EvalScores, losses: LossBundle, lr: f64) -> Self {
        Self {
            epoch,
            method: method.to_string(),
            seed,
            dsc_avg: scores.dsc_avg(),
            dsc_vote: scores.vote.dsc.clone(),
            hd_avg: scores.hd_avg(),
            hd_vote: scores.vote.mean_hd(),
            losses,
            lr,
        }
    }

    pub fn dsc_avg_mean(&self) -> f64 {
        self.dsc_avg.iter().sum::<f64>() / self.dsc_avg.len() as f64
    }

    pub fn dsc_vote_mean(&self) -> f64 {
        self.dsc_vote.iter().sum::<f64>() / self.dsc_vote.len() as f64
    }

    pub fn header(num_classes: usize) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "method".into(), "seed".into()];
        h.extend((1..num_classes).map(|c| format!("dsc_avg_c{c}")));
        h.extend((1..num_classes).map(|c| format!("dsc_vote_c{c}")));
        for name in [
            "dsc_avg_mean", "dsc_vote_mean", "hd_avg", "hd_vote", "l_sup", "l_cot", "l_div", "lambda_cot",
            "lambda_div", "total", "lr",
        ] {
            h.push(name.into());
        }
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![self.epoch.to_string(), self.method.clone(), self.seed.to_string()];
        f.extend(self.dsc_avg.iter().map(f64::to_string));
        f.extend(self.dsc_vote.iter().map(f64::to_string));
        let l = &self.losses;
        for v in [
            self.dsc_avg_mean(),
            self.dsc_vote_mean(),
            self.hd_avg,
            self.hd_vote,
            l.l_sup,
            l.l_cot,
            l.l_div,
            l.lambda_cot,
            l.lambda_div,
            l.total,
            self.lr,
        ] {
            f.push(v.to_string());
        }
        f
    }
}

/// Running mean of the loss terms over one epoch.
#[derive(Clone, Debug, Default)]
pub(crate) struct LossMeter {
    sum: LossBundle,
    n: usize,
}

impl LossMeter {
    pub fn add(&mut self, b: &LossBundle) {
        self.sum.l_sup += b.l_sup;
        self.sum.l_cot += b.l_cot;
        self.sum.l_div += b.l_div;
        self.sum.lambda_cot = b.lambda_cot;
        self.sum.lambda_div = b.lambda_div;
        self.n += 1;
    }

    pub fn mean(&self) -> LossBundle {
        let n = self.n.max(1) as f64;
        let s = &self.sum;
        LossBundle::new(s.l_sup / n, s.l_cot / n, s.l_div / n, s.lambda_cot, s.lambda_div)
    }
}
