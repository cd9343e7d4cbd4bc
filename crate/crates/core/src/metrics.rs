//! Ensemble voting, overlap and boundary metrics, and disagreement maps.

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Float, Tensor};

/// Per-pixel class indices of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    classes: Vec<u8>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != h * w {
            return dim_err(format!("{} class ids for a {h}x{w} mask", classes.len()));
        }
        Ok(Self { h, w, classes })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class_id).count()
    }

    fn check_same(&self, other: &SegMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return dim_err(format!("masks {}x{} vs {}x{}", self.h, self.w, other.h, other.w));
        }
        Ok(())
    }
}

fn prob_dims<T: Float>(p: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *p.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => dim_err(format!("expected [N, C, H, W] probabilities, got {s:?}")),
    }
}

/// Per-pixel argmax of `[N, C, H, W]` probabilities; ties go to the lowest class.
pub fn argmax<T: Float>(p: &Tensor<T>) -> Result<Vec<SegMask>> {
    let (n, c, h, w) = prob_dims(p)?;
    let hw = h * w;
    let d = p.data();
    (0..n)
        .map(|b| {
            let classes = (0..hw)
                .map(|j| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(b * c + ch) * hw + j] > d[(b * c + best) * hw + j] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMask::new(h, w, classes)
        })
        .collect()
}

/// Mean of `k >= 1` probability maps and its argmax.
pub fn soft_vote<T: Float>(preds: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<SegMask>)> {
    let Some(first) = preds.first() else {
        return contract_err("soft vote of an empty ensemble");
    };
    prob_dims(first)?;
    let mut acc = vec![T::zero(); first.numel()];
    for p in preds {
        if p.shape() != first.shape() {
            return dim_err(format!("soft vote: {:?} vs {:?}", p.shape(), first.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let k = T::of(preds.len() as f64);
    acc.iter_mut().for_each(|a| *a = *a / k);
    let mean = Tensor::new(first.shape().to_vec(), acc)?;
    let masks = argmax(&mean)?;
    Ok((mean, masks))
}

/// Per-pixel majority vote; ties are broken uniformly at random among the tied classes.
pub fn hard_vote<R: Rng + ?Sized>(masks: &[&SegMask], rng: &mut R) -> Result<SegMask> {
    let Some(first) = masks.first() else {
        return contract_err("hard vote of an empty ensemble");
    };
    for m in masks {
        first.check_same(m)?;
    }
    let mut counts = [0usize; 256];
    let mut tied = Vec::with_capacity(masks.len());
    let classes = (0..first.classes.len())
        .map(|j| {
            for m in masks {
                counts[m.classes[j] as usize] += 1;
            }
            let top = masks.iter().map(|m| counts[m.classes[j] as usize]).max().unwrap_or(0);
            tied.clear();
            for m in masks {
                let c = m.classes[j];
                if counts[c as usize] == top && !tied.contains(&c) {
                    tied.push(c);
                }
            }
            for m in masks {
                counts[m.classes[j] as usize] = 0;
            }
            tied.sort_unstable();
            if tied.len() == 1 {
                tied[0]
            } else {
                tied[rng.random_range(0..tied.len())]
            }
        })
        .collect();
    SegMask::new(first.h, first.w, classes)
}

/// Dice overlap `2|S ∩ G| / (|S| + |G|)` of one class; 1.0 when both are empty.
pub fn dsc(s: &SegMask, g: &SegMask, class_id: u8) -> Result<f64> {
    s.check_same(g)?;
    let (mut inter, mut ns, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in s.classes.iter().zip(&g.classes) {
        let (ia, ib) = (a == class_id, b == class_id);
        ns += ia as usize;
        ng += ib as usize;
        inter += (ia && ib) as usize;
    }
    if ns + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ns + ng) as f64)
}

const FAR: f64 = 1e20;

/// Exact squared distance transform along one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // only reachable with k == 0: the new parabola dominates everywhere
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (in pixels) from every pixel to the nearest
/// pixel of `class_id`.
fn squared_distance_to(mask: &SegMask, class_id: u8) -> Vec<f64> {
    let (h, w) = (mask.h, mask.w);
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = mask.classes.iter().map(|&c| if c == class_id { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed_hd(from: &SegMask, to_dist: &[f64], class_id: u8) -> f64 {
    from.classes
        .iter()
        .zip(to_dist)
        .filter(|(&c, _)| c == class_id)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the `class_id` pixel sets, scaled by
/// `spacing`. Both empty gives 0; exactly one empty gives `f64::INFINITY`.
pub fn hd(s: &SegMask, g: &SegMask, class_id: u8, spacing: f64) -> Result<f64> {
    s.check_same(g)?;
    let (ns, ng) = (s.count(class_id), g.count(class_id));
    match (ns, ng) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(f64::INFINITY),
        _ => {}
    }
    let to_g = squared_distance_to(g, class_id);
    let to_s = squared_distance_to(s, class_id);
    Ok(directed_hd(s, &to_g, class_id).max(directed_hd(g, &to_s, class_id)) * spacing)
}

/// Per-pixel L1 distance between two probability maps, `[N, 1, H, W]`, in `[0, 2]`.
pub fn disagreement_map<T: Float>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = prob_dims(p1)?;
    if p1.shape() != p2.shape() {
        return dim_err(format!("disagreement: {:?} vs {:?}", p1.shape(), p2.shape()));
    }
    let hw = h * w;
    let (a, b) = (p1.data(), p2.data());
    let mut out = vec![T::zero(); n * hw];
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for j in 0..hw {
                out[bi * hw + j] += (a[base + j] - b[base + j]).abs();
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Per-class scores over a set of images, foreground classes `1..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    /// Mean per-image DSC for each foreground class.
    pub dsc: Vec<f64>,
    /// Mean finite per-image HD for each foreground class (NaN if none finite).
    pub hd: Vec<f64>,
    /// Image/class pairs whose HD was the one-empty sentinel.
    pub hd_undefined: usize,
}

impl ClassScores {
    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }

    /// Mean over classes with at least one finite HD.
    pub fn mean_hd(&self) -> f64 {
        let finite: Vec<f64> = self.hd.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return f64::NAN;
        }
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

pub fn score(preds: &[SegMask], truth: &[SegMask], num_classes: usize, spacing: f64) -> Result<ClassScores> {
    if preds.len() != truth.len() || preds.is_empty() {
        return contract_err(format!("scoring {} predictions against {} masks", preds.len(), truth.len()));
    }
    let mut dsc_sum = vec![0.0; num_classes - 1];
    let mut hd_sum = vec![0.0; num_classes - 1];
    let mut hd_n = vec![0usize; num_classes - 1];
    let mut undefined = 0;
    for (p, t) in preds.iter().zip(truth) {
        for c in 1..num_classes {
            dsc_sum[c - 1] += dsc(p, t, c as u8)?;
            let d = hd(p, t, c as u8, spacing)?;
            if d.is_finite() {
                hd_sum[c - 1] += d;
                hd_n[c - 1] += 1;
            } else {
                undefined += 1;
            }
        }
    }
    let n = preds.len() as f64;
    if undefined > 0 {
        log::debug!("{undefined} image/class pairs with an empty side excluded from HD");
    }
    Ok(ClassScores {
        dsc: dsc_sum.iter().map(|s| s / n).collect(),
        hd: hd_sum.iter().zip(&hd_n).map(|(s, &k)| if k == 0 { f64::NAN } else { s / k as f64 }).collect(),
        hd_undefined: undefined,
    })
}
