//! Synthetic dataset, labeled/unlabeled splits, augmentation and file formats.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugmentDraw, AugmentSpec};
pub use io::{format_manifest, parse_manifest, ManifestEntry, TensorData, TensorFile};
pub use synth::{generate, Dataset, Sample, SynthSpec};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{contract_err, Error, Result};
use crate::losses::LabelMap;
use crate::metrics::SegMask;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.csv";

fn image_file(split: &str, i: usize) -> String {
    format!("{split}/{i:04}_img.cten")
}

fn mask_file(image: &str) -> String {
    image.replace("_img.cten", "_mask.cten")
}

impl Dataset {
    /// Writes `train/` and `val/` sample files plus a manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.image_size;
        let mut entries = Vec::new();
        for (split, samples) in [("train", &self.train), ("val", &self.val)] {
            fs::create_dir_all(dir.join(split))?;
            for (i, s) in samples.iter().enumerate() {
                let file = image_file(split, i);
                TensorFile { dims: vec![n, n], data: TensorData::F32(s.image.clone()) }.write(&dir.join(&file))?;
                TensorFile { dims: vec![n, n], data: TensorData::U8(s.mask.clone()) }
                    .write(&dir.join(mask_file(&file)))?;
                entries.push(ManifestEntry { file, split: split.to_string(), has_mask: true });
            }
        }
        fs::write(dir.join(MANIFEST), format_manifest(&entries))?;
        Ok(())
    }

    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let entries = parse_manifest(&fs::read_to_string(&path)?, &path)?;
        let mut out = Dataset { image_size: 0, num_classes, train: Vec::new(), val: Vec::new() };
        for e in entries {
            let bad = |reason: String| Error::Format { path: e.file.clone(), reason };
            let img = TensorFile::read(&dir.join(&e.file))?;
            let TensorData::F32(image) = img.data else {
                return Err(bad("image is not f32".into()));
            };
            let size = match img.dims[..] {
                [h, w] if h == w => h,
                ref d => return Err(bad(format!("image dims {d:?} are not square"))),
            };
            if out.image_size != 0 && size != out.image_size {
                return Err(bad(format!("size {size} differs from {}", out.image_size)));
            }
            out.image_size = size;
            if !e.has_mask {
                return Err(bad("dataset samples must carry masks".into()));
            }
            let m = TensorFile::read(&dir.join(mask_file(&e.file)))?;
            let TensorData::U8(mask) = m.data else {
                return Err(bad("mask is not u8".into()));
            };
            if m.dims != img.dims || mask.iter().any(|&c| c as usize >= num_classes) {
                return Err(bad("mask does not match image or holds invalid class ids".into()));
            }
            let sample = Sample { image, mask };
            match e.split.as_str() {
                "train" => out.train.push(sample),
                "val" => out.val.push(sample),
                other => return Err(bad(format!("unknown split {other:?}"))),
            }
        }
        if out.train.is_empty() {
            return contract_err(format!("{} lists no training samples", path.display()));
        }
        Ok(out)
    }
}

/// Images with masks: the labeled set or the validation set.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    size: usize,
    ids: Vec<usize>,
    images: Vec<Vec<f32>>,
    masks: Vec<Vec<u8>>,
}

impl LabeledSet {
    fn from_samples(size: usize, ids: Vec<usize>, samples: &[Sample]) -> Self {
        Self {
            size,
            images: ids.iter().map(|&i| samples[i].image.clone()).collect(),
            masks: ids.iter().map(|&i| samples[i].mask.clone()).collect(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    /// Indices into the source dataset split.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        &self.masks[i]
    }

    pub fn seg_mask(&self, i: usize) -> SegMask {
        SegMask::new(self.size, self.size, self.masks[i].clone()).expect("square mask")
    }

    /// `[n, 1, H, W]` images and concatenated class ids of the chosen samples.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let n = self.size;
        let mut img = Vec::with_capacity(idx.len() * n * n);
        let mut cls = Vec::with_capacity(idx.len() * n * n);
        for &i in idx {
            img.extend_from_slice(&self.images[i]);
            cls.extend_from_slice(&self.masks[i]);
        }
        (Tensor::new(vec![idx.len(), 1, n, n], img).expect("sized batch"), cls)
    }

    pub fn label_map(&self, classes: &[u8], num_classes: usize) -> Result<LabelMap<f32>> {
        let n = self.size;
        LabelMap::one_hot(classes, classes.len() / (n * n), num_classes, n, n)
    }
}

/// Images without masks. Trainers only ever see this type for `U`.
///
/// It holds no masks, so reading one through it does not compile:
///
/// ```compile_fail
/// # fn f(pool: &cotrain_core::data::UnlabeledPool) {
/// let _ = pool.mask(0);
/// # }
/// ```
#[derive(Clone, Debug)]
pub struct UnlabeledPool {
    size: usize,
    ids: Vec<usize>,
    images: Vec<Vec<f32>>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let n = self.size;
        let mut img = Vec::with_capacity(idx.len() * n * n);
        for &i in idx {
            img.extend_from_slice(&self.images[i]);
        }
        Tensor::new(vec![idx.len(), 1, n, n], img).expect("sized batch")
    }
}

/// `S`, `U` and the validation set of one experiment.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledPool,
    pub validation: LabeledSet,
    pub num_classes: usize,
}

/// Shuffles the training images with the split stream of `seed` and labels the
/// first `round(labeled_ratio * N)`.
pub fn split(data: &Dataset, labeled_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return contract_err(format!("labeled ratio {labeled_ratio} outside (0, 1]"));
    }
    let n = data.train.len();
    let m = (labeled_ratio * n as f64).round() as usize;
    if m == 0 {
        return contract_err(format!("labeled ratio {labeled_ratio} of {n} images labels nothing"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let (lab, unl) = order.split_at(m);
    let size = data.image_size;
    Ok(DatasetSplit {
        labeled: LabeledSet::from_samples(size, lab.to_vec(), &data.train),
        unlabeled: UnlabeledPool {
            size,
            ids: unl.to_vec(),
            images: unl.iter().map(|&i| data.train[i].image.clone()).collect(),
        },
        validation: LabeledSet::from_samples(size, (0..data.val.len()).collect(), &data.val),
        num_classes: data.num_classes,
    })
}

impl DatasetSplit {
    /// Membership of every image, in the manifest line format.
    pub fn manifest(&self) -> String {
        let mut entries = Vec::new();
        let mut push = |file: String, split: &str, has_mask| {
            entries.push(ManifestEntry { file, split: split.into(), has_mask });
        };
        self.labeled.ids.iter().for_each(|&i| push(image_file("train", i), "labeled", true));
        self.unlabeled.ids.iter().for_each(|&i| push(image_file("train", i), "unlabeled", false));
        self.validation.ids.iter().for_each(|&i| push(image_file("val", i), "val", true));
        format_manifest(&entries)
    }
}
