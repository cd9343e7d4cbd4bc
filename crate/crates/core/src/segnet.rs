//! Small U-Net: `depth` pooling levels of two 3x3 conv + ReLU blocks, a
//! bottleneck, and a decoder of nearest-upsample + conv, skip concatenation
//! and two more convs per level, closed by a 1x1 classifier and a softmax.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: 4, base_width: 8, depth: 3, dropout_rate: 0.1 }
    }
}

/// One convolution layer: `(in_channels, out_channels, kernel_side)`.
type LayerSpec = (usize, usize, usize);

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("in_channels and base_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Convolution layers in construction order.
    fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut cin = self.in_channels;
        for level in 0..self.depth {
            let w = self.width(level);
            layers.push((cin, w, 3));
            layers.push((w, w, 3));
            cin = w;
        }
        let bottom = self.width(self.depth);
        layers.push((cin, bottom, 3));
        layers.push((bottom, bottom, 3));
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            layers.push((self.width(level + 1), w, 3));
            layers.push((2 * w, w, 3));
            layers.push((w, w, 3));
        }
        layers.push((self.base_width, self.num_classes, 1));
        layers
    }

    /// Parameter shapes in construction order: kernel then bias per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .into_iter()
            .flat_map(|(cin, cout, k)| [vec![cout, cin, k, k], vec![cout]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Spatial dims must survive `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1 << self.depth;
        if !h.is_multiple_of(unit) || !w.is_multiple_of(unit) || h == 0 || w == 0 {
            return dim_err(format!("input {h}x{w} is not divisible by 2^{} = {unit}", self.depth));
        }
        Ok(())
    }
}

/// Parameters θ of one segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Float = f32> {
    config: SegModelConfig,
    params: Vec<Tensor<T>>,
}

/// Parameters of a model recorded as leaves of one graph. Repeated forwards
/// through the same binding accumulate into the same gradients.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: SegModelConfig,
    params: Vec<Var>,
}

impl<T: Float> SegModel<T> {
    /// He-normal kernels (fan-in scaled), zero biases.
    pub fn init(config: SegModelConfig, seed: u64) -> Result<Self> {
        Self::init_indexed(config, seed, 0)
    }

    /// Initialization from the `index`-th init stream of `seed`, one per ensemble member.
    pub fn init_indexed(config: SegModelConfig, seed: u64, index: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, index);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng)))
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: SegModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return dim_err(format!("expected {} parameter tensors, got {}", shapes.len(), params.len()));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return dim_err(format!("parameter {i}: expected {s:?}, got {:?}", p.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the parameters on `g`; `trainable` decides whether they collect gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let params = self
            .params
            .iter()
            .map(|p| if trainable { g.variable(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        BoundModel { config: self.config, params }
    }

    /// Copies gradients from `g` onto the parameters; unreached parameters get zeros.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &BoundModel) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.params) {
            let grad = g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]);
            p.set_grad(grad)?;
        }
        Ok(())
    }

    /// Inference without a tape: per-pixel class probabilities, dropout off.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let mut unused = rng::stream(0, Purpose::Dropout, 0);
        let p = bound.forward(&mut g, x, false, &mut unused)?;
        Ok(g.value(p).clone())
    }

    /// The same network in another precision; gradients are dropped.
    pub fn cast<U: Float>(&self) -> SegModel<U> {
        SegModel {
            config: self.config,
            params: self.params.iter().map(|p| {
                let mut c = p.cast::<U>();
                c.grad = None;
                c
            }).collect(),
        }
    }

    /// Order-sensitive hash of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl BoundModel {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn conv<T: Float>(&self, g: &mut Graph<T>, x: Var, layer: usize, relu: bool) -> Result<Var> {
        let kernel = self.params[2 * layer];
        let bias = self.params[2 * layer + 1];
        let pad = g.shape(kernel)[2] / 2;
        let y = g.conv2d(x, kernel, Some(bias), pad, 1)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// Pre-softmax class scores `[N, C, H, W]`.
    pub fn logits<T: Float, R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, train: bool, rng: &mut R) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return dim_err(format!("model expects [N, {}, H, W] input, got {shape:?}", cfg.in_channels));
        }
        cfg.check_input(shape[2], shape[3])?;
        let mut layer = 0;
        let mut h = x;
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            h = self.conv(g, h, layer, true)?;
            h = self.conv(g, h, layer + 1, true)?;
            layer += 2;
            if level + 1 == cfg.depth {
                h = g.dropout(h, cfg.dropout_rate, train, rng)?;
            }
            skips.push(h);
            h = g.max_pool2d(h)?;
        }
        h = self.conv(g, h, layer, true)?;
        h = self.conv(g, h, layer + 1, true)?;
        layer += 2;
        h = g.dropout(h, cfg.dropout_rate, train, rng)?;
        for skip in skips.into_iter().rev() {
            h = g.upsample2x(h)?;
            h = self.conv(g, h, layer, true)?;
            h = g.concat(skip, h)?;
            h = self.conv(g, h, layer + 1, true)?;
            h = self.conv(g, h, layer + 2, true)?;
            layer += 3;
        }
        self.conv(g, h, layer, false)
    }

    /// Per-pixel class probabilities `[N, C, H, W]`.
    pub fn forward<T: Float, R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, train: bool, rng: &mut R) -> Result<Var> {
        let logits = self.logits(g, x, train, rng)?;
        g.softmax_channel(logits)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTSEGNET";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { path: self.path.clone(), reason: "truncated".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl SegModel<f32> {
    /// Serializes as: magic, version, config block (four u32 and an f64
    /// dropout rate), tensor count, then each
    /// tensor as `rank, dims..., f32 values` (all little-endian).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        let c = &self.config;
        for v in [c.in_channels, c.num_classes, c.base_width, c.depth] {
            put_u32(&mut out, v)?;
        }
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_u32(&mut out, p.shape().len())?;
            for &d in p.shape() {
                put_u32(&mut out, d)?;
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: origin.to_string(), reason };
        let mut cur = Cursor { bytes, pos: 0, path: origin.to_string() };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a segmentation checkpoint".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = SegModelConfig {
            in_channels: cur.u32()?,
            num_classes: cur.u32()?,
            base_width: cur.u32()?,
            depth: cur.u32()?,
            dropout_rate: cur.f64()?,
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let count = cur.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = cur.u32()?;
            if rank > 4 {
                return Err(bad(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Self::from_params(config, params).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Copies `src` parameters into `dst`; both must share a configuration.
pub fn copy_params<T: Float>(dst: &mut SegModel<T>, src: &SegModel<T>) -> Result<()> {
    if dst.config != src.config {
        return contract_err("copy_params between differently configured models");
    }
    for (d, s) in dst.params.iter_mut().zip(&src.params) {
        d.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegModelConfig {
        SegModelConfig { base_width: 4, depth: 2, ..SegModelConfig::default() }
    }

    #[test]
    fn default_parameter_count_matches_hand_count() {
        // Per layer cout*cin*k*k + cout, for base width 8, depth 3, 1 -> 4 channels:
        //   encoder  1->8: 80, 8->8: 584, 8->16: 1168, 16->16: 2320, 16->32: 4640, 32->32: 9248
        //   bottom   32->64: 18496, 64->64: 36928
        //   decoder  64->32: 18464, 64->32: 18464, 32->32: 9248
        //            32->16: 4624, 32->16: 4624, 16->16: 2320
        //            16->8: 1160, 16->8: 1160, 8->8: 584
        //   head     8->4 (1x1): 36
        let cfg = SegModelConfig::default();
        assert_eq!(cfg.param_count(), 134_148);
        let model = SegModel::<f32>::init(cfg, 1).unwrap();
        assert_eq!(model.param_count(), 134_148);
        assert_eq!(model.params().len(), 2 * 18);
    }

    #[test]
    fn depth_one_count() {
        // 1->2: 20, 2->2: 38, 2->4: 76, 4->4: 148, up 4->2: 74, 4->2: 74, 2->2: 38, head 2->3: 9
        let cfg = SegModelConfig { base_width: 2, depth: 1, num_classes: 3, ..SegModelConfig::default() };
        assert_eq!(cfg.param_count(), 477);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = SegModel::<f32>::init(small(), 1).unwrap();
        let b = SegModel::<f32>::init(small(), 1).unwrap();
        let c = SegModel::<f32>::init(small(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().skip(1).step_by(2).all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SegModelConfig { depth: 0, ..small() }.validate().is_err());
        assert!(SegModelConfig { num_classes: 1, ..small() }.validate().is_err());
        assert!(SegModelConfig { dropout_rate: 1.0, ..small() }.validate().is_err());
    }

    #[test]
    fn output_is_a_distribution_per_pixel() {
        let model = SegModel::<f32>::init(small(), 3).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 8], |i| ((i * 37) % 17) as f32 / 17.0);
        let p = model.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 4, 16, 8]);
        let hw = 16 * 8;
        for b in 0..2 {
            for j in 0..hw {
                let s: f32 = (0..4).map(|c| p.data()[(b * 4 + c) * hw + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(p, model.predict(&x).unwrap());
    }

    #[test]
    fn indivisible_input_is_a_dimension_error() {
        let model = SegModel::<f32>::init(small(), 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 10, 8]);
        assert!(matches!(model.predict(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn train_mode_applies_dropout() {
        let model = SegModel::<f32>::init(SegModelConfig { dropout_rate: 0.5, ..small() }, 3).unwrap();
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 5) as f32 / 5.0);
        let run = |train: bool, seed: u64| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut r = rng::stream(seed, Purpose::Dropout, 0);
            let p = bound.forward(&mut g, xv, train, &mut r).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run(false, 1), run(false, 2));
        assert_ne!(run(true, 1), run(true, 2));
        assert_eq!(run(true, 1), run(true, 1));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let model = SegModel::<f32>::init(small(), 9).unwrap();
        let bytes = model.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = SegModel::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, model);
        assert!(SegModel::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SegModel::from_bytes(&bad, "mem").is_err());
    }
}
