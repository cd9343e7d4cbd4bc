//! Random rotation, horizontal flip and crop-and-resize. A drawn transform is
//! a value, so the same geometry can be replayed on images, masks and
//! probability maps.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Rotations are drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    /// Kept area fraction of the crop, drawn from `[crop_min, crop_max]`.
    pub crop_min: f64,
    pub crop_max: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, flip_prob: 0.5, crop_min: 0.85, crop_max: 0.95 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config(format!("max_rotation_deg {} outside [0, 180]", self.max_rotation_deg)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::Config(format!("crop range [{}, {}] invalid", self.crop_min, self.crop_max)));
        }
        Ok(())
    }
}

/// One concrete geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle: f64,
    pub flip: bool,
    /// Kept area fraction.
    pub crop_area: f64,
    /// Crop placement within the leftover margin, each in `[0, 1]`.
    pub offset: (f64, f64),
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self { angle: 0.0, flip: false, crop_area: 1.0, offset: (0.0, 0.0) }
    }

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let max = spec.max_rotation_deg.to_radians();
        let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let flip = rng.random_bool(spec.flip_prob);
        let crop_area = if spec.crop_max > spec.crop_min {
            rng.random_range(spec.crop_min..=spec.crop_max)
        } else {
            spec.crop_min
        };
        let offset = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        Self { angle, flip, crop_area, offset }
    }

    /// Source position of output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let side = self.crop_area.sqrt();
        let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
        let sx = self.offset.0 * (1.0 - side) * wm + side * x as f64;
        let sy = self.offset.1 * (1.0 - side) * hm + side * y as f64;
        let (cx, cy) = (wm / 2.0, hm / 2.0);
        let (dx, dy) = (sx - cx, sy - cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let rx = c * dx - s * dy + cx;
        let ry = s * dx + c * dy + cy;
        (if self.flip { wm - rx } else { rx }, ry)
    }

    /// Bilinear resampling of `planes` stacked `[planes, h, w]` planes; edges clamp.
    pub fn apply_planes<T: Float>(&self, data: &[T], planes: usize, h: usize, w: usize) -> Result<Vec<T>> {
        if data.len() != planes * h * w {
            return dim_err(format!("{} values for {planes} planes of {h}x{w}", data.len()));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); data.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, h, w);
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (T::of(sx - x0 as f64), T::of(sy - y0 as f64));
                let one = T::one();
                for p in 0..planes {
                    let plane = &data[p * hw..(p + 1) * hw];
                    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                    let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                    out[p * hw + y * w + x] = top * (one - fy) + bottom * fy;
                }
            }
        }
        Ok(out)
    }

    pub fn apply_image(&self, image: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        self.apply_planes(image, 1, h, w)
    }

    /// Nearest-neighbour resampling, so no new class ids can appear.
    pub fn apply_mask(&self, mask: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
        if mask.len() != h * w {
            return dim_err(format!("{} class ids for a {h}x{w} mask", mask.len()));
        }
        let mut out = Vec::with_capacity(mask.len());
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, h, w);
                let xi = sx.round().clamp(0.0, (w - 1) as f64) as usize;
                let yi = sy.round().clamp(0.0, (h - 1) as f64) as usize;
                out.push(mask[yi * w + xi]);
            }
        }
        Ok(out)
    }
}

/// Draws one transform and applies it to an image and, if given, its mask.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    mask: Option<&[u8]>,
    h: usize,
    w: usize,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(Vec<f32>, Option<Vec<u8>>)> {
    let draw = AugmentDraw::sample(spec, rng);
    let img = draw.apply_image(image, h, w)?;
    let m = mask.map(|m| draw.apply_mask(m, h, w)).transpose()?;
    Ok((img, m))
}
