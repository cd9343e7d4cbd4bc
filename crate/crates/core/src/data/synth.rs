//! Nested-ellipse phantoms: a bright cavity (class 1) wrapped in a dark ring
//! (class 2) with a second bright chamber (class 3) pressed against one side.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Background plus up to three structures.
    pub num_classes: usize,
    pub num_images: usize,
    pub num_val: usize,
    pub noise_sigma: f64,
    /// Per-image intensity gain is drawn from `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    /// Peak amplitude of a random linear intensity ramp across the image.
    pub bias_field: f64,
    /// Bright background blobs per image, drawn from `0..=max_distractors`.
    pub max_distractors: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// The whole layout is rotated by an angle drawn from `±max_tilt_deg`.
    pub max_tilt_deg: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            num_images: 200,
            num_val: 40,
            noise_sigma: 0.25,
            contrast_jitter: 0.5,
            bias_field: 0.3,
            max_distractors: 4,
            scale_min: 0.75,
            scale_max: 1.25,
            max_tilt_deg: 180.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if !(2..=4).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside 2..=4", self.num_classes));
        }
        if self.num_images == 0 {
            return bad("num_images must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.bias_field >= 0.0) {
            return bad("noise_sigma and bias_field must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return bad(format!("contrast_jitter {} outside [0, 1)", self.contrast_jitter));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.5) {
            return bad(format!("scale range [{}, {}] invalid", self.scale_min, self.scale_max));
        }
        if !(0.0..=180.0).contains(&self.max_tilt_deg) {
            return bad(format!("max_tilt_deg {} outside [0, 180]", self.max_tilt_deg));
        }
        Ok(())
    }
}

/// One image with its exact mask, both row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn grown(&self, by: f64) -> Self {
        Self { a: self.a + by, b: self.b + by, ..*self }
    }
}

struct Phantom {
    body: Ellipse,
    lv: Ellipse,
    myo: Ellipse,
    rv: Ellipse,
    distractors: Vec<Ellipse>,
    num_classes: usize,
}

const SUBSAMPLES: usize = 4;
const OUTSIDE: f64 = 0.05;
const TISSUE: f64 = 0.4;
const CLASS_INTENSITY: [f64; 4] = [TISSUE, 0.85, 0.2, 0.7];
const DISTRACTOR: f64 = 0.8;

impl Phantom {
    fn draw<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let s = spec.image_size as f64;
        let scale = rng.random_range(spec.scale_min..=spec.scale_max);
        let jitter = |r: &mut R| r.random_range(0.85..1.15);
        let tilt = spec.max_tilt_deg.to_radians();
        let theta: f64 = if tilt > 0.0 { rng.random_range(-tilt..=tilt) } else { 0.0 };
        let (cos, sin) = (theta.cos(), theta.sin());
        let center = (s - 1.0) / 2.0;
        let body = Ellipse { cx: center, cy: center, a: 0.46 * s, b: 0.40 * s, cos, sin };

        let lv_a = 0.10 * s * scale * jitter(rng);
        let lv_b = 0.09 * s * scale * jitter(rng);
        let thick = 0.045 * s * scale * jitter(rng);
        let cx = center + 0.06 * s + rng.random_range(-0.06..0.06) * s;
        let cy = center + rng.random_range(-0.06..0.06) * s;
        let lv = Ellipse { cx, cy, a: lv_a, b: lv_b, cos, sin };
        let myo = lv.grown(thick);

        // the second chamber sits on the far side of the ring, overlapping it slightly
        let rv_a = 0.11 * s * scale * jitter(rng);
        let rv_b = 0.16 * s * scale * jitter(rng);
        let reach = myo.a + 0.6 * rv_a;
        let rv = Ellipse { cx: cx - reach * cos, cy: cy - reach * sin, a: rv_a, b: rv_b, cos, sin };

        let n = rng.random_range(0..=spec.max_distractors);
        let mut distractors = Vec::with_capacity(n);
        while distractors.len() < n {
            let r = rng.random_range(0.03..0.06) * s;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.25..0.36) * s;
            let d = Ellipse {
                cx: center + dist * angle.cos(),
                cy: center + dist * angle.sin(),
                a: r,
                b: r * rng.random_range(0.7..1.0),
                cos: 1.0,
                sin: 0.0,
            };
            distractors.push(d);
        }
        Self { body, lv, myo, rv, distractors, num_classes: spec.num_classes }
    }

    /// Class at a continuous position, before any structure is dropped.
    fn class_at(&self, x: f64, y: f64) -> u8 {
        if self.lv.contains(x, y) {
            1
        } else if self.myo.contains(x, y) {
            2
        } else if self.rv.contains(x, y) {
            3
        } else {
            0
        }
    }

    fn label(&self, x: f64, y: f64) -> u8 {
        let c = self.class_at(x, y);
        // with fewer classes, higher structures fold into the ones below
        if (c as usize) < self.num_classes {
            c
        } else if c == 3 {
            0
        } else {
            (self.num_classes - 1) as u8
        }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        if !self.body.contains(x, y) {
            return OUTSIDE;
        }
        let c = self.label(x, y);
        if c == 0 && self.distractors.iter().any(|d| d.contains(x, y)) {
            return DISTRACTOR;
        }
        CLASS_INTENSITY[c as usize]
    }
}

/// Renders one sample; the image is anti-aliased by supersampling, the mask
/// takes the class at each pixel center.
fn render<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Sample {
    let n = spec.image_size;
    let ph = Phantom::draw(spec, rng);
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * spec.contrast_jitter;
    let ramp_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp = spec.bias_field * rng.random_range(0.0..=1.0);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let half = (n as f64 - 1.0) / 2.0;
    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let fx = x as f64 - 0.5 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
                    let fy = y as f64 - 0.5 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
                    acc += ph.intensity(fx, fy);
                }
            }
            let mut v = gain * acc / (SUBSAMPLES * SUBSAMPLES) as f64;
            v += ramp * ((x as f64 - half) * ramp_angle.cos() + (y as f64 - half) * ramp_angle.sin()) / half;
            if spec.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            image.push(v.clamp(0.0, 1.0) as f32);
            mask.push(ph.label(x as f64, y as f64));
        }
    }
    Sample { image, mask }
}

/// Training and validation samples, deterministic per `spec.seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng_train = rng::stream(spec.seed, Purpose::Synth, 0);
    let mut rng_val = rng::stream(spec.seed, Purpose::Synth, 1);
    Ok(Dataset {
        image_size: spec.image_size,
        num_classes: spec.num_classes,
        train: (0..spec.num_images).map(|_| render(spec, &mut rng_train)).collect(),
        val: (0..spec.num_val).map(|_| render(spec, &mut rng_val)).collect(),
    })
}
