//! Multi-scale corner/centre cropping, flips and colour jitter for training;
//! five-crop and whole-image views for evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scene::{parse_num, SyntheticSample};
use crate::blocks::parse_key_values;
use crate::error::{Error, Result};
use crate::losses::AttributeLabels;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// `(H, W)` every image is first resized to.
    pub resize: (usize, usize),
    /// Candidate crop widths; crop heights follow the resize aspect ratio.
    pub crop_sizes: Vec<usize>,
    /// `(H, W)` of the network input.
    pub final_size: (usize, usize),
    pub flip_prob: f64,
    /// Amplitude of the per-channel gain and offset jitter.
    pub jitter: f64,
}

impl AugmentConfig {
    /// 256 resize, five crop scales, 224 input.
    pub fn standard() -> Self {
        AugmentConfig {
            resize: (256, 256),
            crop_sizes: vec![256, 224, 192, 168, 128],
            final_size: (224, 224),
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }

    /// The standard pipeline scaled by 64/224 for the toy network.
    pub fn toy() -> Self {
        AugmentConfig {
            resize: (73, 73),
            crop_sizes: vec![73, 64, 55, 48, 37],
            final_size: (64, 64),
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }

    /// Portrait variant keeping height = 2 × width.
    pub fn toy_tall() -> Self {
        AugmentConfig {
            resize: (146, 73),
            final_size: (128, 64),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rh, rw) = self.resize;
        let (fh, fw) = self.final_size;
        if rh == 0 || rw == 0 || fh == 0 || fw == 0 {
            return Err(Error::Config("augment sizes must be positive".into()));
        }
        if fh > rh || fw > rw {
            return Err(Error::Config(format!("final size {fh}x{fw} exceeds resize {rh}x{rw}")));
        }
        if self.crop_sizes.is_empty() {
            return Err(Error::Config("at least one crop size is required".into()));
        }
        if let Some(s) = self.crop_sizes.iter().find(|&&s| s == 0 || s > rw || self.crop_height(s) > rh) {
            return Err(Error::Config(format!("crop size {s} does not fit the {rh}x{rw} resize")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("flip_prob must be in [0, 1] and jitter in [0, 1)".into()));
        }
        Ok(())
    }

    fn crop_height(&self, width: usize) -> usize {
        let (rh, rw) = self.resize;
        (width * rh + rw / 2) / rw
    }

    pub fn to_text(&self) -> String {
        let crops: Vec<String> = self.crop_sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "resize_h={}\nresize_w={}\ncrop_sizes={}\nfinal_h={}\nfinal_w={}\nflip_prob={}\njitter={}\n",
            self.resize.0,
            self.resize.1,
            crops.join(","),
            self.final_size.0,
            self.final_size.1,
            self.flip_prob,
            self.jitter
        )
    }

    /// Applies one `key=value` setting; returns `false` for foreign keys.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "resize_h" => self.resize.0 = parse_num(v, key)?,
            "resize_w" => self.resize.1 = parse_num(v, key)?,
            "crop_sizes" => self.crop_sizes = v.split(',').map(|s| parse_num(s.trim(), key)).collect::<Result<_>>()?,
            "final_h" => self.final_size.0 = parse_num(v, key)?,
            "final_w" => self.final_size.1 = parse_num(v, key)?,
            "flip_prob" => self.flip_prob = parse_num(v, key)?,
            "jitter" => self.jitter = parse_num(v, key)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (k, v) in parse_key_values(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown augment key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    /// Five-crop order.
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];
}

/// `(top, left, height, width)` of a crop inside an `(h, w)` image.
pub fn crop_box(image: (usize, usize), crop: (usize, usize), pos: CropPosition) -> (usize, usize, usize, usize) {
    let (h, w) = image;
    let (ch, cw) = crop;
    let (dy, dx) = (h - ch, w - cw);
    let (y, x) = match pos {
        CropPosition::TopLeft => (0, 0),
        CropPosition::TopRight => (0, dx),
        CropPosition::BottomLeft => (dy, 0),
        CropPosition::BottomRight => (dy, dx),
        CropPosition::Center => (dy / 2, dx / 2),
    };
    (y, x, ch, cw)
}

/// Every random choice one training augmentation makes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentChoice {
    pub position: CropPosition,
    pub crop_width: usize,
    pub flip: bool,
    /// Per-channel `(gain, offset)`: `v ↦ v·(1 + gain) + offset`.
    pub jitter: [(f32, f32); 3],
}

impl AugmentChoice {
    pub fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let position = CropPosition::ALL[rng.gen_range(0..5)];
        let crop_width = cfg.crop_sizes[rng.gen_range(0..cfg.crop_sizes.len())];
        let flip = rng.gen_bool(cfg.flip_prob);
        let j = cfg.jitter as f32;
        let mut jitter = [(0.0, 0.0); 3];
        if j > 0.0 {
            for c in &mut jitter {
                *c = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            }
        }
        AugmentChoice {
            position,
            crop_width,
            flip,
            jitter,
        }
    }

    /// The identity-ish choice: whole image, no flip, no jitter.
    pub fn plain(cfg: &AugmentConfig) -> Self {
        AugmentChoice {
            position: CropPosition::Center,
            crop_width: cfg.resize.1,
            flip: false,
            jitter: [(0.0, 0.0); 3],
        }
    }
}

/// Bilinear resize of a `[C, H, W]` tensor.
pub fn resize_chw(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s[1], s[2]) == (oh, ow) {
        return t.clone();
    }
    let data = kernels::resize_planes(t.data(), s[0], s[1], s[2], oh, ow);
    Tensor::new(&[s[0], oh, ow], data).expect("resize keeps the channel count")
}

/// Copies a window out of a `[C, H, W]` tensor.
pub fn crop_chw(t: &Tensor<f32>, (y, x, ch, cw): (usize, usize, usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(y + ch <= h && x + cw <= w, "crop outside image");
    let d = t.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for p in 0..c {
        for r in y..y + ch {
            let row = (p * h + r) * w;
            out.extend_from_slice(&d[row + x..row + x + cw]);
        }
    }
    Tensor::new(&[c, ch, cw], out).expect("crop extents are positive")
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn flip_chw(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Augments an image/mask pair with a fixed set of choices; the mask gets
/// the same geometry but no jitter.
pub fn apply_augment(image: &Tensor<f32>, mask: &Tensor<f32>, cfg: &AugmentConfig, choice: &AugmentChoice) -> (Tensor<f32>, Tensor<f32>) {
    let (rh, rw) = cfg.resize;
    let (fh, fw) = cfg.final_size;
    let bx = crop_box((rh, rw), (cfg.crop_height(choice.crop_width), choice.crop_width), choice.position);
    let geom = |t: &Tensor<f32>| {
        let t = crop_chw(&resize_chw(t, rh, rw), bx);
        let t = resize_chw(&t, fh, fw);
        if choice.flip {
            flip_chw(&t)
        } else {
            t
        }
    };
    let mut img = geom(image);
    let plane = fh * fw;
    for (c, &(gain, offset)) in choice.jitter.iter().enumerate().take(img.shape()[0]) {
        if gain != 0.0 || offset != 0.0 {
            for v in &mut img.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v * (1.0 + gain) + offset).clamp(0.0, 1.0);
            }
        }
    }
    (img, geom(mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub labels: AttributeLabels,
}

pub fn augment_train(sample: &SyntheticSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentedSample {
    let choice = AugmentChoice::sample(cfg, rng);
    let (image, mask) = apply_augment(&sample.image, &sample.mask, cfg, &choice);
    AugmentedSample {
        image,
        mask,
        labels: sample.labels.clone(),
    }
}

/// Crops of the final size at the four corners and the centre of the
/// resized image, in [`CropPosition::ALL`] order.
pub fn five_crop_eval(image: &Tensor<f32>, cfg: &AugmentConfig) -> [Tensor<f32>; 5] {
    let (rh, rw) = cfg.resize;
    let resized = resize_chw(image, rh, rw);
    CropPosition::ALL.map(|p| crop_chw(&resized, crop_box((rh, rw), cfg.final_size, p)))
}

/// The whole image resized straight to the final size.
pub fn full_view(image: &Tensor<f32>, cfg: &AugmentConfig) -> Tensor<f32> {
    resize_chw(image, cfg.final_size.0, cfg.final_size.1)
}
