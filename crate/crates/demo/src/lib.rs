//! Browser bindings: render a distraction scene with its target mask,
//! preview the crop augmentation, and plot weighted BCE against a logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use dahar::data::{augment_train, five_crop_eval, generate_scene, AugmentConfig, SceneSpec, SyntheticSample, ATTRIBUTE_NAMES};
use dahar::losses::{attribute_loss, AttrLossKind, AttributeLabels, Label, OmegaVector};
use dahar::tensor::{Graph, Tensor};

const ATTRIBUTES: usize = 8;
/// Gap between tiles in preview strips, in pixels.
const GAP: usize = 4;

fn to_js(e: dahar::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// RGBA bytes of a `[3, H, W]` image; `tint` blends the mask in red.
fn rgba(image: &Tensor<f32>, tint: Option<&Tensor<f32>>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        let mut px = [d[p], d[h * w + p], d[2 * h * w + p]];
        if let Some(m) = tint {
            let a = 0.55 * m.data()[p];
            px = [px[0] * (1.0 - a) + a, px[1] * (1.0 - a), px[2] * (1.0 - a)];
        }
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

/// Tiles equally sized RGBA images left to right on a white background.
fn strip(tiles: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
    let sw = tiles.len() * w + (tiles.len().saturating_sub(1)) * GAP;
    let mut out = vec![255u8; sw * h * 4];
    for (k, t) in tiles.iter().enumerate() {
        let x0 = k * (w + GAP);
        for y in 0..h {
            let dst = (y * sw + x0) * 4;
            out[dst..dst + w * 4].copy_from_slice(&t[y * w * 4..(y + 1) * w * 4]);
        }
    }
    out
}

#[wasm_bindgen]
pub struct SceneView {
    sample: SyntheticSample,
}

#[wasm_bindgen]
impl SceneView {
    pub fn width(&self) -> usize {
        self.sample.width()
    }

    pub fn height(&self) -> usize {
        self.sample.height()
    }

    pub fn image(&self) -> Vec<u8> {
        rgba(&self.sample.image, None)
    }

    /// The image with the target mask tinted red.
    pub fn overlay(&self) -> Vec<u8> {
        rgba(&self.sample.image, Some(&self.sample.mask))
    }

    /// Names of the target's positive attributes, comma separated.
    pub fn attributes(&self) -> String {
        let names: Vec<&str> = self.sample.labels.positives().map(|i| ATTRIBUTE_NAMES[i]).collect();
        if names.is_empty() {
            "(none)".into()
        } else {
            names.join(", ")
        }
    }
}

/// Renders one benchmark scene. `distractors` is the maximum number of
/// bystanders (zero gives the easy tier).
#[wasm_bindgen]
pub fn render_scene(seed: u32, distractors: usize, occlusion: f64, clutter: f64) -> Result<SceneView, JsValue> {
    let mut spec = SceneSpec::benchmark(ATTRIBUTES);
    spec.distractors = (distractors.min(1), distractors);
    spec.occlusion = occlusion;
    spec.clutter = clutter;
    let sample = generate_scene(&spec, seed as u64).map_err(to_js)?;
    Ok(SceneView { sample })
}

/// Side length of the tiles returned by [`crop_strip`] and [`train_strip`].
#[wasm_bindgen]
pub fn crop_size() -> usize {
    AugmentConfig::toy().final_size.1
}

/// Width of a strip of `n` tiles.
#[wasm_bindgen]
pub fn strip_width(n: usize) -> usize {
    n * crop_size() + n.saturating_sub(1) * GAP
}

/// The five evaluation crops (corners, then centre) side by side.
#[wasm_bindgen]
pub fn crop_strip(scene: &SceneView) -> Vec<u8> {
    let cfg = AugmentConfig::toy();
    let (h, w) = cfg.final_size;
    let tiles: Vec<Vec<u8>> = five_crop_eval(&scene.sample.image, &cfg).iter().map(|t| rgba(t, None)).collect();
    strip(&tiles, h, w)
}

/// `count` random training augmentations with the mask carried along.
#[wasm_bindgen]
pub fn train_strip(scene: &SceneView, seed: u32, count: usize) -> Vec<u8> {
    let cfg = AugmentConfig::toy();
    let (h, w) = cfg.final_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let tiles: Vec<Vec<u8>> = (0..count)
        .map(|_| {
            let a = augment_train(&scene.sample, &cfg, &mut rng);
            rgba(&a.image, Some(&a.mask))
        })
        .collect();
    strip(&tiles, h, w)
}

/// Per-sample loss of one attribute over `points` logits evenly spaced in
/// `[-range, range]`, for kind `bce`, `wbce` or `mixed` with positive ratio
/// `omega`.
#[wasm_bindgen]
pub fn loss_curve(kind: &str, omega: f64, positive: bool, range: f64, points: usize) -> Result<Vec<f64>, JsValue> {
    let kind: AttrLossKind = kind.parse().map_err(to_js)?;
    let omega = OmegaVector::new(vec![omega]).map_err(to_js)?;
    let label = AttributeLabels(vec![if positive { Label::Positive } else { Label::Negative }]);
    let step = if points > 1 { 2.0 * range / (points - 1) as f64 } else { 0.0 };
    (0..points)
        .map(|i| {
            let z = -range + step * i as f64;
            let mut g = Graph::<f64>::new();
            let logits = g.constant(Tensor::new(&[1, 1], vec![z]).map_err(to_js)?);
            let l = attribute_loss(&mut g, kind, logits, std::slice::from_ref(&label), Some(&omega), true).map_err(to_js)?;
            Ok(g.scalar(l.loss))
        })
        .collect()
}
