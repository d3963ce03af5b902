//! Procedural distraction scenes: one target figure whose attribute bits
//! drive visible patterns, surrounded by distractor figures with their own
//! bits, occluders in front and clutter behind.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::parse_key_values;
use crate::error::{Error, Result};
use crate::losses::{AttributeLabels, Label};
use crate::tensor::Tensor;

/// Attributes the renderer knows how to draw.
pub const MAX_ATTRIBUTES: usize = 14;

pub const ATTRIBUTE_NAMES: [&str; MAX_ATTRIBUTES] = [
    "hat", "stripes", "logo", "red_top", "dark_legs", "bag", "glasses", "skirt", "checked_legs", "belt", "dark_hair",
    "dark_shoes", "collar", "sleeves",
];

const DEFAULT_PRIORS: [f64; MAX_ATTRIBUTES] = [0.5, 0.3, 0.4, 0.25, 0.45, 0.2, 0.35, 0.3, 0.4, 0.25, 0.5, 0.3, 0.2, 0.35];

const MAX_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_attributes: usize,
    /// Probability that each attribute bit is set, for targets and
    /// distractors alike.
    pub attribute_priors: Vec<f64>,
    pub distractors: (usize, usize),
    pub occlusion: f64,
    pub clutter: f64,
    pub palette_seed: u64,
}

impl SceneSpec {
    /// The default benchmark scene: square 73-pixel canvas (resized and
    /// cropped to 64 by the toy pipeline), one to three distractors,
    /// moderate occlusion.
    pub fn benchmark(num_attributes: usize) -> Self {
        SceneSpec {
            height: 73,
            width: 73,
            num_attributes,
            attribute_priors: DEFAULT_PRIORS[..num_attributes.min(MAX_ATTRIBUTES)].to_vec(),
            distractors: (1, 3),
            occlusion: 0.3,
            clutter: 0.5,
            palette_seed: 0,
        }
    }

    /// Same scenes without distractors.
    pub fn easy(num_attributes: usize) -> Self {
        SceneSpec {
            distractors: (0, 0),
            ..Self::benchmark(num_attributes)
        }
    }

    /// Two-to-one portrait canvas.
    pub fn tall(num_attributes: usize) -> Self {
        SceneSpec {
            height: 146,
            width: 73,
            ..Self::benchmark(num_attributes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_attributes == 0 || self.num_attributes > MAX_ATTRIBUTES {
            return bad(format!("attributes must be in 1..={MAX_ATTRIBUTES}, got {}", self.num_attributes));
        }
        if self.attribute_priors.len() != self.num_attributes {
            return bad(format!(
                "priors has {} entries for {} attributes",
                self.attribute_priors.len(),
                self.num_attributes
            ));
        }
        if self.attribute_priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("priors must lie in [0, 1]".into());
        }
        if self.height < 24 || self.width < 24 {
            return bad(format!("canvas {}x{} is smaller than 24x24", self.height, self.width));
        }
        if self.distractors.0 > self.distractors.1 {
            return bad(format!("distractor range {:?} is empty", self.distractors));
        }
        for (name, v) in [("occlusion", self.occlusion), ("clutter", self.clutter)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let priors: Vec<String> = self.attribute_priors.iter().map(|p| format!("{p}")).collect();
        format!(
            "height={}\nwidth={}\nattributes={}\npriors={}\ndistractors_min={}\ndistractors_max={}\nocclusion={}\nclutter={}\npalette_seed={}\n",
            self.height,
            self.width,
            self.num_attributes,
            priors.join(","),
            self.distractors.0,
            self.distractors.1,
            self.occlusion,
            self.clutter,
            self.palette_seed
        )
    }

    /// Parses key=value text over benchmark defaults. Setting `attributes`
    /// without `priors` takes the default priors for that count.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let attrs = match kv.iter().find(|(k, _)| k == "attributes") {
            Some((_, v)) => parse_num(v, "attributes")?,
            None => 8,
        };
        let mut spec = Self::benchmark(attrs);
        for (k, v) in &kv {
            match k.as_str() {
                "height" => spec.height = parse_num(v, k)?,
                "width" => spec.width = parse_num(v, k)?,
                "attributes" => spec.num_attributes = parse_num(v, k)?,
                "priors" => {
                    spec.attribute_priors = v.split(',').map(|p| parse_num(p.trim(), k)).collect::<Result<_>>()?;
                }
                "distractors_min" => spec.distractors.0 = parse_num(v, k)?,
                "distractors_max" => spec.distractors.1 = parse_num(v, k)?,
                "occlusion" => spec.occlusion = parse_num(v, k)?,
                "clutter" => spec.clutter = parse_num(v, k)?,
                "palette_seed" => spec.palette_seed = parse_num(v, k)?,
                _ => return Err(Error::Config(format!("unknown scene key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn parse_num<N: std::str::FromStr>(v: &str, key: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// `(top, left, bottom, right)`, half-open.
pub type BoundingBox = (usize, usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub target_box: BoundingBox,
    pub distractor_boxes: Vec<BoundingBox>,
    pub distractor_labels: Vec<AttributeLabels>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `[3, H, W]`, every value `k / 255`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` of zeros and ones.
    pub mask: Tensor<f32>,
    pub labels: AttributeLabels,
    pub seed: u64,
    /// Present for generated samples, absent after loading from disk.
    pub meta: Option<SceneMeta>,
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Sub-seed for the `index`-th sample of a dataset seeded with `base`, so
/// any sample can be regenerated on its own.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

type Rgb = [f32; 3];

struct Palette {
    skin: Vec<Rgb>,
    reds: Vec<Rgb>,
    cools: Vec<Rgb>,
    hat: Rgb,
    stripe: Rgb,
    logo: Rgb,
    bag: Rgb,
    dark: Rgb,
    collar: Rgb,
    sleeve: Rgb,
}

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6c65_7474_65);
        let mut j = |c: Rgb| -> Rgb {
            let d: f32 = rng.gen_range(-0.06..0.06);
            c.map(|v| (v + d).clamp(0.0, 1.0))
        };
        Palette {
            skin: vec![j([0.87, 0.72, 0.58]), j([0.66, 0.48, 0.36]), j([0.95, 0.82, 0.70])],
            reds: vec![j([0.85, 0.15, 0.15]), j([0.75, 0.10, 0.30]), j([0.95, 0.35, 0.20])],
            cools: vec![j([0.15, 0.30, 0.80]), j([0.15, 0.60, 0.35]), j([0.45, 0.45, 0.50]), j([0.20, 0.65, 0.70])],
            hat: j([0.95, 0.85, 0.10]),
            stripe: j([0.08, 0.08, 0.10]),
            logo: j([0.98, 0.98, 0.98]),
            bag: j([0.50, 0.30, 0.12]),
            dark: j([0.10, 0.08, 0.08]),
            collar: j([0.10, 0.95, 0.90]),
            sleeve: j([0.90, 0.50, 0.90]),
        }
    }
}

/// Float canvas plus per-pixel ownership used to derive the target mask and
/// per-attribute visibility.
struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<Rgb>,
    /// Object id owning each pixel: 0 background, 1 target, 2.. others.
    owner: Vec<u16>,
    /// Attribute whose pattern painted the pixel last (target only).
    pattern: Vec<i8>,
}

const TARGET: u16 = 1;

impl Canvas {
    fn new(h: usize, w: usize, bg: Rgb) -> Self {
        Canvas {
            h,
            w,
            rgb: vec![bg; h * w],
            owner: vec![0; h * w],
            pattern: vec![-1; h * w],
        }
    }

    fn paint(&mut self, idx: usize, c: Rgb, owner: u16, pattern: i8) {
        self.rgb[idx] = c;
        self.owner[idx] = owner;
        self.pattern[idx] = if owner == TARGET { pattern } else { -1 };
    }

    /// Paints pixels whose centres satisfy `inside`, within a bounding box.
    fn fill(&mut self, bbox: (f32, f32, f32, f32), owner: u16, pattern: i8, mut color: impl FnMut(usize, usize) -> Option<Rgb>, inside: impl Fn(f32, f32) -> bool) {
        let (y0, x0, y1, x1) = bbox;
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().max(0.0) as usize).min(self.h);
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().max(0.0) as usize).min(self.w);
        for y in ys {
            for x in xs.clone() {
                if inside(y as f32 + 0.5, x as f32 + 0.5) {
                    if let Some(c) = color(y, x) {
                        self.paint(y * self.w + x, c, owner, pattern);
                    }
                }
            }
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, owner: u16, pattern: i8, color: impl FnMut(usize, usize) -> Option<Rgb>) {
        let (ry, rx) = (ry.max(0.5), rx.max(0.5));
        self.fill((cy - ry, cx - rx, cy + ry, cx + rx), owner, pattern, color, |y, x| {
            let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
            dy * dy + dx * dx <= 1.0
        });
    }

    fn rect(&mut self, y0: f32, x0: f32, y1: f32, x1: f32, owner: u16, pattern: i8, color: impl FnMut(usize, usize) -> Option<Rgb>) {
        self.fill((y0, x0, y1, x1), owner, pattern, color, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1);
    }

    /// Repaints already-owned pixels of `owner` inside a region.
    fn overlay(&mut self, owner: u16, pattern: i8, region: impl Fn(f32, f32) -> bool, color: impl Fn(usize, usize) -> Option<Rgb>) {
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                if self.owner[i] == owner && region(y as f32 + 0.5, x as f32 + 0.5) {
                    if let Some(c) = color(y, x) {
                        self.paint(i, c, owner, pattern);
                    }
                }
            }
        }
    }
}

/// Figure layout for a given top-centre anchor and height.
struct Figure {
    cx: f32,
    top: f32,
    h: f32,
}

impl Figure {
    fn head(&self) -> (f32, f32, f32, f32) {
        (self.top + 0.11 * self.h, self.cx, 0.10 * self.h, 0.08 * self.h)
    }

    fn torso(&self) -> (f32, f32, f32, f32) {
        (self.top + 0.41 * self.h, self.cx, 0.21 * self.h, 0.14 * self.h)
    }

    fn legs(&self, skirt: bool) -> (f32, f32, f32, f32) {
        let rx = if skirt { 0.17 } else { 0.09 };
        (self.top + 0.78 * self.h, self.cx, 0.22 * self.h, rx * self.h)
    }

    fn bbox(&self, w: usize, h: usize) -> BoundingBox {
        let half = 0.24 * self.h;
        let clampi = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clampi(self.top.floor(), h),
            clampi((self.cx - half).floor(), w),
            clampi((self.top + self.h).ceil(), h),
            clampi((self.cx + half).ceil(), w),
        )
    }
}

fn inside_ellipse((cy, cx, ry, rx): (f32, f32, f32, f32)) -> impl Fn(f32, f32) -> bool {
    move |y, x| {
        let (dy, dx) = ((y - cy) / ry.max(0.5), (x - cx) / rx.max(0.5));
        dy * dy + dx * dx <= 1.0
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, v: &'a [Rgb]) -> &'a Rgb {
    &v[rng.gen_range(0..v.len())]
}

fn light_legs(rng: &mut ChaCha8Rng) -> Rgb {
    let l = rng.gen_range(0.55..0.85);
    [l, l * 0.95, l * 0.85]
}

/// Draws one figure. Pattern pixels are tagged with their attribute index
/// so visibility can be checked after occlusion.
fn draw_figure(canvas: &mut Canvas, fig: &Figure, bits: &[bool], owner: u16, pal: &Palette, rng: &mut ChaCha8Rng) {
    let on = |i: usize| bits.get(i).copied().unwrap_or(false);
    let h = fig.h;
    let skin = *pick(rng, &pal.skin);
    let top = if on(3) { *pick(rng, &pal.reds) } else { *pick(rng, &pal.cools) };
    let legs_c = if on(4) { [0.12, 0.12, 0.18] } else { light_legs(rng) };
    let stripe_period = (0.06 * h).max(2.0);

    let torso = fig.torso();
    let legs = fig.legs(on(7));
    let head = fig.head();

    // Body parts; the torso colour and the leg shade are attributes in their own right.
    canvas.ellipse(legs.0, legs.1, legs.2, legs.3, owner, if on(4) { 4 } else { -1 }, |_, _| Some(legs_c));
    if on(7) {
        // The skirt is the part of the legs wider than plain trousers.
        let (l, cx) = (legs, fig.cx);
        canvas.overlay(owner, 7, move |y, x| inside_ellipse(l)(y, x) && (x - cx).abs() > 0.09 * h, move |_, _| Some(legs_c));
    }
    canvas.ellipse(torso.0, torso.1, torso.2, torso.3, owner, if on(3) { 3 } else { -1 }, |_, _| Some(top));
    canvas.ellipse(head.0, head.1, head.2, head.3, owner, -1, |_, _| Some(skin));

    if on(5) {
        let (y0, y1) = (torso.0 - 0.04 * h, torso.0 + 0.12 * h);
        let (x0, x1) = (fig.cx + 0.11 * h, fig.cx + 0.22 * h);
        canvas.rect(y0, x0, y1, x1, owner, 5, |_, _| Some(pal.bag));
    }
    if on(13) {
        let t = torso;
        canvas.overlay(owner, 13, move |y, x| inside_ellipse(t)(y, x) && (x - t.1).abs() > 0.65 * t.3, |_, _| Some(pal.sleeve));
    }
    if on(1) {
        let t = torso;
        let stripe = pal.stripe;
        canvas.overlay(
            owner,
            1,
            move |y, x| inside_ellipse(t)(y, x) && ((y - (t.0 - t.2)) / stripe_period).floor() as i64 % 2 == 0,
            move |_, _| Some(stripe),
        );
    }
    if on(8) {
        let l = legs;
        let cell = (0.07 * h).max(2.0);
        canvas.overlay(
            owner,
            8,
            move |y, x| inside_ellipse(l)(y, x) && (((y / cell).floor() + (x / cell).floor()) as i64) % 2 == 0,
            |_, _| Some([0.95, 0.95, 0.95]),
        );
    }
    if on(9) {
        let y = torso.0 + torso.2 * 0.8;
        let t = torso;
        canvas.overlay(owner, 9, move |yy, x| inside_ellipse(t)(yy, x) && (yy - y).abs() < (0.035 * h).max(0.75), |_, _| Some([0.35, 0.2, 0.05]));
    }
    if on(2) {
        let s = (0.06 * h).max(1.0);
        canvas.rect(torso.0 - s, fig.cx - s, torso.0 + s, fig.cx + s, owner, 2, |_, _| Some(pal.logo));
    }
    if on(11) {
        let l = legs;
        canvas.overlay(owner, 11, move |y, x| inside_ellipse(l)(y, x) && y > l.0 + 0.7 * l.2, |_, _| Some(pal.dark));
    }
    if on(10) {
        let hd = head;
        canvas.overlay(owner, 10, move |y, x| inside_ellipse(hd)(y, x) && y < hd.0 - 0.25 * hd.2, |_, _| Some([0.08, 0.05, 0.03]));
    }
    if on(6) {
        let hd = head;
        canvas.overlay(owner, 6, move |y, x| inside_ellipse(hd)(y, x) && (y - hd.0).abs() < (0.025 * h).max(0.6), |_, _| Some([0.02, 0.02, 0.02]));
    }
    if on(12) {
        let r = (0.035 * h).max(0.8);
        canvas.ellipse(torso.0 - torso.2 + r, fig.cx, r, r, owner, 12, |_, _| Some(pal.collar));
    }
    if on(0) {
        canvas.ellipse(head.0 - head.2 * 1.05, fig.cx, 0.04 * h, 0.12 * h, owner, 0, |_, _| Some(pal.hat));
    }
}

fn draw_clutter(canvas: &mut Canvas, level: f64, pal: &Palette, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h as f32, canvas.w as f32);
    let n = (level * 14.0).round() as usize;
    for _ in 0..n {
        let cy = rng.gen_range(0.0..h);
        let cx = rng.gen_range(0.0..w);
        let sy = rng.gen_range(0.04..0.16) * h;
        let sx = rng.gen_range(0.04..0.16) * w;
        // Some clutter reuses attribute colours and textures ("similar objects").
        let color = match rng.gen_range(0..5) {
            0 => *pick(rng, &pal.reds),
            1 => pal.hat,
            2 => pal.logo,
            _ => [rng.gen(), rng.gen(), rng.gen()],
        };
        match rng.gen_range(0..3) {
            0 => canvas.ellipse(cy, cx, sy, sx, 0, -1, |_, _| Some(color)),
            1 => canvas.rect(cy - sy, cx - sx, cy + sy, cx + sx, 0, -1, |_, _| Some(color)),
            _ => {
                let period = rng.gen_range(2.0..4.0f32);
                let stripe = pal.stripe;
                canvas.rect(cy - sy, cx - sx, cy + sy, cx + sx, 0, -1, move |y, _| {
                    Some(if (y as f32 / period).floor() as i64 % 2 == 0 { stripe } else { color })
                })
            }
        }
    }
}

struct Rendered {
    canvas: Canvas,
    meta: SceneMeta,
}

fn render_once(spec: &SceneSpec, bits: &[bool], pal: &Palette, rng: &mut ChaCha8Rng) -> Rendered {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let bg_base: f32 = rng.gen_range(0.3..0.7);
    let bg = [bg_base + rng.gen_range(-0.1..0.1), bg_base + rng.gen_range(-0.1..0.1), bg_base + rng.gen_range(-0.1..0.1)];
    let mut canvas = Canvas::new(spec.height, spec.width, bg.map(|v| v.clamp(0.0, 1.0)));
    draw_clutter(&mut canvas, spec.clutter, pal, rng);

    let fig_h = rng.gen_range(0.68..0.85) * h.min(2.0 * w);
    let target = Figure {
        cx: w / 2.0 + rng.gen_range(-0.08..0.08) * w,
        top: (h - fig_h) / 2.0 + rng.gen_range(-0.05..0.05) * h,
        h: fig_h,
    };

    // Distractors stand behind the target, so draw them first.
    let count = rng.gen_range(spec.distractors.0..=spec.distractors.1);
    let mut distractor_boxes = Vec::with_capacity(count);
    let mut distractor_labels = Vec::with_capacity(count);
    for k in 0..count {
        let dh = fig_h * rng.gen_range(0.55..0.8);
        let fig = Figure {
            cx: rng.gen_range(0.1..0.9) * w,
            top: rng.gen_range(0.0..(h - dh).max(1.0)),
            h: dh,
        };
        let dbits: Vec<bool> = spec.attribute_priors.iter().map(|&p| rng.gen_bool(p)).collect();
        draw_figure(&mut canvas, &fig, &dbits, 2 + k as u16, pal, rng);
        distractor_boxes.push(fig.bbox(spec.width, spec.height));
        distractor_labels.push(AttributeLabels::from_bits(&dbits));
    }
    draw_figure(&mut canvas, &target, bits, TARGET, pal, rng);
    let target_box = target.bbox(spec.width, spec.height);

    if spec.occlusion > 0.0 && rng.gen_bool(spec.occlusion.min(1.0)) {
        let n = 1 + rng.gen_range(0..=(2.0 * spec.occlusion).round() as usize);
        let (t0, l0, b0, r0) = target_box;
        let (bh, bw) = ((b0 - t0) as f32, (r0 - l0) as f32);
        for _ in 0..n {
            let color = [rng.gen(), rng.gen(), rng.gen()];
            let owner = u16::MAX;
            if rng.gen_bool(0.5) {
                // vertical pole
                let pw = rng.gen_range(0.08..0.12 + 0.2 * spec.occlusion as f32) * bw;
                let x = l0 as f32 + rng.gen_range(0.0..1.0) * bw;
                canvas.rect(0.0, x - pw / 2.0, h, x + pw / 2.0, owner, -1, |_, _| Some(color));
            } else {
                // horizontal bar, entering from one side
                let ph = rng.gen_range(0.06..0.08 + 0.15 * spec.occlusion as f32) * bh;
                let y = t0 as f32 + rng.gen_range(0.1..0.95) * bh;
                let len = rng.gen_range(0.2..0.3 + 0.5 * spec.occlusion as f32) * bw;
                let (x0, x1) = if rng.gen_bool(0.5) { (0.0, l0 as f32 + len) } else { (r0 as f32 - len, w) };
                canvas.rect(y - ph / 2.0, x0, y + ph / 2.0, x1, owner, -1, |_, _| Some(color));
            }
        }
    }
    Rendered {
        canvas,
        meta: SceneMeta {
            target_box,
            distractor_boxes,
            distractor_labels,
        },
    }
}

/// Checks that the target is visible and every positive attribute still has
/// at least one visible pattern pixel.
fn acceptable(r: &Rendered, bits: &[bool]) -> bool {
    let (t, l, b, rr) = r.meta.target_box;
    let box_area = ((b - t) * (rr - l)).max(1);
    let visible = r.canvas.owner.iter().filter(|&&o| o == TARGET).count();
    if (visible as f64) < 0.01 * box_area as f64 {
        return false;
    }
    bits.iter().enumerate().filter(|(_, &on)| on).all(|(a, _)| {
        // The colour/shade attributes are carried by whole body parts.
        r.canvas.pattern.iter().any(|&p| p == a as i8)
    })
}

/// Renders the scene for `(spec, seed)`. Identical inputs give bitwise
/// identical samples.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    let pal = Palette::new(spec.palette_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<bool> = spec.attribute_priors.iter().map(|&p| rng.gen_bool(p)).collect();
    for _ in 0..MAX_ATTEMPTS {
        let r = render_once(spec, &bits, &pal, &mut rng);
        if !acceptable(&r, &bits) {
            continue;
        }
        let (h, w) = (spec.height, spec.width);
        let mut image = vec![0f32; 3 * h * w];
        for (i, px) in r.canvas.rgb.iter().enumerate() {
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-6.0..=6.0);
                // Through u8 so that rounding never leaves a negative zero.
                let q = (px[c] * 255.0 + noise).round().clamp(0.0, 255.0) as u8;
                image[c * h * w + i] = q as f32 / 255.0;
            }
        }
        let mask = r.canvas.owner.iter().map(|&o| (o == TARGET) as u8 as f32).collect();
        return Ok(SyntheticSample {
            id: String::new(),
            image: Tensor::new(&[3, h, w], image)?,
            mask: Tensor::new(&[1, h, w], mask)?,
            labels: AttributeLabels::from_bits(&bits),
            seed,
            meta: Some(r.meta),
        });
    }
    Err(Error::Contract(format!(
        "scene seed {seed}: target occluded in {MAX_ATTEMPTS} consecutive renders"
    )))
}

/// `count` scenes with ids `000000..` and sub-seeds derived from `seed`.
pub fn generate_samples(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    (0..count)
        .map(|i| {
            let mut s = generate_scene(spec, sample_seed(seed, i as u64))?;
            s.id = format!("{i:06}");
            Ok(s)
        })
        .collect()
}

/// Replaces a random `fraction` of all labels with unknown.
pub fn hide_labels(samples: &mut [SyntheticSample], fraction: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        for l in &mut s.labels.0 {
            if rng.gen_bool(fraction) {
                *l = Label::Unknown;
            }
        }
    }
}

/// Pixels painted by each attribute's pattern on the target (for tests and
/// visual checks), as flat indices.
pub fn pattern_pixels(spec: &SceneSpec, seed: u64) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let pal = Palette::new(spec.palette_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<bool> = spec.attribute_priors.iter().map(|&p| rng.gen_bool(p)).collect();
    for _ in 0..MAX_ATTEMPTS {
        let r = render_once(spec, &bits, &pal, &mut rng);
        if acceptable(&r, &bits) {
            let mut out = vec![Vec::new(); spec.num_attributes];
            for (i, &p) in r.canvas.pattern.iter().enumerate() {
                if p >= 0 && (p as usize) < out.len() && r.canvas.owner[i] == TARGET {
                    out[p as usize].push(i);
                }
            }
            return Ok(out);
        }
    }
    Err(Error::Contract(format!("scene seed {seed}: no acceptable render")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let spec = SceneSpec::benchmark(8);
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap().image, generate_scene(&spec, 8).unwrap().image);
    }

    #[test]
    fn clean_scene_patterns_lie_inside_mask() {
        let spec = SceneSpec {
            distractors: (0, 0),
            occlusion: 0.0,
            clutter: 0.0,
            ..SceneSpec::benchmark(14)
        };
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            let pats = pattern_pixels(&spec, seed).unwrap();
            let mask = s.mask.data();
            for a in s.labels.positives() {
                assert!(!pats[a].is_empty(), "seed {seed} attribute {a} has no pixels");
                assert!(pats[a].iter().all(|&i| mask[i] == 1.0));
            }
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let mut spec = SceneSpec::tall(5);
        spec.palette_seed = 3;
        assert_eq!(SceneSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(SceneSpec::from_text("occlusion=2").is_err());
        assert!(SceneSpec::from_text("distractors_min=3\ndistractors_max=1").is_err());
    }

    #[test]
    fn image_values_are_quantized() {
        let s = generate_scene(&SceneSpec::benchmark(8), 1).unwrap();
        assert!(s.image.data().iter().all(|&v| ((v * 255.0).round() / 255.0) == v));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
