//! Attribute losses (plain, ratio-weighted and mixed BCE), per-pixel mask
//! supervision, positive-ratio statistics, and total-loss assembly.

use std::fmt;
use std::str::FromStr;

use crate::blocks::ModelOutput;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// One attribute annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '1' => Some(Label::Positive),
            '0' => Some(Label::Negative),
            'u' => Some(Label::Unknown),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            Label::Positive => '1',
            Label::Negative => '0',
            Label::Unknown => 'u',
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }
}

/// Per-sample tri-state labels over all attributes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeLabels(pub Vec<Label>);

impl AttributeLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        AttributeLabels(
            bits.iter()
                .map(|&b| if b { Label::Positive } else { Label::Negative })
                .collect(),
        )
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == Label::Positive)
            .map(|(i, _)| i)
    }
}

impl fmt::Display for AttributeLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.0 {
            write!(f, "{}", l.to_char())?;
        }
        Ok(())
    }
}

impl FromStr for AttributeLabels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| Label::from_char(c).ok_or_else(|| Error::Config(format!("invalid label character {c:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(AttributeLabels)
    }
}

/// Positive-sample ratio per attribute, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaVector(Vec<f64>);

pub const OMEGA_CLAMP: f64 = 1e-3;

impl OmegaVector {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if let Some((c, w)) = omega.iter().enumerate().find(|(_, &w)| !(w > 0.0 && w < 1.0)) {
            return Err(Error::Config(format!("omega[{c}] = {w} is outside (0, 1)")));
        }
        Ok(OmegaVector(omega))
    }

    pub fn balanced(attributes: usize) -> Self {
        OmegaVector(vec![0.5; attributes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fraction of known labels that are positive, per attribute, clamped to
/// `[1e-3, 1 − 1e-3]`.
pub fn positive_ratios(labels: &[AttributeLabels]) -> Result<OmegaVector> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Config("positive ratios need at least one sample".into()))?;
    let c = first.len();
    let mut pos = vec![0usize; c];
    let mut known = vec![0usize; c];
    for l in labels {
        if l.len() != c {
            return Err(Error::Shape(format!("label vector of length {} among length {c}", l.len())));
        }
        for (i, &v) in l.0.iter().enumerate() {
            if v.is_known() {
                known[i] += 1;
            }
            if v == Label::Positive {
                pos[i] += 1;
            }
        }
    }
    let omega = (0..c)
        .map(|i| {
            if known[i] == 0 {
                return Err(Error::Config(format!("attribute {i} has no known labels")));
            }
            Ok((pos[i] as f64 / known[i] as f64).clamp(OMEGA_CLAMP, 1.0 - OMEGA_CLAMP))
        })
        .collect::<Result<Vec<_>>>()?;
    OmegaVector::new(omega)
}

/// Selector used by configs and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrLossKind {
    Bce,
    Weighted,
    Mixed,
}

impl FromStr for AttrLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(AttrLossKind::Bce),
            "wbce" => Ok(AttrLossKind::Weighted),
            "mixed" => Ok(AttrLossKind::Mixed),
            _ => Err(Error::Config(format!("unknown loss kind {s:?} (expected bce, wbce or mixed)"))),
        }
    }
}

impl fmt::Display for AttrLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttrLossKind::Bce => "bce",
            AttrLossKind::Weighted => "wbce",
            AttrLossKind::Mixed => "mixed",
        })
    }
}

/// An attribute loss and how many labels contributed to it. `known == 0`
/// flags a batch with every label ignored; the loss is then exactly zero.
#[derive(Clone, Copy, Debug)]
pub struct AttrLoss {
    pub loss: Var,
    pub known: usize,
}

impl AttrLoss {
    pub fn all_ignored(&self) -> bool {
        self.known == 0
    }
}

/// Per-attribute (positive, negative) term weights.
fn term_weights(kind: AttrLossKind, omega: Option<&OmegaVector>, c: usize) -> Result<Vec<(f64, f64)>> {
    let weighted = |w: f64| (1.0 / (2.0 * w), 1.0 / (2.0 * (1.0 - w)));
    let omega = match kind {
        AttrLossKind::Bce => return Ok(vec![(1.0, 1.0); c]),
        _ => omega.ok_or_else(|| Error::Config(format!("{kind} loss needs positive ratios")))?,
    };
    if omega.len() != c {
        return Err(Error::Shape(format!("omega has {} entries for {c} attributes", omega.len())));
    }
    Ok(omega
        .values()
        .iter()
        .map(|&w| {
            let (p, n) = weighted(w);
            match kind {
                AttrLossKind::Mixed => ((1.0 + p) / 2.0, (1.0 + n) / 2.0),
                _ => (p, n),
            }
        })
        .collect())
}

/// Attribute loss of the selected kind, summed over attributes and averaged
/// over the batch. Unknown labels are dropped when `ignore_unknown`, and
/// treated as negatives otherwise.
pub fn attribute_loss<T: Real>(
    g: &mut Graph<T>,
    kind: AttrLossKind,
    logits: Var,
    labels: &[AttributeLabels],
    omega: Option<&OmegaVector>,
    ignore_unknown: bool,
) -> Result<AttrLoss> {
    let (b, c) = match g.shape(logits) {
        &[b, c] => (b, c),
        s => return Err(Error::Shape(format!("attribute logits must be [B, C], got {s:?}"))),
    };
    if labels.len() != b || labels.iter().any(|l| l.len() != c) {
        return Err(Error::Shape(format!("labels do not match logits [{b}, {c}]")));
    }
    let weights = term_weights(kind, omega, c)?;
    let mut targets = Vec::with_capacity(b * c);
    let mut pos_w = Vec::with_capacity(b * c);
    let mut neg_w = Vec::with_capacity(b * c);
    let mut known = 0;
    for l in labels {
        for (ci, &v) in l.0.iter().enumerate() {
            let (wp, wn) = weights[ci];
            let (y, on) = match v {
                Label::Positive => (1.0, true),
                Label::Negative => (0.0, true),
                Label::Unknown => (0.0, !ignore_unknown),
            };
            known += on as usize;
            targets.push(T::lit(y));
            pos_w.push(if on { T::lit(wp) } else { T::zero() });
            neg_w.push(if on { T::lit(wn) } else { T::zero() });
        }
    }
    let loss = g.bce_with_logits(logits, targets, pos_w, neg_w, T::from_usize(b).unwrap())?;
    Ok(AttrLoss { loss, known })
}

pub fn bce_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[AttributeLabels], ignore_unknown: bool) -> Result<AttrLoss> {
    attribute_loss(g, AttrLossKind::Bce, logits, labels, None, ignore_unknown)
}

pub fn weighted_bce_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[AttributeLabels],
    omega: &OmegaVector,
    ignore_unknown: bool,
) -> Result<AttrLoss> {
    attribute_loss(g, AttrLossKind::Weighted, logits, labels, Some(omega), ignore_unknown)
}

/// Arithmetic mean of the plain and weighted losses.
pub fn mixed_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[AttributeLabels],
    omega: &OmegaVector,
    ignore_unknown: bool,
) -> Result<AttrLoss> {
    attribute_loss(g, AttrLossKind::Mixed, logits, labels, Some(omega), ignore_unknown)
}

/// Mean per-pixel BCE between mask logits `[B,1,Hs,Ws]` and a ground-truth
/// mask `[B,1,Hm,Wm]` with values in `[0,1]`, bilinearly resized to
/// `Hs×Ws` when the sizes differ.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, seg_logits: Var, gt_mask: &Tensor<T>) -> Result<Var> {
    let [b, c, hs, ws] = g.value(seg_logits).dims4()?;
    let [gb, gc, hm, wm] = gt_mask.dims4()?;
    if c != 1 || gc != 1 || gb != b {
        return Err(Error::Shape(format!(
            "mask loss: logits {:?} vs ground truth {:?}",
            g.shape(seg_logits),
            gt_mask.shape()
        )));
    }
    if gt_mask.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::Config("mask loss: ground truth outside [0, 1]".into()));
    }
    let targets = if (hm, wm) == (hs, ws) {
        gt_mask.data().to_vec()
    } else {
        kernels::resize_planes(gt_mask.data(), b, hm, wm, hs, ws)
    };
    let n = b * hs * ws;
    g.bce_with_logits(seg_logits, targets, vec![T::one(); n], vec![T::one(); n], T::from_usize(n).unwrap())
}

/// How the training objective is put together.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: AttrLossKind,
    pub ignore_unknown: bool,
    /// Weight of the mask term.
    pub mask_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: AttrLossKind::Bce,
            ignore_unknown: true,
            mask_weight: 1.0,
        }
    }
}

/// Scalar values of the objective's components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub side: f64,
    pub mask: f64,
    pub total: f64,
    pub all_ignored: bool,
}

/// `L = L_attr(main) + L_attr(side) + λ·L_mask`. Each head is supervised on
/// its own logits; absent heads contribute nothing.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    output: &ModelOutput,
    labels: &[AttributeLabels],
    gt_mask: Option<&Tensor<T>>,
    omega: Option<&OmegaVector>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let main = attribute_loss(g, cfg.kind, output.main_logits, labels, omega, cfg.ignore_unknown)?;
    let mut total = main.loss;
    let mut parts = LossBreakdown {
        main: g.scalar(main.loss).to_f64().unwrap_or(f64::NAN),
        all_ignored: main.all_ignored(),
        ..Default::default()
    };
    if let Some(side_logits) = output.side_logits {
        let side = attribute_loss(g, cfg.kind, side_logits, labels, omega, cfg.ignore_unknown)?;
        parts.side = g.scalar(side.loss).to_f64().unwrap_or(f64::NAN);
        total = g.add(total, side.loss)?;
    }
    if let (Some(seg), Some(gt)) = (output.seg_logits, gt_mask) {
        if cfg.mask_weight != 0.0 {
            let m = mask_loss(g, seg, gt)?;
            parts.mask = g.scalar(m).to_f64().unwrap_or(f64::NAN);
            let weighted = g.scale(m, cfg.mask_weight);
            total = g.add(total, weighted)?;
        }
    }
    parts.total = g.scalar(total).to_f64().unwrap_or(f64::NAN);
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn labels(s: &[&str]) -> Vec<AttributeLabels> {
        s.iter().map(|x| x.parse().unwrap()).collect()
    }

    fn loss_value(kind: AttrLossKind, logits: &[f64], lab: &[&str], omega: Option<&[f64]>, ignore: bool) -> f64 {
        let mut g = Graph::<f64>::new();
        let b = lab.len();
        let c = logits.len() / b;
        let x = g.param(Tensor::new(&[b, c], logits.to_vec()).unwrap());
        let om = omega.map(|o| OmegaVector::new(o.to_vec()).unwrap());
        let l = attribute_loss(&mut g, kind, x, &labels(lab), om.as_ref(), ignore).unwrap();
        g.scalar(l.loss)
    }

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    #[test]
    fn zero_logits_cost_ln2_per_attribute() {
        let v = loss_value(AttrLossKind::Bce, &[0.0; 14], &["10101010101010"], None, true);
        assert!((v - 14.0 * LN_2).abs() < 1e-9);
        assert!((v - 9.704061).abs() < 1e-6);
    }

    #[test]
    fn two_attribute_softplus_cases() {
        let expected = softplus(-2.0) + softplus(-1.0);
        let v = loss_value(AttrLossKind::Bce, &[2.0, -1.0], &["10"], None, true);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.440190).abs() < 1e-6);
        let v = loss_value(AttrLossKind::Bce, &[2.0, -1.0], &["1u"], None, true);
        assert!((v - softplus(-2.0)).abs() < 1e-12);
        assert!((v - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn weighted_scalar_cases() {
        let v = loss_value(AttrLossKind::Weighted, &[0.0], &["1"], Some(&[0.25]), true);
        assert!((v - 2.0 * LN_2).abs() < 1e-12 && (v - 1.386294).abs() < 1e-6);
        let v = loss_value(AttrLossKind::Weighted, &[0.0], &["0"], Some(&[0.25]), true);
        assert!((v - LN_2 / 1.5).abs() < 1e-12 && (v - 0.462098).abs() < 1e-6);
        let v = loss_value(AttrLossKind::Mixed, &[0.0], &["1"], Some(&[0.25]), true);
        assert!((v - (LN_2 + 2.0 * LN_2) / 2.0).abs() < 1e-12 && (v - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn unknown_as_negative_when_not_ignoring() {
        let a = loss_value(AttrLossKind::Bce, &[2.0, -1.0], &["1u"], None, false);
        let b = loss_value(AttrLossKind::Bce, &[2.0, -1.0], &["10"], None, false);
        assert_eq!(a, b);
    }

    #[test]
    fn all_unknown_batch_is_zero_and_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2, 2], vec![1.0, -3.0, 0.5, 2.0]).unwrap());
        let l = bce_loss(&mut g, x, &labels(&["uu", "uu"]), true).unwrap();
        assert!(l.all_ignored());
        assert_eq!(g.scalar(l.loss), 0.0);
    }

    #[test]
    fn positive_ratio_columns() {
        let om = positive_ratios(&labels(&["11", "10", "0u", "0u"])).unwrap();
        assert_eq!(om.values(), &[0.5, 0.5]);
        let om = positive_ratios(&labels(&["1", "0", "0", "0"])).unwrap();
        assert_eq!(om.values(), &[0.25]);
        let om = positive_ratios(&labels(&["0", "0"])).unwrap();
        assert_eq!(om.values(), &[OMEGA_CLAMP]);
        let err = positive_ratios(&labels(&["1u", "0u"])).unwrap_err();
        assert!(err.to_string().contains("attribute 1"));
    }

    #[test]
    fn omega_outside_unit_interval_rejected() {
        assert!(OmegaVector::new(vec![0.5, 1.0]).is_err());
        assert!(OmegaVector::new(vec![0.0]).is_err());
    }

    #[test]
    fn mask_loss_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 1, 2, 2]));
        let gt = Tensor::full(&[1, 1, 2, 2], 0.5);
        let l = mask_loss(&mut g, x, &gt).unwrap();
        assert!((g.scalar(l) - LN_2).abs() < 1e-12);

        let gt = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = g.param(gt.map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
        let l = mask_loss(&mut g, x, &gt).unwrap();
        assert!(g.scalar(l) < 1e-6);
    }

    #[test]
    fn mask_loss_random_matches_scalar_oracle() {
        let logits = [0.3, -1.2, 2.5, -0.1];
        let gt = [1.0, 0.0, 0.25, 1.0];
        let expected: f64 = logits
            .iter()
            .zip(&gt)
            .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum::<f64>()
            / 4.0;
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[1, 1, 2, 2], logits.to_vec()).unwrap());
        let l = mask_loss(&mut g, x, &Tensor::new(&[1, 1, 2, 2], gt.to_vec()).unwrap()).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let v = loss_value(AttrLossKind::Weighted, &[1e4, -1e4, 1e4, -1e4], &["1001"], Some(&[0.01, 0.99, 0.3, 0.7]), true);
        assert!(v.is_finite());
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[1, 2], vec![1e4, -1e4]).unwrap());
        let l = bce_loss(&mut g, x, &labels(&["01"]), true).unwrap();
        g.backward(l.loss).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_kind_selector_strings() {
        for s in ["bce", "wbce", "mixed"] {
            assert_eq!(s.parse::<AttrLossKind>().unwrap().to_string(), s);
        }
        assert!("focal".parse::<AttrLossKind>().is_err());
    }
}
