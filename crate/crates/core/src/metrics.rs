//! Label-based (AP, mAP, mA) and instance-based (Acc/Prec/Rec/F1) metrics
//! and the plain-text report they serialize to.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{AttributeLabels, Label};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probabilities `[B, C]` (row-major) with the matching tri-state labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    samples: usize,
    attributes: usize,
    scores: Vec<f64>,
    labels: Vec<AttributeLabels>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<f64>, labels: Vec<AttributeLabels>) -> Result<Self> {
        let samples = labels.len();
        let attributes = labels.first().map_or(0, |l| l.len());
        if samples == 0 || attributes == 0 {
            return Err(Error::Shape("score matrix needs at least one sample and one attribute".into()));
        }
        if labels.iter().any(|l| l.len() != attributes) || scores.len() != samples * attributes {
            return Err(Error::Shape(format!(
                "{} scores for {samples} samples × {attributes} attributes",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Contract(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoreMatrix {
            samples,
            attributes,
            scores,
            labels,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn score(&self, sample: usize, attribute: usize) -> f64 {
        self.scores[sample * self.attributes + attribute]
    }

    pub fn label(&self, sample: usize, attribute: usize) -> Label {
        self.labels[sample].0[attribute]
    }

    pub fn column(&self, attribute: usize) -> (Vec<f64>, Vec<Label>) {
        (0..self.samples)
            .map(|i| (self.score(i, attribute), self.label(i, attribute)))
            .unzip()
    }

    /// `(positives, negatives, unknowns)` for one attribute.
    pub fn counts(&self, attribute: usize) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for l in &self.labels {
            match l.0[attribute] {
                Label::Positive => c.0 += 1,
                Label::Negative => c.1 += 1,
                Label::Unknown => c.2 += 1,
            }
        }
        c
    }
}

/// Mean of the precision at each known positive's rank, ranking known
/// samples by descending score with ties broken by ascending index.
/// `None` when there is no known positive.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| labels[i].is_known()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == Label::Positive {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapScore {
    pub map: f64,
    /// `None` for attributes without a known positive (skipped).
    pub per_attribute: Vec<Option<f64>>,
}

pub fn map_score(m: &ScoreMatrix) -> Result<MapScore> {
    let per_attribute: Vec<Option<f64>> = (0..m.attributes())
        .map(|c| {
            let (s, l) = m.column(c);
            average_precision(&s, &l)
        })
        .collect();
    let eligible: Vec<f64> = per_attribute.iter().flatten().copied().collect();
    if eligible.is_empty() {
        return Err(Error::Contract("no attribute has a known positive; mAP undefined".into()));
    }
    Ok(MapScore {
        map: eligible.iter().sum::<f64>() / eligible.len() as f64,
        per_attribute,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAccuracy {
    pub ma: f64,
    /// Attributes lacking a known positive or a known negative.
    pub skipped: Vec<usize>,
}

/// `(TP/P + TN/N) / 2` averaged over attributes; a score `≥ threshold`
/// predicts positive.
pub fn mean_accuracy(m: &ScoreMatrix, threshold: f64) -> Result<MeanAccuracy> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for c in 0..m.attributes() {
        let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..m.samples() {
            let pred = m.score(i, c) >= threshold;
            match m.label(i, c) {
                Label::Positive => {
                    p += 1;
                    tp += pred as usize;
                }
                Label::Negative => {
                    n += 1;
                    tn += !pred as usize;
                }
                Label::Unknown => {}
            }
        }
        if p == 0 || n == 0 {
            skipped.push(c);
            continue;
        }
        sum += (tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Contract("no attribute has both known positives and negatives; mA undefined".into()));
    }
    Ok(MeanAccuracy {
        ma: sum / used as f64,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-overlap metrics per sample, averaged over samples. Unknown
/// attributes belong to neither the true nor the predicted set.
pub fn instance_metrics(m: &ScoreMatrix, threshold: f64) -> InstanceMetrics {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..m.samples() {
        let (mut inter, mut truth, mut pred) = (0usize, 0usize, 0usize);
        for c in 0..m.attributes() {
            let l = m.label(i, c);
            if !l.is_known() {
                continue;
            }
            let y = l == Label::Positive;
            let p = m.score(i, c) >= threshold;
            truth += y as usize;
            pred += p as usize;
            inter += (y && p) as usize;
        }
        let union = truth + pred - inter;
        acc += ratio(inter, union);
        // An empty side scores 1 only when the other side is empty too.
        prec += if pred == 0 { (truth == 0) as u8 as f64 } else { ratio(inter, pred) };
        rec += if truth == 0 { (pred == 0) as u8 as f64 } else { ratio(inter, truth) };
    }
    let b = m.samples() as f64;
    let (precision, recall) = (prec / b, rec / b);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    InstanceMetrics {
        accuracy: acc / b,
        precision,
        recall,
        f1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Wider,
    Rap,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wider" => Ok(Protocol::Wider),
            "rap" => Ok(Protocol::Rap),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected wider or rap)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Wider => "wider",
            Protocol::Rap => "rap",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeRow {
    pub ap: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub unknowns: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub threshold: f64,
    pub samples: usize,
    pub rows: Vec<AttributeRow>,
    pub map: f64,
    pub mean_accuracy: Option<MeanAccuracy>,
    pub instance: Option<InstanceMetrics>,
}

pub fn metrics_report(m: &ScoreMatrix, protocol: Protocol) -> Result<MetricsReport> {
    let map = map_score(m)?;
    let rows = map
        .per_attribute
        .iter()
        .enumerate()
        .map(|(c, &ap)| {
            let (positives, negatives, unknowns) = m.counts(c);
            AttributeRow {
                ap,
                positives,
                negatives,
                unknowns,
            }
        })
        .collect();
    let (mean_accuracy, instance) = match protocol {
        Protocol::Wider => (None, None),
        Protocol::Rap => (
            Some(mean_accuracy(m, DEFAULT_THRESHOLD)?),
            Some(instance_metrics(m, DEFAULT_THRESHOLD)),
        ),
    };
    Ok(MetricsReport {
        protocol,
        threshold: DEFAULT_THRESHOLD,
        samples: m.samples(),
        rows,
        map: map.map,
        mean_accuracy,
        instance,
    })
}

fn join_indices(ix: impl Iterator<Item = usize>) -> String {
    let v: Vec<String> = ix.map(|i| i.to_string()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(";")
    }
}

impl MetricsReport {
    /// Attributes without a known positive.
    pub fn skipped_ap(&self) -> Vec<usize> {
        self.rows.iter().enumerate().filter(|(_, r)| r.ap.is_none()).map(|(c, _)| c).collect()
    }

    /// Serializes to the key=value header + CSV layout. Values use six
    /// decimals so reports are byte-stable.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol={}", self.protocol);
        let _ = writeln!(s, "threshold={:.6}", self.threshold);
        let _ = writeln!(s, "ap_rule=mean precision at each positive rank; ties by ascending index; unknowns excluded");
        if self.protocol == Protocol::Rap {
            let _ = writeln!(s, "ma_rule=(TP/P+TN/N)/2 per attribute; score>=threshold predicts positive");
            let _ = writeln!(
                s,
                "instance_rule=per-sample set overlap averaged; empty prediction has precision 1 iff truth empty; empty union has accuracy 1; f1 from mean precision and recall"
            );
        }
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "attributes={}", self.rows.len());
        let _ = writeln!(s, "map={:.6}", self.map);
        let _ = writeln!(s, "skipped_ap={}", join_indices(self.skipped_ap().into_iter()));
        if let Some(ma) = &self.mean_accuracy {
            let _ = writeln!(s, "ma={:.6}", ma.ma);
            let _ = writeln!(s, "skipped_ma={}", join_indices(ma.skipped.iter().copied()));
        }
        if let Some(im) = &self.instance {
            let _ = writeln!(s, "acc={:.6}", im.accuracy);
            let _ = writeln!(s, "prec={:.6}", im.precision);
            let _ = writeln!(s, "rec={:.6}", im.recall);
            let _ = writeln!(s, "f1={:.6}", im.f1);
        }
        s.push_str("attribute,ap,positives,negatives,unknowns\n");
        let (mut p, mut n, mut u) = (0, 0, 0);
        for (c, r) in self.rows.iter().enumerate() {
            let ap = r.ap.map_or_else(|| "skipped".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{c},{ap},{},{},{}", r.positives, r.negatives, r.unknowns);
            p += r.positives;
            n += r.negatives;
            u += r.unknowns;
        }
        let _ = writeln!(s, "summary,{:.6},{p},{n},{u}", self.map);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Negative as N, Positive as P, Unknown as U};

    fn matrix(scores: &[f64], labels: &[&str]) -> ScoreMatrix {
        ScoreMatrix::new(scores.to_vec(), labels.iter().map(|s| s.parse().unwrap()).collect()).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[P, N, P]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[P, N, P]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.5, 0.5], &[P, N]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[N, P]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[N, U]), None);
    }

    #[test]
    fn unknowns_are_dropped_before_ranking() {
        let with = average_precision(&[0.9, 0.95, 0.8, 0.7], &[P, U, N, P]).unwrap();
        let without = average_precision(&[0.9, 0.8, 0.7], &[P, N, P]).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn map_is_mean_over_eligible() {
        // attribute 0: AP 1; attribute 1: AP 0.5; attribute 2: no positives.
        let m = matrix(&[0.9, 0.9, 0.3, 0.2, 0.1, 0.4], &["100", "010"]);
        let r = map_score(&m).unwrap();
        assert_eq!(r.per_attribute, vec![Some(1.0), Some(0.5), None]);
        assert_eq!(r.map, 0.75);
        assert!(map_score(&matrix(&[0.2, 0.3], &["0", "u"])).is_err());
    }

    #[test]
    fn mean_accuracy_examples() {
        let m = matrix(&[0.9, 0.1, 0.2, 0.3], &["1", "0", "1", "0"]);
        assert_eq!(mean_accuracy(&m, 0.5).unwrap().ma, 0.75);
        let m = matrix(&[0.0, 0.0, 0.1, 0.1], &["10", "01"]);
        assert_eq!(mean_accuracy(&m, 0.5).unwrap().ma, 0.5);
        let m = matrix(&[0.9, 0.9, 0.1, 0.9], &["11", "01"]);
        let r = mean_accuracy(&m, 0.5).unwrap();
        assert_eq!((r.ma, r.skipped.clone()), (1.0, vec![1]));
    }

    #[test]
    fn instance_examples() {
        // Y = {a, b}, Ŷ = {b, c}
        let m = matrix(&[0.1, 0.9, 0.9, 0.0], &["1100"]);
        let r = instance_metrics(&m, 0.5);
        assert_eq!(r.accuracy, 1.0 / 3.0);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let r = instance_metrics(&matrix(&[0.1, 0.2], &["00"]), 0.5);
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        let r = instance_metrics(&matrix(&[0.1, 0.2], &["10"]), 0.5);
        assert_eq!((r.accuracy, r.precision, r.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wider_report_omits_rap_fields() {
        let m = matrix(&[0.9, 0.1, 0.2, 0.8], &["10", "01"]);
        let text = metrics_report(&m, Protocol::Wider).unwrap().to_text();
        assert!(text.contains("map=1.000000\n"));
        for key in ["ma=", "acc=", "prec=", "rec=", "f1="] {
            assert!(!text.lines().any(|l| l.starts_with(key)), "{key} present");
        }
        let rap = metrics_report(&m, Protocol::Rap).unwrap();
        assert_eq!(rap.mean_accuracy.unwrap().ma, 1.0);
        assert_eq!(rap.instance.unwrap().f1, 1.0);
    }
}
