//! Pixel-level segmentation and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            expected: vec![a],
            got: vec![b],
        });
    }
    Ok(())
}

/// Pixel confusion counts of a predicted mask against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        check_len("confusion", gt.len(), pred.len())?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// 2|P∩G| / (|P|+|G|), 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// |P∩G| / |P∪G|, 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// |P∩G| / |P|. An empty prediction scores 1 against an empty truth
    /// and 0 otherwise.
    pub fn precision(&self) -> f64 {
        let p = self.tp + self.fp;
        if p == 0 {
            if self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / p as f64
        }
    }

    /// |P∩G| / |G|, 1 when the truth is empty.
    pub fn recall(&self) -> f64 {
        let g = self.tp + self.fn_;
        if g == 0 {
            1.0
        } else {
            self.tp as f64 / g as f64
        }
    }
}

pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.dice())
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.iou())
}

pub fn precision(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.precision())
}

pub fn recall(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.recall())
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. O(n log n).
pub fn pixel_auc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check_len("pixel_auc", labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            term: "pixel_auc scores".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "pixel_auc",
            format!("needs both classes, got {n_pos} positive and {n_neg} negative pixels"),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the win count, so half-credit ties stay integral.
    let mut wins2: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        wins2 += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
    }
    Ok(wins2 as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Dataset-level scores, serialized with Table 1's column names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Confusion counts and AUC over all pixels pooled across images.
    #[default]
    Micro,
    /// Mean of per-image values; AUC over images containing both classes.
    Macro,
}

/// One image's anomaly scores, predicted mask and ground truth.
pub struct EvalItem<'a> {
    pub scores: &'a [f32],
    pub pred: &'a [bool],
    pub gt: &'a [bool],
}

pub fn evaluate_dataset(items: &[EvalItem], aggregation: Aggregation) -> Result<MetricsTable> {
    if items.is_empty() {
        return Err(Error::invalid("results", "no images to evaluate"));
    }
    for it in items {
        check_len("evaluate_dataset", it.gt.len(), it.pred.len())?;
        check_len("evaluate_dataset", it.gt.len(), it.scores.len())?;
    }
    match aggregation {
        Aggregation::Micro => {
            let mut c = Confusion::default();
            for it in items {
                c = c.add(Confusion::from_masks(it.pred, it.gt)?);
            }
            let scores: Vec<f32> = items.iter().flat_map(|it| it.scores.iter().copied()).collect();
            let labels: Vec<bool> = items.iter().flat_map(|it| it.gt.iter().copied()).collect();
            Ok(MetricsTable {
                dice: c.dice(),
                auc: pixel_auc(&scores, &labels)?,
                iou: c.iou(),
                precision: c.precision(),
                recall: c.recall(),
            })
        }
        Aggregation::Macro => {
            let n = items.len() as f64;
            let (mut dice, mut iou, mut prec, mut rec) = (0.0, 0.0, 0.0, 0.0);
            let mut aucs = Vec::new();
            for it in items {
                let c = Confusion::from_masks(it.pred, it.gt)?;
                dice += c.dice();
                iou += c.iou();
                prec += c.precision();
                rec += c.recall();
                let pos = it.gt.iter().filter(|&&g| g).count();
                if pos > 0 && pos < it.gt.len() {
                    aucs.push(pixel_auc(it.scores, it.gt)?);
                }
            }
            if aucs.is_empty() {
                return Err(Error::invalid("results", "no image contains both anomalous and normal pixels"));
            }
            Ok(MetricsTable {
                dice: dice / n,
                auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
                iou: iou / n,
                precision: prec / n,
                recall: rec / n,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn counting_examples() {
        let p = m(&[1, 1, 0, 0]);
        let g = m(&[1, 0, 1, 0]);
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert_eq!(iou(&p, &g).unwrap(), 1.0 / 3.0);
        assert_eq!(precision(&p, &g).unwrap(), 0.5);
        assert_eq!(recall(&p, &g).unwrap(), 0.5);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(dice(&m(&[1, 0]), &m(&[0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let empty = m(&[0, 0, 0]);
        let some = m(&[0, 1, 0]);
        let both = Confusion::from_masks(&empty, &empty).unwrap();
        assert_eq!((both.dice(), both.iou(), both.precision(), both.recall()), (1.0, 1.0, 1.0, 1.0));
        let miss = Confusion::from_masks(&empty, &some).unwrap();
        assert_eq!((miss.iou(), miss.precision(), miss.recall()), (0.0, 0.0, 0.0));
        let fp = Confusion::from_masks(&some, &empty).unwrap();
        assert_eq!((fp.dice(), fp.precision(), fp.recall()), (0.0, 0.0, 1.0));
        assert!(dice(&empty, &m(&[0, 0])).is_err());
    }

    #[test]
    fn auc_examples() {
        let labels = m(&[1, 1, 0, 0]);
        assert_eq!(pixel_auc(&[0.9, 0.8, 0.8, 0.1], &labels).unwrap(), 0.875);
        assert_eq!(pixel_auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(pixel_auc(&[2.0, 3.0, 1.0, 0.0], &labels).unwrap(), 1.0);
        assert!(pixel_auc(&[0.1, 0.2], &m(&[1, 1])).is_err());
        assert!(pixel_auc(&[f32::NAN, 0.2], &m(&[1, 0])).is_err());
    }

    #[test]
    fn pooling() {
        let s = [0.9, 0.1, 0.5, 0.4];
        let p = m(&[1, 0, 1, 0]);
        let g = m(&[1, 0, 0, 1]);
        let one = EvalItem {
            scores: &s,
            pred: &p,
            gt: &g,
        };
        let single = evaluate_dataset(&[one], Aggregation::Micro).unwrap();
        let c = Confusion::from_masks(&p, &g).unwrap();
        assert_eq!(single.dice, c.dice());
        assert_eq!(single.auc, pixel_auc(&s, &g).unwrap());
        let twice = [
            EvalItem {
                scores: &s,
                pred: &p,
                gt: &g,
            },
            EvalItem {
                scores: &s,
                pred: &p,
                gt: &g,
            },
        ];
        assert_eq!(evaluate_dataset(&twice, Aggregation::Micro).unwrap(), single);
        assert_eq!(evaluate_dataset(&twice, Aggregation::Macro).unwrap(), single);
        assert!(evaluate_dataset(&[], Aggregation::Micro).is_err());
    }

    #[test]
    fn json_columns() {
        let t = MetricsTable {
            dice: 0.4,
            auc: 0.9,
            iou: 0.25,
            precision: 0.5,
            recall: 0.3,
        };
        let v: serde_json::Value = serde_json::to_value(t).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["AUC", "Dice", "IoU", "Precision", "Recall"]);
    }
}
