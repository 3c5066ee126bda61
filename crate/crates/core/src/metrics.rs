//! Overlap metrics and dataset-level evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Image, ImageRecord, Mask};
use crate::error::{Error, Result};
use crate::segmodel::SegModel;

/// `(|A ∩ B|, |A|, |B|)` over nonzero pixels.
fn counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut both = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        both += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    Ok((both, a, b))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (both, a, b) = counts(pred, gt)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (both, a, b) = counts(pred, gt)?;
    let union = a + b - both;
    Ok(if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    })
}

/// Per-image and mean Dice/IoU, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ids: Vec<String>,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub count: usize,
    /// How the numbers were produced: model, resolution, checkpoint.
    pub fingerprint: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou\n");
        for ((id, d), i) in self.ids.iter().zip(&self.dice).zip(&self.iou) {
            out.push_str(&format!("{id},{d},{i}\n"));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_dice, self.mean_iou));
        out
    }

    /// Two-column summary for terminals.
    pub fn summary(&self) -> String {
        format!(
            "images  {:>6}\nDice    {:>6.2}\nIoU     {:>6.2}\n",
            self.count, self.mean_dice, self.mean_iou
        )
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let body = match format {
            ReportFormat::Json => self.to_json()? + "\n",
            ReportFormat::Csv => self.to_csv(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Score an arbitrary batch predictor. Predictions must come back at each
/// record's own resolution.
pub fn evaluate_with<F>(
    records: &[ImageRecord],
    fingerprint: BTreeMap<String, String>,
    mut predict: F,
) -> Result<MetricsReport>
where
    F: FnMut(&[Image]) -> Result<Vec<Mask>>,
{
    let mut ids = Vec::with_capacity(records.len());
    let mut dices = Vec::with_capacity(records.len());
    let mut ious = Vec::with_capacity(records.len());
    for chunk in records.chunks(16) {
        let gts = chunk
            .iter()
            .map(ImageRecord::mask_or_err)
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<Image> = chunk.iter().map(|r| r.image.clone()).collect();
        let preds = predict(&images)?;
        if preds.len() != chunk.len() {
            return Err(Error::invalid(
                "predictor returned the wrong number of masks",
            ));
        }
        for ((record, gt), pred) in chunk.iter().zip(gts).zip(&preds) {
            ids.push(record.id.clone());
            dices.push(100.0 * dice(pred, gt)?);
            ious.push(100.0 * iou(pred, gt)?);
        }
    }
    Ok(MetricsReport {
        mean_dice: mean(&dices),
        mean_iou: mean(&ious),
        count: ids.len(),
        ids,
        dice: dices,
        iou: ious,
        fingerprint,
    })
}

/// Predict every record with the model's inference branch and score it
/// against ground truth at the record's original resolution.
pub fn evaluate(model: &SegModel, records: &[ImageRecord]) -> Result<MetricsReport> {
    let mut fp = BTreeMap::new();
    fp.insert(
        "resolution".to_string(),
        "original, nearest-neighbor upsampled".to_string(),
    );
    fp.insert(
        "input_size".to_string(),
        model.spec().input_size.to_string(),
    );
    fp.insert(
        "inference_branch".to_string(),
        serde_json::to_value(model.inference_branch())?
            .as_str()
            .unwrap_or_default()
            .to_string(),
    );
    fp.insert("checksum".to_string(), model.checksum()?);
    evaluate_with(records, fp, |images| model.predict_batch(images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Source;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Array2::zeros((h, w));
        for &p in on {
            m[p] = 1;
        }
        m
    }

    #[test]
    fn half_containment() {
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let pred = mask(2, 2, &[(0, 0)]);
        assert!((dice(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn edge_cases() {
        let empty = mask(3, 3, &[]);
        let a = mask(3, 3, &[(0, 0)]);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert!(dice(&a, &mask(2, 3, &[])).is_err());
        assert!(iou(&a, &mask(3, 2, &[])).is_err());
    }

    fn record(id: &str, m: Mask) -> ImageRecord {
        let image = m.mapv(f32::from);
        ImageRecord::new(id, image, Some(m), Source::Synthetic).unwrap()
    }

    #[test]
    fn evaluate_with_stub_predictors() {
        let recs = vec![
            record("a", mask(4, 4, &[(0, 0), (1, 1)])),
            record("b", mask(4, 4, &[(2, 2)])),
        ];
        let perfect = evaluate_with(&recs, BTreeMap::new(), |ims| {
            Ok(ims
                .iter()
                .map(|im| im.mapv(|v| u8::from(v > 0.5)))
                .collect())
        })
        .unwrap();
        assert_eq!((perfect.mean_dice, perfect.mean_iou), (100.0, 100.0));
        let blank = evaluate_with(&recs, BTreeMap::new(), |ims| {
            Ok(ims.iter().map(|im| Mask::zeros(im.dim())).collect())
        })
        .unwrap();
        assert_eq!((blank.mean_dice, blank.mean_iou), (0.0, 0.0));
        assert_eq!(blank.count, 2);
        let csv = blank.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("id,dice,iou\na,0,0\n"));
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let r = ImageRecord::new("u", Image::zeros((4, 4)), None, Source::Synthetic).unwrap();
        let res = evaluate_with(&[r], BTreeMap::new(), |ims| {
            Ok(vec![Mask::zeros((4, 4)); ims.len()])
        });
        assert!(res.is_err());
    }

    fn pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..2, h * w),
                proptest::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        Array2::from_shape_vec((h, w), a).unwrap(),
                        Array2::from_shape_vec((h, w), b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn dice_iou_identities((a, b) in pair()) {
            let d = dice(&a, &b).unwrap();
            let i = iou(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert_eq!(i, iou(&b, &a).unwrap());
            prop_assert!((i - d / (2.0 - d)).abs() < 1e-9);
            prop_assert!(i <= d + 1e-15);
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        }

        #[test]
        fn report_means_are_arithmetic_means(masks in proptest::collection::vec(pair(), 1..6)) {
            let recs: Vec<ImageRecord> = masks
                .iter()
                .enumerate()
                .map(|(k, (_, gt))| record(&format!("r{k}"), gt.clone()))
                .collect();
            let preds: Vec<Mask> = masks.iter().map(|(p, _)| p.clone()).collect();
            let mut cursor = 0;
            let rep = evaluate_with(&recs, BTreeMap::new(), |ims| {
                let out = preds[cursor..cursor + ims.len()].to_vec();
                cursor += ims.len();
                Ok(out)
            })
            .unwrap();
            let md = rep.dice.iter().sum::<f64>() / rep.count as f64;
            prop_assert!((rep.mean_dice - md).abs() < 1e-9);
            prop_assert!(rep.dice.iter().chain(&rep.iou).all(|v| (0.0..=100.0).contains(v)));
            if rep.count == 1 {
                prop_assert_eq!(rep.mean_dice, rep.dice[0]);
                prop_assert_eq!(rep.mean_iou, rep.iou[0]);
            }
        }
    }
}
