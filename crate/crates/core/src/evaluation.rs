//! Threshold-free evaluation of score maps against ground-truth masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::segmentation::ScoreMap;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} labels", scores.len()), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AuROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

fn sorted_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, labels[i] as u64, (!labels[i]) as u64)),
        }
    }
    groups
}

/// Area under the ROC curve, i.e. the probability that a random positive
/// outscores a random negative with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut below: u128 = 0;
    let mut twice_wins: u128 = 0;
    for (_, p, n) in sorted_groups(scores, labels) {
        twice_wins += u128::from(p) * (2 * below + u128::from(n));
        below += u128::from(n);
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (_, p, n) in sorted_groups(scores, labels).into_iter().rev() {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Per-image summary line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub defect_pixels: usize,
    pub max_score: f64,
    /// Pixel AuROC inside the image; absent for defect-free images.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixel AuROC pooled over every test image.
    pub pixel_auroc: f64,
    /// Image AuROC from the maximum score of each image.
    pub image_auroc: Option<f64>,
    pub images: Vec<ImageResult>,
    pub defect_images: usize,
    pub pixels: usize,
    pub defect_pixel_count: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "pixel AuROC: {:.4}\nimage AuROC: {}\nimages: {} ({} with defects)\npixels: {} ({} defect)\n",
            self.pixel_auroc,
            self.image_auroc.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            self.images.len(),
            self.defect_images,
            self.pixels,
            self.defect_pixel_count,
        );
        for r in &self.images {
            s.push_str(&format!(
                "  {}: max {:.6}, defect pixels {}, AuROC {}\n",
                r.name,
                r.max_score,
                r.defect_pixels,
                r.auroc.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            ));
        }
        s
    }
}

/// One scored test image.
#[derive(Debug, Clone)]
pub struct Scored<'a> {
    pub name: &'a str,
    pub score: &'a ScoreMap,
    pub mask: &'a Mask,
}

pub fn evaluate(items: &[Scored<'_>]) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut images = Vec::with_capacity(items.len());
    for it in items {
        if (it.score.height(), it.score.width()) != (it.mask.height(), it.mask.width()) {
            return Err(Error::dim(
                format!("mask of {}x{}", it.score.height(), it.score.width()),
                format!("{}x{} for {}", it.mask.height(), it.mask.width(), it.name),
            ));
        }
        let s: Vec<f64> = it.score.data.iter().copied().collect();
        let l: Vec<bool> = it.mask.data().iter().copied().collect();
        let defect_pixels = it.mask.area();
        let auroc = if defect_pixels > 0 && defect_pixels < l.len() {
            Some(auroc(&s, &l)?)
        } else {
            None
        };
        images.push(ImageResult {
            name: it.name.to_string(),
            defect_pixels,
            max_score: it.score.max(),
            auroc,
        });
        scores.extend(s);
        labels.extend(l);
    }
    let pixel_auroc = auroc(&scores, &labels)?;
    let maxima: Vec<f64> = images.iter().map(|r| r.max_score).collect();
    let has_defect: Vec<bool> = images.iter().map(|r| r.defect_pixels > 0).collect();
    let image_auroc = auroc(&maxima, &has_defect).ok();
    Ok(EvalReport {
        pixel_auroc,
        image_auroc,
        defect_images: has_defect.iter().filter(|&&d| d).count(),
        pixels: labels.len(),
        defect_pixel_count: labels.iter().filter(|&&l| l).count(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn known_values() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auroc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
        assert!(auroc(&[0.1], &[true, false]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn evaluate_pools_pixels() {
        let mut m = Mask::empty(2, 2);
        m.data_mut()[[0, 0]] = true;
        let s1 = ScoreMap {
            data: Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.2, 0.3]).unwrap(),
        };
        let s2 = ScoreMap {
            data: Array2::from_elem((2, 2), 0.05),
        };
        let empty = Mask::empty(2, 2);
        let report = evaluate(&[
            Scored { name: "a", score: &s1, mask: &m },
            Scored { name: "b", score: &s2, mask: &empty },
        ])
        .unwrap();
        assert_eq!(report.pixel_auroc, 1.0);
        assert_eq!(report.image_auroc, Some(1.0));
        assert_eq!(report.images[0].auroc, Some(1.0));
        assert_eq!(report.images[1].auroc, None);
        assert_eq!((report.pixels, report.defect_pixel_count, report.defect_images), (8, 1, 1));
        assert!(evaluate(&[Scored { name: "b", score: &s2, mask: &empty }]).is_err());
    }
}
