//! Stage-1 -> stage-2 bridge: run the trained base detector over web images,
//! keep confident detections of *any* predicted class, strip the class, and
//! relabel every surviving box with the web image's single image-level label.

use crate::datamodel::{iou, BBox, Detection, PseudoAnnotation, WebImageRecord};
use crate::detector::{detect, DetectorParams, InferenceConfig};
use crate::error::{Error, Result};
use crate::rfr;

#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub score_threshold: f64,
    pub max_boxes_per_image: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            score_threshold: 0.8,
            max_boxes_per_image: 20,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "estimator score threshold must be in (0, 1), got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

/// The pure half of region estimation: threshold, strip predicted classes,
/// relabel with the image label, cap by score.
pub fn filter_and_relabel(
    detections: &[Detection],
    image_id: &str,
    image_label: usize,
    score_threshold: f64,
    max_boxes: usize,
) -> PseudoAnnotation {
    let mut kept: Vec<(BBox, f64)> = detections
        .iter()
        .filter(|d| d.score >= score_threshold)
        .map(|d| (d.bbox, d.score))
        .collect();
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    kept.truncate(max_boxes);
    PseudoAnnotation {
        image_id: image_id.to_string(),
        boxes: kept
            .into_iter()
            .map(|(bbox, score)| (bbox, image_label, score))
            .collect(),
    }
}

/// Runs the base detector on one web image and turns its confident outputs
/// (any predicted class, per-class NMS already applied inside the detector)
/// into pseudo boxes labeled with the image-level label. An empty result is
/// legal; such images feed only the image-classification branch downstream.
pub fn estimate_regions(
    web_record: &WebImageRecord,
    base_params: &DetectorParams,
    cfg: &EstimatorConfig,
    infer: &InferenceConfig,
) -> Result<PseudoAnnotation> {
    let detect_cfg = InferenceConfig {
        score_threshold: cfg.score_threshold,
        ..*infer
    };
    let detections = detect(&web_record.image, base_params, None, &detect_cfg)?;
    Ok(filter_and_relabel(
        &detections,
        &web_record.image_id,
        web_record.image_label,
        cfg.score_threshold,
        cfg.max_boxes_per_image,
    ))
}

/// Same, but through an assembled detector (used for diagnostics only).
pub fn estimate_regions_assembled(
    web_record: &WebImageRecord,
    assembled: &rfr::AssembledDetector,
    cfg: &EstimatorConfig,
    infer: &InferenceConfig,
) -> Result<PseudoAnnotation> {
    let detect_cfg = InferenceConfig {
        score_threshold: cfg.score_threshold,
        ..*infer
    };
    let detections = assembled.detect(&web_record.image, &detect_cfg)?;
    Ok(filter_and_relabel(
        &detections,
        &web_record.image_id,
        web_record.image_label,
        cfg.score_threshold,
        cfg.max_boxes_per_image,
    ))
}

/// Pseudo-label quality against known (hidden) ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    /// Fraction of pseudo boxes that matched a same-class GT box at the IoU
    /// threshold. Reported as 0 with `precision_defined = false` when there
    /// are no pseudo boxes at all.
    pub precision: f64,
    pub precision_defined: bool,
    /// Fraction of labeled-class GT boxes covered by a pseudo box.
    pub recall: f64,
    pub num_pseudo: usize,
    pub num_gt: usize,
    pub matched: usize,
}

/// Greedy per-image matching of pseudo boxes (descending score) to unmatched
/// ground-truth boxes of the pseudo box's class. GT objects of other classes
/// (e.g. unlabeled distractors) can never match, so pseudo boxes sitting on
/// them count against precision; the recall denominator counts only GT boxes
/// whose class equals some pseudo label of that image.
pub fn pseudo_label_quality(
    pseudo: &[PseudoAnnotation],
    gt: &[(String, Vec<(BBox, usize)>)],
    iou_thresh: f64,
) -> QualityReport {
    let gt_map: std::collections::BTreeMap<&str, &Vec<(BBox, usize)>> =
        gt.iter().map(|(id, boxes)| (id.as_str(), boxes)).collect();

    let mut num_pseudo = 0usize;
    let mut matched = 0usize;
    let mut num_gt = 0usize;
    for anno in pseudo {
        num_pseudo += anno.boxes.len();
        let gts = match gt_map.get(anno.image_id.as_str()) {
            Some(g) => g.as_slice(),
            None => continue,
        };
        let labels: std::collections::BTreeSet<usize> =
            anno.boxes.iter().map(|(_, c, _)| *c).collect();
        num_gt += gts.iter().filter(|(_, c)| labels.contains(c)).count();

        let mut order: Vec<usize> = (0..anno.boxes.len()).collect();
        order.sort_by(|&a, &b| {
            anno.boxes[b]
                .2
                .partial_cmp(&anno.boxes[a].2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut taken = vec![false; gts.len()];
        for i in order {
            let (pbox, pclass, _) = &anno.boxes[i];
            let mut best = (0.0f64, None);
            for (j, (gbox, gclass)) in gts.iter().enumerate() {
                if taken[j] || gclass != pclass {
                    continue;
                }
                let v = iou(pbox, gbox);
                if v > best.0 {
                    best = (v, Some(j));
                }
            }
            if best.0 >= iou_thresh {
                taken[best.1.unwrap()] = true;
                matched += 1;
            }
        }
    }

    let precision_defined = num_pseudo > 0;
    QualityReport {
        precision: if precision_defined {
            matched as f64 / num_pseudo as f64
        } else {
            0.0
        },
        precision_defined,
        recall: if num_gt > 0 {
            matched as f64 / num_gt as f64
        } else {
            0.0
        },
        num_pseudo,
        num_gt,
        matched,
    }
}
