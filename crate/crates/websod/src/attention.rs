//! CAM branch and the attentive classification loss.
//!
//! A small image-classification head (one conv + global average pool + linear
//! classifier) rides on the shared backbone. Its classifier weights turn the
//! post-conv feature maps into per-class activation maps; spatially softmaxed
//! and max-pooled over each RoI, those yield attention scores that reweight
//! per-RoI classification losses so falsely labeled regions stop dominating
//! training. Attention scores are treated as constants during backprop.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::datamodel::BBox;
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear};

/// Image-classification head: `cam_conv` over the backbone feature map, then
/// global average pooling and a linear classifier with one output per
/// foreground class (no background at image level).
#[derive(Debug, Clone, PartialEq)]
pub struct CamBranch {
    pub conv: Conv2d,
    pub fc: Linear,
}

impl CamBranch {
    pub fn new(in_ch: usize, cam_ch: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        CamBranch {
            conv: Conv2d::new(in_ch, cam_ch, 3, 1, 1, rng),
            fc: Linear::new(cam_ch, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.w.dim().0
    }

    pub fn zeros_like(&self) -> Self {
        CamBranch {
            conv: self.conv.zeros_like(),
            fc: self.fc.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, other: &CamBranch) {
        self.conv.accumulate(&other.conv);
        self.fc.accumulate(&other.fc);
    }

    pub fn scale(&mut self, s: f64) {
        self.conv.scale(s);
        self.fc.scale(s);
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv.param_slices();
        v.extend(self.fc.param_slices());
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv.param_slices_mut();
        v.extend(self.fc.param_slices_mut());
        v
    }
}

/// Forward cache of the CAM branch: image logits plus the post-conv features
/// the activation maps are built from.
#[derive(Debug, Clone)]
pub struct CamForward {
    pub logits: Vec<f64>,
    /// Post-conv feature maps `(K', H', W')`.
    pub features: Array3<f64>,
    pub pooled: Array1<f64>,
}

/// Runs the CAM branch: `logits = fc(GAP(conv(fm)))`, with the post-conv
/// features cached for activation-map computation.
pub fn cam_forward(fm: &FeatureMap, branch: &CamBranch) -> Result<CamForward> {
    let in_ch = fm.data.dim().0;
    let expected = branch.conv.w.dim().1;
    if in_ch != expected {
        return Err(Error::ShapeMismatch(format!(
            "cam branch expects {expected} input channels, feature map has {in_ch}"
        )));
    }
    let features = branch.conv.forward(&fm.data);
    let pooled = nn::global_avg_pool(&features);
    let logits = branch.fc.forward(&pooled).to_vec();
    Ok(CamForward {
        logits,
        features,
        pooled,
    })
}

/// Backward through the CAM branch given `dloss/dlogits`. Returns the feature
/// map gradient and parameter gradients. This is the only path through which
/// the branch trains; activation maps themselves never carry gradient.
pub fn cam_backward(
    branch: &CamBranch,
    fm_data: &Array3<f64>,
    cache: &CamForward,
    dlogits: &[f64],
) -> (Array3<f64>, CamBranch) {
    let gy = Array1::from_vec(dlogits.to_vec());
    let (gpooled, gfc) = branch.fc.backward(&cache.pooled, &gy);
    let gfeatures = nn::global_avg_pool_backward(cache.features.dim(), &gpooled);
    let (gfm, gconv) = branch.conv.backward(fm_data, &gfeatures);
    (gfm, CamBranch { conv: gconv, fc: gfc })
}

/// Image-level cross-entropy against the single image label.
pub fn image_cls_loss(logits: &[f64], image_label: usize) -> f64 {
    nn::softmax_ce(logits, image_label).0
}

/// Per-class activation map: `M_c(x, y) = sum_k w[c, k] * f_k(x, y)`.
pub fn compute_cam(
    features: &Array3<f64>,
    fc_weights: &Array2<f64>,
    class: usize,
) -> Result<Array2<f64>> {
    let (k, h, w) = features.dim();
    let (classes, kw) = fc_weights.dim();
    if kw != k {
        return Err(Error::ShapeMismatch(format!(
            "classifier weights cover {kw} channels, features have {k}"
        )));
    }
    if class >= classes {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: classes,
        });
    }
    let mut map = Array2::zeros((h, w));
    for ch in 0..k {
        let wk = fc_weights[[class, ch]];
        for y in 0..h {
            for x in 0..w {
                map[[y, x]] += wk * features[[ch, y, x]];
            }
        }
    }
    Ok(map)
}

/// Per-class spatial attention maps `(C, H', W')`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub maps: Array3<f64>,
    pub normalized: bool,
}

/// Activation maps for every class at once.
pub fn compute_cam_all(features: &Array3<f64>, fc_weights: &Array2<f64>) -> Result<AttentionMap> {
    let classes = fc_weights.dim().0;
    let (_, h, w) = features.dim();
    let mut maps = Array3::zeros((classes, h, w));
    for c in 0..classes {
        let m = compute_cam(features, fc_weights, c)?;
        maps.index_axis_mut(ndarray::Axis(0), c).assign(&m);
    }
    Ok(AttentionMap {
        maps,
        normalized: false,
    })
}

/// Axis the class-specific softmax runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Softmax over spatial positions, independently per class (default).
    Spatial,
    /// Softmax over classes, independently per position.
    Class,
}

/// Class-specific softmax on the activation maps, numerically stabilized by
/// max subtraction.
pub fn class_softmax(m: &AttentionMap, axis: SoftmaxAxis) -> AttentionMap {
    let (classes, h, w) = m.maps.dim();
    let mut out = Array3::zeros((classes, h, w));
    match axis {
        SoftmaxAxis::Spatial => {
            for c in 0..classes {
                let plane = m.maps.index_axis(ndarray::Axis(0), c);
                let flat: Vec<f64> = plane.iter().cloned().collect();
                let soft = nn::softmax(&flat);
                for (i, v) in soft.into_iter().enumerate() {
                    out[[c, i / w, i % w]] = v;
                }
            }
        }
        SoftmaxAxis::Class => {
            for y in 0..h {
                for x in 0..w {
                    let col: Vec<f64> = (0..classes).map(|c| m.maps[[c, y, x]]).collect();
                    let soft = nn::softmax(&col);
                    for (c, v) in soft.into_iter().enumerate() {
                        out[[c, y, x]] = v;
                    }
                }
            }
        }
    }
    AttentionMap {
        maps: out,
        normalized: true,
    }
}

/// How the 1x1 RoI pooling over the attention map aggregates covered cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPool {
    Max,
    Avg,
}

/// 1x1 RoI pooling of each RoI over its label's attention map: the raw
/// attention score `W_RoI` per RoI.
pub fn roi_attention_pool(
    m: &AttentionMap,
    rois: &[BBox],
    roi_labels: &[usize],
    stride: usize,
    pool: AttentionPool,
) -> Result<Vec<f64>> {
    if !m.normalized {
        return Err(Error::Evaluation(
            "attention map must be normalized before RoI pooling".into(),
        ));
    }
    if rois.len() != roi_labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rois vs {} labels",
            rois.len(),
            roi_labels.len()
        )));
    }
    let (classes, fh, fw) = m.maps.dim();
    let mut out = Vec::with_capacity(rois.len());
    for (bbox, &label) in rois.iter().zip(roi_labels) {
        if label >= classes {
            return Err(Error::ClassOutOfRange {
                index: label,
                count: classes,
            });
        }
        let (y0, y1, x0, x1) = nn::feature_cells(bbox, stride, fh, fw);
        let mut acc = match pool {
            AttentionPool::Max => f64::NEG_INFINITY,
            AttentionPool::Avg => 0.0,
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let v = m.maps[[label, y, x]];
                match pool {
                    AttentionPool::Max => acc = acc.max(v),
                    AttentionPool::Avg => acc += v,
                }
            }
        }
        if pool == AttentionPool::Avg {
            acc /= ((y1 - y0) * (x1 - x0)) as f64;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Normalizes raw attention scores by the per-image max:
/// `w_hat_i = w_i / (max(w) + delta)`.
pub fn normalize_attention(w: &[f64], delta: f64) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::EmptyAttention);
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "attention delta must be positive, got {delta}"
        )));
    }
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(w.iter().map(|&v| v / (max + delta)).collect())
}

/// Raw and normalized per-RoI attention scores.
#[derive(Debug, Clone)]
pub struct RoiAttention {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub delta: f64,
}

impl RoiAttention {
    pub fn new(raw: Vec<f64>, delta: f64) -> Result<Self> {
        let normalized = normalize_attention(&raw, delta)?;
        Ok(RoiAttention {
            raw,
            normalized,
            delta,
        })
    }
}

/// Attentive classification loss: mean of attention-weighted per-RoI
/// classification losses.
pub fn acl(per_roi_cls_losses: &[f64], weights: &[f64]) -> Result<f64> {
    if per_roi_cls_losses.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} losses vs {} weights",
            per_roi_cls_losses.len(),
            weights.len()
        )));
    }
    if per_roi_cls_losses.is_empty() {
        return Err(Error::LengthMismatch("no RoI losses".into()));
    }
    let n = per_roi_cls_losses.len() as f64;
    let sum: f64 = per_roi_cls_losses
        .iter()
        .zip(weights)
        .map(|(&l, &w)| w * l)
        .sum();
    Ok(sum / n)
}

/// The three weighted loss components and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub acl: f64,
    /// Mean per-RoI regression loss (before weighting).
    pub reg: f64,
    pub icls: f64,
    pub total: f64,
}

/// Weighted total loss: `l1 * acl + l2 * mean(reg) + l3 * icls`. Errors name
/// the first non-finite component.
pub fn total_loss(
    acl_value: f64,
    reg_losses: &[f64],
    icls_value: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> Result<LossBreakdown> {
    let reg_mean = if reg_losses.is_empty() {
        0.0
    } else {
        reg_losses.iter().sum::<f64>() / reg_losses.len() as f64
    };
    for (name, v) in [("acl", acl_value), ("reg", reg_mean), ("icls", icls_value)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
            });
        }
    }
    let total = lambda1 * acl_value + lambda2 * reg_mean + lambda3 * icls_value;
    Ok(LossBreakdown {
        acl: acl_value,
        reg: reg_mean,
        icls: icls_value,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_ce;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn fm_from(data: Array3<f64>) -> FeatureMap {
        FeatureMap::new(data, 8).unwrap()
    }

    #[test]
    fn cam_forward_on_constant_features_pools_to_constant() {
        // zero conv weights with per-channel bias -> constant feature maps
        let mut branch = CamBranch {
            conv: Conv2d::zeros(2, 3, 3, 1, 1),
            fc: Linear::zeros(3, 4),
        };
        branch.conv.b[0] = 0.5;
        branch.conv.b[1] = -1.0;
        branch.conv.b[2] = 2.0;
        for c in 0..4 {
            for k in 0..3 {
                branch.fc.w[[c, k]] = (c * 3 + k) as f64 * 0.1;
            }
            branch.fc.b[c] = 0.01 * c as f64;
        }
        let fm = fm_from(Array3::zeros((2, 5, 5)));
        let out = cam_forward(&fm, &branch).unwrap();
        assert_eq!(out.pooled.to_vec(), vec![0.5, -1.0, 2.0]);
        for c in 0..4 {
            let expect = branch.fc.w[[c, 0]] * 0.5 + branch.fc.w[[c, 1]] * -1.0
                + branch.fc.w[[c, 2]] * 2.0
                + branch.fc.b[c];
            assert!((out.logits[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_forward_zero_weights_zero_bias_gives_zero_logits() {
        let branch = CamBranch {
            conv: Conv2d::zeros(2, 3, 3, 1, 1),
            fc: Linear::zeros(3, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = fm_from(Array3::from_shape_fn((2, 4, 4), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let out = cam_forward(&fm, &branch).unwrap();
        assert!(out.logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn cam_forward_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let branch = CamBranch::new(4, 3, 2, &mut rng);
        let fm = fm_from(Array3::zeros((2, 4, 4)));
        assert!(cam_forward(&fm, &branch).is_err());
    }

    #[test]
    fn image_cls_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut branch = CamBranch::new(2, 3, 4, &mut rng);
        let fm = fm_from(Array3::from_shape_fn((2, 4, 4), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let label = 2usize;

        let fwd = cam_forward(&fm, &branch).unwrap();
        let (_, dlogits) = softmax_ce(&fwd.logits, label);
        let (_, grads) = cam_backward(&branch, &fm.data, &fwd, &dlogits);

        let h = 1e-4;
        let eval = |b: &CamBranch| {
            let f = cam_forward(&fm, b).unwrap();
            image_cls_loss(&f.logits, label)
        };
        for idx in [[0usize, 0], [2, 1], [3, 2]] {
            let orig = branch.fc.w[[idx[0], idx[1]]];
            branch.fc.w[[idx[0], idx[1]]] = orig + h;
            let up = eval(&branch);
            branch.fc.w[[idx[0], idx[1]]] = orig - h;
            let dn = eval(&branch);
            branch.fc.w[[idx[0], idx[1]]] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.fc.w[[idx[0], idx[1]]];
            assert!(rel_err(fd, an) < 1e-4, "fd {fd} vs analytic {an}");
        }
        // conv weight too: the loss must reach through GAP into the conv
        let orig = branch.conv.w[[1, 0, 1, 1]];
        branch.conv.w[[1, 0, 1, 1]] = orig + h;
        let up = eval(&branch);
        branch.conv.w[[1, 0, 1, 1]] = orig - h;
        let dn = eval(&branch);
        branch.conv.w[[1, 0, 1, 1]] = orig;
        assert!(rel_err((up - dn) / (2.0 * h), grads.conv.w[[1, 0, 1, 1]]) < 1e-4);
    }

    #[test]
    fn image_cls_loss_single_class_is_zero_and_uniform_is_ln_c() {
        assert_eq!(image_cls_loss(&[3.7], 0), 0.0);
        let c = 5;
        let logits = vec![0.25; c];
        assert!((image_cls_loss(&logits, 3) - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn image_cls_loss_matches_independent_softmax_log_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = (rng.random_range(0..6u32)) as usize;
            // oracle: plain exp / sum(exp) then -ln, no stabilization
            let exps: Vec<f64> = logits.iter().map(|&v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            let oracle = -(exps[label] / sum).ln();
            assert!((image_cls_loss(&logits, label) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn cam_identity_weighting_returns_the_feature_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Array3::from_shape_fn((1, 3, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_elem((1, 1), 1.0);
        let m = compute_cam(&f, &w, 0).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(m[[y, x]], f[[0, y, x]]);
            }
        }
    }

    #[test]
    fn cam_weighted_sum_two_channels() {
        let mut f = Array3::zeros((2, 1, 1));
        f[[0, 0, 0]] = 0.7;
        f[[1, 0, 0]] = 0.2;
        let mut w = Array2::zeros((1, 2));
        w[[0, 0]] = 1.0;
        w[[0, 1]] = -1.0;
        let m = compute_cam(&f, &w, 0).unwrap();
        assert!((m[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cam_matches_per_pixel_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        for c in 0..2 {
            let m = compute_cam(&f, &w, c).unwrap();
            for y in 0..2 {
                for x in 0..2 {
                    let mut oracle = 0.0;
                    for k in 0..3 {
                        oracle += w[[c, k]] * f[[k, y, x]];
                    }
                    assert!((m[[y, x]] - oracle).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cam_rejects_class_out_of_range() {
        let f = Array3::zeros((2, 2, 2));
        let w = Array2::zeros((3, 2));
        assert!(matches!(
            compute_cam(&f, &w, 3),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn cam_is_linear_in_classifier_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let doubled = &w * 2.0;
        let m1 = compute_cam(&f, &w, 1).unwrap();
        let m2 = compute_cam(&f, &doubled, 1).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn spatial_softmax_equal_cells_split_evenly() {
        let maps = Array3::from_elem((1, 1, 2), 0.3);
        let out = class_softmax(
            &AttentionMap {
                maps,
                normalized: false,
            },
            SoftmaxAxis::Spatial,
        );
        assert_eq!(out.maps[[0, 0, 0]], 0.5);
        assert_eq!(out.maps[[0, 0, 1]], 0.5);
        assert!(out.normalized);
    }

    #[test]
    fn spatial_softmax_is_shift_invariant() {
        let maps = Array3::from_shape_vec((1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let shifted = &maps + 4.0;
        let a = class_softmax(
            &AttentionMap {
                maps,
                normalized: false,
            },
            SoftmaxAxis::Spatial,
        );
        let b = class_softmax(
            &AttentionMap {
                maps: shifted,
                normalized: false,
            },
            SoftmaxAxis::Spatial,
        );
        for (x, y) in a.maps.iter().zip(b.maps.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn spatial_softmax_matches_exp_sum_oracle() {
        let vals = [0.3, -1.2, 2.5];
        let maps = Array3::from_shape_vec((1, 1, 3), vals.to_vec()).unwrap();
        let out = class_softmax(
            &AttentionMap {
                maps,
                normalized: false,
            },
            SoftmaxAxis::Spatial,
        );
        let sum: f64 = vals.iter().map(|v| v.exp()).sum();
        for (i, v) in vals.iter().enumerate() {
            assert!((out.maps[[0, 0, i]] - v.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn class_axis_softmax_normalizes_each_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(-2.0..2.0));
        let out = class_softmax(
            &AttentionMap {
                maps,
                normalized: false,
            },
            SoftmaxAxis::Class,
        );
        for y in 0..2 {
            for x in 0..2 {
                let s: f64 = (0..3).map(|c| out.maps[[c, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_attention_pool_takes_max_over_covered_cells() {
        let mut maps = Array3::zeros((1, 1, 2));
        maps[[0, 0, 0]] = 0.1;
        maps[[0, 0, 1]] = 0.3;
        let m = AttentionMap {
            maps,
            normalized: true,
        };
        // stride 8, two cells side by side; box covers both
        let bbox = BBox::new(0.0, 0.0, 16.0, 8.0).unwrap();
        let w = roi_attention_pool(&m, &[bbox], &[0], 8, AttentionPool::Max).unwrap();
        assert_eq!(w, vec![0.3]);
    }

    #[test]
    fn roi_attention_pool_whole_map_is_global_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let maps = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(0.0..1.0));
        let global = maps
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let m = AttentionMap {
            maps,
            normalized: true,
        };
        let bbox = BBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let w = roi_attention_pool(&m, &[bbox], &[1], 8, AttentionPool::Max).unwrap();
        assert_eq!(w[0], global);
    }

    #[test]
    fn roi_attention_pool_matches_cell_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let maps = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(0.0..1.0));
        let m = AttentionMap {
            maps: maps.clone(),
            normalized: true,
        };
        for _ in 0..60 {
            let x1 = rng.random_range(0.0..40.0);
            let y1 = rng.random_range(0.0..40.0);
            let bbox = BBox::new(
                x1,
                y1,
                x1 + rng.random_range(1.0..20.0),
                y1 + rng.random_range(1.0..20.0),
            )
            .unwrap();
            let label = rng.random_range(0..2u32) as usize;
            let got = roi_attention_pool(&m, &[bbox], &[label], 8, AttentionPool::Max).unwrap()[0];
            // oracle: clamp the projected rectangle, then scan every covered cell
            let x0 = ((bbox.x1 / 8.0).floor() as i64).clamp(0, 5) as usize;
            let y0 = ((bbox.y1 / 8.0).floor() as i64).clamp(0, 5) as usize;
            let x1c = ((bbox.x2 / 8.0).ceil() as i64).clamp(x0 as i64 + 1, 6) as usize;
            let y1c = ((bbox.y2 / 8.0).ceil() as i64).clamp(y0 as i64 + 1, 6) as usize;
            let mut best = f64::NEG_INFINITY;
            for cy in y0..y1c {
                for cx in x0..x1c {
                    best = best.max(maps[[label, cy, cx]]);
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn roi_attention_pool_requires_normalized_map() {
        let m = AttentionMap {
            maps: Array3::zeros((1, 2, 2)),
            normalized: false,
        };
        let bbox = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        assert!(roi_attention_pool(&m, &[bbox], &[0], 8, AttentionPool::Max).is_err());
    }

    #[test]
    fn normalize_attention_divides_by_max_plus_delta() {
        let w = normalize_attention(&[0.2, 0.8], 1e-8).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-7);
        assert!((w[1] - 1.0).abs() < 1e-7);
        assert!(w[1] < 1.0);
    }

    #[test]
    fn normalize_attention_all_equal_and_zero_entries() {
        let w = normalize_attention(&[0.4, 0.4, 0.4], 1e-8).unwrap();
        for v in &w {
            assert_eq!(*v, 0.4 / (0.4 + 1e-8));
        }
        let w = normalize_attention(&[0.0, 0.5], 1e-8).unwrap();
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn normalize_attention_empty_is_error() {
        assert!(matches!(
            normalize_attention(&[], 1e-8),
            Err(Error::EmptyAttention)
        ));
    }

    #[test]
    fn acl_with_unit_weights_equals_unweighted_mean_bitwise() {
        let losses = [0.6, 0.4];
        let weights = [1.0, 1.0];
        let weighted = acl(&losses, &weights).unwrap();
        let unweighted: f64 = losses.iter().map(|&l| 1.0 * l).sum::<f64>() / losses.len() as f64;
        assert_eq!(weighted.to_bits(), unweighted.to_bits());
        assert_eq!(weighted, 0.5);
    }

    #[test]
    fn acl_direct_example() {
        let v = acl(&[10.0, 0.4], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 0.2);
    }

    #[test]
    fn acl_length_mismatch_is_error() {
        assert!(acl(&[1.0], &[1.0, 1.0]).is_err());
        assert!(acl(&[], &[]).is_err());
    }

    #[test]
    fn acl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 4usize;
        let c = 3usize;
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..c as u32) as usize)
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();

        let eval = |lg: &[Vec<f64>]| {
            let losses: Vec<f64> = lg
                .iter()
                .zip(&labels)
                .map(|(l, &lab)| softmax_ce(l, lab).0)
                .collect();
            acl(&losses, &weights).unwrap()
        };

        // analytic: dACL/dlogits_i = w_i / n * dCE_i/dlogits_i
        let h = 1e-4;
        for i in 0..n {
            let (_, dce) = softmax_ce(&logits[i], labels[i]);
            for j in 0..c {
                let analytic = weights[i] / n as f64 * dce[j];
                let mut up = logits.clone();
                up[i][j] += h;
                let mut dn = logits.clone();
                dn[i][j] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                assert!(
                    rel_err(fd, analytic) < 1e-3 || (fd.abs() < 1e-12 && analytic.abs() < 1e-12),
                    "roi {i} coord {j}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn zero_weight_roi_has_exactly_zero_gradient() {
        let logits = [0.3, -0.7, 1.1];
        let (_, dce) = softmax_ce(&logits, 1);
        let weight = 0.0;
        let scaled: Vec<f64> = dce.iter().map(|g| weight / 3.0 * g).collect();
        assert!(scaled.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_weighted_sum_and_component_errors() {
        let lb = total_loss(0.5, &[0.3], 0.2, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(lb.total, 1.0);
        assert_eq!((lb.acl, lb.reg, lb.icls), (0.5, 0.3, 0.2));

        let lb = total_loss(0.5, &[0.3], 0.2, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(lb.total, 0.7);

        match total_loss(f64::NAN, &[0.0], 0.0, 1.0, 1.0, 1.0) {
            Err(Error::NonFinite { component }) => assert_eq!(component, "acl"),
            other => panic!("expected NonFinite(acl), got {other:?}"),
        }
        match total_loss(0.0, &[f64::INFINITY], 0.0, 1.0, 1.0, 1.0) {
            Err(Error::NonFinite { component }) => assert_eq!(component, "reg"),
            other => panic!("expected NonFinite(reg), got {other:?}"),
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let a = rng.random_range(0.0..2.0);
            let r = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            let i = rng.random_range(0.0..2.0);
            let l = [
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
            ];
            let base = total_loss(a, &r, i, l[0], l[1], l[2]).unwrap().total;
            for k in 0..3 {
                let mut l2 = l;
                l2[k] *= 2.0;
                let scaled = total_loss(a, &r, i, l2[0], l2[1], l2[2]).unwrap().total;
                let term = match k {
                    0 => l[0] * a,
                    1 => l[1] * (r[0] + r[1]) / 2.0,
                    _ => l[2] * i,
                };
                assert!((scaled - base - term).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn spatial_softmax_sums_to_one_per_class(
                vals in proptest::collection::vec(-5.0f64..5.0, 12)
            ) {
                let maps = Array3::from_shape_vec((2, 2, 3), vals).unwrap();
                let out = class_softmax(&AttentionMap { maps, normalized: false }, SoftmaxAxis::Spatial);
                for c in 0..2 {
                    let s: f64 = out.maps.index_axis(ndarray::Axis(0), c).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!(out.maps.index_axis(ndarray::Axis(0), c).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn normalization_preserves_ordering(
                vals in proptest::collection::vec(0.0f64..10.0, 1..20)
            ) {
                let norm = normalize_attention(&vals, 1e-8).unwrap();
                for i in 0..vals.len() {
                    for j in 0..vals.len() {
                        prop_assert_eq!(
                            vals[i].partial_cmp(&vals[j]).unwrap(),
                            norm[i].partial_cmp(&norm[j]).unwrap()
                        );
                    }
                }
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max > 0.0 {
                    let nmax = norm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(nmax < 1.0);
                    prop_assert_eq!(nmax, max / (max + 1e-8));
                }
            }
        }
    }
}
