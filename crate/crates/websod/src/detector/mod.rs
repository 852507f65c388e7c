//! A minimal two-stage detector: small conv backbone, anchor-based proposal
//! head, and an RoI head with per-class classifier and per-class box
//! regressor. Sized for desk-scale experiments; inference is a pure function
//! of (parameters, input).

pub mod train;

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::attention::CamBranch;
use crate::datamodel::{iou, BBox, Detection};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::rfr::RfrBlock;

/// Backbone output: `(K, H', W')` activations plus the input-to-feature
/// resolution ratio.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("empty feature map".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "feature map".into(),
            });
        }
        Ok(FeatureMap { data, stride })
    }
}

/// A region of interest in input-image coordinates.
#[derive(Debug, Clone)]
pub struct Roi {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Parameterized box offsets relative to an anchor or proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Log-space size deltas are clamped here at decode time.
const DELTA_CLIP: f64 = 6.0;

/// Center/log-size encoding of `target` relative to `proposal`.
pub fn encode_delta(proposal: &BBox, target: &BBox) -> BoxDelta {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let (gx, gy) = target.center();
    BoxDelta {
        tx: (gx - px) / pw,
        ty: (gy - py) / ph,
        tw: (target.width() / pw).ln(),
        th: (target.height() / ph).ln(),
    }
}

/// Inverse of [`encode_delta`]: `decode_delta(p, encode_delta(p, g)) == g`.
pub fn decode_delta(proposal: &BBox, delta: &BoxDelta) -> BBox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + delta.tx * pw;
    let cy = py + delta.ty * ph;
    let w = pw * delta.tw.clamp(-DELTA_CLIP, DELTA_CLIP).exp();
    let h = ph * delta.th.clamp(-DELTA_CLIP, DELTA_CLIP).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Smooth L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Log loss on an already-normalized probability vector, clamped at
/// [`nn::PROB_EPS`] so a zero probability stays finite.
pub fn cls_log_loss(p: &[f64], label: usize) -> f64 {
    debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    -(p[label].max(nn::PROB_EPS)).ln()
}

/// Shared feature extractor: a stack of 3x3 convs with ReLU after each.
/// The first three layers (or all of them, for shallower stacks) use
/// stride 2, so the default four-layer stack reduces resolution by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(channels: &[usize], rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 3;
        for (i, &out_ch) in channels.iter().enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            convs.push(Conv2d::new(in_ch, out_ch, 3, stride, 1, rng));
            in_ch = out_ch;
        }
        Backbone { convs }
    }

    pub fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map(|c| c.w.dim().0).unwrap_or(0)
    }

    pub fn forward_cached(&self, image: &Array3<f64>) -> BackboneCache {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for conv in &self.convs {
            inputs.push(x.clone());
            let pre = conv.forward(&x);
            x = nn::relu3(&pre);
            preacts.push(pre);
        }
        BackboneCache {
            inputs,
            preacts,
            output: x,
        }
    }

    pub fn backward(&self, cache: &BackboneCache, dout: &Array3<f64>) -> Vec<Conv2d> {
        let mut grads: Vec<Conv2d> = self.convs.iter().map(|c| c.zeros_like()).collect();
        let mut g = dout.clone();
        for i in (0..self.convs.len()).rev() {
            let g_pre = nn::relu3_backward(&cache.preacts[i], &g);
            let (gx, gw) = self.convs[i].backward(&cache.inputs[i], &g_pre);
            grads[i] = gw;
            g = gx;
        }
        grads
    }

    pub fn zeros_like(&self) -> Self {
        Backbone {
            convs: self.convs.iter().map(|c| c.zeros_like()).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Backbone) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.accumulate(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.convs {
            c.scale(s);
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.convs.iter().flat_map(|c| c.param_slices()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.convs
            .iter_mut()
            .flat_map(|c| c.param_slices_mut())
            .collect()
    }
}

pub struct BackboneCache {
    pub inputs: Vec<Array3<f64>>,
    pub preacts: Vec<Array3<f64>>,
    pub output: Array3<f64>,
}

/// Proposal head: a 3x3 conv then a 1x1 conv emitting, per anchor,
/// one objectness logit and four box deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub out: Conv2d,
}

impl RpnHead {
    pub fn new(in_ch: usize, num_anchors: usize, rng: &mut impl Rng) -> Self {
        RpnHead {
            conv: Conv2d::new(in_ch, in_ch, 3, 1, 1, rng),
            out: Conv2d::new(in_ch, num_anchors * 5, 1, 1, 0, rng),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.out.w.dim().0 / 5
    }

    pub fn forward_cached(&self, fm: &Array3<f64>) -> RpnCache {
        let pre = self.conv.forward(fm);
        let hidden = nn::relu3(&pre);
        let map = self.out.forward(&hidden);
        RpnCache { pre, hidden, map }
    }

    pub fn backward(&self, fm: &Array3<f64>, cache: &RpnCache, dmap: &Array3<f64>) -> (Array3<f64>, RpnHead) {
        let (dhidden, gout) = self.out.backward(&cache.hidden, dmap);
        let dpre = nn::relu3_backward(&cache.pre, &dhidden);
        let (dfm, gconv) = self.conv.backward(fm, &dpre);
        (
            dfm,
            RpnHead {
                conv: gconv,
                out: gout,
            },
        )
    }

    pub fn zeros_like(&self) -> Self {
        RpnHead {
            conv: self.conv.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, other: &RpnHead) {
        self.conv.accumulate(&other.conv);
        self.out.accumulate(&other.out);
    }

    pub fn scale(&mut self, s: f64) {
        self.conv.scale(s);
        self.out.scale(s);
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv.param_slices();
        v.extend(self.out.param_slices());
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv.param_slices_mut();
        v.extend(self.out.param_slices_mut());
        v
    }
}

pub struct RpnCache {
    pub pre: Array3<f64>,
    pub hidden: Array3<f64>,
    /// `(A * 5, H', W')`: per anchor, channel `a*5` is the objectness logit
    /// and `a*5+1..a*5+5` are the box deltas.
    pub map: Array3<f64>,
}

/// RoI head: pooled features -> trunk -> per-class classifier (plus
/// background) and per-class box regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiHead {
    pub trunk: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub pool_size: usize,
}

impl RoiHead {
    pub fn new(
        in_ch: usize,
        pool_size: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let flat = in_ch * pool_size * pool_size;
        RoiHead {
            trunk: Linear::new(flat, hidden, rng),
            cls: Linear::new(hidden, num_classes + 1, rng),
            reg: Linear::new(hidden, 4 * num_classes, rng),
        pool_size,
        }
    }

    pub fn zeros_like(&self) -> Self {
        RoiHead {
            trunk: self.trunk.zeros_like(),
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
            pool_size: self.pool_size,
        }
    }

    pub fn accumulate(&mut self, other: &RoiHead) {
        self.trunk.accumulate(&other.trunk);
        self.cls.accumulate(&other.cls);
        self.reg.accumulate(&other.reg);
    }

    pub fn scale(&mut self, s: f64) {
        self.trunk.scale(s);
        self.cls.scale(s);
        self.reg.scale(s);
    }
}

/// Full detector parameter bundle. `classes` is the foreground vocabulary in
/// classifier order; the classifier emits `classes.len() + 1` logits with
/// background last.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub classes: Vec<String>,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub roi: RoiHead,
    pub cam: Option<CamBranch>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl DetectorParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        classes: Vec<String>,
        backbone_channels: &[usize],
        pool_size: usize,
        roi_hidden: usize,
        cam_channels: usize,
        with_cam: bool,
        anchor_scales: Vec<f64>,
        anchor_ratios: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let backbone = Backbone::new(backbone_channels, rng);
        let k = backbone.out_channels();
        let num_anchors = anchor_scales.len() * anchor_ratios.len();
        let rpn = RpnHead::new(k, num_anchors, rng);
        let roi = RoiHead::new(k, pool_size, roi_hidden, classes.len(), rng);
        let cam = with_cam.then(|| CamBranch::new(k, cam_channels, classes.len(), rng));
        DetectorParams {
            classes,
            backbone,
            rpn,
            roi,
            cam,
            anchor_scales,
            anchor_ratios,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn background_index(&self) -> usize {
        self.classes.len()
    }

    pub fn zeros_like(&self) -> Self {
        DetectorParams {
            classes: self.classes.clone(),
            backbone: self.backbone.zeros_like(),
            rpn: self.rpn.zeros_like(),
            roi: self.roi.zeros_like(),
            cam: self.cam.as_ref().map(|c| c.zeros_like()),
            anchor_scales: self.anchor_scales.clone(),
            anchor_ratios: self.anchor_ratios.clone(),
        }
    }

    pub fn accumulate(&mut self, other: &DetectorParams) {
        self.backbone.accumulate(&other.backbone);
        self.rpn.accumulate(&other.rpn);
        self.roi.accumulate(&other.roi);
        if let (Some(a), Some(b)) = (self.cam.as_mut(), other.cam.as_ref()) {
            a.accumulate(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        self.rpn.scale(s);
        self.roi.scale(s);
        if let Some(c) = self.cam.as_mut() {
            c.scale(s);
        }
    }
}

/// Which parameter groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub rpn: bool,
    pub roi_trunk: bool,
    pub roi_cls: bool,
    pub roi_reg: bool,
    pub cam: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Trainable {
            backbone: true,
            rpn: true,
            roi_trunk: true,
            roi_cls: true,
            roi_reg: true,
            cam: true,
        }
    }

    pub fn none() -> Self {
        Trainable {
            backbone: false,
            rpn: false,
            roi_trunk: false,
            roi_cls: false,
            roi_reg: false,
            cam: false,
        }
    }

    /// Feature layers only: everything except the final classifier and
    /// regressor linear layers.
    pub fn feature_layers() -> Self {
        Trainable {
            backbone: true,
            rpn: true,
            roi_trunk: true,
            roi_cls: false,
            roi_reg: false,
            cam: true,
        }
    }
}

impl DetectorParams {
    pub fn trainable_slices(&self, t: &Trainable) -> Vec<&[f64]> {
        let mut v = Vec::new();
        if t.backbone {
            v.extend(self.backbone.param_slices());
        }
        if t.rpn {
            v.extend(self.rpn.param_slices());
        }
        if t.roi_trunk {
            v.extend(self.roi.trunk.param_slices());
        }
        if t.roi_cls {
            v.extend(self.roi.cls.param_slices());
        }
        if t.roi_reg {
            v.extend(self.roi.reg.param_slices());
        }
        if t.cam {
            if let Some(cam) = &self.cam {
                v.extend(cam.param_slices());
            }
        }
        v
    }

    pub fn trainable_slices_mut(&mut self, t: &Trainable) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if t.backbone {
            v.extend(self.backbone.param_slices_mut());
        }
        if t.rpn {
            v.extend(self.rpn.param_slices_mut());
        }
        if t.roi_trunk {
            v.extend(self.roi.trunk.param_slices_mut());
        }
        if t.roi_cls {
            v.extend(self.roi.cls.param_slices_mut());
        }
        if t.roi_reg {
            v.extend(self.roi.reg.param_slices_mut());
        }
        if t.cam {
            if let Some(cam) = self.cam.as_mut() {
                v.extend(cam.param_slices_mut());
            }
        }
        v
    }
}

/// Runs the backbone. Deterministic given weights and input.
pub fn extract_features(image: &Array3<f64>, backbone: &Backbone) -> Result<FeatureMap> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "input image".into(),
        });
    }
    let (_, h, w) = image.dim();
    let stride = backbone.stride();
    if h < stride || w < stride {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than backbone stride {stride}"
        )));
    }
    let cache = backbone.forward_cached(image);
    FeatureMap::new(cache.output, stride)
}

/// The anchor grid for a feature map: one box per (cell, scale, ratio), in
/// row-major cell order with anchors varying fastest.
pub fn anchor_grid(
    fh: usize,
    fw: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(fh * fw * scales.len() * ratios.len());
    for cy in 0..fh {
        for cx in 0..fw {
            let (x, y) = (
                (cx as f64 + 0.5) * stride as f64,
                (cy as f64 + 0.5) * stride as f64,
            );
            for &s in scales {
                for &r in ratios {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    anchors.push(BBox {
                        x1: x - 0.5 * w,
                        y1: y - 0.5 * h,
                        x2: x + 0.5 * w,
                        y2: y + 0.5 * h,
                    });
                }
            }
        }
    }
    anchors
}

/// Greedy NMS. Returns kept indices; candidates must be pre-sorted by
/// descending score (ties already broken by ascending index).
pub fn nms_keep(boxes: &[BBox], iou_thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    'outer: for i in 0..boxes.len() {
        for &j in &keep {
            if iou(&boxes[i], &boxes[j]) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(i);
    }
    keep
}

/// Orders candidate indices by descending score with ascending-index
/// tie-break.
pub fn sort_desc_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Decodes, clips, scores, and NMS-filters the proposal head output into at
/// most `top_n` RoIs.
pub fn generate_proposals(
    fm: &FeatureMap,
    params: &DetectorParams,
    image_hw: (usize, usize),
    top_n: usize,
    nms_iou: f64,
) -> Vec<Roi> {
    let cache = params.rpn.forward_cached(&fm.data);
    proposals_from_map(&cache.map, fm, params, image_hw, top_n, nms_iou)
}

pub(crate) fn proposals_from_map(
    map: &Array3<f64>,
    fm: &FeatureMap,
    params: &DetectorParams,
    image_hw: (usize, usize),
    top_n: usize,
    nms_iou: f64,
) -> Vec<Roi> {
    let (_, fh, fw) = fm.data.dim();
    let anchors = anchor_grid(
        fh,
        fw,
        fm.stride,
        &params.anchor_scales,
        &params.anchor_ratios,
    );
    let num_anchors = params.rpn.num_anchors();
    let (ih, iw) = image_hw;

    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut idx = 0usize;
    for cy in 0..fh {
        for cx in 0..fw {
            for a in 0..num_anchors {
                let logit = map[[a * 5, cy, cx]];
                let delta = BoxDelta {
                    tx: map[[a * 5 + 1, cy, cx]],
                    ty: map[[a * 5 + 2, cy, cx]],
                    tw: map[[a * 5 + 3, cy, cx]],
                    th: map[[a * 5 + 4, cy, cx]],
                };
                let decoded = decode_delta(&anchors[idx], &delta);
                idx += 1;
                if let Some(clipped) = decoded.clip(iw as f64, ih as f64) {
                    if clipped.width() >= 2.0 && clipped.height() >= 2.0 {
                        boxes.push(clipped);
                        scores.push(logit);
                    }
                }
            }
        }
    }

    let order = sort_desc_by_score(&scores);
    let sorted_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let keep = nms_keep(&sorted_boxes, nms_iou);
    keep.into_iter()
        .take(top_n)
        .map(|i| Roi {
            bbox: sorted_boxes[i],
            objectness: scores[order[i]],
        })
        .collect()
}

/// Inference-time knobs.
#[derive(Debug, Clone, Copy)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub proposal_top_n: usize,
    pub proposal_nms_iou: f64,
    pub detection_nms_iou: f64,
    pub max_per_image: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            proposal_top_n: 32,
            proposal_nms_iou: 0.7,
            detection_nms_iou: 0.3,
            max_per_image: 100,
        }
    }
}

/// Full detection pass: proposals, RoI head, per-class NMS, then the score
/// threshold. An optional refinement block transforms pooled RoI features
/// before the (otherwise unchanged) head.
pub fn detect(
    image: &Array3<f64>,
    params: &DetectorParams,
    refine: Option<&RfrBlock>,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let (_, ih, iw) = image.dim();
    let fm = extract_features(image, &params.backbone)?;
    let proposals = generate_proposals(&fm, params, (ih, iw), cfg.proposal_top_n, cfg.proposal_nms_iou);

    let num_classes = params.num_classes();
    let mut probs = Vec::with_capacity(proposals.len());
    let mut regs = Vec::with_capacity(proposals.len());
    for roi in &proposals {
        let (pooled, _) = nn::roi_max_pool(&fm.data, &roi.bbox, fm.stride, params.roi.pool_size);
        let pooled = match refine {
            Some(block) => crate::rfr::rfr_forward(&pooled, block)?,
            None => pooled,
        };
        let flat = Array1::from_iter(pooled.iter().cloned());
        let hidden = nn::relu1(&params.roi.trunk.forward(&flat));
        let logits = params.roi.cls.forward(&hidden);
        probs.push(nn::softmax(logits.as_slice().unwrap()));
        regs.push(params.roi.reg.forward(&hidden));
    }

    let mut detections: Vec<Detection> = Vec::new();
    for class in 0..num_classes {
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        for (i, roi) in proposals.iter().enumerate() {
            let delta = BoxDelta {
                tx: regs[i][4 * class],
                ty: regs[i][4 * class + 1],
                tw: regs[i][4 * class + 2],
                th: regs[i][4 * class + 3],
            };
            let decoded = decode_delta(&roi.bbox, &delta);
            if let Some(clipped) = decoded.clip(iw as f64, ih as f64) {
                cand_boxes.push(clipped);
                cand_scores.push(probs[i][class]);
            }
        }
        let order = sort_desc_by_score(&cand_scores);
        let sorted: Vec<BBox> = order.iter().map(|&i| cand_boxes[i]).collect();
        // per-class NMS runs before thresholding
        for keep_idx in nms_keep(&sorted, cfg.detection_nms_iou) {
            let score = cand_scores[order[keep_idx]];
            if score >= cfg.score_threshold {
                detections.push(Detection::new(sorted[keep_idx], class, score)?);
            }
        }
    }

    // deterministic final order: score desc, then class, then geometry
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap_or(std::cmp::Ordering::Equal))
    });
    detections.truncate(cfg.max_per_image);
    Ok(detections)
}
