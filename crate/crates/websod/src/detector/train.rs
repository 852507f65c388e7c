//! Seeded, single-threaded training loops shared by every stage.
//!
//! One routine computes the full per-image forward/backward pass: backbone,
//! proposal head, RoI sampling, RoI head (optionally through a refinement
//! block), CAM branch, and the plain or attention-weighted losses. Stages
//! differ only in which parameter groups update, which data streams
//! alternate, and whether RoIs are attention-weighted.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    acl, cam_backward, cam_forward, class_softmax, compute_cam_all, normalize_attention,
    roi_attention_pool, total_loss, AttentionPool, SoftmaxAxis,
};
use crate::datamodel::{iou, BBox};
use crate::detector::{
    encode_delta, proposals_from_map, smooth_l1, smooth_l1_grad, BoxDelta, DetectorParams,
    FeatureMap, Trainable,
};
use crate::error::{Error, Result};
use crate::nn::{self, SgdMomentum};
use crate::rfr::{rfr_backward, rfr_forward_cached, RfrBlock};

/// One training example: an image, its (real or pseudo) boxes, and for
/// web-domain images the single image-level label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Array3<f64>,
    pub boxes: Vec<(BBox, usize)>,
    pub image_label: Option<usize>,
}

/// Plain detector losses, or CAM-attention-weighted RoI classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Uniform,
    Cam,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub attention_delta: f64,
    pub softmax_axis: SoftmaxAxis,
    pub attention_pool: AttentionPool,
    pub proposal_top_n: usize,
    pub proposal_nms_iou: f64,
    pub roi_fg_iou: f64,
    pub roi_bg_iou: f64,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch: usize,
    pub include_rpn_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 7,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            attention_delta: 1e-8,
            softmax_axis: SoftmaxAxis::Spatial,
            attention_pool: AttentionPool::Max,
            proposal_top_n: 48,
            proposal_nms_iou: 0.7,
            roi_fg_iou: 0.5,
            roi_bg_iou: 0.3,
            rois_per_image: 32,
            fg_fraction: 0.25,
            rpn_fg_iou: 0.5,
            rpn_bg_iou: 0.3,
            rpn_batch: 32,
            include_rpn_loss: true,
        }
    }
}

/// A named data stream; stage 3 alternates a target stream with a web stream.
#[derive(Debug, Clone)]
pub struct SampleStream {
    pub name: String,
    pub samples: Vec<TrainSample>,
    pub attention: AttentionMode,
}

/// Loss components of one step (batch means).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub acl: f64,
    pub reg: f64,
    pub icls: f64,
    pub rpn_obj: f64,
    pub rpn_reg: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, other: &LossParts) {
        self.acl += other.acl;
        self.reg += other.reg;
        self.icls += other.icls;
        self.rpn_obj += other.rpn_obj;
        self.rpn_reg += other.rpn_reg;
        self.total += other.total;
    }

    fn scale(&mut self, s: f64) {
        self.acl *= s;
        self.reg *= s;
        self.icls *= s;
        self.rpn_obj *= s;
        self.rpn_reg *= s;
        self.total *= s;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub stream: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub stream_names: Vec<String>,
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn first_total(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss.total)
    }

    pub fn mean_total_of_last(&self, k: usize) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let tail = &self.records[self.records.len().saturating_sub(k)..];
        Some(tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len() as f64)
    }
}

/// RoI training target after proposal/GT matching.
#[derive(Debug, Clone, Copy)]
enum RoiTarget {
    Fg { class: usize, delta: BoxDelta },
    Bg,
}

fn mix_seed(seed: u64, stream: usize, step: usize, idx: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [stream as u64 + 1, step as u64 + 1, idx as u64 + 1] {
        h = h
            .wrapping_mul(0x0000_0100_0000_01B3)
            .wrapping_add(v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h ^= h >> 29;
    }
    h
}

/// IoU-matches candidate boxes against ground truth, then subsamples a fixed
/// RoI budget with a bounded foreground fraction.
fn match_and_sample_rois(
    cands: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(BBox, RoiTarget)> {
    let mut fg: Vec<(usize, usize)> = Vec::new(); // (cand idx, gt idx)
    let mut bg: Vec<usize> = Vec::new();
    for (i, cand) in cands.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (j, (gt, _)) in gts.iter().enumerate() {
            let v = iou(cand, gt);
            if v > best {
                best = v;
                best_gt = Some(j);
            }
        }
        if best >= cfg.roi_fg_iou {
            fg.push((i, best_gt.unwrap()));
        } else if best < cfg.roi_bg_iou {
            bg.push(i);
        }
        // in-between: ignored
    }

    let fg_max = ((cfg.rois_per_image as f64 * cfg.fg_fraction).round() as usize).max(1);
    let fg_take = fg.len().min(fg_max);
    let fg_sel = pick(rng, fg.len(), fg_take);
    let bg_take = bg.len().min(cfg.rois_per_image - fg_take);
    let bg_sel = pick(rng, bg.len(), bg_take);

    let mut out = Vec::with_capacity(fg_take + bg_take);
    for k in fg_sel {
        let (ci, gi) = fg[k];
        let (gt_box, gt_class) = gts[gi];
        out.push((
            cands[ci],
            RoiTarget::Fg {
                class: gt_class,
                delta: encode_delta(&cands[ci], &gt_box),
            },
        ));
    }
    for k in bg_sel {
        out.push((cands[bg[k]], RoiTarget::Bg));
    }
    out
}

/// Deterministic sample of `amount` indices out of `len`, ascending.
fn pick(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if amount >= len {
        return (0..len).collect();
    }
    let mut sel = rand::seq::index::sample(rng, len, amount).into_vec();
    sel.sort_unstable();
    sel
}

/// Anchor-level targets: 1 = object, 0 = background, -1 = ignored. The
/// best-overlapping anchor of every ground-truth box is forced positive.
fn rpn_targets(
    anchors: &[BBox],
    gts: &[(BBox, usize)],
    fg_iou: f64,
    bg_iou: f64,
) -> Vec<(i8, Option<BoxDelta>)> {
    let mut out: Vec<(i8, Option<BoxDelta>)> = Vec::with_capacity(anchors.len());
    let mut best_anchor_per_gt: Vec<(usize, f64)> = vec![(0, -1.0); gts.len()];
    let mut best_gt_per_anchor: Vec<(usize, f64)> = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let mut best = (0usize, 0.0f64);
        for (j, (gt, _)) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best.1 {
                best = (j, v);
            }
            if v > best_anchor_per_gt[j].1 {
                best_anchor_per_gt[j] = (i, v);
            }
        }
        best_gt_per_anchor.push(best);
    }
    for (i, anchor) in anchors.iter().enumerate() {
        let (j, v) = best_gt_per_anchor[i];
        if v >= fg_iou {
            out.push((1, Some(encode_delta(anchor, &gts[j].0))));
        } else if v < bg_iou {
            out.push((0, None));
        } else {
            out.push((-1, None));
        }
    }
    for (j, &(i, v)) in best_anchor_per_gt.iter().enumerate() {
        if v > 0.0 {
            out[i] = (1, Some(encode_delta(&anchors[i], &gts[j].0)));
        }
    }
    out
}

struct RoiFwd {
    target: RoiTarget,
    pooled: Array3<f64>,
    pool_cache: nn::RoiPoolCache,
    rfr_cache: Option<crate::rfr::RfrCache>,
    flat: Array1<f64>,
    trunk_pre: Array1<f64>,
    trunk_act: Array1<f64>,
    cls_logits: Vec<f64>,
    reg_out: Array1<f64>,
}

/// Full forward/backward for one sample. Returns loss parts, detector-shaped
/// gradients, and refinement-block gradients when a block is present.
#[allow(clippy::too_many_arguments)]
fn forward_backward(
    params: &DetectorParams,
    refine: Option<&RfrBlock>,
    sample: &TrainSample,
    attention: AttentionMode,
    trainable: &Trainable,
    train_rfr: bool,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> Result<(LossParts, DetectorParams, Option<RfrBlock>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut grads = params.zeros_like();
    let mut rfr_grads = refine.map(|b| b.zeros_like());
    let (_, ih, iw) = sample.image.dim();

    let bb_cache = params.backbone.forward_cached(&sample.image);
    let stride = params.backbone.stride();
    let fm = FeatureMap::new(bb_cache.output.clone(), stride)?;
    let mut dfm = Array3::zeros(fm.data.dim());
    let (_, fh, fw) = fm.data.dim();

    let rpn_cache = params.rpn.forward_cached(&fm.data);

    // CAM branch forward is shared by the attention weights and the
    // image-classification loss.
    let want_cam = params.cam.is_some()
        && (sample.image_label.is_some() || attention == AttentionMode::Cam);
    let cam_fwd = if want_cam {
        Some(cam_forward(&fm, params.cam.as_ref().unwrap())?)
    } else {
        None
    };

    let mut parts = LossParts::default();
    let n_classes = params.num_classes();

    // ---- RoI head path ----
    if !sample.boxes.is_empty() {
        let proposals = proposals_from_map(
            &rpn_cache.map,
            &fm,
            params,
            (ih, iw),
            cfg.proposal_top_n,
            cfg.proposal_nms_iou,
        );
        let mut cands: Vec<BBox> = proposals.iter().map(|r| r.bbox).collect();
        cands.extend(sample.boxes.iter().map(|(b, _)| *b));
        let sampled = match_and_sample_rois(&cands, &sample.boxes, cfg, &mut rng);

        if !sampled.is_empty() {
            let mut fwd: Vec<RoiFwd> = Vec::with_capacity(sampled.len());
            for (bbox, target) in &sampled {
                let (pooled, pool_cache) =
                    nn::roi_max_pool(&fm.data, bbox, stride, params.roi.pool_size);
                let (refined, rfr_cache) = match refine {
                    Some(block) => {
                        let (fhat, cache) = rfr_forward_cached(&pooled, block)?;
                        (fhat, Some(cache))
                    }
                    None => (pooled.clone(), None),
                };
                let flat = Array1::from_iter(refined.iter().cloned());
                let trunk_pre = params.roi.trunk.forward(&flat);
                let trunk_act = nn::relu1(&trunk_pre);
                let cls_logits = params.roi.cls.forward(&trunk_act).to_vec();
                let reg_out = params.roi.reg.forward(&trunk_act);
                fwd.push(RoiFwd {
                    target: *target,
                    pooled,
                    pool_cache,
                    rfr_cache,
                    flat,
                    trunk_pre,
                    trunk_act,
                    cls_logits,
                    reg_out,
                });
            }

            let n = fwd.len();
            // attention weights: normalized CAM scores for foreground RoIs,
            // 1 for background RoIs, all 1 in uniform mode
            let mut weights = vec![1.0; n];
            if attention == AttentionMode::Cam {
                if let (Some(cam), Some(cf)) = (params.cam.as_ref(), cam_fwd.as_ref()) {
                    let mut fg_boxes = Vec::new();
                    let mut fg_labels = Vec::new();
                    let mut fg_pos = Vec::new();
                    for (i, ((bbox, _), f)) in sampled.iter().zip(&fwd).enumerate() {
                        if let RoiTarget::Fg { class, .. } = f.target {
                            fg_boxes.push(*bbox);
                            fg_labels.push(class);
                            fg_pos.push(i);
                        }
                    }
                    if !fg_boxes.is_empty() {
                        let raw_maps = compute_cam_all(&cf.features, &cam.fc.w)?;
                        let att = class_softmax(&raw_maps, cfg.softmax_axis);
                        let raw = roi_attention_pool(
                            &att,
                            &fg_boxes,
                            &fg_labels,
                            stride,
                            cfg.attention_pool,
                        )?;
                        let norm = normalize_attention(&raw, cfg.attention_delta)?;
                        for (k, &i) in fg_pos.iter().enumerate() {
                            weights[i] = norm[k];
                        }
                    }
                }
            }

            // per-RoI losses
            let mut ce_losses = Vec::with_capacity(n);
            let mut dlogits_all = Vec::with_capacity(n);
            let mut reg_losses = vec![0.0; n];
            for f in &fwd {
                let label = match f.target {
                    RoiTarget::Fg { class, .. } => class,
                    RoiTarget::Bg => n_classes,
                };
                let (ce, dl) = nn::softmax_ce(&f.cls_logits, label);
                ce_losses.push(ce);
                dlogits_all.push(dl);
            }
            for (i, f) in fwd.iter().enumerate() {
                if let RoiTarget::Fg { class, delta } = f.target {
                    let mut l = 0.0;
                    let t = [delta.tx, delta.ty, delta.tw, delta.th];
                    for c in 0..4 {
                        l += smooth_l1(f.reg_out[4 * class + c] - t[c]);
                    }
                    reg_losses[i] = l;
                }
            }
            let acl_value = acl(&ce_losses, &weights)?;
            parts.acl = acl_value;
            parts.reg = if reg_losses.is_empty() {
                0.0
            } else {
                reg_losses.iter().sum::<f64>() / n as f64
            };

            // backward through the RoI head
            let nf = n as f64;
            for (i, f) in fwd.iter().enumerate() {
                let mut dcls = Array1::from_vec(dlogits_all[i].clone());
                dcls *= cfg.lambda1 * weights[i] / nf;
                let mut dreg = Array1::zeros(4 * n_classes);
                if let RoiTarget::Fg { class, delta } = f.target {
                    let t = [delta.tx, delta.ty, delta.tw, delta.th];
                    for c in 0..4 {
                        dreg[4 * class + c] =
                            cfg.lambda2 / nf * smooth_l1_grad(f.reg_out[4 * class + c] - t[c]);
                    }
                }
                let (dh_cls, gcls) = params.roi.cls.backward(&f.trunk_act, &dcls);
                let (dh_reg, greg) = params.roi.reg.backward(&f.trunk_act, &dreg);
                grads.roi.cls.accumulate(&gcls);
                grads.roi.reg.accumulate(&greg);
                let dh = dh_cls + dh_reg;
                let dpre = nn::relu1_backward(&f.trunk_pre, &dh);
                let (dflat, gtrunk) = params.roi.trunk.backward(&f.flat, &dpre);
                grads.roi.trunk.accumulate(&gtrunk);

                let need_below = train_rfr || trainable.backbone;
                if !need_below {
                    continue;
                }
                let dim = f.pooled.dim();
                let mut dpooled =
                    Array3::from_shape_vec(dim, dflat.to_vec()).expect("roi feature shape");
                if let (Some(block), Some(cache)) = (refine, f.rfr_cache.as_ref()) {
                    let (dinput, gblock) = rfr_backward(&f.pooled, block, cache, &dpooled);
                    if let Some(acc) = rfr_grads.as_mut() {
                        acc.accumulate(&gblock);
                    }
                    dpooled = dinput;
                }
                if trainable.backbone {
                    nn::roi_max_pool_backward(&dpooled, &f.pool_cache, &mut dfm);
                }
            }
        }
    }

    // ---- image classification loss ----
    if let (Some(label), Some(cam), Some(cf)) =
        (sample.image_label, params.cam.as_ref(), cam_fwd.as_ref())
    {
        let (icls, mut dlogits) = nn::softmax_ce(&cf.logits, label);
        parts.icls = icls;
        if trainable.cam || trainable.backbone {
            for g in dlogits.iter_mut() {
                *g *= cfg.lambda3;
            }
            let (gfm, gcam) = cam_backward(cam, &fm.data, cf, &dlogits);
            if let Some(acc) = grads.cam.as_mut() {
                acc.accumulate(&gcam);
            }
            if trainable.backbone {
                dfm += &gfm;
            }
        }
    }

    // ---- proposal head losses ----
    if cfg.include_rpn_loss && trainable.rpn && !sample.boxes.is_empty() {
        let anchors = anchor_list(fh, fw, stride, params);
        let targets = rpn_targets(&anchors, &sample.boxes, cfg.rpn_fg_iou, cfg.rpn_bg_iou);
        let pos: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.0 == 1)
            .map(|(i, _)| i)
            .collect();
        let neg: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.0 == 0)
            .map(|(i, _)| i)
            .collect();
        let n_pos = pos.len().min(cfg.rpn_batch / 2);
        let pos_sel = pick(&mut rng, pos.len(), n_pos);
        let n_neg = neg.len().min(cfg.rpn_batch - n_pos);
        let neg_sel = pick(&mut rng, neg.len(), n_neg);

        let n_anchors_per_cell = params.rpn.num_anchors();
        let mut dmap = Array3::zeros(rpn_cache.map.dim());
        let n_sampled = (n_pos + n_neg).max(1) as f64;
        let n_pos_f = n_pos.max(1) as f64;

        let coords = |flat: usize| -> (usize, usize, usize) {
            let a = flat % n_anchors_per_cell;
            let cell = flat / n_anchors_per_cell;
            (a, cell / fw, cell % fw)
        };

        let mut obj_loss = 0.0;
        let mut reg_loss = 0.0;
        for (&list_idx, target_val) in pos_sel
            .iter()
            .map(|&k| (&pos[k], 1.0))
            .chain(neg_sel.iter().map(|&k| (&neg[k], 0.0)))
            .map(|(i, t)| (i, t))
        {
            let (a, cy, cx) = coords(list_idx);
            let logit = rpn_cache.map[[a * 5, cy, cx]];
            let (l, dl) = nn::bce_with_logits(logit, target_val);
            obj_loss += l / n_sampled;
            dmap[[a * 5, cy, cx]] += dl / n_sampled;
        }
        for &k in &pos_sel {
            let list_idx = pos[k];
            let (a, cy, cx) = coords(list_idx);
            if let (_, Some(delta)) = &targets[list_idx] {
                let t = [delta.tx, delta.ty, delta.tw, delta.th];
                for c in 0..4 {
                    let pred = rpn_cache.map[[a * 5 + 1 + c, cy, cx]];
                    reg_loss += smooth_l1(pred - t[c]) / n_pos_f;
                    dmap[[a * 5 + 1 + c, cy, cx]] += smooth_l1_grad(pred - t[c]) / n_pos_f;
                }
            }
        }
        parts.rpn_obj = obj_loss;
        parts.rpn_reg = reg_loss;

        let (dfm_rpn, grpn) = params.rpn.backward(&fm.data, &rpn_cache, &dmap);
        grads.rpn.accumulate(&grpn);
        if trainable.backbone {
            dfm += &dfm_rpn;
        }
    }

    if trainable.backbone {
        let bgrads = params.backbone.backward(&bb_cache, &dfm);
        for (acc, g) in grads.backbone.convs.iter_mut().zip(&bgrads) {
            acc.accumulate(g);
        }
    }

    let breakdown = total_loss(
        parts.acl,
        &[parts.reg],
        parts.icls,
        cfg.lambda1,
        cfg.lambda2,
        cfg.lambda3,
    )?;
    parts.total = breakdown.total + parts.rpn_obj + parts.rpn_reg;
    Ok((parts, grads, rfr_grads))
}

fn anchor_list(fh: usize, fw: usize, stride: usize, params: &DetectorParams) -> Vec<BBox> {
    crate::detector::anchor_grid(fh, fw, stride, &params.anchor_scales, &params.anchor_ratios)
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        Cursor { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            use rand::seq::SliceRandom;
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }
}

/// The generic stage loop: streams alternate per batch in round-robin order;
/// gradients are batch-averaged; only `trainable` groups (plus the block when
/// `train_rfr`) receive updates. Recorded losses are the batch means computed
/// with the parameters *before* that step's update.
pub fn run_training(
    params: &mut DetectorParams,
    mut refine: Option<&mut RfrBlock>,
    streams: &mut [SampleStream],
    trainable: Trainable,
    train_rfr: bool,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if streams.is_empty() || streams.iter().any(|s| s.samples.is_empty()) {
        return Err(Error::Config("training requires non-empty sample streams".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut cursors: Vec<Cursor> = streams
        .iter()
        .map(|s| Cursor::new(s.samples.len(), &mut shuffle_rng))
        .collect();

    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, &params.trainable_slices(&trainable));
    let mut rfr_opt = if train_rfr {
        refine
            .as_ref()
            .map(|b| SgdMomentum::new(cfg.lr, cfg.momentum, &b.param_slices()))
    } else {
        None
    };

    let mut history = TrainHistory {
        stream_names: streams.iter().map(|s| s.name.clone()).collect(),
        records: Vec::with_capacity(cfg.steps),
    };

    for step in 0..cfg.steps {
        let s = step % streams.len();
        let stream = &streams[s];
        let batch: Vec<usize> = (0..cfg.batch_size.min(stream.samples.len()))
            .map(|_| cursors[s].next(&mut shuffle_rng))
            .collect();

        let mut gsum = params.zeros_like();
        let mut rfr_gsum = refine.as_deref().map(|b| b.zeros_like());
        let mut acc = LossParts::default();
        for &idx in &batch {
            let seed = mix_seed(cfg.seed, s, step, idx);
            let (parts, g, rg) = forward_backward(
                params,
                refine.as_deref(),
                &stream.samples[idx],
                stream.attention,
                &trainable,
                train_rfr,
                cfg,
                seed,
            )
            .map_err(|e| match e {
                Error::NonFinite { component } => Error::NanLoss { step, component },
                other => other,
            })?;
            acc.add(&parts);
            gsum.accumulate(&g);
            if let (Some(sum), Some(g)) = (rfr_gsum.as_mut(), rg.as_ref()) {
                sum.accumulate(g);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        acc.scale(inv);
        gsum.scale(inv);
        if let Some(sum) = rfr_gsum.as_mut() {
            sum.scale(inv);
        }
        if !acc.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                component: "total".into(),
            });
        }

        opt.step(
            params.trainable_slices_mut(&trainable),
            gsum.trainable_slices(&trainable),
        );
        if let (Some(opt), Some(block), Some(gs)) =
            (rfr_opt.as_mut(), refine.as_deref_mut(), rfr_gsum.as_ref())
        {
            opt.step(block.param_slices_mut(), gs.param_slices());
        }

        history.records.push(StepRecord {
            step,
            stream: s,
            loss: acc,
        });
    }
    Ok(history)
}

/// Trains a detector on one sample set with either plain losses or the
/// attentive classification loss. All parameter groups update (the CAM branch
/// only when present).
pub fn train_detector(
    samples: Vec<TrainSample>,
    params: &mut DetectorParams,
    attention: AttentionMode,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let mut trainable = Trainable::all();
    trainable.cam = params.cam.is_some();
    let mut streams = [SampleStream {
        name: "train".into(),
        samples,
        attention,
    }];
    run_training(params, None, &mut streams, trainable, false, cfg)
}

/// Mean loss over a sample set without updating anything. Uses the same
/// per-sample seeds as training step 0 of stream 0, so on a full batch it
/// reproduces the first recorded training loss.
pub fn evaluate_mean_loss(
    params: &DetectorParams,
    refine: Option<&RfrBlock>,
    samples: &[TrainSample],
    attention: AttentionMode,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    let trainable = Trainable::all();
    for (idx, sample) in samples.iter().enumerate() {
        let seed = mix_seed(cfg.seed, 0, 0, idx);
        let (parts, _, _) = forward_backward(
            params, refine, sample, attention, &trainable, false, cfg, seed,
        )?;
        acc.add(&parts);
    }
    acc.scale(1.0 / samples.len().max(1) as f64);
    Ok(acc)
}
