//! Residual feature refinement: a light three-conv block applied to pooled
//! RoI features, `fhat = f * t + f` with `t` the block output. The final conv
//! is zero-initialized so the block starts as the identity; stage-3 training
//! keeps the whole detector frozen and adapts only the block on alternating
//! target/web batches.

use ndarray::Array3;
use rand::Rng;

use crate::checkpoint;
use crate::detector::train::{
    run_training, AttentionMode, SampleStream, TrainConfig, TrainHistory, TrainSample,
};
use crate::detector::{detect, DetectorParams, InferenceConfig, Trainable};
use crate::datamodel::Detection;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};

/// Three 3x3 convs with two interleaved ReLUs; input and output channel
/// counts are equal and the spatial shape is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct RfrBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl RfrBlock {
    /// `mid` is the bottleneck width; the final conv starts at zero so the
    /// block is the identity map until trained.
    pub fn new(channels: usize, mid: usize, rng: &mut impl Rng) -> Self {
        RfrBlock {
            conv1: Conv2d::new(channels, mid, 3, 1, 1, rng),
            conv2: Conv2d::new(mid, mid, 3, 1, 1, rng),
            conv3: Conv2d::zeros(mid, channels, 3, 1, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.w.dim().1
    }

    pub fn zeros_like(&self) -> Self {
        RfrBlock {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, other: &RfrBlock) {
        self.conv1.accumulate(&other.conv1);
        self.conv2.accumulate(&other.conv2);
        self.conv3.accumulate(&other.conv3);
    }

    pub fn scale(&mut self, s: f64) {
        self.conv1.scale(s);
        self.conv2.scale(s);
        self.conv3.scale(s);
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv1.param_slices();
        v.extend(self.conv2.param_slices());
        v.extend(self.conv3.param_slices());
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.param_slices_mut();
        v.extend(self.conv2.param_slices_mut());
        v.extend(self.conv3.param_slices_mut());
        v
    }
}

/// Forward cache for the backward pass.
pub struct RfrCache {
    pub pre1: Array3<f64>,
    pub act1: Array3<f64>,
    pub pre2: Array3<f64>,
    pub act2: Array3<f64>,
    /// The residual multiplier `t`.
    pub t: Array3<f64>,
}

/// The residual combination: `fhat = f (*) t (+) f`, elementwise.
pub fn residual_combine(f: &Array3<f64>, t: &Array3<f64>) -> Array3<f64> {
    f * t + f
}

pub fn rfr_forward_cached(f: &Array3<f64>, block: &RfrBlock) -> Result<(Array3<f64>, RfrCache)> {
    let in_ch = f.dim().0;
    if in_ch != block.channels() {
        return Err(Error::ShapeMismatch(format!(
            "refinement block expects {} channels, got {in_ch}",
            block.channels()
        )));
    }
    let pre1 = block.conv1.forward(f);
    let act1 = nn::relu3(&pre1);
    let pre2 = block.conv2.forward(&act1);
    let act2 = nn::relu3(&pre2);
    let t = block.conv3.forward(&act2);
    let fhat = residual_combine(f, &t);
    Ok((
        fhat,
        RfrCache {
            pre1,
            act1,
            pre2,
            act2,
            t,
        },
    ))
}

/// Refines an RoI feature tensor: `fhat = f * t(f) + f`.
pub fn rfr_forward(f: &Array3<f64>, block: &RfrBlock) -> Result<Array3<f64>> {
    rfr_forward_cached(f, block).map(|(fhat, _)| fhat)
}

/// Backward through the block given `dloss/dfhat`. Returns the input-feature
/// gradient and block parameter gradients.
pub fn rfr_backward(
    f: &Array3<f64>,
    block: &RfrBlock,
    cache: &RfrCache,
    gfhat: &Array3<f64>,
) -> (Array3<f64>, RfrBlock) {
    // fhat = f*t + f: direct path df = g*(t+1), residual path dt = g*f
    let gf_direct = gfhat * &(&cache.t + 1.0);
    let dt = gfhat * f;
    let (dact2, g3) = block.conv3.backward(&cache.act2, &dt);
    let dpre2 = nn::relu3_backward(&cache.pre2, &dact2);
    let (dact1, g2) = block.conv2.backward(&cache.act1, &dpre2);
    let dpre1 = nn::relu3_backward(&cache.pre1, &dact1);
    let (gf_block, g1) = block.conv1.backward(f, &dpre1);
    (
        gf_direct + gf_block,
        RfrBlock {
            conv1: g1,
            conv2: g2,
            conv3: g3,
        },
    )
}

/// Stage-3 state: the frozen web detector, the trainable block, and the two
/// alternating data streams.
pub struct RfrTrainState {
    pub detector: DetectorParams,
    pub block: RfrBlock,
    /// Target-domain images; must contain base-class objects only.
    pub target_stream: Vec<TrainSample>,
    pub web_stream: Vec<TrainSample>,
}

/// Trains only the refinement block with the detector frozen, alternating
/// one target batch with one web batch. Target batches use plain detector
/// losses (uniform attention); web batches use the attentive loss. Aborts if
/// the frozen detector's digest changes.
pub fn rfr_train(state: &mut RfrTrainState, cfg: &TrainConfig) -> Result<TrainHistory> {
    let digest_before = checkpoint::detector_digest(&state.detector);
    let mut streams = vec![
        SampleStream {
            name: "target".into(),
            samples: std::mem::take(&mut state.target_stream),
            attention: AttentionMode::Uniform,
        },
        SampleStream {
            name: "web".into(),
            samples: std::mem::take(&mut state.web_stream),
            attention: AttentionMode::Cam,
        },
    ];
    // detector fully frozen; the block is in the forward path for both domains
    let mut rpn_free = cfg.clone();
    rpn_free.include_rpn_loss = false;
    let history = run_training(
        &mut state.detector,
        Some(&mut state.block),
        &mut streams,
        Trainable::none(),
        true,
        &rpn_free,
    );
    state.web_stream = streams.pop().unwrap().samples;
    state.target_stream = streams.pop().unwrap().samples;
    let history = history?;
    let digest_after = checkpoint::detector_digest(&state.detector);
    if digest_before != digest_after {
        return Err(Error::FrozenParamsChanged {
            context: "refinement training".into(),
        });
    }
    Ok(history)
}

/// Digest of the detection head only (classifier + regressor linear layers).
pub fn head_digest(params: &DetectorParams) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for slice in params
        .roi
        .cls
        .param_slices()
        .into_iter()
        .chain(params.roi.reg.param_slices())
    {
        for v in slice {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

/// The fine-tuning baseline: all feature layers train while the detection
/// head (classifier + regressor) stays frozen; no residual block. Aborts if
/// the head digest changes.
pub fn finetune_all(
    params: &mut DetectorParams,
    target_stream: Vec<TrainSample>,
    web_stream: Vec<TrainSample>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let digest_before = head_digest(params);
    let mut streams = vec![
        SampleStream {
            name: "target".into(),
            samples: target_stream,
            attention: AttentionMode::Uniform,
        },
        SampleStream {
            name: "web".into(),
            samples: web_stream,
            attention: AttentionMode::Cam,
        },
    ];
    let history = run_training(
        params,
        None,
        &mut streams,
        Trainable::feature_layers(),
        false,
        cfg,
    )?;
    if head_digest(params) != digest_before {
        return Err(Error::FrozenParamsChanged {
            context: "fine-tuning baseline".into(),
        });
    }
    Ok(history)
}

/// Deployable bundle: web detector weights plus an optional refinement block
/// inserted between RoI feature extraction and the head.
#[derive(Debug, Clone)]
pub struct AssembledDetector {
    pub params: DetectorParams,
    pub refine: Option<RfrBlock>,
}

pub fn assemble_final_detector(web_params: DetectorParams, block: Option<RfrBlock>) -> AssembledDetector {
    AssembledDetector {
        params: web_params,
        refine: block,
    }
}

impl AssembledDetector {
    pub fn detect(&self, image: &Array3<f64>, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        detect(image, &self.params, self.refine.as_ref(), cfg)
    }
}
