//! Dual-branch detector: shared conv extractor + proposal head, and two
//! FC detection branches (source-adaptive and target-like) with optional
//! proposal cross-attention on the query branch.

use thiserror::Error;

use super::boxes::{nms, BBox, Detection};
use crate::image::{ImageError, ImageF};
use crate::perceiver::{
    iterative_perceive, AttentionMode, EncoderStage, KvChain, PerceiverConfig, PerceiverError,
    PerceiverParams,
};
use crate::rng::{derive_seed, rng_from, sample_normal};
use crate::tensor::{Parameter, PixelRect, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Perceiver(#[from] PerceiverError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Architecture knobs. `proposal_dim()` must match the perceiver encoders'
/// input width, which `DualBranchModel::new` checks once.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub conv_strides: [usize; 3],
    pub anchor_size: f64,
    pub top_k: usize,
    pub pool_bins: usize,
    pub num_classes: usize,
    pub perceiver: PerceiverConfig,
    pub attention_mode: AttentionMode,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_size: 64,
            in_channels: 3,
            conv_channels: [8, 16, 32],
            conv_strides: [2, 2, 1],
            anchor_size: 20.0,
            top_k: 32,
            pool_bins: 2,
            num_classes: 3,
            perceiver: PerceiverConfig::default(),
            attention_mode: AttentionMode::Asym,
        }
    }
}

impl ModelDims {
    pub fn feat_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    pub fn feat_size(&self) -> usize {
        let mut s = self.image_size;
        for st in self.conv_strides {
            s = s.div_ceil(st);
        }
        s
    }

    pub fn num_anchors(&self) -> usize {
        self.feat_size() * self.feat_size()
    }

    /// Pooled proposal feature width: channels x bins^2.
    pub fn proposal_dim(&self) -> usize {
        self.conv_channels[2] * self.pool_bins * self.pool_bins
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
    pub cls_w: Parameter,
    pub cls_b: Parameter,
    pub box_w: Parameter,
    pub box_b: Parameter,
}

impl BranchParams {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
            &self.cls_w, &self.cls_b, &self.box_w, &self.box_b,
        ]
    }

    pub fn stage1(&self) -> EncoderStage<'_> {
        EncoderStage { weight: &self.fc1_w, bias: &self.fc1_b }
    }

    pub fn stage2(&self) -> EncoderStage<'_> {
        EncoderStage { weight: &self.fc2_w, bias: &self.fc2_b }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Sa,
    Tl,
}

#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub dims: ModelDims,
    pub convs: Vec<ConvLayer>,
    pub rpn: ConvLayer,
    pub sa: BranchParams,
    pub tl: BranchParams,
    pub perceiver: PerceiverParams,
    /// Present only in symmetric attention mode.
    pub perceiver_tl: Option<PerceiverParams>,
    frozen: bool,
}

struct ParamFactory {
    frozen: bool,
}

impl ParamFactory {
    fn normal(&self, name: String, shape: &[usize], scale: f64, seed: u64) -> Parameter {
        let mut rng = rng_from(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| scale * sample_normal(&mut rng)).collect();
        Parameter::with_grad_flag(name, shape, data, !self.frozen).expect("consistent shape")
    }

    fn constant(&self, name: String, shape: &[usize], value: f64) -> Parameter {
        let n: usize = shape.iter().product();
        Parameter::with_grad_flag(name, shape, vec![value; n], !self.frozen).expect("consistent shape")
    }
}

impl DualBranchModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, DetectorError> {
        Self::build(dims, seed, false)
    }

    fn build(dims: ModelDims, seed: u64, frozen: bool) -> Result<Self, DetectorError> {
        dims.perceiver.validate()?;
        if dims.image_size % dims.feat_stride() != 0 {
            return Err(DetectorError::Contract(format!(
                "image size {} not divisible by feature stride {}",
                dims.image_size,
                dims.feat_stride()
            )));
        }
        let f = ParamFactory { frozen };
        let mut sid = 0u64;
        let mut next = || {
            sid += 1;
            derive_seed(seed, sid)
        };

        let mut convs = Vec::new();
        let mut cin = dims.in_channels;
        for (i, (&cout, &stride)) in dims.conv_channels.iter().zip(&dims.conv_strides).enumerate() {
            let scale = (2.0 / (cin * 9) as f64).sqrt();
            convs.push(ConvLayer {
                weight: f.normal(format!("extractor.conv{}.weight", i + 1), &[cout, cin, 3, 3], scale, next()),
                bias: f.constant(format!("extractor.conv{}.bias", i + 1), &[cout], 0.0),
                stride,
                pad: 1,
            });
            cin = cout;
        }
        // 1x1 head: channel 0 objectness, channels 1-4 box deltas.
        let rpn = ConvLayer {
            weight: f.normal("extractor.rpn.weight".into(), &[5, cin, 1, 1], 0.01, next()),
            bias: {
                let p = f.constant("extractor.rpn.bias".into(), &[5], 0.0);
                // Background-heavy prior for the objectness logit.
                p.apply_update(|d| d[0] = -2.0);
                p
            },
            stride: 1,
            pad: 0,
        };

        let d_in = dims.proposal_dim();
        let d_model = dims.perceiver.d_model;
        let branch = |name: &str, f: &ParamFactory, s1: u64, s2: u64, s3: u64, s4: u64| BranchParams {
            fc1_w: f.normal(format!("{name}.fc1.weight"), &[d_in, d_model], (2.0 / d_in as f64).sqrt(), s1),
            fc1_b: f.constant(format!("{name}.fc1.bias"), &[d_model], 0.0),
            fc2_w: f.normal(format!("{name}.fc2.weight"), &[d_model, d_model], (2.0 / d_model as f64).sqrt(), s2),
            fc2_b: f.constant(format!("{name}.fc2.bias"), &[d_model], 0.0),
            cls_w: f.normal(format!("{name}.cls.weight"), &[d_model, dims.num_classes + 1], 0.01, s3),
            cls_b: f.constant(format!("{name}.cls.bias"), &[dims.num_classes + 1], 0.0),
            box_w: f.normal(format!("{name}.box.weight"), &[d_model, 4], 0.01, s4),
            box_b: f.constant(format!("{name}.box.bias"), &[4], 0.0),
        };
        let sa = branch("sa_branch", &f, next(), next(), next(), next());
        let tl = branch("tl_branch", &f, next(), next(), next(), next());

        let perceiver = PerceiverParams::new("perceiver", dims.perceiver, next(), frozen)?;
        let perceiver_tl = if dims.attention_mode == AttentionMode::Sym {
            Some(PerceiverParams::new("perceiver_tl", dims.perceiver, next(), frozen)?)
        } else {
            None
        };

        Ok(DualBranchModel { dims, convs, rpn, sa, tl, perceiver, perceiver_tl, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// All parameters in a stable order; names are unique.
    pub fn named_parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.rpn.weight);
        out.push(&self.rpn.bias);
        out.extend(self.sa.parameters());
        out.extend(self.tl.parameters());
        out.extend(self.perceiver.parameters());
        if let Some(p) = &self.perceiver_tl {
            out.extend(p.parameters());
        }
        out
    }

    pub fn zero_grad(&self) {
        for p in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Structural copy with the same values; `frozen` controls whether the
    /// copy participates in backward passes.
    pub fn deep_clone(&self, frozen: bool) -> Self {
        let copy = Self::build(self.dims, 0, frozen).expect("dims already validated");
        for (dst, src) in copy.named_parameters().iter().zip(self.named_parameters()) {
            debug_assert_eq!(dst.name(), src.name());
            dst.set_values(&src.values());
        }
        copy
    }

    /// Copy values from another model with an identical parameter set.
    pub fn copy_values_from(&self, other: &Self) -> Result<(), DetectorError> {
        let dst = self.named_parameters();
        let src = other.named_parameters();
        if dst.len() != src.len() {
            return Err(DetectorError::Contract(format!(
                "parameter sets differ: {} vs {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.iter().zip(src) {
            if d.name() != s.name() {
                return Err(DetectorError::Contract(format!(
                    "parameter name mismatch: {} vs {}",
                    d.name(),
                    s.name()
                )));
            }
            d.set_values(&s.values());
        }
        Ok(())
    }
}

/// Everything the proposal stage produces for one image.
pub struct RpnForward {
    /// Final conv feature map `[C, F, F]`.
    pub feat_map: Tensor,
    /// Objectness logits `[A, 1]`, anchor-major (row y, then x).
    pub obj_logits: Tensor,
    /// Box deltas `[A, 4]`.
    pub deltas: Tensor,
    pub anchors: Vec<BBox>,
}

/// A scored region with its pooled feature vector.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub feature: Vec<f64>,
}

pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    /// Differentiable pooled features `[K, D]`.
    pub features: Tensor,
    pub rpn: RpnForward,
}

/// The discrete half of proposal extraction: chosen boxes, their scores, and
/// integer pooling windows. Constant with respect to parameters.
#[derive(Clone, Debug)]
pub struct ProposalPlan {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
    pub windows: Vec<Vec<PixelRect>>,
}

pub struct BranchOutput {
    pub class_logits: Tensor,
    pub box_deltas: Tensor,
}

pub fn image_to_tensor(img: &ImageF) -> Tensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        data.extend(img.channel_plane(ci));
    }
    Tensor::from_vec(&[c, h, w], data, false).expect("image dims are consistent")
}

impl DualBranchModel {
    pub fn rpn_forward(&self, image: &ImageF) -> Result<RpnForward, DetectorError> {
        if image.height() != self.dims.image_size || image.width() != self.dims.image_size {
            return Err(DetectorError::Contract(format!(
                "image {}x{} does not match configured size {}",
                image.height(),
                image.width(),
                self.dims.image_size
            )));
        }
        let mut x = image_to_tensor(image);
        for conv in &self.convs {
            x = x.conv2d(conv.weight.tensor(), conv.bias.tensor(), conv.stride, conv.pad)?.relu();
        }
        let head = x.conv2d(self.rpn.weight.tensor(), self.rpn.bias.tensor(), 1, 0)?;
        let f = self.dims.feat_size();
        let flat = head.reshape(&[5, f * f])?.transpose()?;
        let obj_logits = flat.slice_cols(0, 1)?;
        let deltas = flat.slice_cols(1, 5)?;

        let stride = self.dims.feat_stride() as f64;
        let a = self.dims.anchor_size;
        let mut anchors = Vec::with_capacity(f * f);
        for iy in 0..f {
            for ix in 0..f {
                let cx = (ix as f64 + 0.5) * stride;
                let cy = (iy as f64 + 0.5) * stride;
                anchors.push(BBox::new(cx - a / 2.0, cy - a / 2.0, a, a));
            }
        }
        Ok(RpnForward { feat_map: x, obj_logits, deltas, anchors })
    }

    /// Pick the top-K anchors by objectness and fix the decoded boxes and
    /// pooling windows. Boxes are constants from here on (no gradient flows
    /// through box coordinates), matching the usual two-stage training setup.
    pub fn plan_proposals(&self, rpn: &RpnForward) -> ProposalPlan {
        let size = self.dims.image_size as f64;
        let probs: Vec<f64> = rpn.obj_logits.to_vec().iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        let deltas = rpn.deltas.to_vec();

        let mut order: Vec<usize> = (0..rpn.anchors.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(self.dims.top_k);

        let mut boxes = Vec::with_capacity(order.len());
        let mut objectness = Vec::with_capacity(order.len());
        for &i in &order {
            let decoded = apply_deltas(&rpn.anchors[i], &deltas[i * 4..(i + 1) * 4]);
            boxes.push(clip_box(&decoded, size, size));
            objectness.push(probs[i]);
        }
        let windows: Vec<Vec<PixelRect>> = boxes
            .iter()
            .map(|b| pooling_windows(b, self.dims.feat_stride() as f64, self.dims.feat_size(), self.dims.pool_bins))
            .collect();
        ProposalPlan { boxes, objectness, windows }
    }

    /// Differentiable feature pooling for a fixed proposal plan.
    pub fn pool_plan_features(&self, feat_map: &Tensor, plan: &ProposalPlan) -> Result<Tensor, DetectorError> {
        Ok(feat_map.box_avg_pool(&plan.windows)?)
    }

    /// Top-K proposals by objectness with box-aligned average-pooled features.
    pub fn extract_proposals(&self, image: &ImageF) -> Result<ProposalSet, DetectorError> {
        let rpn = self.rpn_forward(image)?;
        let plan = self.plan_proposals(&rpn);
        let features = self.pool_plan_features(&rpn.feat_map, &plan)?;
        let feat_vals = features.to_vec();
        let d = self.dims.proposal_dim();
        let proposals = plan
            .boxes
            .iter()
            .zip(&plan.objectness)
            .enumerate()
            .map(|(k, (&bbox, &objectness))| Proposal {
                bbox,
                objectness,
                feature: feat_vals[k * d..(k + 1) * d].to_vec(),
            })
            .collect();
        Ok(ProposalSet { proposals, features, rpn })
    }

    /// Per-proposal class logits and box deltas from one branch.
    ///
    /// With `use_perceiver` the query branch attends target-like context at
    /// both encoder depths; the key/value chain is derived from the shared
    /// proposal features through the other branch's encoders (or the query
    /// chain itself in self-attention mode).
    pub fn branch_forward(
        &self,
        branch: BranchKind,
        features: &Tensor,
        boxes: &[BBox],
        use_perceiver: bool,
    ) -> Result<BranchOutput, DetectorError> {
        let params = match branch {
            BranchKind::Sa => &self.sa,
            BranchKind::Tl => &self.tl,
        };
        let hidden = if use_perceiver {
            if boxes.len() != features.shape()[0] {
                return Err(DetectorError::Contract(format!(
                    "{} boxes for {} proposal rows",
                    boxes.len(),
                    features.shape()[0]
                )));
            }
            let (perceiver, kv) = match (branch, self.dims.attention_mode) {
                (BranchKind::Sa, AttentionMode::Asym) | (BranchKind::Sa, AttentionMode::Sym) => (
                    &self.perceiver,
                    KvChain::Cross { stages: [self.tl.stage1(), self.tl.stage2()] },
                ),
                (BranchKind::Sa, AttentionMode::SelfAttn) => (&self.perceiver, KvChain::SelfChain),
                (BranchKind::Tl, AttentionMode::Sym) => {
                    let p = self.perceiver_tl.as_ref().ok_or_else(|| {
                        DetectorError::Contract("symmetric mode without tl perceiver".into())
                    })?;
                    (p, KvChain::Cross { stages: [self.sa.stage1(), self.sa.stage2()] })
                }
                (BranchKind::Tl, _) => {
                    return Err(DetectorError::Contract(
                        "perceiver requested on target-like branch outside symmetric mode".into(),
                    ))
                }
            };
            iterative_perceive(features, boxes, [params.stage1(), params.stage2()], kv, perceiver)?
        } else {
            let h1 = features.matmul(params.fc1_w.tensor())?.add_bias(params.fc1_b.tensor())?.relu();
            h1.matmul(params.fc2_w.tensor())?.add_bias(params.fc2_b.tensor())?.relu()
        };
        let class_logits = hidden.matmul(params.cls_w.tensor())?.add_bias(params.cls_b.tensor())?;
        let box_deltas = hidden.matmul(params.box_w.tensor())?.add_bias(params.box_b.tensor())?;
        Ok(BranchOutput { class_logits, box_deltas })
    }

    /// Inference: proposals through one branch (never the perceiver), decoded
    /// and suppressed.
    pub fn detect(
        &self,
        image: &ImageF,
        branch: BranchKind,
        cfg: &InferenceConfig,
    ) -> Result<Vec<Detection>, DetectorError> {
        let set = self.extract_proposals(image)?;
        let out = self.branch_forward(branch, &set.features, &[], false)?;
        Ok(decode_detections(
            &set.proposals,
            &out.class_logits.to_vec(),
            &out.box_deltas.to_vec(),
            self.dims.num_classes,
            self.dims.image_size as f64,
            cfg,
        ))
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct InferenceConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { score_thresh: 0.05, nms_iou: 0.5, max_detections: 50 }
    }
}

/// Standard box regression decode: center shift scaled by the reference box,
/// log-space extents.
pub fn apply_deltas(reference: &BBox, d: &[f64]) -> BBox {
    let (cx, cy) = reference.center();
    // Cap log-extents so early training cannot produce infinite boxes.
    let dw = d[2].clamp(-4.0, 4.0);
    let dh = d[3].clamp(-4.0, 4.0);
    let ncx = cx + d[0] * reference.w;
    let ncy = cy + d[1] * reference.h;
    let nw = reference.w * dw.exp();
    let nh = reference.h * dh.exp();
    BBox::new(ncx - nw / 2.0, ncy - nh / 2.0, nw, nh)
}

/// Inverse of [`apply_deltas`]: targets that move `reference` onto `gt`.
pub fn encode_deltas(reference: &BBox, gt: &BBox) -> [f64; 4] {
    let (rcx, rcy) = reference.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - rcx) / reference.w,
        (gcy - rcy) / reference.h,
        (gt.w / reference.w).ln(),
        (gt.h / reference.h).ln(),
    ]
}

pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    let x0 = b.x.clamp(0.0, width - 1.0);
    let y0 = b.y.clamp(0.0, height - 1.0);
    let x1 = b.x2().clamp(x0 + 1.0, width);
    let y1 = b.y2().clamp(y0 + 1.0, height);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Integer bin windows of a box on the feature map (bins x bins grid).
fn pooling_windows(b: &BBox, stride: f64, feat_size: usize, bins: usize) -> Vec<PixelRect> {
    let fx0 = b.x / stride;
    let fy0 = b.y / stride;
    let fx1 = b.x2() / stride;
    let fy1 = b.y2() / stride;
    let mut out = Vec::with_capacity(bins * bins);
    for by in 0..bins {
        for bx in 0..bins {
            let ex0 = fx0 + (fx1 - fx0) * bx as f64 / bins as f64;
            let ex1 = fx0 + (fx1 - fx0) * (bx + 1) as f64 / bins as f64;
            let ey0 = fy0 + (fy1 - fy0) * by as f64 / bins as f64;
            let ey1 = fy0 + (fy1 - fy0) * (by + 1) as f64 / bins as f64;
            let x0 = (ex0.floor() as usize).min(feat_size - 1);
            let y0 = (ey0.floor() as usize).min(feat_size - 1);
            let x1 = (ex1.ceil() as usize).clamp(x0 + 1, feat_size);
            let y1 = (ey1.ceil() as usize).clamp(y0 + 1, feat_size);
            out.push(PixelRect { y0, y1, x0, x1 });
        }
    }
    out
}

/// Softmax the class logits, decode class-agnostic box deltas, suppress.
pub fn decode_detections(
    proposals: &[Proposal],
    class_logits: &[f64],
    box_deltas: &[f64],
    num_classes: usize,
    image_size: f64,
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let ncols = num_classes + 1;
    let mut candidates = Vec::new();
    for (k, prop) in proposals.iter().enumerate() {
        let logits = &class_logits[k * ncols..(k + 1) * ncols];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let refined = clip_box(
            &apply_deltas(&prop.bbox, &box_deltas[k * 4..(k + 1) * 4]),
            image_size,
            image_size,
        );
        for c in 0..num_classes {
            let score = exps[c] / z;
            if score >= cfg.score_thresh {
                candidates.push(Detection { bbox: refined, class_id: c, score });
            }
        }
    }
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            image_size: 16,
            conv_channels: [2, 3, 4],
            top_k: 4,
            perceiver: PerceiverConfig { d_model: 8, heads: 2, d_head: 4, d_geo_emb: 16, iterations: 2 },
            ..Default::default()
        }
    }

    fn test_image(seed: u64, size: usize) -> ImageF {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let px: Vec<f64> = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
        ImageF::new(size, size, 3, px).unwrap()
    }

    #[test]
    fn parameter_names_are_unique() {
        let model = DualBranchModel::new(ModelDims::default(), 1).unwrap();
        let names: Vec<&str> = model.named_parameters().iter().map(|p| p.name()).collect();
        let set: HashSet<&str> = names.iter().cloned().collect();
        assert_eq!(set.len(), names.len());
        assert!(set.contains("sa_branch.fc1.weight"));
        assert!(set.contains("extractor.conv1.weight"));
        assert!(set.contains("perceiver.iter0.head0.wq"));
    }

    #[test]
    fn default_proposal_dim_is_128() {
        let dims = ModelDims::default();
        assert_eq!(dims.proposal_dim(), 128);
        assert_eq!(dims.feat_size(), 16);
        assert_eq!(dims.feat_stride(), 4);
    }

    #[test]
    fn untrained_model_emits_exactly_top_k_valid_proposals() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 3).unwrap();
        let img = test_image(5, dims.image_size);
        let set = model.extract_proposals(&img).unwrap();
        assert_eq!(set.proposals.len(), dims.top_k);
        assert_eq!(set.features.shape(), &[dims.top_k, dims.proposal_dim()]);
        for p in &set.proposals {
            assert!(p.bbox.w > 0.0 && p.bbox.h > 0.0);
            assert!(p.bbox.x >= 0.0 && p.bbox.y >= 0.0);
            assert!(p.bbox.x2() <= dims.image_size as f64 + 1e-9);
            assert!(p.bbox.y2() <= dims.image_size as f64 + 1e-9);
            assert!((0.0..=1.0).contains(&p.objectness));
            assert!(p.feature.iter().all(|v| v.is_finite()));
            assert_eq!(p.feature.len(), dims.proposal_dim());
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 7).unwrap();
        let img = test_image(9, dims.image_size);
        let a = model.extract_proposals(&img).unwrap();
        let b = model.extract_proposals(&img).unwrap();
        for (pa, pb) in a.proposals.iter().zip(&b.proposals) {
            assert_eq!(pa.bbox, pb.bbox);
            assert_eq!(pa.objectness, pb.objectness);
            assert_eq!(pa.feature, pb.feature);
        }
    }

    #[test]
    fn zero_features_and_zero_heads_give_uniform_logits() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 11).unwrap();
        // Zero out the classification head.
        model.sa.cls_w.apply_update(|d| d.fill(0.0));
        model.sa.cls_b.apply_update(|d| d.fill(0.0));
        let features = Tensor::zeros(&[4, dims.proposal_dim()]);
        let out = model.branch_forward(BranchKind::Sa, &features, &[], false).unwrap();
        let logits = out.class_logits.to_vec();
        assert!(logits.iter().all(|&l| l == 0.0), "uniform (all-equal) logits");
    }

    #[test]
    fn sa_and_tl_agree_when_parameters_match() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 13).unwrap();
        // Copy SA params into TL.
        for (dst, src) in model.tl.parameters().iter().zip(model.sa.parameters()) {
            dst.set_values(&src.values());
        }
        let img = test_image(15, dims.image_size);
        let set = model.extract_proposals(&img).unwrap();
        let a = model.branch_forward(BranchKind::Sa, &set.features, &[], false).unwrap();
        let b = model.branch_forward(BranchKind::Tl, &set.features, &[], false).unwrap();
        assert_eq!(a.class_logits.to_vec(), b.class_logits.to_vec());
        assert_eq!(a.box_deltas.to_vec(), b.box_deltas.to_vec());
    }

    #[test]
    fn zero_projection_perceiver_matches_plain_forward() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 17).unwrap();
        model.perceiver.zero_output_projections();
        let img = test_image(19, dims.image_size);
        let set = model.extract_proposals(&img).unwrap();
        let boxes: Vec<BBox> = set.proposals.iter().map(|p| p.bbox).collect();
        let with = model.branch_forward(BranchKind::Sa, &set.features, &boxes, true).unwrap();
        let without = model.branch_forward(BranchKind::Sa, &set.features, &[], false).unwrap();
        let max_err = with
            .class_logits
            .to_vec()
            .iter()
            .zip(without.class_logits.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12, "residual identity, err {max_err}");
    }

    #[test]
    fn perceiver_on_tl_branch_requires_symmetric_mode() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 21).unwrap();
        let features = Tensor::zeros(&[2, dims.proposal_dim()]);
        let boxes = vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(4.0, 4.0, 4.0, 4.0)];
        let err = model.branch_forward(BranchKind::Tl, &features, &boxes, true);
        assert!(matches!(err, Err(DetectorError::Contract(_))));

        let sym = ModelDims { attention_mode: AttentionMode::Sym, ..dims };
        let model = DualBranchModel::new(sym, 21).unwrap();
        assert!(model.branch_forward(BranchKind::Tl, &features, &boxes, true).is_ok());
    }

    #[test]
    fn delta_encode_decode_round_trip() {
        let anchor = BBox::new(10.0, 12.0, 16.0, 16.0);
        let gt = BBox::new(13.0, 9.0, 20.0, 24.0);
        let t = encode_deltas(&anchor, &gt);
        let back = apply_deltas(&anchor, &t);
        assert!((back.x - gt.x).abs() < 1e-9);
        assert!((back.y - gt.y).abs() < 1e-9);
        assert!((back.w - gt.w).abs() < 1e-9);
        assert!((back.h - gt.h).abs() < 1e-9);
    }

    #[test]
    fn wrong_image_size_is_a_contract_error() {
        let model = DualBranchModel::new(tiny_dims(), 23).unwrap();
        let img = test_image(25, 32);
        assert!(matches!(
            model.rpn_forward(&img),
            Err(DetectorError::Contract(_))
        ));
    }

    #[test]
    fn frozen_clone_gets_no_gradients() {
        let dims = tiny_dims();
        let model = DualBranchModel::new(dims, 27).unwrap();
        let teacher = model.deep_clone(true);
        assert!(teacher.is_frozen());
        let img = test_image(29, dims.image_size);
        let set = teacher.extract_proposals(&img).unwrap();
        let out = teacher.branch_forward(BranchKind::Sa, &set.features, &[], false).unwrap();
        // The whole graph is constant, so backward on it is impossible by
        // construction; check that nothing requires gradients.
        assert!(!out.class_logits.requires_grad());
        for p in teacher.named_parameters() {
            assert!(!p.requires_grad());
            assert!(p.grad().is_none());
        }
    }
}
