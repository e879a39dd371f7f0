//! Network assembly: shared Conv1-5 backbone over the M images of a
//! sample, RPN on the central image only, a shared 1x1 conv6 producing
//! S^2*D thin maps per image, channel concatenation into the S^2*D*M
//! fused map, PSROI pooling, and the fc7 head with sibling
//! classification / box-regression outputs.

use super::config::{BackbonePreset, InitScheme, ModelConfig};
use crate::ct::SliceGroup;
use crate::det::{
    assign_rpn_targets, generate_anchors, nms, propose, sample_rois, BBox, Detection, RpnTargets, SampledRois,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{s, softmax_rows, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.to_f64());
        }
        out
    }
}

/// One backbone conv layer (3x3, pad 1), optionally followed by 2x2 pooling.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub pool_after: bool,
}

/// Backbone structure derived from the preset.
#[derive(Clone, Debug)]
pub struct NetPlan {
    pub layers: Vec<ConvLayer>,
    pub width: usize,
    pub stride: usize,
}

pub fn backbone_plan(preset: BackbonePreset) -> NetPlan {
    let mk = |name: &str, cin: usize, cout: usize, pool: bool| ConvLayer {
        name: format!("backbone.{name}"),
        cin,
        cout,
        pool_after: pool,
    };
    match preset {
        BackbonePreset::Tiny => NetPlan {
            layers: vec![
                mk("conv1", 3, 16, true),
                mk("conv2", 16, 32, true),
                mk("conv3", 32, 48, true),
                mk("conv4", 48, 64, false),
            ],
            width: 64,
            stride: 8,
        },
        BackbonePreset::Vgg16Like => {
            let mut layers = Vec::new();
            let blocks: [(&str, usize, usize, bool); 5] = [
                ("conv1", 2, 64, true),
                ("conv2", 2, 128, true),
                ("conv3", 3, 256, true),
                ("conv4", 3, 512, false),
                ("conv5", 3, 512, false),
            ];
            let mut cin = 3;
            for (block, n, cout, pool) in blocks {
                for i in 1..=n {
                    layers.push(mk(&format!("{block}_{i}"), cin, cout, pool && i == n));
                    cin = cout;
                }
            }
            NetPlan { layers, width: 512, stride: 8 }
        }
    }
}

/// The detector: configuration plus trained parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub epoch: u32,
}

impl Model {
    pub fn plan(&self) -> NetPlan {
        backbone_plan(self.cfg.backbone)
    }
}

/// Assemble the parameter set and initialize weights from the seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let plan = backbone_plan(cfg.backbone);
    let a = cfg.anchors.per_cell();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for l in &plan.layers {
        shapes.push((format!("{}.weight", l.name), vec![l.cout, l.cin, 3, 3]));
        shapes.push((format!("{}.bias", l.name), vec![l.cout]));
    }
    shapes.push(("conv6.weight".into(), vec![cfg.conv6_channels(), plan.width, 1, 1]));
    shapes.push(("conv6.bias".into(), vec![cfg.conv6_channels()]));
    shapes.push(("rpn.conv.weight".into(), vec![plan.width, plan.width, 3, 3]));
    shapes.push(("rpn.conv.bias".into(), vec![plan.width]));
    shapes.push(("rpn.cls.weight".into(), vec![2 * a, plan.width, 1, 1]));
    shapes.push(("rpn.cls.bias".into(), vec![2 * a]));
    shapes.push(("rpn.reg.weight".into(), vec![4 * a, plan.width, 1, 1]));
    shapes.push(("rpn.reg.bias".into(), vec![4 * a]));
    shapes.push(("head.fc7.weight".into(), vec![cfg.head_input_width(), cfg.fc7_width]));
    shapes.push(("head.fc7.bias".into(), vec![cfg.fc7_width]));
    shapes.push(("head.cls.weight".into(), vec![cfg.fc7_width, 2]));
    shapes.push(("head.cls.bias".into(), vec![2]));
    shapes.push(("head.reg.weight".into(), vec![cfg.fc7_width, 4]));
    shapes.push(("head.reg.bias".into(), vec![4]));

    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0f32; numel]
        } else {
            let std = init_std(cfg, &name, &shape);
            let dist = Normal::new(0.0f32, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        };
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(Model { cfg: cfg.clone(), params, epoch: 0 })
}

fn init_std(cfg: &ModelConfig, name: &str, shape: &[usize]) -> f32 {
    if name.contains(".reg.") {
        return 0.001;
    }
    if name.contains(".cls.") {
        return 0.01;
    }
    match cfg.init {
        InitScheme::SmallNormal => 0.01,
        InitScheme::HeFeature => {
            let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
            (2.0 / fan_in as f32).sqrt()
        }
    }
}

/// Tape handles for every parameter of one graph.
pub struct GraphParams {
    ids: HashMap<String, TensorId>,
}

impl GraphParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn override_id(&mut self, name: &str, id: TensorId) {
        self.ids.insert(name.to_string(), id);
    }
}

/// Record every parameter as a tape leaf.
pub fn leaf_params<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> GraphParams {
    let mut ids = HashMap::new();
    for (name, tensor) in store.iter() {
        ids.insert(name.to_string(), tape.leaf(tensor.clone(), trainable));
    }
    GraphParams { ids }
}

/// Intensity normalization applied to every input image: [0,255] -> [-0.5, 0.5].
pub fn normalize_intensity<T: Scalar>(v: f32) -> T {
    s::<T>(v as f64 / 255.0 - 0.5)
}

/// One image of a slice group as a normalized [1,3,H,W] tensor.
pub fn normalized_image<T: Scalar>(group: &SliceGroup, i: usize) -> Tensor<T> {
    let sz = 3 * group.height * group.width;
    let data: Vec<T> = group.data[i * sz..(i + 1) * sz].iter().map(|&v| normalize_intensity::<T>(v)).collect();
    Tensor::from_vec(vec![1, 3, group.height, group.width], data).expect("group image dims")
}

/// Conv1-5 on one image.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    plan: &NetPlan,
    image: TensorId,
) -> Result<TensorId> {
    let sh = tape.value(image).shape().to_vec();
    if sh[2] % plan.stride != 0 || sh[3] % plan.stride != 0 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("input {}x{} not divisible by backbone stride {}", sh[2], sh[3], plan.stride),
        ));
    }
    let mut x = image;
    for layer in &plan.layers {
        x = tape.conv2d(x, p.id(&format!("{}.weight", layer.name)), p.id(&format!("{}.bias", layer.name)), 1, 1)?;
        x = tape.relu(x);
        if layer.pool_after {
            x = tape.max_pool2(x)?;
        }
    }
    Ok(x)
}

/// Conv6: shared 1x1 conv mapping the backbone width to S^2*D thin maps.
pub fn conv6_forward<T: Scalar>(tape: &mut Tape<T>, p: &GraphParams, conv5: TensorId) -> Result<TensorId> {
    tape.conv2d(conv5, p.id("conv6.weight"), p.id("conv6.bias"), 1, 0)
}

/// RPN head on the central image's conv5 map: a 3x3 conv + ReLU, then
/// sibling 1x1 convs for 2A scores and 4A deltas. Outputs are reshaped to
/// rows aligned with the anchor order of `generate_anchors`.
pub struct RpnRows {
    pub cls_rows: TensorId,
    pub reg_rows: TensorId,
    pub feat_h: usize,
    pub feat_w: usize,
}

pub fn rpn_forward<T: Scalar>(tape: &mut Tape<T>, p: &GraphParams, conv5: TensorId, anchors_per_cell: usize) -> Result<RpnRows> {
    let mid = tape.conv2d(conv5, p.id("rpn.conv.weight"), p.id("rpn.conv.bias"), 1, 1)?;
    let mid = tape.relu(mid);
    let cls = tape.conv2d(mid, p.id("rpn.cls.weight"), p.id("rpn.cls.bias"), 1, 0)?;
    let reg = tape.conv2d(mid, p.id("rpn.reg.weight"), p.id("rpn.reg.bias"), 1, 0)?;
    let sh = tape.value(cls).shape().to_vec();
    let (feat_h, feat_w) = (sh[2], sh[3]);
    // (1, A*k, h, w) -> (1, h, w, A*k) -> (h*w*A, k): row r = cell*A + a
    let n_rows = feat_h * feat_w * anchors_per_cell;
    let cls_p = tape.permute(cls, &[0, 2, 3, 1])?;
    let cls_rows = tape.reshape(cls_p, vec![n_rows, 2])?;
    let reg_p = tape.permute(reg, &[0, 2, 3, 1])?;
    let reg_rows = tape.reshape(reg_p, vec![n_rows, 4])?;
    Ok(RpnRows { cls_rows, reg_rows, feat_h, feat_w })
}

/// PSROI pooling plus the fc7 head; returns (cls logits [R,2], deltas [R,4]).
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    cfg: &ModelConfig,
    fused: TensorId,
    rois: &[BBox],
) -> Result<(TensorId, TensorId)> {
    let pooled = crate::det::psroi_pool(tape, fused, rois, cfg.s, cfg.anchors.stride)?;
    let flat = tape.reshape(pooled, vec![rois.len(), cfg.head_input_width()])?;
    let fc7 = tape.fully_connected(flat, p.id("head.fc7.weight"), p.id("head.fc7.bias"))?;
    let fc7 = tape.relu(fc7);
    let cls = tape.fully_connected(fc7, p.id("head.cls.weight"), p.id("head.cls.bias"))?;
    let reg = tape.fully_connected(fc7, p.id("head.reg.weight"), p.id("head.reg.bias"))?;
    Ok((cls, reg))
}

/// Backbone over all M images plus RPN rows from the central image.
pub struct RpnStage {
    pub conv5_maps: Vec<TensorId>,
    pub rpn: RpnRows,
}

pub fn run_backbone_rpn<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    plan: &NetPlan,
    cfg: &ModelConfig,
    group: &SliceGroup,
) -> Result<RpnStage> {
    if group.m != cfg.m {
        return Err(Error::invalid("forward", format!("sample has M={} but model expects M={}", group.m, cfg.m)));
    }
    let mut conv5_maps = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let img = tape.constant(normalized_image::<T>(group, i));
        conv5_maps.push(backbone_forward(tape, p, plan, img)?);
    }
    let rpn = rpn_forward(tape, p, conv5_maps[cfg.m / 2], cfg.anchors.per_cell())?;
    Ok(RpnStage { conv5_maps, rpn })
}

/// Foreground probabilities and deltas per anchor, read off the tape.
pub fn rpn_outputs<T: Scalar>(tape: &Tape<T>, stage: &RpnStage) -> (Vec<f32>, Vec<[f32; 4]>) {
    let probs = softmax_rows(tape.value(stage.rpn.cls_rows));
    let fg: Vec<f32> = probs.data().chunks(2).map(|r| r[1].to_f64() as f32).collect();
    let deltas: Vec<[f32; 4]> = tape
        .value(stage.rpn.reg_rows)
        .data()
        .chunks(4)
        .map(|r| [r[0].to_f64() as f32, r[1].to_f64() as f32, r[2].to_f64() as f32, r[3].to_f64() as f32])
        .collect();
    (fg, deltas)
}

/// Frozen assignment results for one training sample, so a graph can be
/// rebuilt with identical targets (finite-difference checks, loss
/// recomputation fixtures).
#[derive(Clone, Debug)]
pub struct TrainTargets {
    pub anchors: Vec<BBox>,
    pub rpn: RpnTargets,
    pub proposals: Vec<BBox>,
    pub rois: SampledRois,
}

/// The four per-sample loss nodes.
pub struct SampleLosses {
    pub rpn_cls: TensorId,
    pub rpn_reg: TensorId,
    pub head_cls: TensorId,
    pub head_reg: TensorId,
}

/// Forward pass for training: runs the backbone and RPN, derives targets
/// (RPN labels, proposals, sampled ROIs) from the current outputs, and
/// builds all four loss nodes on the tape.
pub fn forward_train_sample<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    plan: &NetPlan,
    cfg: &ModelConfig,
    group: &SliceGroup,
    gt_boxes: &[BBox],
    rng: &mut ChaCha8Rng,
) -> Result<(SampleLosses, TrainTargets)> {
    let stage = run_backbone_rpn(tape, p, plan, cfg, group)?;
    let (scores, deltas) = rpn_outputs(tape, &stage);
    let anchors = generate_anchors(&cfg.anchors, stage.rpn.feat_h, stage.rpn.feat_w);
    let image_size = (group.width as f32, group.height as f32);
    let rpn_t = assign_rpn_targets(&anchors, gt_boxes, image_size, &cfg.rpn_assign, rng);
    let proposals = propose(&scores, &deltas, &anchors, image_size, &cfg.proposal_train);
    let rois = sample_rois(&proposals, gt_boxes, &cfg.roi_sample, rng);
    let targets = TrainTargets { anchors, rpn: rpn_t, proposals, rois };
    let losses = finish_losses(tape, p, cfg, &stage, &targets)?;
    Ok((losses, targets))
}

/// Rebuild the training losses with precomputed targets.
pub fn forward_train_with_targets<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    plan: &NetPlan,
    cfg: &ModelConfig,
    group: &SliceGroup,
    targets: &TrainTargets,
) -> Result<SampleLosses> {
    let stage = run_backbone_rpn(tape, p, plan, cfg, group)?;
    finish_losses(tape, p, cfg, &stage, targets)
}

fn finish_losses<T: Scalar>(
    tape: &mut Tape<T>,
    p: &GraphParams,
    cfg: &ModelConfig,
    stage: &RpnStage,
    targets: &TrainTargets,
) -> Result<SampleLosses> {
    // RPN classification: rows with label -1 are ignored.
    let rpn_cls = tape.softmax_cross_entropy(stage.rpn.cls_rows, &targets.rpn.labels, -1)?;

    // RPN regression: masked to positive anchors.
    let n = targets.rpn.labels.len();
    let mut tgt = vec![T::zero(); n * 4];
    let mut mask = vec![T::zero(); n * 4];
    for (i, &lb) in targets.rpn.labels.iter().enumerate() {
        if lb == 1 {
            for k in 0..4 {
                tgt[i * 4 + k] = s::<T>(targets.rpn.bbox_targets[i][k] as f64);
                mask[i * 4 + k] = T::one();
            }
        }
    }
    let tgt = tape.constant(Tensor::from_vec(vec![n, 4], tgt)?);
    let mask = tape.constant(Tensor::from_vec(vec![n, 4], mask)?);
    let rpn_reg = tape.smooth_l1(stage.rpn.reg_rows, tgt, mask)?;

    // Head over the fused S^2*D*M map.
    let (head_cls, head_reg) = if targets.rois.rois.is_empty() {
        let z1 = tape.constant(Tensor::scalar(T::zero()));
        let z2 = tape.constant(Tensor::scalar(T::zero()));
        (z1, z2)
    } else {
        let mut conv6_maps = Vec::with_capacity(cfg.m);
        for &c5 in &stage.conv5_maps {
            conv6_maps.push(conv6_forward(tape, p, c5)?);
        }
        let fused = tape.concat_channels(&conv6_maps)?;
        let (cls, reg) = head_forward(tape, p, cfg, fused, &targets.rois.rois)?;
        let hc = tape.softmax_cross_entropy(cls, &targets.rois.labels, -1)?;
        let r = targets.rois.rois.len();
        let mut tgt = vec![T::zero(); r * 4];
        let mut msk = vec![T::zero(); r * 4];
        for i in 0..r {
            for k in 0..4 {
                tgt[i * 4 + k] = s::<T>(targets.rois.bbox_targets[i][k] as f64);
                msk[i * 4 + k] = s::<T>(targets.rois.bbox_inside[i][k] as f64);
            }
        }
        let tgt = tape.constant(Tensor::from_vec(vec![r, 4], tgt)?);
        let msk = tape.constant(Tensor::from_vec(vec![r, 4], msk)?);
        let hr = tape.smooth_l1(reg, tgt, msk)?;
        (hc, hr)
    };
    Ok(SampleLosses { rpn_cls, rpn_reg, head_cls, head_reg })
}

/// Per-iteration loss values (averaged over the minibatch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub rpn_cls: f32,
    pub rpn_reg: f32,
    pub head_cls: f32,
    pub head_reg: f32,
    pub total: f32,
}

/// Average the four terms over the minibatch and combine:
/// total = rpn_cls + rpn_reg + head_cls + w * head_reg.
pub fn combine_losses<T: Scalar>(tape: &mut Tape<T>, samples: &[SampleLosses], reg_weight: T) -> Result<(TensorId, LossValues)> {
    assert!(!samples.is_empty());
    let inv = s::<T>(1.0 / samples.len() as f64);
    let mean_of = |tape: &mut Tape<T>, pick: &dyn Fn(&SampleLosses) -> TensorId| -> Result<TensorId> {
        let mut acc = pick(&samples[0]);
        for sample in &samples[1..] {
            acc = tape.add(acc, pick(sample))?;
        }
        Ok(tape.scale(acc, inv))
    };
    let rpn_cls = mean_of(tape, &|l| l.rpn_cls)?;
    let rpn_reg = mean_of(tape, &|l| l.rpn_reg)?;
    let head_cls = mean_of(tape, &|l| l.head_cls)?;
    let head_reg = mean_of(tape, &|l| l.head_reg)?;
    let weighted = tape.scale(head_reg, reg_weight);
    let a = tape.add(rpn_cls, rpn_reg)?;
    let b = tape.add(head_cls, weighted)?;
    let total = tape.add(a, b)?;
    let v = |id: TensorId| tape.value(id).item().to_f64() as f32;
    let values = LossValues {
        rpn_cls: v(rpn_cls),
        rpn_reg: v(rpn_reg),
        head_cls: v(head_cls),
        head_reg: v(head_reg),
        total: v(total),
    };
    Ok((total, values))
}

// ── inference ───────────────────────────────────────────────────────

/// Backbone outputs for one 3-channel image, reusable across neighboring
/// key slices when inferring over a volume.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub conv5: Tensor<f32>,
    pub conv6: Tensor<f32>,
}

/// Conv1-6 on one normalized [1,3,H,W] image.
pub fn compute_image_features(model: &Model, image: &Tensor<f32>) -> Result<ImageFeatures> {
    let plan = model.plan();
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, false);
    let img = tape.constant(image.clone());
    let c5 = backbone_forward(&mut tape, &p, &plan, img)?;
    let c6 = conv6_forward(&mut tape, &p, c5)?;
    Ok(ImageFeatures { conv5: tape.value(c5).clone(), conv6: tape.value(c6).clone() })
}

/// RPN + head on precomputed per-image features; `image_size` is the input
/// image size in pixels.
pub fn detect_from_features(model: &Model, features: &[ImageFeatures], image_size: (f32, f32)) -> Result<Vec<Detection>> {
    if features.len() != model.cfg.m {
        return Err(Error::invalid(
            "detect_from_features",
            format!("expected {} image feature sets, got {}", model.cfg.m, features.len()),
        ));
    }
    let cfg = &model.cfg;
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, false);
    let central = tape.constant(features[cfg.m / 2].conv5.clone());
    let rpn = rpn_forward(&mut tape, &p, central, cfg.anchors.per_cell())?;
    let stage = RpnStage { conv5_maps: vec![central], rpn };
    let (scores, deltas) = rpn_outputs(&tape, &stage);
    let anchors = generate_anchors(&cfg.anchors, stage.rpn.feat_h, stage.rpn.feat_w);
    let proposals = propose(&scores, &deltas, &anchors, image_size, &cfg.proposal_test);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let conv6_ids: Vec<TensorId> = features.iter().map(|f| tape.constant(f.conv6.clone())).collect();
    let fused = tape.concat_channels(&conv6_ids)?;
    let (cls, reg) = head_forward(&mut tape, &p, cfg, fused, &proposals)?;
    let probs = softmax_rows(tape.value(cls));
    let deltas = tape.value(reg);
    let mut dets = Vec::new();
    for (i, roi) in proposals.iter().enumerate() {
        let score = probs.data()[i * 2 + 1];
        if score < cfg.min_score {
            continue;
        }
        let d = [
            deltas.data()[i * 4],
            deltas.data()[i * 4 + 1],
            deltas.data()[i * 4 + 2],
            deltas.data()[i * 4 + 3],
        ];
        let b = crate::det::decode_bbox(&d, roi).clip(image_size.0, image_size.1);
        if b.is_valid() {
            dets.push(Detection { bbox: b, score });
        }
    }
    Ok(nms(&dets, cfg.final_nms))
}

/// Inference on one slice group: proposals -> head scores -> decode ->
/// NMS, with the softmax lesion probability as the detection score.
pub fn forward_infer(model: &Model, group: &SliceGroup) -> Result<Vec<Detection>> {
    if group.m != model.cfg.m {
        return Err(Error::invalid("forward_infer", format!("sample M={} vs model M={}", group.m, model.cfg.m)));
    }
    let mut features = Vec::with_capacity(group.m);
    for i in 0..group.m {
        features.push(compute_image_features(model, &normalized_image::<f32>(group, i))?);
    }
    detect_from_features(model, &features, (group.width as f32, group.height as f32))
}
