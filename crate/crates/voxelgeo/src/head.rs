//! Multiscale detection tower and the anchor-free volumetric head: per
//! location it predicts class logits, a centerness logit and an 8-channel
//! box code, supervised through the four positive-sample rules and the
//! classification/centerness/box losses.
//!
//! The box code is `(dx, dy, dz, ln w, ln h, ln l, sin yaw, cos yaw)`:
//! eight channels realizing the 7-DoF box, with sin/cos sidestepping yaw
//! wraparound in regression.

use crate::boxes::{rotated_iou, OrientedBox};
use crate::shaping::focal_loss;
use crate::tensor::layers::{ConvBnRelu, ConvBnReluCtx, LinearCtx, LinearLayer, ParamVisit};
use crate::tensor::ops::sigmoid;
use crate::tensor::{Tensor, TensorError};
use crate::volume::{VolumeError, VoxelGridSpec};
use rand::Rng;

pub const REG_CHANNELS: usize = 8;

/// Finite-difference step for the rotated-IoU box-loss gradient (the one
/// semi-numeric gradient in the crate; everything upstream is analytic).
const BOX_GRAD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct TowerConfig {
    /// Number of scales; extents halve per scale.
    pub scales: usize,
    /// Feature channels carried at every scale.
    pub channels: usize,
    pub bn_epsilon: f64,
}

impl TowerConfig {
    pub fn new(scales: usize, channels: usize) -> Self {
        TowerConfig {
            scales,
            channels,
            bn_epsilon: crate::tensor::ops::DEFAULT_BN_EPSILON,
        }
    }
}

/// Feature volumes at every scale; scale `i` has voxel size `base * 2^i`.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub volumes: Vec<Tensor>,
    pub specs: Vec<VoxelGridSpec>,
}

/// Grid specs of successively halved scales.
pub fn pyramid_specs(base: &VoxelGridSpec, scales: usize) -> Result<Vec<VoxelGridSpec>, VolumeError> {
    let mut specs = vec![base.clone()];
    for _ in 1..scales {
        specs.push(specs.last().unwrap().halved()?);
    }
    Ok(specs)
}

/// Multiscale dense convolution tower over the geometry-aware volume:
/// two stride-1 conv blocks at full resolution, then one stride-2 and one
/// stride-1 block per additional scale.
#[derive(Debug, Clone)]
pub struct Tower {
    pub config: TowerConfig,
    stem: [ConvBnRelu; 2],
    downs: Vec<(ConvBnRelu, ConvBnRelu)>,
}

pub struct TowerTrace {
    stem: [ConvBnReluCtx; 2],
    downs: Vec<(ConvBnReluCtx, ConvBnReluCtx)>,
}

impl Tower {
    pub fn new(in_channels: usize, config: TowerConfig) -> Self {
        let t = config.channels;
        let mut stem0 = ConvBnRelu::new(in_channels, t, 3, 1, 1);
        let mut stem1 = ConvBnRelu::new(t, t, 3, 1, 1);
        stem0.set_bn_epsilon(config.bn_epsilon);
        stem1.set_bn_epsilon(config.bn_epsilon);
        let mut downs = Vec::with_capacity(config.scales.saturating_sub(1));
        for _ in 1..config.scales {
            let mut d = ConvBnRelu::new(t, t, 3, 2, 1);
            let mut c = ConvBnRelu::new(t, t, 3, 1, 1);
            d.set_bn_epsilon(config.bn_epsilon);
            c.set_bn_epsilon(config.bn_epsilon);
            downs.push((d, c));
        }
        Tower {
            config,
            stem: [stem0, stem1],
            downs,
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        self.stem[0].init_random(rng);
        self.stem[1].init_random(rng);
        for (d, c) in &mut self.downs {
            d.init_random(rng);
            c.init_random(rng);
        }
    }

    pub fn forward(
        &self,
        vg: &Tensor,
        base_spec: &VoxelGridSpec,
    ) -> Result<(ScalePyramid, TowerTrace), TensorError> {
        let divisor = 1usize << (self.config.scales - 1);
        for &d in &base_spec.dims {
            if d % divisor != 0 {
                return Err(TensorError::BadGeometry {
                    op: "multiscale_tower",
                    detail: format!("extent {d} not divisible by {divisor}"),
                });
            }
        }
        let specs = pyramid_specs(base_spec, self.config.scales)
            .expect("divisibility already validated");
        let (h0, ctx0) = self.stem[0].forward(vg)?;
        let (scale0, ctx1) = self.stem[1].forward(&h0)?;
        let mut volumes = vec![scale0];
        let mut down_ctx = Vec::with_capacity(self.downs.len());
        for (d, c) in &self.downs {
            let (hd, cd) = d.forward(volumes.last().unwrap())?;
            let (hc, cc) = c.forward(&hd)?;
            volumes.push(hc);
            down_ctx.push((cd, cc));
        }
        Ok((
            ScalePyramid { volumes, specs },
            TowerTrace {
                stem: [ctx0, ctx1],
                downs: down_ctx,
            },
        ))
    }

    /// Chain per-scale feature gradients back to the tower input.
    pub fn backward(
        &mut self,
        trace: &TowerTrace,
        scale_grads: &[Tensor],
    ) -> Result<Tensor, TensorError> {
        assert_eq!(scale_grads.len(), self.config.scales, "scale grad count");
        let mut g = scale_grads.last().unwrap().clone();
        for (i, (d, c)) in self.downs.iter_mut().enumerate().rev() {
            let gc = c.backward(&trace.downs[i].1, &g)?;
            let gd = d.backward(&trace.downs[i].0, &gc)?;
            g = gd.add(&scale_grads[i])?;
        }
        let g0 = self.stem[1].backward(&trace.stem[1], &g)?;
        self.stem[0].backward(&trace.stem[0], &g0)
    }

    pub fn zero_grads(&mut self) {
        self.stem[0].zero_grads();
        self.stem[1].zero_grads();
        for (d, c) in &mut self.downs {
            d.zero_grads();
            c.zero_grads();
        }
    }
}

impl ParamVisit for Tower {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem[0].visit_params(&format!("{prefix}.stem0"), f);
        self.stem[1].visit_params(&format!("{prefix}.stem1"), f);
        for (i, (d, c)) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{i}"), f);
            c.visit_params(&format!("{prefix}.post{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem[0].visit_params_mut(&format!("{prefix}.stem0"), f);
        self.stem[1].visit_params_mut(&format!("{prefix}.stem1"), f);
        for (i, (d, c)) in self.downs.iter_mut().enumerate() {
            d.visit_params_mut(&format!("{prefix}.down{i}"), f);
            c.visit_params_mut(&format!("{prefix}.post{i}"), f);
        }
    }
}

/// Per-location predictions at every scale.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[num_classes, ...]` logits per scale.
    pub cls: Vec<Tensor>,
    /// `[1, ...]` centerness logit per scale.
    pub ctr: Vec<Tensor>,
    /// `[REG_CHANNELS, ...]` box code per scale.
    pub reg: Vec<Tensor>,
}

/// Prediction heads shared across scales: three channel projections.
#[derive(Debug, Clone)]
pub struct Heads {
    pub cls: LinearLayer,
    pub ctr: LinearLayer,
    pub reg: LinearLayer,
    pub num_classes: usize,
}

pub struct HeadsTrace {
    cls: Vec<LinearCtx>,
    ctr: Vec<LinearCtx>,
    reg: Vec<LinearCtx>,
}

impl Heads {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Heads {
            cls: LinearLayer::new(in_channels, num_classes),
            ctr: LinearLayer::new(in_channels, 1),
            reg: LinearLayer::new(in_channels, REG_CHANNELS),
            num_classes,
        }
    }

    /// Random projection weights; the class bias starts strongly negative
    /// so the detector opens quiet (p about 0.01) instead of flooding the
    /// focal loss with half-confident negatives.
    pub fn init_random(&mut self, rng: &mut impl Rng) {
        self.cls.init_random(rng);
        self.ctr.init_random(rng);
        self.reg.init_random(rng);
        let pi = 0.01f64;
        let bias = -((1.0 - pi) / pi).ln();
        for b in self.cls.params.bias.data_mut() {
            *b = bias;
        }
    }

    pub fn forward(&self, pyramid: &ScalePyramid) -> Result<(HeadOutput, HeadsTrace), TensorError> {
        let mut out = HeadOutput {
            cls: Vec::new(),
            ctr: Vec::new(),
            reg: Vec::new(),
        };
        let mut trace = HeadsTrace {
            cls: Vec::new(),
            ctr: Vec::new(),
            reg: Vec::new(),
        };
        for vol in &pyramid.volumes {
            let (c, cctx) = self.cls.forward(vol)?;
            let (t, tctx) = self.ctr.forward(vol)?;
            let (r, rctx) = self.reg.forward(vol)?;
            out.cls.push(c);
            out.ctr.push(t);
            out.reg.push(r);
            trace.cls.push(cctx);
            trace.ctr.push(tctx);
            trace.reg.push(rctx);
        }
        Ok((out, trace))
    }

    /// Accumulate head parameter gradients and return per-scale feature
    /// gradients.
    pub fn backward(
        &mut self,
        trace: &HeadsTrace,
        grads: &HeadGrads,
    ) -> Result<Vec<Tensor>, TensorError> {
        let mut feature_grads = Vec::with_capacity(trace.cls.len());
        for i in 0..trace.cls.len() {
            let gc = self.cls.backward(&trace.cls[i], &grads.cls[i])?;
            let gt = self.ctr.backward(&trace.ctr[i], &grads.ctr[i])?;
            let gr = self.reg.backward(&trace.reg[i], &grads.reg[i])?;
            feature_grads.push(gc.add(&gt)?.add(&gr)?);
        }
        Ok(feature_grads)
    }

    pub fn zero_grads(&mut self) {
        self.cls.zero_grads();
        self.ctr.zero_grads();
        self.reg.zero_grads();
    }
}

impl ParamVisit for Heads {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.cls.visit_params(&format!("{prefix}.cls"), f);
        self.ctr.visit_params(&format!("{prefix}.ctr"), f);
        self.reg.visit_params(&format!("{prefix}.reg"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cls.visit_params_mut(&format!("{prefix}.cls"), f);
        self.ctr.visit_params_mut(&format!("{prefix}.ctr"), f);
        self.reg.visit_params_mut(&format!("{prefix}.reg"), f);
    }
}

/// Encode a box relative to a voxel center.
pub fn encode_box(b: &OrientedBox, voxel_center: [f64; 3]) -> [f64; REG_CHANNELS] {
    [
        b.center[0] - voxel_center[0],
        b.center[1] - voxel_center[1],
        b.center[2] - voxel_center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Invert [`encode_box`]: offsets in meters, exp sizes, atan2 yaw.
pub fn decode_box(code: &[f64], voxel_center: [f64; 3]) -> OrientedBox {
    OrientedBox::new(
        [
            voxel_center[0] + code[0],
            voxel_center[1] + code[1],
            voxel_center[2] + code[2],
        ],
        [code[3].exp(), code[4].exp(), code[5].exp()],
        code[6].atan2(code[7]),
    )
    .expect("exp sizes are positive")
}

/// Decode every location above the score threshold into a scored box.
/// The location's class is its best class; the score is
/// `sigmoid(class logit) * sigmoid(centerness logit)`.
pub fn decode_boxes(
    out: &HeadOutput,
    specs: &[VoxelGridSpec],
    score_threshold: f64,
) -> Vec<OrientedBox> {
    let mut detections = Vec::new();
    for (scale, spec) in specs.iter().enumerate() {
        let n = spec.num_voxels();
        let cls = out.cls[scale].data();
        let ctr = out.ctr[scale].data();
        let reg = out.reg[scale].data();
        let num_classes = out.cls[scale].shape()[0];
        let [nx, ny, nz] = spec.dims;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let flat = spec.flat_index(i, j, k);
                    let gate = sigmoid(ctr[flat]);
                    let (mut best_class, mut best_p) = (0usize, f64::NEG_INFINITY);
                    for c in 0..num_classes {
                        let p = sigmoid(cls[c * n + flat]);
                        if p > best_p {
                            best_p = p;
                            best_class = c;
                        }
                    }
                    let score = best_p * gate;
                    if score < score_threshold {
                        continue;
                    }
                    let code: Vec<f64> =
                        (0..REG_CHANNELS).map(|c| reg[c * n + flat]).collect();
                    let b = decode_box(&code, spec.voxel_center(i, j, k))
                        .with_class(best_class)
                        .with_score(score);
                    detections.push(b);
                }
            }
        }
    }
    detections
}

/// Positive-sample selection parameters: rule 2 keeps the coarsest scale
/// holding more than `min_points` voxel centers (`>=` when
/// `strict_more_than` is off), rule 3 keeps the `topk` locations nearest
/// the box center.
#[derive(Debug, Clone, Copy)]
pub struct AssignConfig {
    pub min_points: usize,
    pub topk: usize,
    pub strict_more_than: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            min_points: 27,
            topk: 18,
            strict_more_than: true,
        }
    }
}

/// One supervised location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedLocation {
    pub scale: usize,
    pub flat: usize,
    pub box_index: usize,
    pub centerness: f64,
}

/// Assignment of pyramid locations to ground-truth boxes.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Per scale, per flattened location: the assigned box, if any.
    pub per_scale: Vec<Vec<Option<(usize, f64)>>>,
    /// All assigned locations in (scale, flat) order.
    pub positives: Vec<AssignedLocation>,
}

/// Centerness of a point inside a box: the cube root of the product over
/// the three box axes of `min(d-, d+) / max(d-, d+)`, where `d-`/`d+` are
/// the distances to the opposing faces in the box frame. 1 at the center,
/// approaching 0 at any face.
pub fn centerness_target(b: &OrientedBox, point: [f64; 3]) -> f64 {
    let dx = point[0] - b.center[0];
    let dy = point[1] - b.center[1];
    let dz = point[2] - b.center[2];
    let (cos, sin) = (b.yaw.cos(), b.yaw.sin());
    let local = [cos * dx + sin * dy, -sin * dx + cos * dy, dz];
    let mut product = 1.0;
    for a in 0..3 {
        let half = b.size[a] / 2.0;
        let lo = half + local[a];
        let hi = half - local[a];
        if lo <= 0.0 || hi <= 0.0 {
            return 0.0;
        }
        product *= lo.min(hi) / lo.max(hi);
    }
    product.cbrt()
}

/// Apply the four positive-sample rules:
/// 1. locations outside every box are dropped;
/// 2. each box keeps only its fitting scale (coarsest with more than
///    `min_points` centers inside, falling back to the finest);
/// 3. each box keeps its `topk` locations nearest the box center, ties
///    broken by lexicographic voxel index;
/// 4. a location claimed by several boxes goes to the smallest volume,
///    ties broken by lower box index.
pub fn assign_targets(
    gt: &[OrientedBox],
    specs: &[VoxelGridSpec],
    cfg: &AssignConfig,
) -> Assignment {
    let num_scales = specs.len();
    let mut inside: Vec<Vec<Vec<usize>>> = vec![Vec::new(); gt.len()];
    for (bi, b) in gt.iter().enumerate() {
        inside[bi] = specs
            .iter()
            .map(|spec| {
                let mut cells = Vec::new();
                let [nx, ny, nz] = spec.dims;
                for i in 0..nx {
                    for j in 0..ny {
                        for k in 0..nz {
                            if b.contains(spec.voxel_center(i, j, k)) {
                                cells.push(spec.flat_index(i, j, k));
                            }
                        }
                    }
                }
                cells
            })
            .collect();
    }

    // Rules 2 + 3 per box.
    let mut claims: Vec<Vec<(usize, usize)>> = vec![Vec::new(); gt.len()];
    for (bi, b) in gt.iter().enumerate() {
        let qualifies = |count: usize| {
            if cfg.strict_more_than {
                count > cfg.min_points
            } else {
                count >= cfg.min_points
            }
        };
        let scale = (0..num_scales)
            .rev()
            .find(|&s| qualifies(inside[bi][s].len()))
            .unwrap_or(0);
        let spec = &specs[scale];
        let mut cells: Vec<usize> = inside[bi][scale].clone();
        cells.sort_by(|&p, &q| {
            let dist = |flat: usize| {
                let (i, j, k) = unflatten(spec, flat);
                let c = spec.voxel_center(i, j, k);
                (c[0] - b.center[0]).powi(2)
                    + (c[1] - b.center[1]).powi(2)
                    + (c[2] - b.center[2]).powi(2)
            };
            dist(p).partial_cmp(&dist(q)).unwrap().then(p.cmp(&q))
        });
        cells.truncate(cfg.topk);
        claims[bi] = cells.into_iter().map(|flat| (scale, flat)).collect();
    }

    // Rule 4: smallest-volume wins contested locations.
    let mut winner: Vec<Vec<Option<usize>>> = specs
        .iter()
        .map(|s| vec![None; s.num_voxels()])
        .collect();
    for (bi, cells) in claims.iter().enumerate() {
        for &(scale, flat) in cells {
            let current = &mut winner[scale][flat];
            let replace = match *current {
                None => true,
                Some(prev) => {
                    let (va, vb) = (gt[bi].volume(), gt[prev].volume());
                    va < vb || (va == vb && bi < prev)
                }
            };
            if replace {
                *current = Some(bi);
            }
        }
    }

    let mut per_scale: Vec<Vec<Option<(usize, f64)>>> = specs
        .iter()
        .map(|s| vec![None; s.num_voxels()])
        .collect();
    let mut positives = Vec::new();
    for (scale, spec) in specs.iter().enumerate() {
        for flat in 0..spec.num_voxels() {
            if let Some(bi) = winner[scale][flat] {
                let (i, j, k) = unflatten(spec, flat);
                let c = centerness_target(&gt[bi], spec.voxel_center(i, j, k));
                per_scale[scale][flat] = Some((bi, c));
                positives.push(AssignedLocation {
                    scale,
                    flat,
                    box_index: bi,
                    centerness: c,
                });
            }
        }
    }
    Assignment {
        per_scale,
        positives,
    }
}

pub(crate) fn unflatten(spec: &VoxelGridSpec, flat: usize) -> (usize, usize, usize) {
    let nz = spec.dims[2];
    let ny = spec.dims[1];
    (flat / (ny * nz), (flat / nz) % ny, flat % nz)
}

#[derive(Debug, Clone, Copy)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// The three detection losses.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLosses {
    pub cls: f64,
    pub centerness: f64,
    pub box_loss: f64,
}

impl DetectionLosses {
    pub fn sum(&self) -> f64 {
        self.cls + self.centerness + self.box_loss
    }
}

/// Gradients with respect to the raw head outputs.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub cls: Vec<Tensor>,
    pub ctr: Vec<Tensor>,
    pub reg: Vec<Tensor>,
}

/// Classification focal loss over every (location, class) entry at every
/// scale; centerness binary cross-entropy and rotated-IoU box loss over
/// the assigned locations. With no positives the box and centerness terms
/// are zero while classification still applies.
pub fn detection_losses(
    out: &HeadOutput,
    assignment: &Assignment,
    gt: &[OrientedBox],
    specs: &[VoxelGridSpec],
    focal: &FocalConfig,
) -> (DetectionLosses, HeadGrads) {
    let num_scales = specs.len();
    let num_classes = out.cls[0].shape()[0];
    let n_pos = assignment.positives.len();

    let mut grads = HeadGrads {
        cls: out.cls.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        ctr: out.ctr.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        reg: out.reg.iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };

    // Classification: per-class sigmoid focal loss, averaged over all
    // entries across every scale.
    let total_entries: usize = specs.iter().map(|s| s.num_voxels() * num_classes).sum();
    let mut cls_loss = 0.0;
    for scale in 0..num_scales {
        let n = specs[scale].num_voxels();
        let logits = out.cls[scale].data();
        let gcls = grads.cls[scale].data_mut();
        for c in 0..num_classes {
            for flat in 0..n {
                let at = c * n + flat;
                let p = sigmoid(logits[at]);
                let y = match assignment.per_scale[scale][flat] {
                    Some((bi, _)) if gt[bi].class_id == Some(c) => 1.0,
                    _ => 0.0,
                };
                let (fl, dfl) = focal_loss(&[p], &[y], focal.gamma, focal.alpha);
                cls_loss += fl;
                gcls[at] = dfl[0] * p * (1.0 - p);
            }
        }
    }
    let entry_scale = 1.0 / total_entries as f64;
    cls_loss *= entry_scale;
    for g in &mut grads.cls {
        for v in g.data_mut() {
            *v *= entry_scale;
        }
    }

    // Centerness: BCE with logits against the soft centerness target,
    // averaged over positives.
    let mut ctr_loss = 0.0;
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for loc in &assignment.positives {
            let logit = out.ctr[loc.scale].data()[loc.flat];
            let p = sigmoid(logit);
            let y = loc.centerness;
            let pc = p.clamp(1e-12, 1.0 - 1e-12);
            ctr_loss += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            grads.ctr[loc.scale].data_mut()[loc.flat] = (p - y) * inv;
        }
        ctr_loss *= inv;
    }

    // Box loss: mean (1 - IoU) over positives; gradient by central
    // differences on the eight code channels.
    let mut box_loss = 0.0;
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for loc in &assignment.positives {
            let spec = &specs[loc.scale];
            let n = spec.num_voxels();
            let (i, j, k) = unflatten(spec, loc.flat);
            let center = spec.voxel_center(i, j, k);
            let target = &gt[loc.box_index];
            let code: Vec<f64> = (0..REG_CHANNELS)
                .map(|c| out.reg[loc.scale].data()[c * n + loc.flat])
                .collect();
            let iou_of = |code: &[f64]| rotated_iou(&decode_box(code, center), target);
            box_loss += 1.0 - iou_of(&code);
            let greg = grads.reg[loc.scale].data_mut();
            for c in 0..REG_CHANNELS {
                let mut plus = code.clone();
                plus[c] += BOX_GRAD_STEP;
                let mut minus = code.clone();
                minus[c] -= BOX_GRAD_STEP;
                let d_iou = (iou_of(&plus) - iou_of(&minus)) / (2.0 * BOX_GRAD_STEP);
                greg[c * n + loc.flat] = -d_iou * inv;
            }
        }
        box_loss *= inv;
    }

    (
        DetectionLosses {
            cls: cls_loss,
            centerness: ctr_loss,
            box_loss,
        },
        grads,
    )
}
