//! Geometry shaping: surface ground-truth volumes, the shaping network
//! that predicts per-voxel surface probability, the `V_g = S (*) V`
//! weighting, and the focal loss supervising it.

mod labels;
mod net;

pub use labels::{surface_labels, traverse_grid, DilationMode, RaySides, SurfaceLabelConfig};
pub use net::{ShapingNet, ShapingNetConfig, ShapingTrace};

use crate::tensor::{Tensor, TensorError};
use crate::volume::{FeatureVolume, VoxelGridSpec};
use std::fmt;

#[derive(Debug)]
pub enum ShapingError {
    /// A predicted volume was used where a label volume is required, or
    /// vice versa.
    KindMismatch {
        expected: SurfaceKind,
        got: SurfaceKind,
    },
    SpecMismatch,
    /// Values violate the kind invariant (labels must be 0/1, predictions
    /// strictly inside (0, 1)).
    BadValue { index: usize, value: f64 },
    Tensor(TensorError),
}

impl fmt::Display for ShapingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapingError::KindMismatch { expected, got } => {
                write!(f, "surface volume kind mismatch: expected {expected:?}, got {got:?}")
            }
            ShapingError::SpecMismatch => write!(f, "surface/feature volume grid specs differ"),
            ShapingError::BadValue { index, value } => {
                write!(f, "value {value} at voxel {index} violates the kind invariant")
            }
            ShapingError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ShapingError {}

impl From<TensorError> for ShapingError {
    fn from(e: TensorError) -> Self {
        ShapingError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Predicted,
    Label,
}

/// Per-voxel surface volume: probabilities in `(0, 1)` for predictions,
/// exact `{0, 1}` for ground-truth labels.
#[derive(Debug, Clone)]
pub struct SurfaceVolume {
    pub spec: VoxelGridSpec,
    values: Vec<f64>,
    kind: SurfaceKind,
}

impl SurfaceVolume {
    pub fn predicted(spec: VoxelGridSpec, values: Vec<f64>) -> Result<Self, ShapingError> {
        assert_eq!(values.len(), spec.num_voxels(), "value count mismatch");
        for (i, &v) in values.iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(ShapingError::BadValue { index: i, value: v });
            }
        }
        Ok(SurfaceVolume {
            spec,
            values,
            kind: SurfaceKind::Predicted,
        })
    }

    pub fn label(spec: VoxelGridSpec, values: Vec<f64>) -> Result<Self, ShapingError> {
        assert_eq!(values.len(), spec.num_voxels(), "value count mismatch");
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(ShapingError::BadValue { index: i, value: v });
            }
        }
        Ok(SurfaceVolume {
            spec,
            values,
            kind: SurfaceKind::Label,
        })
    }

    pub fn from_mask(spec: VoxelGridSpec, mask: &[bool]) -> Self {
        SurfaceVolume {
            values: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            spec,
            kind: SurfaceKind::Label,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> SurfaceKind {
        self.kind
    }

    pub fn threshold(&self, thr: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= thr).collect()
    }

    /// Voxel IoU between this volume thresholded at `thr` and another
    /// volume thresholded at the same value.
    pub fn voxel_iou(&self, other: &SurfaceVolume, thr: f64) -> f64 {
        let a = self.threshold(thr);
        let b = other.threshold(thr);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&x, &y) in a.iter().zip(&b) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Weight the fused feature volume by the surface probability:
/// `V_g[c, x, y, z] = S[x, y, z] * V[c, x, y, z]`.
pub fn apply_shaping(volume: &FeatureVolume, s: &SurfaceVolume) -> Result<Tensor, ShapingError> {
    if volume.spec != s.spec {
        return Err(ShapingError::SpecMismatch);
    }
    apply_shaping_values(&volume.mean, s.values())
}

/// The same Hadamard weighting on a raw `[C, x, y, z]` tensor.
pub fn apply_shaping_values(mean: &Tensor, s: &[f64]) -> Result<Tensor, ShapingError> {
    let n = s.len();
    let channels = mean.len() / n;
    if channels * n != mean.len() {
        return Err(ShapingError::SpecMismatch);
    }
    let mut out = mean.clone();
    out.clear_grad();
    for c in 0..channels {
        let ch = &mut out.data_mut()[c * n..(c + 1) * n];
        for (o, &sv) in ch.iter_mut().zip(s) {
            *o *= sv;
        }
    }
    Ok(out)
}

/// Gradients of the shaping weighting: the volume gradient reuses `S`, the
/// probability gradient sums the feature channels.
pub fn apply_shaping_backward(
    mean: &Tensor,
    s: &[f64],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>), ShapingError> {
    let n = s.len();
    let channels = mean.len() / n;
    if grad_out.shape() != mean.shape() {
        return Err(ShapingError::Tensor(TensorError::ShapeMismatch {
            op: "apply_shaping_backward",
            expected: mean.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        }));
    }
    let mut grad_mean = Tensor::zeros(mean.shape());
    let mut grad_s = vec![0.0; n];
    for c in 0..channels {
        let base = c * n;
        for voxel in 0..n {
            let g = grad_out.data()[base + voxel];
            grad_mean.data_mut()[base + voxel] = g * s[voxel];
            grad_s[voxel] += g * mean.data()[base + voxel];
        }
    }
    Ok((grad_mean, grad_s))
}

/// Clamp keeping probabilities usable inside logs.
const PROB_FLOOR: f64 = 1e-12;

/// Mean focal loss over all entries plus its gradient with respect to the
/// probabilities:
/// `FL(p, 1) = -alpha (1-p)^gamma ln p`,
/// `FL(p, 0) = -(1-alpha) p^gamma ln(1-p)`.
pub fn focal_loss(probs: &[f64], targets: &[f64], gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    assert_eq!(probs.len(), targets.len(), "probs/targets length mismatch");
    let n = probs.len().max(1) as f64;
    let inv_n = 1.0 / n;
    let mut total = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (i, (&raw_p, &y)) in probs.iter().zip(targets).enumerate() {
        let p = raw_p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        if y > 0.5 {
            let q = 1.0 - p;
            total += -alpha * q.powf(gamma) * p.ln();
            let mut d = -alpha * q.powf(gamma) / p;
            if gamma != 0.0 {
                d += alpha * gamma * q.powf(gamma - 1.0) * p.ln();
            }
            grad[i] = d * inv_n;
        } else {
            let q = 1.0 - p;
            total += -(1.0 - alpha) * p.powf(gamma) * q.ln();
            let mut d = (1.0 - alpha) * p.powf(gamma) / q;
            if gamma != 0.0 {
                d += -(1.0 - alpha) * gamma * p.powf(gamma - 1.0) * q.ln();
            }
            grad[i] = d * inv_n;
        }
    }
    (total * inv_n, grad)
}

/// Focal loss between a predicted surface volume and its ground truth.
pub fn surface_loss(
    pred: &SurfaceVolume,
    labels: &SurfaceVolume,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>), ShapingError> {
    if pred.kind != SurfaceKind::Predicted {
        return Err(ShapingError::KindMismatch {
            expected: SurfaceKind::Predicted,
            got: pred.kind,
        });
    }
    if labels.kind != SurfaceKind::Label {
        return Err(ShapingError::KindMismatch {
            expected: SurfaceKind::Label,
            got: labels.kind,
        });
    }
    if pred.spec != labels.spec {
        return Err(ShapingError::SpecMismatch);
    }
    Ok(focal_loss(pred.values(), labels.values(), gamma, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose, CameraView};
    use crate::volume::{build_feature_volume, VoxelGridSpec};

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([-0.8, -0.8, 1.0], 0.2, [8, 8, 4]).unwrap()
    }

    fn fused() -> FeatureVolume {
        let k = CameraIntrinsics::new(40.0, 30.0, 32.0, 24.0, 64, 48).unwrap();
        let features = Tensor::from_fn(&[2, 48, 64], |i| (i as f64 * 0.01).sin());
        let view = CameraView::new(k, CameraPose::identity(), features, None).unwrap();
        build_feature_volume(&[view], &spec()).unwrap()
    }

    #[test]
    fn shaping_with_unit_probability_is_identity() {
        let vol = fused();
        let ones = SurfaceVolume::from_mask(spec(), &vec![true; spec().num_voxels()]);
        let vg = apply_shaping(&vol, &ones).unwrap();
        assert_eq!(vg.data(), vol.mean.data());
    }

    #[test]
    fn shaping_with_zero_probability_silences_everything() {
        let vol = fused();
        let zeros = SurfaceVolume::from_mask(spec(), &vec![false; spec().num_voxels()]);
        let vg = apply_shaping(&vol, &zeros).unwrap();
        assert!(vg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shaping_scales_single_voxel() {
        let vol = fused();
        let n = spec().num_voxels();
        let mut values = vec![1.0 - 1e-9; n];
        values[17] = 0.5;
        let s = SurfaceVolume::predicted(spec(), values.clone()).unwrap();
        let vg = apply_shaping(&vol, &s).unwrap();
        for c in 0..2 {
            for voxel in 0..n {
                let want = vol.mean.data()[c * n + voxel] * values[voxel];
                assert!((vg.data()[c * n + voxel] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shaping_spec_mismatch_is_rejected() {
        let vol = fused();
        let other = VoxelGridSpec::new([0.0; 3], 0.2, [8, 8, 4]).unwrap();
        let s = SurfaceVolume::from_mask(other, &vec![true; 256]);
        assert!(matches!(
            apply_shaping(&vol, &s),
            Err(ShapingError::SpecMismatch)
        ));
    }

    #[test]
    fn focal_loss_hand_values() {
        // p = 0.5, y = 1, alpha 0.25, gamma 2: 0.25 * 0.25 * ln 2.
        let (loss, _) = focal_loss(&[0.5], &[1.0], 2.0, 0.25);
        let want = 0.25 * 0.25 * 2.0f64.ln();
        assert!((loss - want).abs() < 1e-12, "loss {loss} want {want}");

        // Confident correct prediction drives the per-voxel loss to zero.
        let (loss, _) = focal_loss(&[1.0 - 1e-9], &[1.0], 2.0, 0.25);
        assert!(loss < 1e-15);

        // gamma = 0, alpha = 0.5 degenerates to half the cross-entropy.
        let probs = [0.3, 0.8, 0.6];
        let targets = [1.0, 0.0, 1.0];
        let (loss, _) = focal_loss(&probs, &targets, 0.0, 0.5);
        let bce: f64 = probs
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| if y > 0.5 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 3.0;
        assert!((loss - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let probs = vec![0.3, 0.7, 0.52, 0.11, 0.93];
        let targets = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        for &(gamma, alpha) in &[(2.0, 0.25), (0.0, 0.5)] {
            let (_, grad) = focal_loss(&probs, &targets, gamma, alpha);
            for i in 0..probs.len() {
                let h = 1e-6;
                let mut plus = probs.clone();
                plus[i] += h;
                let mut minus = probs.clone();
                minus[i] -= h;
                let numeric = (focal_loss(&plus, &targets, gamma, alpha).0
                    - focal_loss(&minus, &targets, gamma, alpha).0)
                    / (2.0 * h);
                assert!(
                    (grad[i] - numeric).abs() < 1e-6,
                    "gamma {gamma} i {i}: analytic {} numeric {numeric}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn surface_loss_checks_kinds() {
        let n = spec().num_voxels();
        let pred = SurfaceVolume::predicted(spec(), vec![0.5; n]).unwrap();
        let labels = SurfaceVolume::from_mask(spec(), &vec![false; n]);
        assert!(surface_loss(&pred, &labels, 2.0, 0.25).is_ok());
        assert!(matches!(
            surface_loss(&labels, &labels, 2.0, 0.25),
            Err(ShapingError::KindMismatch { .. })
        ));
        assert!(matches!(
            surface_loss(&pred, &pred, 2.0, 0.25),
            Err(ShapingError::KindMismatch { .. })
        ));
    }

    #[test]
    fn volume_kind_invariants_hold() {
        assert!(SurfaceVolume::predicted(spec(), vec![0.0; 256]).is_err());
        assert!(SurfaceVolume::predicted(spec(), vec![1.0; 256]).is_err());
        assert!(SurfaceVolume::label(spec(), vec![0.5; 256]).is_err());
        assert!(SurfaceVolume::label(spec(), vec![1.0; 256]).is_ok());
    }

    #[test]
    fn apply_shaping_backward_matches_elementwise_algebra() {
        let vol = fused();
        let n = spec().num_voxels();
        let s: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * (i as f64 / n as f64)).collect();
        let gout = Tensor::from_fn(vol.mean.shape(), |i| (i as f64 * 0.13).cos());
        let (gmean, gs) = apply_shaping_backward(&vol.mean, &s, &gout).unwrap();
        for c in 0..2 {
            for voxel in 0..n {
                let at = c * n + voxel;
                assert!((gmean.data()[at] - gout.data()[at] * s[voxel]).abs() < 1e-12);
            }
        }
        for voxel in 0..n {
            let want: f64 = (0..2)
                .map(|c| gout.data()[c * n + voxel] * vol.mean.data()[c * n + voxel])
                .sum();
            assert!((gs[voxel] - want).abs() < 1e-12);
        }
    }
}
