//! Pinhole projection and frustum logic.
//!
//! Poses are stored world-to-camera so the projection applies
//! `(u, v, 1)^T = (1/lambda) K Pi0 T (x, y, z, 1)^T` verbatim, with
//! `lambda` the distance along the optical axis. Loaders that ingest
//! camera-to-world matrices must invert them up front.

use crate::tensor::Tensor;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CameraError {
    InvalidIntrinsics(String),
    NonRigidPose(String),
    StrideMismatch {
        image: (usize, usize),
        feature: (usize, usize),
    },
    DepthSizeMismatch {
        expected: (usize, usize),
        got: Vec<usize>,
    },
    BadFeatureShape(Vec<usize>),
}

impl fmt::Display for CameraError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CameraError::InvalidIntrinsics(s) => write!(f, "invalid intrinsics: {s}"),
            CameraError::NonRigidPose(s) => write!(f, "non-rigid pose: {s}"),
            CameraError::StrideMismatch { image, feature } => write!(
                f,
                "feature map {}x{} does not divide image {}x{} by an integer stride",
                feature.0, feature.1, image.0, image.1
            ),
            CameraError::DepthSizeMismatch { expected, got } => write!(
                f,
                "depth map shape {got:?} does not match image {}x{}",
                expected.0, expected.1
            ),
            CameraError::BadFeatureShape(s) => {
                write!(f, "feature map must be [C, H, W], got {s:?}")
            }
        }
    }
}

impl std::error::Error for CameraError {}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

const POSE_ORTHO_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform (row-major 4x4).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    m: [[f64; 4]; 4],
}

impl CameraPose {
    /// Validate and wrap a world-to-camera matrix: orthonormal rotation
    /// block, determinant +1, affine last row.
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self, CameraError> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(CameraError::NonRigidPose(format!(
                "last row must be (0, 0, 0, 1), got {:?}",
                m[3]
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > POSE_ORTHO_TOL {
                    return Err(CameraError::NonRigidPose(format!(
                        "rotation rows {i},{j} dot {dot} (want {want})"
                    )));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(CameraError::NonRigidPose(format!(
                "rotation determinant {det}, want +1"
            )));
        }
        Ok(CameraPose { m })
    }

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraPose { m }
    }

    /// Ingest a camera-to-world matrix by inverting it.
    pub fn from_camera_to_world(m: [[f64; 4]; 4]) -> Result<Self, CameraError> {
        let fwd = CameraPose::new(m)?;
        Ok(fwd.inverse())
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    /// Rigid inverse: `R^T` and `-R^T t`.
    pub fn inverse(&self) -> CameraPose {
        let mut out = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = self.m[j][i];
            }
        }
        for i in 0..3 {
            out[i][3] = -(0..3).map(|k| self.m[k][i] * self.m[k][3]).sum::<f64>();
        }
        out[3][3] = 1.0;
        CameraPose { m: out }
    }

    /// Apply the transform to a point.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3];
        }
        out
    }

    /// Rotate a direction (no translation).
    pub fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i][0] * d[0] + self.m[i][1] * d[1] + self.m[i][2] * d[2];
        }
        out
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn camera_center(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = -(0..3).map(|k| self.m[k][i] * self.m[k][3]).sum::<f64>();
        }
        out
    }

    /// Compose: `self` after `other` (applies `other` first).
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        CameraPose { m: out }
    }
}

/// Result of projecting a world point into a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates and the distance along the optical axis.
    Point { u: f64, v: f64, depth: f64 },
    /// The point sits at or behind the camera plane.
    Behind,
}

/// One posed input view: intrinsics, world-to-camera pose, a feature map
/// and an optional depth map at image resolution (0 marks invalid depth).
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub features: Tensor,
    pub depth: Option<Tensor>,
    stride: usize,
}

impl CameraView {
    pub fn new(
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        features: Tensor,
        depth: Option<Tensor>,
    ) -> Result<Self, CameraError> {
        let fs = features.shape();
        if fs.len() != 3 {
            return Err(CameraError::BadFeatureShape(fs.to_vec()));
        }
        let (fh, fw) = (fs[1], fs[2]);
        let (w, h) = (intrinsics.width, intrinsics.height);
        // Both axes must share one integer stride >= 1.
        if fh == 0 || fw == 0 || w % fw != 0 || h % fh != 0 || w / fw != h / fh || w / fw == 0 {
            return Err(CameraError::StrideMismatch {
                image: (w, h),
                feature: (fw, fh),
            });
        }
        let stride = w / fw;
        if let Some(d) = &depth {
            if d.shape() != [h, w] {
                return Err(CameraError::DepthSizeMismatch {
                    expected: (h, w),
                    got: d.shape().to_vec(),
                });
            }
        }
        Ok(CameraView {
            intrinsics,
            pose,
            features,
            depth,
            stride,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn feature_channels(&self) -> usize {
        self.features.shape()[0]
    }

    /// Project a world point through the pinhole model.
    pub fn project(&self, point: [f64; 3]) -> Projection {
        let cam = self.pose.transform(point);
        let depth = cam[2];
        if depth <= 0.0 {
            return Projection::Behind;
        }
        let k = &self.intrinsics;
        Projection::Point {
            u: k.fx * cam[0] / depth + k.cx,
            v: k.fy * cam[1] / depth + k.cy,
            depth,
        }
    }

    /// True iff the point projects strictly in front of the camera and
    /// inside the image bounds.
    pub fn in_frustum(&self, point: [f64; 3]) -> bool {
        match self.project(point) {
            Projection::Behind => false,
            Projection::Point { u, v, .. } => {
                u >= 0.0
                    && u < self.intrinsics.width as f64
                    && v >= 0.0
                    && v < self.intrinsics.height as f64
            }
        }
    }

    /// Nearest feature-map cell for a pixel coordinate inside the image:
    /// divide by the stride, round to nearest (pixel `(i, j)` spans
    /// `[i, i+1)`, so rounding is `floor(x + 0.5)`), clamp at the border.
    pub fn pixel_to_feature_index(&self, u: f64, v: f64) -> (usize, usize) {
        let fs = self.features.shape();
        let (rows, cols) = (fs[1], fs[2]);
        let s = self.stride as f64;
        let col = ((u / s + 0.5).floor().max(0.0) as usize).min(cols - 1);
        let row = ((v / s + 0.5).floor().max(0.0) as usize).min(rows - 1);
        (row, col)
    }

    /// World-space ray through pixel `(u, v)`: returns the camera center and
    /// a direction scaled so that advancing by `t` covers optical depth `t`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        let k = &self.intrinsics;
        let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let inv = self.pose.inverse();
        (self.pose.camera_center(), inv.rotate(dir_cam))
    }
}
