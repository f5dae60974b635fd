//! Voxel grids and the multi-view feature volume: per-view back-projection,
//! masked mean/variance fusion across views, and mean/variance channel
//! concatenation.

use crate::camera::{CameraView, Projection};
use crate::tensor::{io as tio, Tensor};
use crate::thread_pool;
use std::fmt;
use std::io::{BufRead, Write};

#[derive(Debug)]
pub enum VolumeError {
    BadSpec(String),
    SpecMismatch { expected: VoxelGridSpec, got: VoxelGridSpec },
    NoViews,
    ChannelMismatch { expected: usize, got: usize },
    /// Cancellation pushed a variance below the -1e-9 contract floor.
    VarianceUnderflow { index: usize, value: f64 },
    Io(tio::TensorIoError),
    BadHeader(String),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::BadSpec(s) => write!(f, "bad voxel grid spec: {s}"),
            VolumeError::SpecMismatch { expected, got } => {
                write!(f, "grid spec mismatch: expected {expected:?}, got {got:?}")
            }
            VolumeError::NoViews => write!(f, "fusion needs at least one view"),
            VolumeError::ChannelMismatch { expected, got } => {
                write!(f, "view has {got} feature channels, expected {expected}")
            }
            VolumeError::VarianceUnderflow { index, value } => {
                write!(f, "variance {value} at voxel {index} below the -1e-9 floor")
            }
            VolumeError::Io(e) => write!(f, "volume i/o: {e}"),
            VolumeError::BadHeader(s) => write!(f, "bad volume header: {s}"),
        }
    }
}

impl std::error::Error for VolumeError {}

impl From<tio::TensorIoError> for VolumeError {
    fn from(e: tio::TensorIoError) -> Self {
        VolumeError::Io(e)
    }
}

/// Axis-aligned voxel grid: world origin of the minimum corner, cubic voxel
/// edge length, and voxel counts along x/y/z. The center of voxel
/// `(i, j, k)` sits at `origin + (i+0.5, j+0.5, k+0.5) * size`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self, VolumeError> {
        if !(voxel_size > 0.0) {
            return Err(VolumeError::BadSpec(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::BadSpec(format!("zero extent in {dims:?}")));
        }
        Ok(VoxelGridSpec {
            origin,
            voxel_size,
            dims,
        })
    }

    /// The default grid: 6.4 x 6.4 x 2.56 meters of 0.16 m voxels, i.e.
    /// 40 x 40 x 16 cells.
    pub fn default_grid(origin: [f64; 3]) -> Self {
        VoxelGridSpec {
            origin,
            voxel_size: 0.16,
            dims: [40, 40, 16],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (j as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (k as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Voxel containing a world point, if inside the grid. A voxel spans
    /// `[origin + i*size, origin + (i+1)*size)` per axis.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.voxel_size;
            if rel < 0.0 {
                return None;
            }
            let cell = rel.floor() as usize;
            if cell >= self.dims[a] {
                return None;
            }
            idx[a] = cell;
        }
        Some(idx)
    }

    /// Flat row-major index of `(i, j, k)`, matching `Tensor[C, x, y, z]`.
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// The next-coarser grid: double the voxel size, halve the extents.
    pub fn halved(&self) -> Result<VoxelGridSpec, VolumeError> {
        if self.dims.iter().any(|&d| d % 2 != 0) {
            return Err(VolumeError::BadSpec(format!(
                "extents {:?} not divisible by 2",
                self.dims
            )));
        }
        Ok(VoxelGridSpec {
            origin: self.origin,
            voxel_size: self.voxel_size * 2.0,
            dims: [self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2],
        })
    }
}

/// One view back-projected onto a grid: copied features and the in-frustum
/// mask.
#[derive(Debug, Clone)]
pub struct ViewVolume {
    pub spec: VoxelGridSpec,
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Copy each in-frustum voxel's feature from the view's feature map;
/// out-of-frustum voxels stay zero with a zero mask.
pub fn backproject_view(view: &CameraView, spec: &VoxelGridSpec) -> ViewVolume {
    let channels = view.feature_channels();
    let [nx, ny, nz] = spec.dims;
    let n = spec.num_voxels();
    let mut values = Tensor::zeros(&[channels, nx, ny, nz]);
    let mut mask = vec![false; n];
    let feat = view.features.data();
    let fs = view.features.shape();
    let feat_cells = fs[1] * fs[2];
    let cols = fs[2];

    // A flat per-voxel pass: project the center, find the nearest feature
    // cell, copy it across channels.
    let data = values.data_mut();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let center = spec.voxel_center(i, j, k);
                let (u, v) = match view.project(center) {
                    Projection::Behind => continue,
                    Projection::Point { u, v, .. } => (u, v),
                };
                if !(u >= 0.0
                    && u < view.intrinsics.width as f64
                    && v >= 0.0
                    && v < view.intrinsics.height as f64)
                {
                    continue;
                }
                let voxel = spec.flat_index(i, j, k);
                mask[voxel] = true;
                let (row, col) = view.pixel_to_feature_index(u, v);
                let cell = row * cols + col;
                for c in 0..channels {
                    data[c * n + voxel] = feat[c * feat_cells + cell];
                }
            }
        }
    }
    ViewVolume {
        spec: spec.clone(),
        values,
        mask,
    }
}

/// Back-project many views; independent per view, fanned over the worker
/// pool.
pub fn backproject_views(views: &[CameraView], spec: &VoxelGridSpec) -> Vec<ViewVolume> {
    thread_pool().install(|| {
        use rayon::prelude::*;
        views
            .par_iter()
            .map(|view| backproject_view(view, spec))
            .collect()
    })
}

/// The fused multi-view feature volume: masked per-voxel mean, per-voxel
/// feature variance across views, and the per-voxel coverage count.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub spec: VoxelGridSpec,
    pub mean: Tensor,
    pub variance: Tensor,
    pub coverage: Vec<u32>,
}

/// Fuse per-view volumes into mean and variance. Views reduce in ascending
/// index order; voxels never seen by any view get mean 0 and variance 0.
/// Variance uses the population identity `E[X^2] - E[X]^2`, clamped at zero
/// after an underflow check against the -1e-9 contract floor.
pub fn fuse_views(views: &[ViewVolume]) -> Result<FeatureVolume, VolumeError> {
    let first = views.first().ok_or(VolumeError::NoViews)?;
    let spec = first.spec.clone();
    let channels = first.values.shape()[0];
    let n = spec.num_voxels();
    for v in views {
        if v.spec != spec {
            return Err(VolumeError::SpecMismatch {
                expected: spec,
                got: v.spec.clone(),
            });
        }
        if v.values.shape()[0] != channels {
            return Err(VolumeError::ChannelMismatch {
                expected: channels,
                got: v.values.shape()[0],
            });
        }
    }

    let mut coverage = vec![0u32; n];
    for v in views {
        for (cov, &m) in coverage.iter_mut().zip(&v.mask) {
            *cov += m as u32;
        }
    }

    let shape = first.values.shape().to_vec();
    let mut mean = Tensor::zeros(&shape);
    let mut sq_sum = Tensor::zeros(&shape);
    for v in views {
        let src = v.values.data();
        let mdata = mean.data_mut();
        let sdata = sq_sum.data_mut();
        for c in 0..channels {
            let base = c * n;
            for (voxel, &masked) in v.mask.iter().enumerate() {
                if masked {
                    let x = src[base + voxel];
                    mdata[base + voxel] += x;
                    sdata[base + voxel] += x * x;
                }
            }
        }
    }
    let mdata = mean.data_mut();
    let sdata = sq_sum.data_mut();
    for c in 0..channels {
        let base = c * n;
        for (voxel, &cov) in coverage.iter().enumerate() {
            let at = base + voxel;
            if cov == 0 {
                mdata[at] = 0.0;
                sdata[at] = 0.0;
                continue;
            }
            let inv = 1.0 / cov as f64;
            let m = mdata[at] * inv;
            mdata[at] = m;
            let var = sdata[at] * inv - m * m;
            if var < -1e-9 {
                return Err(VolumeError::VarianceUnderflow {
                    index: at,
                    value: var,
                });
            }
            sdata[at] = var.max(0.0);
        }
    }
    Ok(FeatureVolume {
        spec,
        mean,
        variance: sq_sum,
        coverage,
    })
}

/// Convenience: back-project and fuse in one call.
pub fn build_feature_volume(
    views: &[CameraView],
    spec: &VoxelGridSpec,
) -> Result<FeatureVolume, VolumeError> {
    fuse_views(&backproject_views(views, spec))
}

/// Stack mean and variance along the channel axis: channels `0..C` hold the
/// mean, `C..2C` the variance. This is the shaping network input.
pub fn concat_mean_var(volume: &FeatureVolume) -> Tensor {
    let shape = volume.mean.shape();
    let channels = shape[0];
    let mut out_shape = shape.to_vec();
    out_shape[0] = channels * 2;
    let mut data = Vec::with_capacity(volume.mean.len() * 2);
    data.extend_from_slice(volume.mean.data());
    data.extend_from_slice(volume.variance.data());
    Tensor::from_vec(&out_shape, data).expect("mean/variance shapes agree")
}

/// Serialize a grid-spec header line plus the tensor payload.
pub fn write_volume(w: &mut impl Write, spec: &VoxelGridSpec, t: &Tensor) -> Result<(), VolumeError> {
    writeln!(
        w,
        "gridspec {} {} {} {} {} {} {}",
        spec.origin[0],
        spec.origin[1],
        spec.origin[2],
        spec.voxel_size,
        spec.dims[0],
        spec.dims[1],
        spec.dims[2]
    )
    .map_err(tio::TensorIoError::Io)?;
    tio::write_tensor(w, t)?;
    Ok(())
}

pub fn read_volume(r: &mut impl BufRead) -> Result<(VoxelGridSpec, Tensor), VolumeError> {
    let mut header = String::new();
    r.read_line(&mut header).map_err(tio::TensorIoError::Io)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != "gridspec" {
        return Err(VolumeError::BadHeader(header.trim().to_string()));
    }
    let num = |s: &str| -> Result<f64, VolumeError> {
        s.parse()
            .map_err(|_| VolumeError::BadHeader(format!("bad number {s:?}")))
    };
    let ext = |s: &str| -> Result<usize, VolumeError> {
        s.parse()
            .map_err(|_| VolumeError::BadHeader(format!("bad extent {s:?}")))
    };
    let spec = VoxelGridSpec::new(
        [num(fields[1])?, num(fields[2])?, num(fields[3])?],
        num(fields[4])?,
        [ext(fields[5])?, ext(fields[6])?, ext(fields[7])?],
    )?;
    let t = tio::read_tensor(r)?;
    Ok((spec, t))
}

pub fn save_volume(path: &std::path::Path, spec: &VoxelGridSpec, t: &Tensor) -> Result<(), VolumeError> {
    let mut buf = Vec::new();
    write_volume(&mut buf, spec, t)?;
    crate::write_atomic(path, &buf).map_err(tio::TensorIoError::Io)?;
    Ok(())
}

pub fn load_volume(path: &std::path::Path) -> Result<(VoxelGridSpec, Tensor), VolumeError> {
    let file = std::fs::File::open(path).map_err(tio::TensorIoError::Io)?;
    let mut r = std::io::BufReader::new(file);
    read_volume(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::new([-0.8, -0.8, 1.0], 0.2, [8, 8, 4]).unwrap()
    }

    /// Camera at the world origin looking down +z with a frustum wide
    /// enough to cover the whole test grid.
    fn covering_view(features: Tensor) -> CameraView {
        let k = CameraIntrinsics::new(40.0, 30.0, 32.0, 24.0, 64, 48).unwrap();
        CameraView::new(k, CameraPose::identity(), features, None).unwrap()
    }

    fn random_view(rng: &mut ChaCha8Rng, channels: usize) -> CameraView {
        let features = Tensor::from_fn(&[channels, 48, 64], |_| rng.gen_range(-1.0..1.0));
        let yaw: f64 = rng.gen_range(-0.3..0.3);
        let (c, s) = (yaw.cos(), yaw.sin());
        let pose = CameraPose::new([
            [c, -s, 0.0, rng.gen_range(-0.2..0.2)],
            [s, c, 0.0, rng.gen_range(-0.2..0.2)],
            [0.0, 0.0, 1.0, rng.gen_range(-0.2..0.2)],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let k = CameraIntrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        CameraView::new(k, pose, features, None).unwrap()
    }

    #[test]
    fn constant_feature_map_fills_covered_grid() {
        let spec = grid();
        let view = covering_view(Tensor::filled(&[2, 48, 64], 3.25));
        let vv = backproject_view(&view, &spec);
        assert!(vv.mask.iter().all(|&m| m), "grid should be fully covered");
        assert!(vv.values.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn camera_looking_away_covers_nothing() {
        let spec = VoxelGridSpec::new([-0.8, -0.8, -5.0], 0.2, [8, 8, 4]).unwrap();
        let view = covering_view(Tensor::filled(&[1, 48, 64], 1.0));
        let vv = backproject_view(&view, &spec);
        assert!(vv.mask.iter().all(|&m| !m));
        assert!(vv.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprojection_matches_per_voxel_oracle() {
        let spec = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let view = random_view(&mut rng, 3);
        let vv = backproject_view(&view, &spec);
        let n = spec.num_voxels();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..4 {
                    let center = spec.voxel_center(i, j, k);
                    let flat = spec.flat_index(i, j, k);
                    if view.in_frustum(center) {
                        assert!(vv.mask[flat]);
                        let (u, v) = match view.project(center) {
                            crate::camera::Projection::Point { u, v, .. } => (u, v),
                            _ => unreachable!(),
                        };
                        let (row, col) = view.pixel_to_feature_index(u, v);
                        for c in 0..3 {
                            assert_eq!(
                                vv.values.data()[c * n + flat],
                                view.features.at(&[c, row, col])
                            );
                        }
                    } else {
                        assert!(!vv.mask[flat]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_view_fusion_has_zero_variance() {
        let spec = grid();
        let view = covering_view(Tensor::filled(&[1, 48, 64], 2.0));
        let fused = fuse_views(&[backproject_view(&view, &spec)]).unwrap();
        assert!(fused.variance.data().iter().all(|&v| v == 0.0));
        assert!(fused.mean.data().iter().all(|&v| v == 2.0));
        assert!(fused.coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn two_constant_views_give_two_sample_identity() {
        let spec = grid();
        let (a, b) = (1.5, -0.5);
        let va = backproject_view(&covering_view(Tensor::filled(&[1, 48, 64], a)), &spec);
        let vb = backproject_view(&covering_view(Tensor::filled(&[1, 48, 64], b)), &spec);
        let fused = fuse_views(&[va, vb]).unwrap();
        let want_mean = (a + b) / 2.0;
        let want_var = ((a - b) / 2.0) * ((a - b) / 2.0);
        for (&m, &v) in fused.mean.data().iter().zip(fused.variance.data()) {
            assert!((m - want_mean).abs() < 1e-12);
            assert!((v - want_var).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_two_pass_oracle() {
        let spec = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let volumes: Vec<ViewVolume> = (0..5)
            .map(|_| backproject_view(&random_view(&mut rng, 2), &spec))
            .collect();
        let fused = fuse_views(&volumes).unwrap();
        let n = spec.num_voxels();
        for c in 0..2 {
            for voxel in 0..n {
                let samples: Vec<f64> = volumes
                    .iter()
                    .filter(|v| v.mask[voxel])
                    .map(|v| v.values.data()[c * n + voxel])
                    .collect();
                let at = c * n + voxel;
                if samples.is_empty() {
                    assert_eq!(fused.mean.data()[at], 0.0);
                    assert_eq!(fused.variance.data()[at], 0.0);
                    continue;
                }
                // Explicit two-pass: mean, then sum of squared residuals.
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                    / samples.len() as f64;
                assert!((fused.mean.data()[at] - mean).abs() < 1e-9);
                assert!((fused.variance.data()[at] - var).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn view_permutation_leaves_fusion_unchanged() {
        let spec = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let volumes: Vec<ViewVolume> = (0..4)
            .map(|_| backproject_view(&random_view(&mut rng, 2), &spec))
            .collect();
        let fused = fuse_views(&volumes).unwrap();
        let mut reversed = volumes.clone();
        reversed.reverse();
        let fused_rev = fuse_views(&reversed).unwrap();
        for (a, b) in fused.mean.data().iter().zip(fused_rev.mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fused.variance.data().iter().zip(fused_rev.variance.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_view_changes_nothing() {
        let spec = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let volumes = vec![
            backproject_view(&random_view(&mut rng, 1), &spec),
            backproject_view(&random_view(&mut rng, 1), &spec),
        ];
        let away_spec = VoxelGridSpec::new([-0.8, -0.8, -5.0], 0.2, [8, 8, 4]).unwrap();
        let away_view = covering_view(Tensor::filled(&[1, 48, 64], 9.0));
        let mut missing = backproject_view(&away_view, &away_spec);
        missing.spec = spec.clone();

        let base = fuse_views(&volumes).unwrap();
        let mut extended = volumes;
        extended.push(missing);
        let with_miss = fuse_views(&extended).unwrap();
        assert_eq!(base.mean.data(), with_miss.mean.data());
        assert_eq!(base.variance.data(), with_miss.variance.data());
        assert_eq!(base.coverage, with_miss.coverage);
    }

    #[test]
    fn concat_orders_mean_then_variance() {
        let spec = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let volumes: Vec<ViewVolume> = (0..3)
            .map(|_| backproject_view(&random_view(&mut rng, 1), &spec))
            .collect();
        let fused = fuse_views(&volumes).unwrap();
        let both = concat_mean_var(&fused);
        assert_eq!(both.shape(), &[2, 8, 8, 4]);
        let n = spec.num_voxels();
        assert_eq!(&both.data()[..n], fused.mean.data());
        assert_eq!(&both.data()[n..], fused.variance.data());
        // Zero-coverage voxels are zero in both halves.
        for (voxel, &cov) in fused.coverage.iter().enumerate() {
            if cov == 0 {
                assert_eq!(both.data()[voxel], 0.0);
                assert_eq!(both.data()[n + voxel], 0.0);
            }
        }
    }

    #[test]
    fn mismatched_specs_are_rejected() {
        let spec = grid();
        let other = VoxelGridSpec::new([0.0; 3], 0.2, [8, 8, 4]).unwrap();
        let view = covering_view(Tensor::filled(&[1, 48, 64], 1.0));
        let a = backproject_view(&view, &spec);
        let b = backproject_view(&view, &other);
        assert!(matches!(
            fuse_views(&[a, b]),
            Err(VolumeError::SpecMismatch { .. })
        ));
    }

    #[test]
    fn volume_file_round_trip() {
        let spec = grid();
        let t = Tensor::from_fn(&[2, 8, 8, 4], |i| (i as f64).sin());
        let mut buf = Vec::new();
        write_volume(&mut buf, &spec, &t).unwrap();
        let (spec2, t2) = read_volume(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(t2.data(), t.data());
    }
}
