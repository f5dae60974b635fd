//! Surface ground-truth generation: occupancy from a point cloud plus a
//! per-ray margin around the depth hit, traced with integer-stepping DDA
//! from the camera center through each depth-valid pixel.

use super::SurfaceVolume;
use crate::camera::CameraView;
use crate::thread_pool;
use crate::volume::VoxelGridSpec;

/// How the margin around surface voxels is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DilationMode {
    /// Dilate strictly along each depth-bearing camera ray.
    AlongRay,
    /// Isotropic 3D dilation of the occupied voxels (Euclidean radius in
    /// voxel units).
    Isotropic,
}

/// Which side of the hit voxel the ray margin covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaySides {
    Both,
    /// Only voxels between the camera and the hit.
    TowardCamera,
    /// Only voxels beyond the hit.
    AwayFromCamera,
}

#[derive(Debug, Clone, Copy)]
pub struct SurfaceLabelConfig {
    /// Margin in voxels. The architecture default is 4.
    pub margin: usize,
    pub dilation: DilationMode,
    pub sides: RaySides,
}

impl Default for SurfaceLabelConfig {
    fn default() -> Self {
        SurfaceLabelConfig {
            margin: 4,
            dilation: DilationMode::AlongRay,
            sides: RaySides::Both,
        }
    }
}

/// Ordered voxels a ray visits inside the grid (Amanatides-Woo traversal).
/// `origin`/`dir` are world-space; the walk runs from the ray's entry into
/// the grid to its exit.
pub fn traverse_grid(spec: &VoxelGridSpec, origin: [f64; 3], dir: [f64; 3]) -> Vec<[usize; 3]> {
    // Slab intersection with the grid bounds.
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let lo = spec.origin[a];
        let hi = spec.origin[a] + spec.dims[a] as f64 * spec.voxel_size;
        if dir[a] == 0.0 {
            if origin[a] < lo || origin[a] >= hi {
                return Vec::new();
            }
            continue;
        }
        let t0 = (lo - origin[a]) / dir[a];
        let t1 = (hi - origin[a]) / dir[a];
        let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
    }
    if t_exit <= t_enter {
        return Vec::new();
    }

    // Nudge the entry point inside to dodge boundary ambiguity.
    let eps = 1e-9 * spec.voxel_size;
    let t0 = t_enter + eps;
    let start = [
        origin[0] + t0 * dir[0],
        origin[1] + t0 * dir[1],
        origin[2] + t0 * dir[2],
    ];
    let mut cell = [0isize; 3];
    for a in 0..3 {
        let rel = (start[a] - spec.origin[a]) / spec.voxel_size;
        cell[a] = (rel.floor() as isize).clamp(0, spec.dims[a] as isize - 1);
    }

    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = spec.origin[a] + (cell[a] + 1) as f64 * spec.voxel_size;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = spec.voxel_size / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = spec.origin[a] + cell[a] as f64 * spec.voxel_size;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = spec.voxel_size / -dir[a];
        }
    }

    let max_steps = spec.dims[0] + spec.dims[1] + spec.dims[2] + 3;
    let mut path = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        path.push([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
        // Advance along the axis whose boundary comes first.
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= spec.dims[axis] as isize {
            break;
        }
        t_next[axis] += t_delta[axis];
    }
    path
}

fn ray_margin_mask(view: &CameraView, spec: &VoxelGridSpec, cfg: &SurfaceLabelConfig) -> Vec<bool> {
    let mut mask = vec![false; spec.num_voxels()];
    let depth = match &view.depth {
        Some(d) => d,
        None => return mask,
    };
    let (h, w) = (view.intrinsics.height, view.intrinsics.width);
    for row in 0..h {
        for col in 0..w {
            let d = depth.data()[row * w + col];
            if d <= 0.0 {
                continue;
            }
            let (origin, dir) = view.pixel_ray(col as f64 + 0.5, row as f64 + 0.5);
            let hit = [
                origin[0] + d * dir[0],
                origin[1] + d * dir[1],
                origin[2] + d * dir[2],
            ];
            let hit_voxel = match spec.world_to_voxel(hit) {
                Some(v) => v,
                None => continue,
            };
            let path = traverse_grid(spec, origin, dir);
            let pos = match path.iter().position(|&v| v == hit_voxel) {
                Some(p) => p,
                None => continue,
            };
            let lo = match cfg.sides {
                RaySides::AwayFromCamera => pos,
                _ => pos.saturating_sub(cfg.margin),
            };
            let hi = match cfg.sides {
                RaySides::TowardCamera => pos,
                _ => (pos + cfg.margin).min(path.len() - 1),
            };
            for &[i, j, k] in &path[lo..=hi] {
                mask[spec.flat_index(i, j, k)] = true;
            }
        }
    }
    mask
}

/// Label volume: a voxel is surface iff it contains at least one point;
/// additionally each depth-bearing camera ray marks the voxels it traverses
/// within `margin` steps of the voxel its depth sample hits.
pub fn surface_labels(
    points: &[[f64; 3]],
    views: &[CameraView],
    spec: &VoxelGridSpec,
    cfg: &SurfaceLabelConfig,
) -> SurfaceVolume {
    let mut mask = vec![false; spec.num_voxels()];
    for &p in points {
        if let Some([i, j, k]) = spec.world_to_voxel(p) {
            mask[spec.flat_index(i, j, k)] = true;
        }
    }
    match cfg.dilation {
        DilationMode::AlongRay => {
            if cfg.margin > 0 || !views.is_empty() {
                // Per-view masks merge with a commutative OR, so the view
                // order never matters.
                let view_masks: Vec<Vec<bool>> = thread_pool().install(|| {
                    use rayon::prelude::*;
                    views
                        .par_iter()
                        .map(|v| ray_margin_mask(v, spec, cfg))
                        .collect()
                });
                for vm in view_masks {
                    for (m, v) in mask.iter_mut().zip(vm) {
                        *m |= v;
                    }
                }
            }
        }
        DilationMode::Isotropic => {
            if cfg.margin > 0 {
                mask = dilate_isotropic(spec, &mask, cfg.margin);
            }
        }
    }
    SurfaceVolume::from_mask(spec.clone(), &mask)
}

fn dilate_isotropic(spec: &VoxelGridSpec, mask: &[bool], radius: usize) -> Vec<bool> {
    let [nx, ny, nz] = spec.dims;
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut out = mask.to_vec();
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for k in 0..nz as isize {
                if !mask[spec.flat_index(i as usize, j as usize, k as usize)] {
                    continue;
                }
                for di in -r..=r {
                    for dj in -r..=r {
                        for dk in -r..=r {
                            if di * di + dj * dj + dk * dk > r2 {
                                continue;
                            }
                            let (x, y, z) = (i + di, j + dj, k + dk);
                            if x >= 0
                                && y >= 0
                                && z >= 0
                                && x < nx as isize
                                && y < ny as isize
                                && z < nz as isize
                            {
                                out[spec.flat_index(x as usize, y as usize, z as usize)] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
