//! Geometry-aware voxel pipeline for multi-view 3D object detection.
//!
//! The crate builds a per-voxel feature volume from posed camera views,
//! predicts a surface probability for every voxel with a small
//! encoder-decoder network, weights the volume by that probability, and
//! runs an anchor-free volumetric detection head on top. A desk-scale
//! trainer, a synthetic scene generator and an mAP evaluator close the
//! loop end to end.
//!
//! Modules mirror the pipeline stages:
//! - [`tensor`]: dense f64 tensors plus the fixed layer set with analytic
//!   backward passes.
//! - [`camera`]: pinhole projection and frustum logic.
//! - [`volume`]: back-projection and masked mean/variance fusion.
//! - [`shaping`]: surface labels, the shaping network and focal loss.
//! - [`boxes`]: yaw-oriented boxes, exact rotated IoU and NMS.
//! - [`head`]: multiscale tower, target assignment and detection losses.
//! - [`train`]: Adam, gradient clipping, LR schedule and the training loop.
//! - [`synth`]: deterministic synthetic scene bundles.
//! - [`eval`]: greedy matching and mAP.
//! - [`scene`]: scene bundle file formats.
//! - [`pipeline`]: the image-to-detections inference path.

pub mod boxes;
pub mod camera;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod shaping;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

use std::io;
use std::path::Path;
use std::sync::OnceLock;

/// Worker pool shared by all kernels. `VOXELGEO_THREADS` caps the worker
/// count; results are bitwise identical regardless of the setting because
/// parallel tasks own disjoint outputs and reduce in fixed order.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("VOXELGEO_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build worker pool")
    })
}

/// Write a file via a temporary sibling and rename, so failures never leave
/// a partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.file_name().map(|n| n.to_os_string()).ok_or_else(|| {
        io::Error::new(io::ErrorKind::InvalidInput, "path has no file name")
    })?;
    tmp.push(".tmp");
    let tmp_path = dir.join(tmp);
    std::fs::write(&tmp_path, bytes)?;
    match std::fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            Err(e)
        }
    }
}
