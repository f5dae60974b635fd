//! The full detector: shaping network, multiscale tower and prediction
//! heads behind one parameter registry, plus the checkpoint format (a text
//! manifest of layer names and shapes followed by the concatenated
//! parameter tensors in the tensor serialization).

use crate::head::{HeadGrads, HeadOutput, Heads, HeadsTrace, ScalePyramid, Tower, TowerConfig, TowerTrace};
use crate::shaping::{
    apply_shaping_backward, apply_shaping_values, ShapingError, ShapingNet, ShapingNetConfig,
    ShapingTrace, SurfaceVolume,
};
use crate::tensor::io::TensorIoError;
use crate::tensor::layers::ParamVisit;
use crate::tensor::{io as tio, Tensor, TensorError};
use crate::volume::VoxelGridSpec;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature channels C of the fused volume (the shaping net sees 2C).
    pub feature_channels: usize,
    pub num_classes: usize,
    pub shaping_width: usize,
    pub shaping_stages: usize,
    pub tower_channels: usize,
    pub scales: usize,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    pub fn new(feature_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            feature_channels,
            num_classes,
            shaping_width: 16,
            shaping_stages: 2,
            tower_channels: 16,
            scales: 3,
            bn_epsilon: crate::tensor::ops::DEFAULT_BN_EPSILON,
        }
    }
}

/// Whether the detector uses the learned surface probability or a uniform
/// one (the shaping-off ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapingMode {
    Learned,
    ForcedUniform,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub shaping: ShapingNet,
    pub tower: Tower,
    pub heads: Heads,
}

/// Everything the backward pass needs from one detector forward.
pub struct DetectorTrace {
    shaping: Option<ShapingTrace>,
    tower: TowerTrace,
    heads: HeadsTrace,
}

pub struct DetectorOutputs {
    /// Learned surface prediction; absent under [`ShapingMode::ForcedUniform`].
    pub surface: Option<SurfaceVolume>,
    pub pyramid: ScalePyramid,
    pub head: HeadOutput,
}

impl Detector {
    pub fn new(config: ModelConfig) -> Self {
        let shaping_cfg = ShapingNetConfig {
            in_channels: 2 * config.feature_channels,
            base_width: config.shaping_width,
            stages: config.shaping_stages,
            bn_epsilon: config.bn_epsilon,
        };
        let mut tower_cfg = TowerConfig::new(config.scales, config.tower_channels);
        tower_cfg.bn_epsilon = config.bn_epsilon;
        Detector {
            shaping: ShapingNet::new(shaping_cfg),
            tower: Tower::new(config.feature_channels, tower_cfg),
            heads: Heads::new(config.tower_channels, config.num_classes),
            config,
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        self.shaping.init_random(rng);
        self.tower.init_random(rng);
        self.heads.init_random(rng);
    }

    /// Run shaping, weighting, tower and heads over a fused volume.
    pub fn forward(
        &self,
        vprime: &Tensor,
        mean: &Tensor,
        spec: &VoxelGridSpec,
        mode: ShapingMode,
    ) -> Result<(DetectorOutputs, DetectorTrace), ShapingError> {
        let (surface, shaping_trace, vg) = match mode {
            ShapingMode::Learned => {
                let (s, strace) = self.shaping.forward(vprime, spec)?;
                let vg = apply_shaping_values(mean, s.values())?;
                (Some(s), Some(strace), vg)
            }
            ShapingMode::ForcedUniform => (None, None, mean.clone()),
        };
        let (pyramid, tower_trace) = self.tower.forward(&vg, spec)?;
        let (head, heads_trace) = self.heads.forward(&pyramid)?;
        Ok((
            DetectorOutputs {
                surface,
                pyramid,
                head,
            },
            DetectorTrace {
                shaping: shaping_trace,
                tower: tower_trace,
                heads: heads_trace,
            },
        ))
    }

    /// Accumulate parameter gradients from the head losses plus, in learned
    /// mode, a gradient on the surface probabilities (the weighted surface
    /// loss term). `surface_values` and `mean` must come from the same
    /// forward pass.
    pub fn backward(
        &mut self,
        trace: &DetectorTrace,
        head_grads: &HeadGrads,
        surface_values: Option<&[f64]>,
        surface_grad: Option<&[f64]>,
        mean: &Tensor,
    ) -> Result<(), ShapingError> {
        let scale_grads = self.heads.backward(&trace.heads, head_grads)?;
        let dvg = self.tower.backward(&trace.tower, &scale_grads)?;
        if let (Some(strace), Some(s)) = (&trace.shaping, surface_values) {
            let (_dmean, mut ds) = apply_shaping_backward(mean, s, &dvg)?;
            if let Some(extra) = surface_grad {
                for (a, b) in ds.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            self.shaping.backward(strace, &ds)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.shaping.zero_grads();
        self.tower.zero_grads();
        self.heads.zero_grads();
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params("model", &mut |_, t| count += t.len());
        count
    }
}

impl ParamVisit for Detector {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.shaping.visit_params(&format!("{prefix}.shaping"), f);
        self.tower.visit_params(&format!("{prefix}.tower"), f);
        self.heads.visit_params(&format!("{prefix}.heads"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.shaping.visit_params_mut(&format!("{prefix}.shaping"), f);
        self.tower.visit_params_mut(&format!("{prefix}.tower"), f);
        self.heads.visit_params_mut(&format!("{prefix}.heads"), f);
    }
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadFormat(String),
    /// The stored manifest does not agree with the model the config builds.
    Mismatch(String),
    Tensor(TensorIoError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::BadFormat(s) => write!(f, "bad checkpoint: {s}"),
            CheckpointError::Mismatch(s) => write!(f, "checkpoint/config mismatch: {s}"),
            CheckpointError::Tensor(e) => write!(f, "checkpoint tensor: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<TensorIoError> for CheckpointError {
    fn from(e: TensorIoError) -> Self {
        CheckpointError::Tensor(e)
    }
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::BadFormat(e.to_string())
    }
}

const CHECKPOINT_MAGIC: &str = "voxelgeo-checkpoint 1";

/// Serialize config metadata, the layer manifest and every parameter
/// tensor.
pub fn write_checkpoint(w: &mut impl Write, det: &Detector) -> Result<(), CheckpointError> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let c = &det.config;
    writeln!(w, "meta feature_channels {}", c.feature_channels)?;
    writeln!(w, "meta num_classes {}", c.num_classes)?;
    writeln!(w, "meta shaping_width {}", c.shaping_width)?;
    writeln!(w, "meta shaping_stages {}", c.shaping_stages)?;
    writeln!(w, "meta tower_channels {}", c.tower_channels)?;
    writeln!(w, "meta scales {}", c.scales)?;
    writeln!(w, "meta bn_epsilon {}", c.bn_epsilon)?;

    let mut entries: Vec<(String, Tensor)> = Vec::new();
    det.visit_params("model", &mut |name, t| entries.push((name, t.clone())));
    writeln!(w, "params {}", entries.len())?;
    for (name, t) in &entries {
        write!(w, "{name} {}", t.shape().len())?;
        for e in t.shape() {
            write!(w, " {e}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "data")?;
    for (_, t) in &entries {
        tio::write_tensor(w, t)?;
    }
    Ok(())
}

/// Read a checkpoint back into a freshly built detector, validating the
/// manifest against the stored config.
pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Detector, CheckpointError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadFormat(format!(
            "unexpected magic {:?}",
            line.trim_end()
        )));
    }
    let mut metas: BTreeMap<String, String> = BTreeMap::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut expected_params: Option<usize> = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(CheckpointError::BadFormat("missing data section".into()));
        }
        let trimmed = line.trim_end();
        if trimmed == "data" {
            break;
        }
        let mut fields = trimmed.split_whitespace();
        match fields.next() {
            Some("meta") => {
                let key = fields
                    .next()
                    .ok_or_else(|| CheckpointError::BadFormat("meta without key".into()))?;
                let value = fields.next().ok_or_else(|| {
                    CheckpointError::BadFormat(format!("meta {key} without value"))
                })?;
                metas.insert(key.to_string(), value.to_string());
            }
            Some("params") => {
                let n: usize = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CheckpointError::BadFormat("bad params count".into()))?;
                expected_params = Some(n);
            }
            Some(name) => {
                let ndim: usize = fields.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
                    CheckpointError::BadFormat(format!("bad manifest line {trimmed}"))
                })?;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    let e: usize =
                        fields.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
                            CheckpointError::BadFormat(format!("bad manifest line {trimmed}"))
                        })?;
                    shape.push(e);
                }
                manifest.push((name.to_string(), shape));
            }
            None => {}
        }
    }
    if let Some(n) = expected_params {
        if manifest.len() != n {
            return Err(CheckpointError::BadFormat(format!(
                "manifest lists {} params, header promises {n}",
                manifest.len()
            )));
        }
    }

    let meta_usize = |key: &str| -> Result<usize, CheckpointError> {
        metas
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::BadFormat(format!("missing meta {key}")))
    };
    let bn_epsilon: f64 = metas
        .get("bn_epsilon")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::BadFormat("missing meta bn_epsilon".into()))?;
    let config = ModelConfig {
        feature_channels: meta_usize("feature_channels")?,
        num_classes: meta_usize("num_classes")?,
        shaping_width: meta_usize("shaping_width")?,
        shaping_stages: meta_usize("shaping_stages")?,
        tower_channels: meta_usize("tower_channels")?,
        scales: meta_usize("scales")?,
        bn_epsilon,
    };

    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(manifest.len());
    for (name, shape) in &manifest {
        let t = tio::read_tensor(r)?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: manifest shape {shape:?} but payload {:?}",
                t.shape()
            )));
        }
        tensors.push((name.clone(), t));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::BadFormat(
            "trailing bytes after parameter payload".into(),
        ));
    }

    let mut det = Detector::new(config);
    let mut index = 0usize;
    let mut error: Option<CheckpointError> = None;
    det.visit_params_mut("model", &mut |name, t| {
        if error.is_some() {
            return;
        }
        match tensors.get(index) {
            None => {
                error = Some(CheckpointError::Mismatch(format!(
                    "checkpoint ends before parameter {name}"
                )));
            }
            Some((stored_name, stored)) => {
                if *stored_name != name {
                    error = Some(CheckpointError::Mismatch(format!(
                        "expected parameter {name}, checkpoint has {stored_name}"
                    )));
                } else if stored.shape() != t.shape() {
                    error = Some(CheckpointError::Mismatch(format!(
                        "{name}: model shape {:?}, checkpoint {:?}",
                        t.shape(),
                        stored.shape()
                    )));
                } else {
                    t.data_mut().copy_from_slice(stored.data());
                }
            }
        }
        index += 1;
    });
    if let Some(e) = error {
        return Err(e);
    }
    if index != tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} parameters, model needs {index}",
            tensors.len()
        )));
    }
    Ok(det)
}

pub fn save_checkpoint(path: &Path, det: &Detector) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, det)?;
    crate::write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Detector, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::new(2, 3);
        c.shaping_width = 4;
        c.tower_channels = 4;
        c.scales = 2;
        c
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut det = Detector::new(small_config());
        det.init_random(&mut ChaCha8Rng::seed_from_u64(7));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &det).unwrap();
        let back = read_checkpoint(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.config, det.config);

        let mut original = Vec::new();
        det.visit_params("model", &mut |name, t| {
            original.push((name, t.data().to_vec()));
        });
        let mut restored = Vec::new();
        back.visit_params("model", &mut |name, t| {
            restored.push((name, t.data().to_vec()));
        });
        assert_eq!(original.len(), restored.len());
        for ((n1, d1), (n2, d2)) in original.iter().zip(&restored) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = d1.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = d2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2, "parameter {n1}");
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let det = Detector::new(small_config());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &det).unwrap();
        buf.truncate(buf.len() - 16);
        assert!(read_checkpoint(&mut std::io::BufReader::new(&buf[..])).is_err());
    }

    #[test]
    fn detector_forward_backward_runs() {
        let spec = VoxelGridSpec::new([0.0; 3], 0.25, [8, 8, 8]).unwrap();
        let mut det = Detector::new(small_config());
        det.init_random(&mut ChaCha8Rng::seed_from_u64(1));
        let mean = Tensor::from_fn(&[2, 8, 8, 8], |i| (i as f64 * 0.011).sin());
        let variance = Tensor::from_fn(&[2, 8, 8, 8], |i| (i as f64 * 0.007).cos().abs());
        let mut vprime_data = mean.data().to_vec();
        vprime_data.extend_from_slice(variance.data());
        let vprime = Tensor::from_vec(&[4, 8, 8, 8], vprime_data).unwrap();

        let (out, trace) = det
            .forward(&vprime, &mean, &spec, ShapingMode::Learned)
            .unwrap();
        assert!(out.surface.is_some());
        assert_eq!(out.pyramid.volumes.len(), 2);
        assert_eq!(out.head.cls[0].shape(), &[3, 8, 8, 8]);

        let head_grads = HeadGrads {
            cls: out.head.cls.iter().map(|t| Tensor::filled(t.shape(), 1e-3)).collect(),
            ctr: out.head.ctr.iter().map(|t| Tensor::filled(t.shape(), 1e-3)).collect(),
            reg: out.head.reg.iter().map(|t| Tensor::filled(t.shape(), 1e-3)).collect(),
        };
        let s_values = out.surface.as_ref().unwrap().values().to_vec();
        let surface_grad = vec![1e-3; s_values.len()];
        det.zero_grads();
        det.backward(
            &trace,
            &head_grads,
            Some(&s_values),
            Some(&surface_grad),
            &mean,
        )
        .unwrap();
        let mut saw_grad = false;
        det.visit_params("model", &mut |_, t| {
            if let Some(g) = t.grad() {
                if g.iter().any(|&v| v != 0.0) {
                    saw_grad = true;
                }
            }
        });
        assert!(saw_grad, "no gradients accumulated");
    }

    #[test]
    fn forced_uniform_shaping_skips_the_network() {
        let spec = VoxelGridSpec::new([0.0; 3], 0.25, [8, 8, 8]).unwrap();
        let det = Detector::new(small_config());
        let mean = Tensor::from_fn(&[2, 8, 8, 8], |i| (i as f64 * 0.011).sin());
        let vprime = Tensor::zeros(&[4, 8, 8, 8]);
        let (out, _) = det
            .forward(&vprime, &mean, &spec, ShapingMode::ForcedUniform)
            .unwrap();
        assert!(out.surface.is_none());
    }
}
