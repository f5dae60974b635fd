//! The geometry shaping network: a residual encoder-decoder over the
//! concatenated mean/variance volume, ending in a single-channel linear
//! projection and a sigmoid.
//!
//! Each encoder stage is a stride-2 conv followed by two stride-1 convs
//! (batch norm and ReLU after every conv) with a residual add around the
//! stride-1 pair; spatial extents halve and channels double per stage.
//! Each decoder stage is a kernel-2 stride-2 transposed conv plus one
//! conv, with a skip add from the encoder output at the same scale. The
//! finest decoder has no same-resolution encoder feature, so it carries
//! no skip.

use super::{ShapingError, SurfaceVolume};
use crate::tensor::layers::{
    ConvBnRelu, ConvBnReluCtx, LinearCtx, LinearLayer, ParamVisit, TConvBnRelu, TConvBnReluCtx,
};
use crate::tensor::ops::{activation_forward, Activation};
use crate::tensor::{Tensor, TensorError};
use crate::volume::VoxelGridSpec;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ShapingNetConfig {
    /// Channels of the network input (2C for the mean/variance concat).
    pub in_channels: usize,
    /// Channel width after the first encoder; doubles per stage.
    pub base_width: usize,
    /// Number of encoder (and decoder) stages.
    pub stages: usize,
    pub bn_epsilon: f64,
}

impl ShapingNetConfig {
    pub fn new(in_channels: usize) -> Self {
        ShapingNetConfig {
            in_channels,
            base_width: 16,
            stages: 2,
            bn_epsilon: crate::tensor::ops::DEFAULT_BN_EPSILON,
        }
    }

    pub fn with_base_width(mut self, width: usize) -> Self {
        self.base_width = width;
        self
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: ConvBnRelu,
    c1: ConvBnRelu,
    c2: ConvBnRelu,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: TConvBnRelu,
    post: ConvBnRelu,
}

struct EncoderCtx {
    down: ConvBnReluCtx,
    c1: ConvBnReluCtx,
    c2: ConvBnReluCtx,
}

struct DecoderCtx {
    up: TConvBnReluCtx,
    post: ConvBnReluCtx,
}

/// Saved activations of one shaping forward pass; required by
/// [`ShapingNet::backward`], which therefore cannot run before forward.
pub struct ShapingTrace {
    enc: Vec<EncoderCtx>,
    dec: Vec<DecoderCtx>,
    proj: LinearCtx,
    /// Sigmoid outputs, flat over the grid.
    probs: Vec<f64>,
    spec: VoxelGridSpec,
}

impl ShapingTrace {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct ShapingNet {
    pub config: ShapingNetConfig,
    enc: Vec<EncoderStage>,
    dec: Vec<DecoderStage>,
    proj: LinearLayer,
}

impl ShapingNet {
    /// Build with zero weights; sigmoid(0) makes the initial output 0.5
    /// everywhere.
    pub fn new(config: ShapingNetConfig) -> Self {
        let n = config.stages;
        let mut enc = Vec::with_capacity(n);
        let mut enc_channels = Vec::with_capacity(n);
        let mut ch = config.in_channels;
        for i in 0..n {
            let out = config.base_width << i;
            let mut stage = EncoderStage {
                down: ConvBnRelu::new(ch, out, 3, 2, 1),
                c1: ConvBnRelu::new(out, out, 3, 1, 1),
                c2: ConvBnRelu::new(out, out, 3, 1, 1),
            };
            stage.down.set_bn_epsilon(config.bn_epsilon);
            stage.c1.set_bn_epsilon(config.bn_epsilon);
            stage.c2.set_bn_epsilon(config.bn_epsilon);
            enc.push(stage);
            enc_channels.push(out);
            ch = out;
        }
        let mut dec = Vec::with_capacity(n);
        for j in 0..n {
            let target_level = n - j - 1;
            let out = if target_level >= 1 {
                enc_channels[target_level - 1]
            } else {
                config.base_width
            };
            let mut stage = DecoderStage {
                up: TConvBnRelu::new(ch, out, 2, 2),
                post: ConvBnRelu::new(out, out, 3, 1, 1),
            };
            stage.up.set_bn_epsilon(config.bn_epsilon);
            stage.post.set_bn_epsilon(config.bn_epsilon);
            dec.push(stage);
            ch = out;
        }
        ShapingNet {
            proj: LinearLayer::new(ch, 1),
            config,
            enc,
            dec,
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        for stage in &mut self.enc {
            stage.down.init_random(rng);
            stage.c1.init_random(rng);
            stage.c2.init_random(rng);
        }
        for stage in &mut self.dec {
            stage.up.init_random(rng);
            stage.post.init_random(rng);
        }
        self.proj.init_random(rng);
    }

    fn check_input(&self, vprime: &Tensor, spec: &VoxelGridSpec) -> Result<(), TensorError> {
        let shape = vprime.shape();
        let want = [
            self.config.in_channels,
            spec.dims[0],
            spec.dims[1],
            spec.dims[2],
        ];
        if shape != want {
            return Err(TensorError::ShapeMismatch {
                op: "shaping_forward",
                expected: want.to_vec(),
                got: shape.to_vec(),
            });
        }
        let divisor = 1usize << self.config.stages;
        for &d in &spec.dims {
            if d % divisor != 0 {
                return Err(TensorError::BadGeometry {
                    op: "shaping_forward",
                    detail: format!("extent {d} not divisible by {divisor}"),
                });
            }
        }
        Ok(())
    }

    /// Predict the surface probability volume. Output extents equal the
    /// input extents with a single channel squeezed away.
    pub fn forward(
        &self,
        vprime: &Tensor,
        spec: &VoxelGridSpec,
    ) -> Result<(SurfaceVolume, ShapingTrace), ShapingError> {
        self.check_input(vprime, spec)?;
        let n = self.config.stages;
        let mut enc_ctx = Vec::with_capacity(n);
        let mut enc_outs: Vec<Tensor> = Vec::with_capacity(n);
        let mut x = vprime.clone();
        for stage in &self.enc {
            let (d, down) = stage.down.forward(&x)?;
            let (h1, c1) = stage.c1.forward(&d)?;
            let (h2, c2) = stage.c2.forward(&h1)?;
            let out = d.add(&h2)?;
            enc_ctx.push(EncoderCtx { down, c1, c2 });
            enc_outs.push(out.clone());
            x = out;
        }
        let mut dec_ctx = Vec::with_capacity(n);
        for (j, stage) in self.dec.iter().enumerate() {
            let (u, up) = stage.up.forward(&x)?;
            let target_level = n - j - 1;
            let merged = if target_level >= 1 {
                u.add(&enc_outs[target_level - 1])?
            } else {
                u
            };
            let (p, post) = stage.post.forward(&merged)?;
            dec_ctx.push(DecoderCtx { up, post });
            x = p;
        }
        let (logits, proj) = self.proj.forward(&x)?;
        let probs_t = activation_forward(&logits, Activation::Sigmoid);
        let probs = probs_t.data().to_vec();
        let volume = SurfaceVolume::predicted(spec.clone(), probs.clone())?;
        Ok((
            volume,
            ShapingTrace {
                enc: enc_ctx,
                dec: dec_ctx,
                proj,
                probs,
                spec: spec.clone(),
            },
        ))
    }

    /// Chain a gradient with respect to the surface probabilities back
    /// through the network, accumulating parameter gradients. Returns the
    /// gradient with respect to the network input.
    pub fn backward(
        &mut self,
        trace: &ShapingTrace,
        grad_probs: &[f64],
    ) -> Result<Tensor, ShapingError> {
        assert_eq!(grad_probs.len(), trace.probs.len(), "grad length mismatch");
        let n = self.config.stages;
        let dims = trace.spec.dims;
        // Through the sigmoid: dL/dlogit = dL/dp * p * (1 - p).
        let dlogits = Tensor::from_vec(
            &[1, dims[0], dims[1], dims[2]],
            trace
                .probs
                .iter()
                .zip(grad_probs)
                .map(|(&p, &g)| g * p * (1.0 - p))
                .collect(),
        )
        .expect("logit grad shape");

        let mut g = self.proj.backward(&trace.proj, &dlogits)?;
        let mut skip_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for j in (0..n).rev() {
            let g_merged = self.dec[j].post.backward(&trace.dec[j].post, &g)?;
            let target_level = n - j - 1;
            if target_level >= 1 {
                skip_grads[target_level - 1] = Some(g_merged.clone());
            }
            g = self.dec[j].up.backward(&trace.dec[j].up, &g_merged)?;
        }
        for i in (0..n).rev() {
            let g_out = match &skip_grads[i] {
                Some(sg) => g.add(sg)?,
                None => g,
            };
            // out = d + c2(c1(d)): the gradient reaches d both directly and
            // through the two convs.
            let g_h1 = self.enc[i].c2.backward(&trace.enc[i].c2, &g_out)?;
            let g_branch = self.enc[i].c1.backward(&trace.enc[i].c1, &g_h1)?;
            let g_d = g_out.add(&g_branch)?;
            g = self.enc[i].down.backward(&trace.enc[i].down, &g_d)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        for stage in &mut self.enc {
            stage.down.zero_grads();
            stage.c1.zero_grads();
            stage.c2.zero_grads();
        }
        for stage in &mut self.dec {
            stage.up.zero_grads();
            stage.post.zero_grads();
        }
        self.proj.zero_grads();
    }
}

impl ParamVisit for ShapingNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, stage) in self.enc.iter().enumerate() {
            stage.down.visit_params(&format!("{prefix}.enc{i}.down"), f);
            stage.c1.visit_params(&format!("{prefix}.enc{i}.c1"), f);
            stage.c2.visit_params(&format!("{prefix}.enc{i}.c2"), f);
        }
        for (j, stage) in self.dec.iter().enumerate() {
            stage.up.visit_params(&format!("{prefix}.dec{j}.up"), f);
            stage.post.visit_params(&format!("{prefix}.dec{j}.post"), f);
        }
        self.proj.visit_params(&format!("{prefix}.proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, stage) in self.enc.iter_mut().enumerate() {
            stage.down.visit_params_mut(&format!("{prefix}.enc{i}.down"), f);
            stage.c1.visit_params_mut(&format!("{prefix}.enc{i}.c1"), f);
            stage.c2.visit_params_mut(&format!("{prefix}.enc{i}.c2"), f);
        }
        for (j, stage) in self.dec.iter_mut().enumerate() {
            stage.up.visit_params_mut(&format!("{prefix}.dec{j}.up"), f);
            stage.post.visit_params_mut(&format!("{prefix}.dec{j}.post"), f);
        }
        self.proj.visit_params_mut(&format!("{prefix}.proj"), f);
    }
}
