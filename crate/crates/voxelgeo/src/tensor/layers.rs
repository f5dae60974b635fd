//! Composite blocks used by the shaping network and the detection tower:
//! conv/transposed-conv followed by batch norm and ReLU, plus a plain
//! channel projection. Each block keeps its forward activations in a
//! context value so the caller cannot run backward without having run
//! forward first, and accumulates parameter gradients in place.

use super::ops::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv3d_backward, conv3d_forward, conv3d_transposed_backward, conv3d_transposed_forward,
    linear_backward, linear_forward, Activation, LayerParams,
};
use super::{Tensor, TensorError};
use rand::Rng;

/// Visit every parameter tensor of a component with a stable name.
pub trait ParamVisit {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

fn init_uniform(t: &mut Tensor, fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// conv3d + batchnorm + ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: LayerParams,
    pub bn: LayerParams,
}

/// Saved activations from [`ConvBnRelu::forward`].
pub struct ConvBnReluCtx {
    input: Tensor,
    pre_bn: Tensor,
    pre_relu: Tensor,
}

impl ConvBnRelu {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvBnRelu {
            conv: LayerParams::conv3d(c_in, c_out, kernel, stride, padding),
            bn: LayerParams::batchnorm(c_out),
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        let ws = self.conv.weight.shape().to_vec();
        init_uniform(&mut self.conv.weight, ws[1] * ws[2] * ws[3] * ws[4], rng);
    }

    pub fn set_bn_epsilon(&mut self, epsilon: f64) {
        self.bn.epsilon = epsilon;
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ConvBnReluCtx), TensorError> {
        let pre_bn = conv3d_forward(input, &self.conv)?;
        let pre_relu = batchnorm_forward(&pre_bn, &self.bn)?;
        let out = activation_forward(&pre_relu, Activation::Relu);
        Ok((
            out,
            ConvBnReluCtx {
                input: input.clone(),
                pre_bn,
                pre_relu,
            },
        ))
    }

    /// Chain `grad_out` back through ReLU, batch norm and the convolution,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, ctx: &ConvBnReluCtx, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let g_relu = activation_backward(&ctx.pre_relu, Activation::Relu, grad_out)?;
        let bn_grads = batchnorm_backward(&ctx.pre_bn, &self.bn, &g_relu)?;
        self.bn.weight.accumulate_grad(bn_grads.weight.data());
        self.bn.bias.accumulate_grad(bn_grads.bias.data());
        let conv_grads = conv3d_backward(&ctx.input, &self.conv, &bn_grads.input)?;
        self.conv.weight.accumulate_grad(conv_grads.weight.data());
        self.conv.bias.accumulate_grad(conv_grads.bias.data());
        Ok(conv_grads.input)
    }

    pub fn zero_grads(&mut self) {
        self.conv.zero_grads();
        self.bn.zero_grads();
    }
}

impl ParamVisit for ConvBnRelu {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.conv.weight"), &self.conv.weight);
        f(format!("{prefix}.conv.bias"), &self.conv.bias);
        f(format!("{prefix}.bn.scale"), &self.bn.weight);
        f(format!("{prefix}.bn.shift"), &self.bn.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.conv.weight"), &mut self.conv.weight);
        f(format!("{prefix}.conv.bias"), &mut self.conv.bias);
        f(format!("{prefix}.bn.scale"), &mut self.bn.weight);
        f(format!("{prefix}.bn.shift"), &mut self.bn.bias);
    }
}

/// Transposed conv3d + batchnorm + ReLU (the decoder upsampling block).
#[derive(Debug, Clone)]
pub struct TConvBnRelu {
    pub tconv: LayerParams,
    pub bn: LayerParams,
}

pub struct TConvBnReluCtx {
    input: Tensor,
    pre_bn: Tensor,
    pre_relu: Tensor,
}

impl TConvBnRelu {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        TConvBnRelu {
            tconv: LayerParams::conv3d_transposed(c_in, c_out, kernel, stride),
            bn: LayerParams::batchnorm(c_out),
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        let ws = self.tconv.weight.shape().to_vec();
        init_uniform(&mut self.tconv.weight, ws[0] * ws[2] * ws[3] * ws[4], rng);
    }

    pub fn set_bn_epsilon(&mut self, epsilon: f64) {
        self.bn.epsilon = epsilon;
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, TConvBnReluCtx), TensorError> {
        let pre_bn = conv3d_transposed_forward(input, &self.tconv)?;
        let pre_relu = batchnorm_forward(&pre_bn, &self.bn)?;
        let out = activation_forward(&pre_relu, Activation::Relu);
        Ok((
            out,
            TConvBnReluCtx {
                input: input.clone(),
                pre_bn,
                pre_relu,
            },
        ))
    }

    pub fn backward(&mut self, ctx: &TConvBnReluCtx, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let g_relu = activation_backward(&ctx.pre_relu, Activation::Relu, grad_out)?;
        let bn_grads = batchnorm_backward(&ctx.pre_bn, &self.bn, &g_relu)?;
        self.bn.weight.accumulate_grad(bn_grads.weight.data());
        self.bn.bias.accumulate_grad(bn_grads.bias.data());
        let tconv_grads = conv3d_transposed_backward(&ctx.input, &self.tconv, &bn_grads.input)?;
        self.tconv.weight.accumulate_grad(tconv_grads.weight.data());
        self.tconv.bias.accumulate_grad(tconv_grads.bias.data());
        Ok(tconv_grads.input)
    }

    pub fn zero_grads(&mut self) {
        self.tconv.zero_grads();
        self.bn.zero_grads();
    }
}

impl ParamVisit for TConvBnRelu {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.tconv.weight"), &self.tconv.weight);
        f(format!("{prefix}.tconv.bias"), &self.tconv.bias);
        f(format!("{prefix}.bn.scale"), &self.bn.weight);
        f(format!("{prefix}.bn.shift"), &self.bn.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.tconv.weight"), &mut self.tconv.weight);
        f(format!("{prefix}.tconv.bias"), &mut self.tconv.bias);
        f(format!("{prefix}.bn.scale"), &mut self.bn.weight);
        f(format!("{prefix}.bn.shift"), &mut self.bn.bias);
    }
}

/// Channel-wise linear projection (1x1x1 convolution).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub params: LayerParams,
}

pub struct LinearCtx {
    input: Tensor,
}

impl LinearLayer {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        LinearLayer {
            params: LayerParams::linear(c_in, c_out),
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        let c_in = self.params.weight.shape()[1];
        init_uniform(&mut self.params.weight, c_in, rng);
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, LinearCtx), TensorError> {
        let out = linear_forward(input, &self.params)?;
        Ok((
            out,
            LinearCtx {
                input: input.clone(),
            },
        ))
    }

    pub fn backward(&mut self, ctx: &LinearCtx, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let grads = linear_backward(&ctx.input, &self.params, grad_out)?;
        self.params.weight.accumulate_grad(grads.weight.data());
        self.params.bias.accumulate_grad(grads.bias.data());
        Ok(grads.input)
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }
}

impl ParamVisit for LinearLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.params.weight);
        f(format!("{prefix}.bias"), &self.params.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.params.weight);
        f(format!("{prefix}.bias"), &mut self.params.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_block_runs_and_accumulates_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = ConvBnRelu::new(2, 3, 3, 1, 1);
        block.init_random(&mut rng);
        let input = Tensor::from_fn(&[2, 4, 4, 4], |i| (i as f64 * 0.37).sin());
        let (out, ctx) = block.forward(&input).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4, 4]);
        let gout = Tensor::filled(out.shape(), 1.0);
        let gin = block.backward(&ctx, &gout).unwrap();
        assert_eq!(gin.shape(), input.shape());
        assert!(block.conv.weight.grad().is_some());
        assert!(block.bn.weight.grad().is_some());
    }

    #[test]
    fn param_names_are_stable() {
        let block = ConvBnRelu::new(1, 1, 3, 1, 1);
        let mut names = Vec::new();
        block.visit_params("enc0.down", &mut |name, _| names.push(name));
        assert_eq!(
            names,
            vec![
                "enc0.down.conv.weight",
                "enc0.down.conv.bias",
                "enc0.down.bn.scale",
                "enc0.down.bn.shift"
            ]
        );
    }
}
