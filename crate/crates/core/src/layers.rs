//! Parameterized layers. Each holds [`ParamId`]s into a [`ParamStore`] and
//! records its op on a [`Graph`] when run.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::deform_ops;
use crate::error::Result;
use crate::nn_ops::{self, Conv2dSpec};
use crate::tensor::{kaiming_uniform, Real, Rng, Tensor};

/// Same-size convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let spec = Conv2dSpec::new(cin, cout, k)?;
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(spec.weight_shape(), spec.fan_in(), rng));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(spec.bias_shape()));
        Ok(Self { spec, weight, bias })
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let spec = Conv2dSpec::new(cin, cout, k)?;
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros(spec.weight_shape()));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(spec.bias_shape()));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        nn_ops::conv2d(g, x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Deformable-kernel convolution with one learned kernel offset per tap,
/// shared over all positions and channels of the layer.
#[derive(Clone, Debug)]
pub struct DkConv {
    pub kernel: usize,
    pub scope_size: usize,
    pub scope: ParamId,
    pub kernel_offset: ParamId,
    pub bias: ParamId,
}

impl DkConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        scope_size: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Conv2dSpec::new(cin, cout, kernel)?;
        let scope = store.add(
            format!("{prefix}.scope"),
            kaiming_uniform([cout, cin, scope_size, scope_size], cin * kernel * kernel, rng),
        );
        let kernel_offset = store.add(format!("{prefix}.kernel_offset"), Tensor::zeros([1, 2 * kernel * kernel, 1, 1]));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Ok(Self {
            kernel,
            scope_size,
            scope,
            kernel_offset,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.param(store, self.scope);
        let o = g.param(store, self.kernel_offset);
        let b = g.param(store, self.bias);
        deform_ops::deformable_kernel_conv2d(g, x, s, o, Some(b), (self.kernel, self.kernel))
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.scope, self.kernel_offset, self.bias]
    }
}

/// Modulated deformable convolution layer; offsets and masks are inputs.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let spec = Conv2dSpec::new(cin, cout, k)?;
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(spec.weight_shape(), spec.fan_in(), rng));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(spec.bias_shape()));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, offsets: Var, mask: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        deform_ops::deformable_conv2d(g, x, w, Some(b), offsets, mask)
    }
}
