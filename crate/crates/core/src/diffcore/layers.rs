//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::diffcore::conv::ConvSpec;
use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::init;
use crate::diffcore::params::{BnId, ParamId, ParamStore};
use crate::diffcore::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Convolution (or transposed convolution) with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    /// He-initialized weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = if spec.transposed {
            // each output pixel sees about in * k^2 / stride^2 taps
            spec.in_channels * spec.kernel_h * spec.kernel_w / (spec.stride * spec.stride)
        } else {
            spec.in_channels * spec.kernel_h * spec.kernel_w
        };
        let weight = store.add(format!("{name}.weight"), init::kaiming_normal(&spec.weight_shape(), fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        Self { spec, weight, bias }
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&spec.weight_shape()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        Self { spec, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, self.spec, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let state = store.add_bn(format!("{name}.running"), channels);
        Self { gamma, beta, state }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.batchnorm(x, gm, bt, self.state)
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), spec, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels);
        Self { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}
