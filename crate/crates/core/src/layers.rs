use rand::Rng;

use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Same-padded square convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[out_ch]),
            dilation,
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&b.get(self.weight), Some(&b.get(self.bias)), self.dilation)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
