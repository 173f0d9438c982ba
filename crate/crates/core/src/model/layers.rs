use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{kaiming_uniform, BatchNormLayer, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, LEAKY_SLOPE, rng);
        Conv2dLayer {
            weight: store.add(format!("{name}.weight"), w),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.var(self.weight);
        let b = self.bias.map(|b| cx.var(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn lrelu(cx: &mut Ctx, x: Var) -> Result<Var> {
    cx.g.leaky_relu(x, LEAKY_SLOPE)
}

/// `x + BN(conv(lrelu(BN(conv(x)))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2dLayer,
    bn1: BatchNormLayer,
    conv2: Conv2dLayer,
    bn2: BatchNormLayer,
}

impl ResidualBlock {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::init(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false, rng),
            bn1: BatchNormLayer::new(store, &format!("{name}.bn1"), ch, 2),
            conv2: Conv2dLayer::init(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, false, rng),
            bn2: BatchNormLayer::new(store, &format!("{name}.bn2"), ch, 2),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = lrelu(cx, h)?;
        let h = self.conv2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        cx.g.add(x, h)
    }
}
