use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{lrelu, Conv2dLayer};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Ctx, ParamStore};

/// Patch discriminator on the channel concatenation of image and sketch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    layers: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

impl Discriminator {
    /// 4x4 stride-2 convolutions of the given widths, then a 3x3 head
    /// producing one score per patch.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut c = 4;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Conv2dLayer::init(&mut store, &format!("d.conv{i}"), c, w, 4, 2, 1, true, &mut rng);
                c = w;
                l
            })
            .collect();
        let head = Conv2dLayer::init(&mut store, "d.head", c, 1, 3, 1, 1, true, &mut rng);
        Discriminator {
            params: store,
            layers,
            head,
        }
    }

    /// Score-map extents for an `h x w` input.
    pub fn score_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let f = 1 << self.layers.len();
        (h / f, w / f)
    }

    /// Binds the parameters (as constants when `frozen`) and scores `image`.
    pub fn forward(&self, g: &mut Graph, image: Var, sketch: Var, frozen: bool) -> Result<(Var, Binding)> {
        let mut cx = Ctx::new(g, &self.params, true, frozen);
        let s = self.forward_ctx(&mut cx, image, sketch)?;
        Ok((s, cx.finish()))
    }

    pub fn forward_ctx(&self, cx: &mut Ctx, image: Var, sketch: Var) -> Result<Var> {
        let (si, ss) = (cx.g.shape(image).to_vec(), cx.g.shape(sketch).to_vec());
        if si.len() != 4 || ss.len() != 4 || si[1] != 3 || ss[1] != 1 {
            return Err(Error::shapes("discriminator expects b x 3 x h x w and b x 1 x h x w", &si, &ss));
        }
        let mut h = cx.g.concat(&[image, sketch], 1)?;
        for l in &self.layers {
            let c = l.forward(cx, h)?;
            h = lrelu(cx, c)?;
        }
        self.head.forward(cx, h)
    }
}
