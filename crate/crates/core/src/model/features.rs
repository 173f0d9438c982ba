use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{lrelu, Conv2dLayer};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

/// Seed of the shipped extractor weights.
pub const FEATURE_EXTRACTOR_SEED: u64 = 0x5_6A19;
/// SHA-256 of the serialized shipped weights; guards against silent drift in
/// initialization or serialization.
pub const FEATURE_EXTRACTOR_SHA256: &str = "5a3078d6033676678888020992be3875799003172c61f4a3a6a93f3c148f35d9";

/// `(out_channels, stride)` per layer; every layer is a tap.
const LAYERS: [(usize, usize); 5] = [(16, 1), (16, 2), (32, 1), (32, 2), (64, 1)];

/// Fixed random-weight convolution stack used for the perceptual and style
/// losses and for the Fréchet feature distance.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub params: ParamStore,
    layers: Vec<Conv2dLayer>,
}

impl FeatureExtractor {
    /// The shipped extractor, verified against its checksum.
    pub fn pinned() -> Result<Self> {
        let fx = Self::from_seed(FEATURE_EXTRACTOR_SEED);
        let actual = fx.checksum();
        if actual != FEATURE_EXTRACTOR_SHA256 {
            return Err(Error::Checksum {
                what: "feature extractor weights".into(),
                expected: FEATURE_EXTRACTOR_SHA256.into(),
                actual,
            });
        }
        Ok(fx)
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut c = 3;
        let layers = LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(o, s))| {
                let l = Conv2dLayer::init(&mut store, &format!("fx.conv{i}"), c, o, 3, s, 1, true, &mut rng);
                c = o;
                l
            })
            .collect();
        FeatureExtractor { params: store, layers }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params.manifest().as_bytes());
        h.update(self.params.to_bytes());
        hex::encode(h.finalize())
    }

    pub fn taps(&self) -> usize {
        self.layers.len()
    }

    /// Tap activations, shallowest first. Weights enter as constants, so
    /// gradients reach `x` but never the extractor.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut cx = Ctx::new(g, &self.params, false, true);
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            let c = l.forward(&mut cx, h)?;
            h = lrelu(&mut cx, c)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Global-average-pooled deepest activations, one row per image.
    pub fn embed(&self, images: &crate::tensor::Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let taps = self.forward(&mut g, x)?;
        let last = g.value(*taps.last().unwrap());
        let s = last.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = last.data();
        Ok((0..b)
            .map(|i| {
                (0..c)
                    .map(|ch| {
                        let off = (i * c + ch) * hw;
                        d[off..off + hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                    })
                    .collect()
            })
            .collect())
    }
}
