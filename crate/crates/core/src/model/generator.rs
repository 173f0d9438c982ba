use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{lrelu, Conv2dLayer, ResidualBlock};
use crate::attention::{
    baseline_attention, cross_sga_block, self_sga_block, BaselineAttentionParams, BranchTapHandles, SgaBlockParams,
    SgaOptions,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Ctx, ParamStore};

/// Attention module used to fuse sketch and reference features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dot-product attention with Q/K/V projections and a skip connection.
    Baseline,
    /// Baseline with the attention map detached.
    BaselineStopGrad,
    /// Cross-SGA followed by self-SGA.
    Sga,
    /// SGA with gradients allowed through the attention map.
    SgaNoStopGrad,
    /// SGA with row softmax only (no column normalization).
    SgaSoftmaxOnly,
    /// Cross-SGA blocks only.
    SgaNoSelf,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::BaselineStopGrad,
        Variant::Sga,
        Variant::SgaNoStopGrad,
        Variant::SgaSoftmaxOnly,
        Variant::SgaNoSelf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineStopGrad => "baseline+stopgrad",
            Variant::Sga => "sga",
            Variant::SgaNoStopGrad => "sga_no_stopgrad",
            Variant::SgaSoftmaxOnly => "sga_softmax_only",
            Variant::SgaNoSelf => "sga_no_self",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::Baseline | Variant::BaselineStopGrad)
    }

    /// Whether the attention map is computed behind a gradient barrier.
    pub fn stops_gradient(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::SgaNoStopGrad)
    }

    fn sga_options(self) -> SgaOptions {
        SgaOptions {
            stop_gradient: self != Variant::SgaNoStopGrad,
            double_norm: self != Variant::SgaSoftmaxOnly,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub variant: Variant,
    /// Output widths of the stride-2 encoder convolutions.
    pub enc_channels: Vec<usize>,
    pub res_blocks: usize,
    /// Number of cross-SGA (+ self-SGA) pairs.
    pub sga_blocks: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            variant: Variant::Sga,
            enc_channels: vec![16, 32, 64, 128],
            res_blocks: 2,
            sga_blocks: 1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn stride(&self) -> usize {
        1 << self.enc_channels.len()
    }

    pub fn feature_width(&self) -> usize {
        self.enc_channels.iter().sum()
    }
}

/// Stack of 3x3 stride-2 convolutions whose outputs are all kept.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<Conv2dLayer>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, name: &str, in_ch: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut c = in_ch;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Conv2dLayer::init(store, &format!("{name}.conv{i}"), c, w, 3, 2, 1, true, rng);
                c = w;
                l
            })
            .collect();
        Encoder { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Activations of every layer, shallowest first.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        let s = cx.g.shape(x).to_vec();
        let stride = 1usize << self.layers.len();
        if s.len() != 4 || !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return Err(Error::Dimension(format!(
                "encoder input {s:?} must be b x c x h x w with extents divisible by {stride}"
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            let c = l.forward(cx, h)?;
            h = lrelu(cx, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Pools every level to the deepest extents, concatenates along channels
/// and unfolds to `b x n x d` tokens. Returns the tokens and `(h, w)`.
pub fn pool_and_tokenize(g: &mut Graph, levels: &[Var]) -> Result<(Var, (usize, usize))> {
    let last = *levels.last().ok_or_else(|| Error::Dimension("no encoder levels".into()))?;
    let s = g.shape(last).to_vec();
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut pooled = Vec::with_capacity(levels.len());
    for &l in levels {
        pooled.push(g.adaptive_avg_pool2d(l, h, w)?);
    }
    let cat = g.concat(&pooled, 1)?;
    let d = g.shape(cat)[1];
    let flat = g.reshape(cat, &[b, d, h * w])?;
    Ok((g.transpose(flat)?, (h, w)))
}

/// Inverse of the unfold in [`pool_and_tokenize`]: `b x n x d` to
/// `b x d x h x w`.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let t = g.transpose(tokens)?;
    g.reshape(t, &[s[0], s[2], h, w])
}

#[derive(Clone, Debug)]
enum Fusion {
    Baseline(BaselineAttentionParams),
    Sga(Vec<(SgaBlockParams, Option<SgaBlockParams>)>),
}

/// Encoders, attention fusion, residual blocks and a U-Net decoder.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    sketch_enc: Encoder,
    ref_enc: Encoder,
    fusion: Fusion,
    project: Conv2dLayer,
    res: Vec<ResidualBlock>,
    /// One upsampling convolution per encoder level, deepest first.
    dec: Vec<Conv2dLayer>,
    out: Conv2dLayer,
}

/// Everything a forward pass exposes besides the image.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `b x 3 x h x w` in `[0, 1]`.
    pub image: Var,
    /// One entry per attention application, in order.
    pub taps: Vec<BranchTapHandles>,
    pub f_s: Var,
    pub f_r: Var,
    pub f_gen: Var,
    /// Token grid extents.
    pub grid: (usize, usize),
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.enc_channels.len() < 3 {
            return Err(Error::Config("the encoders need at least 3 layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let widths = &config.enc_channels;
        let sketch_enc = Encoder::init(&mut store, "enc_s", 1, widths, &mut rng);
        let ref_enc = Encoder::init(&mut store, "enc_r", 3, widths, &mut rng);
        let d = config.feature_width();
        let fusion = if config.variant.is_baseline() {
            Fusion::Baseline(BaselineAttentionParams::init(&mut store, "attn", d, &mut rng))
        } else {
            let with_self = config.variant != Variant::SgaNoSelf;
            Fusion::Sga(
                (0..config.sga_blocks)
                    .map(|i| {
                        let cross = SgaBlockParams::init(&mut store, &format!("sga{i}.cross"), d, &mut rng);
                        let slf = with_self
                            .then(|| SgaBlockParams::init(&mut store, &format!("sga{i}.self"), d, &mut rng));
                        (cross, slf)
                    })
                    .collect(),
            )
        };
        let deepest = *widths.last().unwrap();
        let project = Conv2dLayer::init(&mut store, "project", d, deepest, 1, 1, 0, true, &mut rng);
        let res = (0..config.res_blocks)
            .map(|i| ResidualBlock::init(&mut store, &format!("res{i}"), deepest, &mut rng))
            .collect();
        // Level i (deepest first) takes [x, skip_i] and produces the width of
        // the next shallower level; the shallowest keeps its own width.
        let mut dec = Vec::new();
        let mut c = deepest;
        for (i, &skip) in widths.iter().enumerate().rev() {
            let out = if i == 0 { widths[0] } else { widths[i - 1] };
            dec.push(Conv2dLayer::init(&mut store, &format!("dec{i}"), c + skip, out, 3, 1, 1, true, &mut rng));
            c = out;
        }
        let out = Conv2dLayer::init(&mut store, "out", c, 3, 3, 1, 1, true, &mut rng);
        Ok(Generator {
            config,
            params: store,
            sketch_enc,
            ref_enc,
            fusion,
            project,
            res,
            dec,
            out,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Binds the parameters into `g` and runs the generator. `sketch` is
    /// `b x 1 x h x w`, `reference` `b x 3 x h x w`.
    pub fn forward(&self, g: &mut Graph, sketch: Var, reference: Var, train: bool) -> Result<(GeneratorOutput, Binding)> {
        let mut cx = Ctx::new(g, &self.params, train, false);
        let out = self.forward_ctx(&mut cx, sketch, reference)?;
        Ok((out, cx.finish()))
    }

    pub fn forward_ctx(&self, cx: &mut Ctx, sketch: Var, reference: Var) -> Result<GeneratorOutput> {
        let (ss, sr) = (cx.g.shape(sketch).to_vec(), cx.g.shape(reference).to_vec());
        if ss.len() != 4 || sr.len() != 4 || ss[1] != 1 || sr[1] != 3 || ss[0] != sr[0] || ss[2..] != sr[2..] {
            return Err(Error::shapes("generator expects b x 1 x h x w sketch and b x 3 x h x w reference", &ss, &sr));
        }
        let skips = self.sketch_enc.forward(cx, sketch)?;
        let refs = self.ref_enc.forward(cx, reference)?;
        let (f_s, grid) = pool_and_tokenize(cx.g, &skips)?;
        let (f_r, _) = pool_and_tokenize(cx.g, &refs)?;

        let mut taps = Vec::new();
        let f_gen = match &self.fusion {
            Fusion::Baseline(p) => {
                let stop = self.config.variant == Variant::BaselineStopGrad;
                let (z, t) = baseline_attention(cx, f_s, f_r, p, stop)?;
                taps.push(t);
                z
            }
            Fusion::Sga(blocks) => {
                let opts = self.config.variant.sga_options();
                let mut f = f_s;
                for (cross, slf) in blocks {
                    let (z, t) = cross_sga_block(cx, f, f_r, cross, opts)?;
                    taps.push(t);
                    f = z;
                    if let Some(p) = slf {
                        let (z, t) = self_sga_block(cx, f, p, opts)?;
                        taps.push(t);
                        f = z;
                    }
                }
                f
            }
        };

        let map = tokens_to_map(cx.g, f_gen, grid.0, grid.1)?;
        let h = self.project.forward(cx, map)?;
        let mut h = lrelu(cx, h)?;
        for r in &self.res {
            h = r.forward(cx, h)?;
        }
        for (layer, &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let cat = cx.g.concat(&[h, skip], 1)?;
            let up = cx.g.upsample_nearest2d(cat, 2)?;
            let c = layer.forward(cx, up)?;
            h = lrelu(cx, c)?;
        }
        let o = self.out.forward(cx, h)?;
        let t = cx.g.tanh(o);
        let shifted = cx.g.add_scalar(t, 1.0);
        let image = cx.g.scale(shifted, 0.5);
        Ok(GeneratorOutput {
            image,
            taps,
            f_s,
            f_r,
            f_gen,
            grid,
        })
    }
}
