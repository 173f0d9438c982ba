use super::features::FeatureExtractor;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean absolute error.
pub fn loss_rec(g: &mut Graph, generated: Var, target: Var) -> Result<Var> {
    g.l1_loss(generated, target)
}

fn mse_to(g: &mut Graph, scores: Var, target: f32) -> Result<Var> {
    let t = g.constant(Tensor::full(g.shape(scores), target));
    g.mse_loss(scores, t)
}

/// Least-squares discriminator loss: real scores pushed to 1, fake to 0.
pub fn lsgan_d_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let a = mse_to(g, real, 1.0)?;
    let b = mse_to(g, fake, 0.0)?;
    g.add(a, b)
}

/// Least-squares generator loss: fake scores pushed to 1.
pub fn lsgan_g_loss(g: &mut Graph, fake: Var) -> Result<Var> {
    mse_to(g, fake, 1.0)
}

/// `(d_loss, g_loss)` from real and fake score maps.
pub fn loss_adv(g: &mut Graph, real: Var, fake: Var) -> Result<(Var, Var)> {
    Ok((lsgan_d_loss(g, real, fake)?, lsgan_g_loss(g, fake)?))
}

/// `F F^T / (c h w)` for features `c x h x w` or `b x c x h x w` (batched).
pub fn gram_matrix(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let (lead, c, hw) = match *s.as_slice() {
        [c, h, w] => (vec![], c, h * w),
        [b, c, h, w] => (vec![b], c, h * w),
        _ => return Err(Error::Dimension(format!("gram matrix of shape {s:?}"))),
    };
    let mut flat_shape = lead.clone();
    flat_shape.extend([c, hw]);
    let flat = g.reshape(f, &flat_shape)?;
    let ft = g.transpose(flat)?;
    let gm = g.matmul(flat, ft)?;
    Ok(g.scale(gm, 1.0 / (c * hw) as f32))
}

/// Summed per-tap mean L1 distances of features (perceptual) and of their
/// gram matrices (style).
pub fn loss_perc_style(g: &mut Graph, fx: &FeatureExtractor, generated: Var, target: Var) -> Result<(Var, Var)> {
    let fa = fx.forward(g, generated)?;
    let fb = fx.forward(g, target)?;
    let mut perc = None;
    let mut style = None;
    for (&a, &b) in fa.iter().zip(&fb) {
        let p = g.l1_loss(a, b)?;
        let (ga, gb) = (gram_matrix(g, a)?, gram_matrix(g, b)?);
        let st = g.l1_loss(ga, gb)?;
        perc = Some(match perc {
            None => p,
            Some(acc) => g.add(acc, p)?,
        });
        style = Some(match style {
            None => st,
            Some(acc) => g.add(acc, st)?,
        });
    }
    match (perc, style) {
        (Some(p), Some(s)) => Ok((p, s)),
        _ => Err(Error::Config("feature extractor without taps".into())),
    }
}
