use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainingConfig;
use super::discriminator::Discriminator;
use super::features::FeatureExtractor;
use super::generator::{Generator, GeneratorOutput};
use super::losses::{loss_perc_style, loss_rec, lsgan_d_loss, lsgan_g_loss};
use super::optim::{grad_norm, Adam, AdamConfig};
use crate::autodiff::{Graph, Var};
use crate::data::{derive_seed, make_triple, ImageTriple};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// A stacked batch of triples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `b x 1 x h x w`
    pub sketch: Tensor,
    /// `b x 3 x h x w`
    pub reference: Tensor,
    /// `b x 3 x h x w`
    pub ground_truth: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shapes("batch members", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

impl Batch {
    pub fn from_triples(triples: &[ImageTriple]) -> Result<Self> {
        let s: Vec<&Tensor> = triples.iter().map(|t| &t.sketch).collect();
        let r: Vec<&Tensor> = triples.iter().map(|t| &t.reference).collect();
        let g: Vec<&Tensor> = triples.iter().map(|t| &t.ground_truth).collect();
        Ok(Batch {
            sketch: stack(&s)?,
            reference: stack(&r)?,
            ground_truth: stack(&g)?,
        })
    }

    pub fn len(&self) -> usize {
        self.sketch.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator objective terms, unweighted, plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub g_adv: Var,
    pub rec: Var,
    pub perc: Var,
    pub style: Var,
    pub total: Var,
}

/// Which generator loss terms a diagnostic backward uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Rec,
    Adv,
    Perc,
    Style,
    All,
}

impl LossTerm {
    pub const EACH: [LossTerm; 4] = [LossTerm::Rec, LossTerm::Adv, LossTerm::Perc, LossTerm::Style];

    pub fn label(self) -> &'static str {
        match self {
            LossTerm::Rec => "rec",
            LossTerm::Adv => "adv",
            LossTerm::Perc => "perc",
            LossTerm::Style => "style",
            LossTerm::All => "all",
        }
    }
}

impl std::str::FromStr for LossTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [LossTerm::Rec, LossTerm::Adv, LossTerm::Perc, LossTerm::Style, LossTerm::All]
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?} (rec, adv, perc, style, all)")))
    }
}

/// Generator, discriminator, fixed extractor and both optimizers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: usize,
}

/// Loss values and gradient norms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub d_loss: f32,
    pub g_adv: f32,
    pub l_rec: f32,
    pub l_perc: f32,
    pub l_style: f32,
    pub total: f32,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

pub const LOG_CSV_HEADER: &str = "step,d_loss,g_adv,l_rec,l_perc,l_style,total";

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.d_loss, self.g_adv, self.l_rec, self.l_perc, self.l_style, self.total
        )
    }

    fn values(&self) -> [(&'static str, f32); 6] {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("l_rec", self.l_rec),
            ("l_perc", self.l_perc),
            ("l_style", self.l_style),
            ("total", self.total),
        ]
    }
}

/// The graph of one generator pass with its loss terms.
pub struct GeneratorPass {
    pub graph: Graph,
    pub output: GeneratorOutput,
    pub binding: Binding,
    pub losses: LossVars,
}

impl TrainState {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config())?;
        let discriminator = Discriminator::new(&config.disc_channels, derive_seed(config.seed, 0xD15C));
        let extractor = FeatureExtractor::pinned()?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
        };
        let opt_g = Adam::new(adam(config.lr_g), &generator.params);
        let opt_d = Adam::new(adam(config.lr_d), &discriminator.params);
        Ok(TrainState {
            config,
            generator,
            discriminator,
            extractor,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    /// Runs the generator on `batch` and builds every loss term against the
    /// current (frozen) discriminator.
    pub fn generator_pass(&self, batch: &Batch, train: bool) -> Result<GeneratorPass> {
        let mut g = Graph::new();
        let s = g.constant(batch.sketch.clone());
        let r = g.constant(batch.reference.clone());
        let gt = g.constant(batch.ground_truth.clone());
        let (output, binding) = self.generator.forward(&mut g, s, r, train)?;
        let losses = self.generator_losses(&mut g, output.image, s, gt)?;
        Ok(GeneratorPass {
            graph: g,
            output,
            binding,
            losses,
        })
    }

    fn generator_losses(&self, g: &mut Graph, fake: Var, sketch: Var, gt: Var) -> Result<LossVars> {
        let (score, _) = self.discriminator.forward(g, fake, sketch, true)?;
        let g_adv = lsgan_g_loss(g, score)?;
        let rec = loss_rec(g, fake, gt)?;
        let (perc, style) = loss_perc_style(g, &self.extractor, fake, gt)?;
        let total = self.weighted_total(g, g_adv, rec, perc, style)?;
        Ok(LossVars {
            g_adv,
            rec,
            perc,
            style,
            total,
        })
    }

    fn weighted_total(&self, g: &mut Graph, adv: Var, rec: Var, perc: Var, style: Var) -> Result<Var> {
        let c = &self.config;
        let r = g.scale(rec, c.lambda_rec);
        let p = g.scale(perc, c.lambda_perc);
        let s = g.scale(style, c.lambda_style);
        let t = g.add(adv, r)?;
        let t = g.add(t, p)?;
        g.add(t, s)
    }

    /// The λ-weighted scalar for one term (or the full objective).
    pub fn loss_term(&self, g: &mut Graph, losses: &LossVars, term: LossTerm) -> Var {
        let c = &self.config;
        match term {
            LossTerm::Rec => g.scale(losses.rec, c.lambda_rec),
            LossTerm::Adv => losses.g_adv,
            LossTerm::Perc => g.scale(losses.perc, c.lambda_perc),
            LossTerm::Style => g.scale(losses.style, c.lambda_style),
            LossTerm::All => losses.total,
        }
    }

    fn discriminator_step(&mut self, batch: &Batch, fake: &Tensor) -> Result<(f32, f64)> {
        let mut g = Graph::new();
        let s = g.constant(batch.sketch.clone());
        let gt = g.constant(batch.ground_truth.clone());
        let f = g.constant(fake.clone());
        let mut cx = crate::params::Ctx::new(&mut g, &self.discriminator.params, true, false);
        let real = self.discriminator.forward_ctx(&mut cx, gt, s)?;
        let fake = self.discriminator.forward_ctx(&mut cx, f, s)?;
        let binding = cx.finish();
        let loss = lsgan_d_loss(&mut g, real, fake)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(self.divergence(format!("d_loss = {value}")));
        }
        g.backward(loss)?;
        let grads = binding.grads(&g, &self.discriminator.params);
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        Ok((value, grad_norm(&grads)))
    }

    fn divergence(&self, detail: String) -> Error {
        Error::Divergence {
            step: self.step + 1,
            detail,
        }
    }

    /// One discriminator update on the current fakes, then one generator
    /// update against the updated discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let mut pass = self.generator_pass(batch, true)?;
        let fake = pass.graph.value(pass.output.image).clone();
        if !fake.is_finite() {
            return Err(self.divergence("generator produced non-finite pixels".into()));
        }
        let (d_loss, grad_norm_d) = self.discriminator_step(batch, &fake)?;

        // Rebuild the loss terms against the updated discriminator.
        let g = &mut pass.graph;
        let s = g.constant(batch.sketch.clone());
        let gt = g.constant(batch.ground_truth.clone());
        let losses = self.generator_losses(g, pass.output.image, s, gt)?;
        let value = |v: Var| g.value(v).item();
        let mut report = StepReport {
            step: self.step + 1,
            d_loss,
            g_adv: value(losses.g_adv)?,
            l_rec: value(losses.rec)?,
            l_perc: value(losses.perc)?,
            l_style: value(losses.style)?,
            total: value(losses.total)?,
            grad_norm_g: 0.0,
            grad_norm_d,
        };
        if let Some((name, v)) = report.values().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(self.divergence(format!("{name} = {v}; {}", report.csv_row())));
        }
        g.backward(losses.total)?;
        let grads = pass.binding.grads(g, &self.generator.params);
        report.grad_norm_g = grad_norm(&grads);
        self.opt_g.step(&mut self.generator.params, &grads)?;
        pass.binding.apply_updates(&mut self.generator.params);
        self.step += 1;
        Ok(report)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.params.save(&dir.join("generator"))?;
        self.discriminator.params.save(&dir.join("discriminator"))?;
        let cfg = dir.join("config.cfg");
        std::fs::write(&cfg, self.config.render()).map_err(|e| Error::io(&cfg, e))
    }

    /// Rebuilds the architecture from the saved config and loads weights.
    /// Optimizer moments start fresh.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let config = TrainingConfig::from_file(&dir.join("config.cfg"))?;
        let mut state = TrainState::new(config)?;
        state.generator.params.copy_from(&ParamStore::load(&dir.join("generator"))?)?;
        state.discriminator.params.copy_from(&ParamStore::load(&dir.join("discriminator"))?)?;
        Ok(state)
    }
}

/// Color images (`3 x r x r`) the trainer draws triples from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("training needs at least one image".into()));
        }
        Ok(Dataset { images })
    }

    /// Loads and resizes every PNG in `dir`.
    pub fn from_dir(dir: &Path, resolution: usize) -> Result<Self> {
        let mut images = Vec::new();
        for p in crate::data::list_pngs(dir)? {
            let img = crate::data::load_png(&p)?;
            images.push(crate::data::resize(&img, resolution, resolution)?);
        }
        Self::new(images)
    }
}

/// Epoch loop: reshuffles per epoch, draws fresh triples per visit.
pub struct Trainer<'a> {
    pub state: TrainState,
    pub data: &'a Dataset,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, data: &'a Dataset) -> Self {
        Trainer { state, data }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.images.len().div_ceil(self.state.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let all = self.steps_per_epoch() * self.state.config.epochs;
        match self.state.config.max_steps {
            0 => all,
            m => m,
        }
    }

    /// Batch for a global step, deterministic in the config seed.
    pub fn batch_for(&self, step: usize) -> Result<Batch> {
        let cfg = &self.state.config;
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        let n = self.data.images.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE90C_0000 + epoch as u64)));
        let tcfg = cfg.triple_config();
        let triples = order
            .iter()
            .skip(within * cfg.batch_size)
            .take(cfg.batch_size)
            .map(|&i| {
                let seed = derive_seed(derive_seed(cfg.seed, epoch as u64), i as u64);
                make_triple(&self.data.images[i], seed, &tcfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_triples(&triples)
    }

    /// Trains until `total_steps`, writing one CSV row per step and calling
    /// `on_step` after each.
    pub fn run<W: Write>(&mut self, log: &mut W, mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        writeln!(log, "{LOG_CSV_HEADER}").map_err(|e| Error::io("<training log>", e))?;
        let mut reports = Vec::new();
        while self.state.step < self.total_steps() {
            let batch = self.batch_for(self.state.step)?;
            let rep = self.state.train_step(&batch)?;
            writeln!(log, "{}", rep.csv_row()).map_err(|e| Error::io("<training log>", e))?;
            on_step(&self.state, &rep)?;
            reports.push(rep);
        }
        Ok(reports)
    }
}
