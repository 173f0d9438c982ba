//! Gradient-branch decomposition, per-pixel cosine histograms and the
//! singular-value concentration of feature maps.

use std::io::{BufRead, Write};

use crate::attention::{Branch, BranchTapHandles, Side};
use crate::autodiff::{BackwardOptions, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::model::{Batch, LossTerm, TrainState};
use crate::tensor::Tensor;

/// Cosines above this count as "dominant" (aligned with the total).
pub const DOMINANT_THRESHOLD: f64 = 0.935;
/// Pixels whose branch or reference gradient is shorter than this are
/// excluded rather than assigned a cosine.
pub const NEAR_ZERO_NORM: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 80;

/// Input gradients of one attention application, split by branch.
#[derive(Clone, Debug)]
pub struct BranchGradients {
    pub total_x: Tensor,
    pub total_y: Tensor,
    pub branches: Vec<(Branch, Tensor)>,
}

impl BranchGradients {
    pub fn branch(&self, b: Branch) -> Option<&Tensor> {
        self.branches.iter().find(|(x, _)| *x == b).map(|(_, t)| t)
    }

    pub fn total(&self, side: Side) -> &Tensor {
        match side {
            Side::X => &self.total_x,
            Side::Y => &self.total_y,
        }
    }

    /// Largest absolute gap between the summed branches of `side` and the
    /// total gradient of that input.
    pub fn residual(&self, side: Side) -> f32 {
        let total = self.total(side);
        let mut sum = Tensor::zeros(total.shape());
        for (b, t) in &self.branches {
            if b.side() == side {
                for (s, v) in sum.data_mut().iter_mut().zip(t.data()) {
                    *s += v;
                }
            }
        }
        sum.max_abs_diff(total)
    }

    pub fn max_residual(&self) -> f32 {
        self.residual(Side::X).max(self.residual(Side::Y))
    }
}

/// Runs one undetached backward for the totals, then one backward per
/// branch with every other branch's entry blocked.
pub fn capture_branch_gradients(g: &mut Graph, taps: &BranchTapHandles, loss: Var) -> Result<BranchGradients> {
    taps.ensure_live(g)?;
    let floor = taps.x.min(taps.y);
    g.backward_with(
        loss,
        &BackwardOptions {
            blocked: vec![],
            stop_below: Some(floor),
        },
    )?;
    let total_x = g.grad_or_zeros(taps.x);
    let total_y = g.grad_or_zeros(taps.y);
    let mut branches = Vec::with_capacity(taps.branches.len());
    for &(branch, tap) in &taps.branches {
        let blocked = taps
            .branches
            .iter()
            .filter(|(_, v)| *v != tap)
            .map(|(_, v)| *v)
            .collect();
        g.backward_with(
            loss,
            &BackwardOptions {
                blocked,
                stop_below: Some(floor),
            },
        )?;
        branches.push((branch, g.grad_or_zeros(taps.entry(branch.side()))));
    }
    g.zero_grad();
    Ok(BranchGradients {
        total_x,
        total_y,
        branches,
    })
}

/// Rearranges an `n x d` token gradient (`n = h*w`) into a `d x h x w` map.
pub fn tokens_to_field(tokens: &[f32], h: usize, w: usize, d: usize) -> Result<Tensor> {
    if tokens.len() != h * w * d {
        return Err(Error::Dimension(format!(
            "{} token values cannot form {d}x{h}x{w}",
            tokens.len()
        )));
    }
    let mut out = vec![0.0f32; tokens.len()];
    for p in 0..h * w {
        for c in 0..d {
            out[c * h * w + p] = tokens[p * d + c];
        }
    }
    Tensor::new(&[d, h, w], out)
}

/// Per-pixel cosine between channel vectors of two `c x h x w` fields.
/// Excluded pixels (either norm below [`NEAR_ZERO_NORM`]) are NaN.
/// Values are clamped to `[-1, 1]`.
pub fn cosine_field(branch: &Tensor, total: &Tensor) -> Result<Tensor> {
    let (raw, h, w) = cosine_field_unclamped(branch, total)?;
    let data = raw.iter().map(|&c| if c.is_nan() { f32::NAN } else { c.clamp(-1.0, 1.0) as f32 }).collect();
    Tensor::new(&[h, w], data)
}

/// Cosines before clamping, in f64.
pub fn cosine_field_unclamped(branch: &Tensor, total: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    if branch.shape() != total.shape() || branch.rank() != 3 {
        return Err(Error::shapes("cosine_field expects equal c x h x w", branch.shape(), total.shape()));
    }
    let (c, h, w) = (branch.shape()[0], branch.shape()[1], branch.shape()[2]);
    let hw = h * w;
    let (a, b) = (branch.data(), total.data());
    let mut out = Vec::with_capacity(hw);
    for p in 0..hw {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for ch in 0..c {
            let (x, y) = (a[ch * hw + p] as f64, b[ch * hw + p] as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        out.push(if na < NEAR_ZERO_NORM || nb < NEAR_ZERO_NORM {
            f64::NAN
        } else {
            dot / (na * nb)
        });
    }
    Ok((out, h, w))
}

/// Fixed-bin histogram of cosines over `[-1, 1]` with conflict and
/// dominance ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    /// Fraction of included cosines below zero.
    pub conflict_ratio: f64,
    /// Fraction of included cosines above [`DOMINANT_THRESHOLD`], from raw values.
    pub dominant_ratio: f64,
    /// Same fraction counted from whole bins above the threshold snapped to
    /// the nearest bin edge.
    pub dominant_ratio_binned: f64,
    /// NaN sentinels that were left out.
    pub excluded: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn included(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// No cosine was available.
    pub fn is_empty(&self) -> bool {
        self.included() == 0
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        bin_edges(i, self.bins())
    }
}

pub fn bin_edges(i: usize, bins: usize) -> (f64, f64) {
    let width = 2.0 / bins as f64;
    (-1.0 + i as f64 * width, -1.0 + (i + 1) as f64 * width)
}

fn bin_of(c: f64, bins: usize) -> usize {
    (((c + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1)
}

pub fn histogram(cosines: &[f32], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Contract(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins];
    let (mut excluded, mut negative, mut dominant) = (0u64, 0u64, 0u64);
    for &c in cosines {
        if c.is_nan() {
            excluded += 1;
            continue;
        }
        let c = (c as f64).clamp(-1.0, 1.0);
        counts[bin_of(c, bins)] += 1;
        if c < 0.0 {
            negative += 1;
        }
        if c > DOMINANT_THRESHOLD {
            dominant += 1;
        }
    }
    let included: u64 = counts.iter().sum();
    let frac = |k: u64| if included == 0 { 0.0 } else { k as f64 / included as f64 };
    let snapped = ((DOMINANT_THRESHOLD + 1.0) / 2.0 * bins as f64).round() as usize;
    let binned: u64 = counts[snapped.min(bins)..].iter().sum();
    Ok(Histogram {
        conflict_ratio: frac(negative),
        dominant_ratio: frac(dominant),
        dominant_ratio_binned: frac(binned),
        counts,
        excluded,
    })
}

/// One histogram of per-pixel cosines for a branch comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGradientReport {
    pub epoch: usize,
    /// Comparison label, e.g. `skip` for cos(g_skip, g_skip + g_Q).
    pub branch: String,
    pub cosines: Vec<f32>,
    pub histogram: Histogram,
}

impl BranchGradientReport {
    pub fn new(epoch: usize, branch: impl Into<String>, cosines: Vec<f32>, bins: usize) -> Result<Self> {
        let histogram = histogram(&cosines, bins)?;
        Ok(BranchGradientReport {
            epoch,
            branch: branch.into(),
            cosines,
            histogram,
        })
    }

    pub fn conflict_ratio(&self) -> f64 {
        self.histogram.conflict_ratio
    }

    pub fn dominant_ratio(&self) -> f64 {
        self.histogram.dominant_ratio
    }
}

pub const HISTOGRAM_CSV_HEADER: &str = "epoch,branch,bin_lo,bin_hi,count";
pub const SUMMARY_CSV_HEADER: &str = "epoch,branch,conflict_ratio,dominant_ratio,excluded_pixels";

pub fn write_histogram_csv<W: Write>(reports: &[BranchGradientReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{HISTOGRAM_CSV_HEADER}")?;
    for r in reports {
        for (i, c) in r.histogram.counts.iter().enumerate() {
            let (lo, hi) = r.histogram.bin_edges(i);
            writeln!(out, "{},{},{},{},{}", r.epoch, r.branch, lo, hi, c)?;
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(reports: &[BranchGradientReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.branch, r.histogram.conflict_ratio, r.histogram.dominant_ratio, r.histogram.excluded
        )?;
    }
    Ok(())
}

/// Histogram and summary as read back from the two CSV files.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub epoch: usize,
    pub branch: String,
    pub counts: Vec<u64>,
    pub conflict_ratio: f64,
    pub dominant_ratio: f64,
    pub excluded: u64,
}

impl From<&BranchGradientReport> for ReportRecord {
    fn from(r: &BranchGradientReport) -> Self {
        ReportRecord {
            epoch: r.epoch,
            branch: r.branch.clone(),
            counts: r.histogram.counts.clone(),
            conflict_ratio: r.histogram.conflict_ratio,
            dominant_ratio: r.histogram.dominant_ratio,
            excluded: r.histogram.excluded,
        }
    }
}

fn csv_err(line: &str) -> Error {
    Error::Config(format!("malformed report row {line:?}"))
}

fn parse<T: std::str::FromStr>(s: &str, line: &str) -> Result<T> {
    s.parse().map_err(|_| csv_err(line))
}

pub fn read_report_csvs<A: BufRead, B: BufRead>(histograms: A, summaries: B) -> Result<Vec<ReportRecord>> {
    let read_lines = |r: &mut dyn BufRead| -> Result<Vec<String>> {
        let mut v = Vec::new();
        for line in r.lines() {
            v.push(line.map_err(|e| Error::io("<report csv>", e))?);
        }
        Ok(v)
    };
    let (mut histograms, mut summaries) = (histograms, summaries);
    let hist_lines = read_lines(&mut histograms)?;
    let sum_lines = read_lines(&mut summaries)?;
    if hist_lines.first().map(String::as_str) != Some(HISTOGRAM_CSV_HEADER)
        || sum_lines.first().map(String::as_str) != Some(SUMMARY_CSV_HEADER)
    {
        return Err(Error::Config("report CSV header mismatch".into()));
    }
    let mut records: Vec<ReportRecord> = Vec::new();
    for line in &sum_lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let [epoch, branch, conflict, dominant, excluded] = f.as_slice() else {
            return Err(csv_err(line));
        };
        records.push(ReportRecord {
            epoch: parse(epoch, line)?,
            branch: branch.to_string(),
            counts: Vec::new(),
            conflict_ratio: parse(conflict, line)?,
            dominant_ratio: parse(dominant, line)?,
            excluded: parse(excluded, line)?,
        });
    }
    // Histogram rows appear grouped per report, in summary order.
    let mut idx = 0usize;
    let mut prev: Option<(usize, String)> = None;
    for line in &hist_lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let [epoch, branch, lo, _hi, count] = f.as_slice() else {
            return Err(csv_err(line));
        };
        let key = (parse::<usize>(epoch, line)?, branch.to_string());
        let lo: f64 = parse(lo, line)?;
        let starts_new = lo == -1.0 && prev.is_some();
        if starts_new {
            idx += 1;
        }
        prev = Some(key.clone());
        let rec = records.get_mut(idx).ok_or_else(|| csv_err(line))?;
        if (rec.epoch, rec.branch.clone()) != key {
            return Err(csv_err(line));
        }
        rec.counts.push(parse(count, line)?);
    }
    Ok(records)
}

/// Accumulated squared-singular-value ratios of an unfolded feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// `ratios[r-1] = sum_{i<=r} s_i^2 / sum_i s_i^2`.
    pub ratios: Vec<f64>,
}

impl SpectrumReport {
    pub fn r_values(&self) -> impl Iterator<Item = usize> + '_ {
        1..=self.ratios.len()
    }

    /// Smallest `r` whose accumulated ratio reaches `fraction`.
    pub fn rank_for(&self, fraction: f64) -> usize {
        self.ratios.iter().position(|&r| r >= fraction).map_or(self.ratios.len(), |i| i + 1)
    }
}

/// Unfolds `c x h x w` to `c x hw` and accumulates squared singular values,
/// obtained as eigenvalues of the smaller Gram matrix.
pub fn spectrum_concentration(feature_map: &Tensor) -> Result<SpectrumReport> {
    if feature_map.rank() != 3 {
        return Err(Error::Dimension(format!(
            "spectrum expects c x h x w, got {:?}",
            feature_map.shape()
        )));
    }
    if !feature_map.is_finite() {
        return Err(Error::NonFinite("spectrum feature map".into()));
    }
    let c = feature_map.shape()[0];
    let hw = feature_map.shape()[1] * feature_map.shape()[2];
    if c == 0 || hw == 0 {
        return Err(Error::Dimension("empty feature map".into()));
    }
    let f = feature_map.data();
    let (n, gram) = if c <= hw {
        let mut g = vec![0.0f64; c * c];
        for i in 0..c {
            for j in 0..=i {
                let s: f64 = (0..hw).map(|p| f[i * hw + p] as f64 * f[j * hw + p] as f64).sum();
                g[i * c + j] = s;
                g[j * c + i] = s;
            }
        }
        (c, g)
    } else {
        let mut g = vec![0.0f64; hw * hw];
        for p in 0..hw {
            for q in 0..=p {
                let s: f64 = (0..c).map(|i| f[i * hw + p] as f64 * f[i * hw + q] as f64).sum();
                g[p * hw + q] = s;
                g[q * hw + p] = s;
            }
        }
        (hw, g)
    };
    let eig: Vec<f64> = symmetric_eigenvalues(&gram, n).into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("spectrum of an all-zero feature map".into()));
    }
    let mut acc = 0.0;
    let mut ratios: Vec<f64> = eig
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    if let Some(last) = ratios.last_mut() {
        *last = 1.0;
    }
    Ok(SpectrumReport { ratios })
}

pub const SPECTRUM_CSV_HEADER: &str = "r,ratio,stage";

/// Where along the generator a spectrum was measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumStage {
    BeforeAttention,
    AfterAttention,
}

impl SpectrumStage {
    pub fn label(self) -> &'static str {
        match self {
            SpectrumStage::BeforeAttention => "before_attention",
            SpectrumStage::AfterAttention => "after_attention",
        }
    }
}

pub fn write_spectrum_csv<W: Write>(stages: &[(SpectrumStage, &SpectrumReport)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SPECTRUM_CSV_HEADER}")?;
    for (stage, rep) in stages {
        for (r, ratio) in rep.r_values().zip(&rep.ratios) {
            writeln!(out, "{r},{ratio},{}", stage.label())?;
        }
    }
    Ok(())
}

/// Cosines between one branch gradient and a reference gradient, per pixel
/// of every image in the batch. Token gradients are `b x n x d`.
pub fn batch_cosines(branch: &Tensor, reference: &Tensor, grid: (usize, usize)) -> Result<Vec<f32>> {
    if branch.shape() != reference.shape() || branch.rank() != 3 {
        return Err(Error::shapes("token gradients", branch.shape(), reference.shape()));
    }
    let (b, n, d) = (branch.shape()[0], branch.shape()[1], branch.shape()[2]);
    if n != grid.0 * grid.1 {
        return Err(Error::Dimension(format!("{n} tokens do not form a {grid:?} grid")));
    }
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        let r = i * n * d..(i + 1) * n * d;
        let fb = tokens_to_field(&branch.data()[r.clone()], grid.0, grid.1, d)?;
        let ft = tokens_to_field(&reference.data()[r], grid.0, grid.1, d)?;
        out.extend_from_slice(cosine_field(&fb, &ft)?.data());
    }
    Ok(out)
}

fn difference(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= v;
    }
    out
}

/// The cosine comparisons reported for one decomposition, as
/// `(label, branch gradient, reference gradient)`.
///
/// Baseline: each of skip and Q against the total X gradient, V and K against
/// the total Y gradient. SGA: the direct branches against the totals and,
/// when the map is not detached, the direct branches against the remainder
/// that flows through the map.
pub fn comparisons(grads: &BranchGradients) -> Vec<(String, Tensor, Tensor)> {
    let mut out = Vec::new();
    let mut push = |label: &str, b: Branch, reference: Tensor| {
        if let Some(t) = grads.branch(b) {
            out.push((label.to_string(), t.clone(), reference));
        }
    };
    if grads.branch(Branch::Skip).is_some() {
        push("skip", Branch::Skip, grads.total_x.clone());
        push("Q", Branch::Q, grads.total_x.clone());
        push("V", Branch::V, grads.total_y.clone());
        push("K", Branch::K, grads.total_y.clone());
    } else {
        push("X-direct", Branch::XDirect, grads.total_x.clone());
        push("Y-direct", Branch::YDirect, grads.total_y.clone());
        let through_map = [Branch::XAttn, Branch::YAttn]
            .iter()
            .any(|&b| grads.branch(b).is_some_and(|t| !t.all_zero()));
        if through_map {
            if let (Some(x), Some(y)) = (grads.branch(Branch::XDirect), grads.branch(Branch::YDirect)) {
                let (rx, ry) = (difference(&grads.total_x, x), difference(&grads.total_y, y));
                push("X-direct:remainder", Branch::XDirect, rx);
                push("Y-direct:remainder", Branch::YDirect, ry);
            }
        }
    }
    out
}

/// Output of one sampled diagnostic step.
#[derive(Clone, Debug)]
pub struct DiagnosticsPass {
    pub reports: Vec<(LossTerm, BranchGradientReport)>,
    /// Per loss term, the captured gradients.
    pub gradients: Vec<(LossTerm, BranchGradients)>,
    /// Largest decomposition residual over all terms.
    pub max_residual: f32,
}

/// Decomposes the gradients of the first attention application for each
/// requested loss term and builds the cosine reports.
pub fn diagnostics_run(
    state: &TrainState,
    batch: &Batch,
    terms: &[LossTerm],
    epoch: usize,
    bins: usize,
) -> Result<DiagnosticsPass> {
    let mut pass = state.generator_pass(batch, true)?;
    let taps = pass
        .output
        .taps
        .first()
        .cloned()
        .ok_or_else(|| Error::Capability("model exposes no attention taps".into()))?;
    let grid = pass.output.grid;
    let mut reports = Vec::new();
    let mut gradients = Vec::new();
    let mut max_residual = 0.0f32;
    for &term in terms {
        let loss = state.loss_term(&mut pass.graph, &pass.losses, term);
        let grads = capture_branch_gradients(&mut pass.graph, &taps, loss)?;
        max_residual = max_residual.max(grads.max_residual());
        for (label, b, r) in comparisons(&grads) {
            let cos = batch_cosines(&b, &r, grid)?;
            let label = if terms.len() > 1 || term != LossTerm::All {
                format!("{label}@{}", term.label())
            } else {
                label
            };
            reports.push((term, BranchGradientReport::new(epoch, label, cos, bins)?));
        }
        gradients.push((term, grads));
    }
    Ok(DiagnosticsPass {
        reports,
        gradients,
        max_residual,
    })
}
