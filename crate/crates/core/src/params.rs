//! Named parameter sets, their binding onto a graph, and checkpoint files.
//!
//! A checkpoint is two files sharing a stem: `<stem>.manifest`, one line per
//! tensor (`name<TAB>shape<TAB>kind`, shape as comma-separated extents), and
//! `<stem>.bin`, the tensors' values as consecutive little-endian f32 in
//! manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MANIFEST_HEADER: &str = "# sga-params v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Little-endian f32 payload in entry order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            let kind = if e.trainable { "param" } else { "buffer" };
            s.push_str(&format!("{}\t{}\t{}\n", e.name, shape.join(","), kind));
        }
        s
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (m, b) = checkpoint_paths(stem);
        fs::write(&m, self.manifest()).map_err(|e| Error::io(&m, e))?;
        let mut f = fs::File::create(&b).map_err(|e| Error::io(&b, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&b, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (m, b) = checkpoint_paths(stem);
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let bytes = fs::read(&b).map_err(|e| Error::io(&b, e))?;
        Self::parse(&text, &bytes)
    }

    pub fn parse(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Config("missing parameter manifest header".into()));
        }
        let mut store = ParamStore::new();
        let mut offset = 0usize;
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, kind] = fields.as_slice() else {
                return Err(Error::Config(format!("manifest line {}: {line:?}", lineno + 2)));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("manifest shape {shape:?}: {e}")))?
            };
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Config(format!("parameter payload too short for {name}")));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset = end;
            let trainable = match *kind {
                "param" => true,
                "buffer" => false,
                other => return Err(Error::Config(format!("unknown entry kind {other:?}"))),
            };
            store.push(name.to_string(), Tensor::new(&shape, data)?, trainable);
        }
        if offset != bytes.len() {
            return Err(Error::Config(format!(
                "parameter payload has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(store)
    }

    /// Replaces values with those of `other`, which must have identical
    /// names and shapes in the same order.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
            a.tensor = b.tensor.clone();
        }
        Ok(())
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

/// Uniform fan-in scaled initialization for weights feeding a leaky ReLU:
/// bound `sqrt(6 / ((1 + slope^2) fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, slope: f32, rng: &mut R) -> Tensor {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f32)).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

/// Graph variables for one parameter store, plus pending buffer updates.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    pub updates: Vec<BufferUpdate>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every entry after a backward pass (`None` for buffers).
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .entries
            .iter()
            .zip(&self.vars)
            .map(|(e, &v)| e.trainable.then(|| g.grad_or_zeros(v)))
            .collect()
    }

    pub fn apply_updates(&mut self, store: &mut ParamStore) {
        for u in self.updates.drain(..) {
            store.entries[u.id.0].tensor = u.value;
        }
    }
}

/// Forward-pass context: a graph plus one bound parameter store.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    binding: Binding,
}

impl<'a> Ctx<'a> {
    /// Binds trainable entries as parameters (or constants when `frozen`)
    /// and buffers as constants.
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, train: bool, frozen: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| {
                if e.trainable && !frozen {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect();
        Ctx {
            g,
            store,
            train,
            binding: Binding {
                vars,
                updates: Vec::new(),
            },
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.binding.var(id)
    }

    pub fn finish(self) -> Binding {
        self.binding
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.binding.updates.push(BufferUpdate { id, value });
    }
}

/// Batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Channel axis counted from the last axis (0 = features last).
    pub channel_axis_from_end: usize,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, channel_axis_from_end: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channel_axis_from_end,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (cx.var(self.gamma), cx.var(self.beta));
        let rank = cx.g.shape(x).len();
        if self.channel_axis_from_end >= rank {
            return Err(Error::Dimension(format!(
                "batch norm axis {} for rank-{rank} input",
                self.channel_axis_from_end
            )));
        }
        let axis = rank - 1 - self.channel_axis_from_end;
        if cx.train {
            let (y, stats) = cx.g.batch_norm(x, gamma, beta, axis, BatchNormMode::Train { eps: self.eps })?;
            let stats = stats.expect("training mode reports statistics");
            let m = self.momentum;
            let blend = |old: &Tensor, new: &[f32]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| (1.0 - m) * o + m * n).collect();
                Tensor::from_parts(old.shape().to_vec(), data)
            };
            let rm = blend(cx.store.get(self.running_mean), &stats.mean);
            let rv = blend(cx.store.get(self.running_var), &stats.var_unbiased);
            cx.push_update(self.running_mean, rm);
            cx.push_update(self.running_var, rv);
            Ok(y)
        } else {
            let store = cx.store;
            let mode = BatchNormMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
                eps: self.eps,
            };
            Ok(cx.g.batch_norm(x, gamma, beta, axis, mode)?.0)
        }
    }
}
