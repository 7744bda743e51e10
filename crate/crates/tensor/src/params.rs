use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::{BatchNormStats, Element, Gradients, Graph, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<T> {
    name: String,
    value: Arc<ArrayD<T>>,
    trainable: bool,
}

/// Named model tensors: trainable parameters plus non-trainable buffers
/// such as batch-norm running statistics.
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::clone(&e.value),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(
            value.shape(),
            self.entries[id.0].value.shape(),
            "shape change for `{}`",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn set_by_name(&mut self, name: &str, value: ArrayD<T>) -> Result<(), TensorError> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if value.shape() != self.get(id).shape() {
            return Err(TensorError::Shape {
                op: "set_by_name",
                detail: format!(
                    "`{name}` expects {:?}, got {:?}",
                    self.get(id).shape(),
                    value.shape()
                ),
            });
        }
        self.set(id, value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| self.name(id).starts_with(prefix))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Order-sensitive fingerprint of a set of tensors.
    pub fn checksum(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        let mut acc = 0.0f64;
        for (k, id) in ids.into_iter().enumerate() {
            for (i, v) in self.get(id).iter().enumerate() {
                let w = 1.0 + ((k * 7919 + i) % 1009) as f64 * 1e-3;
                acc += v.to_f64_lossy() * w;
            }
        }
        acc
    }

    /// Folds batch statistics into running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) {
        for up in updates {
            for (id, batch) in [(up.mean, &up.stats.mean), (up.var, &up.stats.var)] {
                let run = self.value_mut(id);
                for (r, &b) in run.iter_mut().zip(batch.iter()) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// Whether layers run with batch statistics and record gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one batch-norm call.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchNormStats<T>,
}

/// A [`ParamStore`] bound to a [`Graph`] for one pass.
///
/// Each parameter is materialized as at most one graph leaf, so every use of
/// a shared parameter accumulates into the same gradient.
pub struct Session<'g, 's, T: Element> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    leaves: RefCell<HashMap<ParamId, usize>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'g, 's, T: Element> Session<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            track_grads: mode == Mode::Train,
            leaves: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Overrides whether parameters become differentiable leaves.
    pub fn with_grads(mut self, track: bool) -> Self {
        self.track_grads = track;
        self
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        if let Some(&node) = self.leaves.borrow().get(&id) {
            return Var {
                graph: self.graph,
                id: node,
            };
        }
        let value = self.store.shared(id);
        let var = if self.track_grads && self.store.is_trainable(id) {
            self.graph.leaf_shared(value)
        } else {
            self.graph.constant_shared(value)
        };
        self.leaves.borrow_mut().insert(id, var.id);
        var
    }

    pub fn buffer(&self, id: ParamId) -> &'s ArrayD<T> {
        self.store.get(id)
    }

    pub fn push_bn_update(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }

    /// Parameters touched in this session, with their gradients (zeros for
    /// parameters that did not influence the root).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let mut out: Vec<_> = self
            .leaves
            .borrow()
            .iter()
            .filter(|(&id, _)| self.store.is_trainable(id))
            .map(|(&id, &node)| {
                let g = grads
                    .take_id(node)
                    .unwrap_or_else(|| ArrayD::zeros(self.store.get(id).raw_dim()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
