//! Named parameter storage and per-forward binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four trainable modules the staged schedule freezes independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Video-query interaction module (query encoder, fusion, pyramid).
    Interaction,
    Matching,
    Location,
    /// IoU regression head, or the centerness head in that baseline.
    Quality,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Interaction,
        ParamGroup::Matching,
        ParamGroup::Location,
        ParamGroup::Quality,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    /// Buffers such as batch-norm running statistics are stored here too but
    /// never receive gradients.
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, trainable: bool, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            trainable,
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get_by_index(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn get_by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replaces all values in store order. Shapes must already match.
    pub fn set_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            debug_assert_eq!(e.value.shape(), v.shape());
            e.value = v;
        }
    }

    /// Replaces every value, checking names and shapes.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Invalid(format!("unknown tensor `{name}`")))?;
            let expected = self.get(id).shape();
            if expected != t.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
        }
        for (name, t) in named {
            let id = self.id_of(name).expect("checked above");
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Deterministic parameter initializer drawing from one seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// One sample's forward context: a tape plus lazily bound parameters.
///
/// A parameter becomes a tape leaf the first time a layer asks for it. It
/// requires a gradient iff it is trainable and its group is active.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    active: [bool; 4],
    /// Batch norm uses batch statistics only in training mode.
    pub training: bool,
    bn_updates: Vec<BnUpdate>,
}

/// Batch statistics observed by a batch-norm layer during one forward.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, active: &[ParamGroup], training: bool) -> Self {
        let mut flags = [false; 4];
        for g in active {
            flags[g.index()] = true;
        }
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            active: flags,
            training,
            bn_updates: Vec::new(),
        }
    }

    /// Inference context: nothing trainable, running statistics.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Ctx::new(store, &[], false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let grad = entry.trainable && self.active[entry.group.index()];
        let v = self.tape.leaf(entry.value.clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Keeps batch statistics only for layers whose group is being trained.
    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        if self.active[self.store.entries[update.running_mean.0].group.index()] {
            self.bn_updates.push(update);
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Pulls out the gradient of every bound, trainable, active parameter,
    /// indexed like the store.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }

    pub fn is_active(&self, group: ParamGroup) -> bool {
        self.active[group.index()]
    }
}
