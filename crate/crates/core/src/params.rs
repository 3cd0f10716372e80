//! Named parameter storage and its binding to a tape.

use std::cell::RefCell;
use std::path::Path;

use rand::Rng;
use stt_tensor::{checkpoint, Tape, Tensor, Var};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order, which is also checkpoint load order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, stem: &Path) -> Result<checkpoint::Manifest> {
        Ok(checkpoint::save(stem, &self.entries)?)
    }

    /// Replaces every value from a checkpoint with identical names and shapes.
    pub fn load(&mut self, stem: &Path) -> Result<()> {
        let loaded = checkpoint::load(stem)?;
        self.assign(loaded)
    }

    pub fn assign(&mut self, loaded: Vec<(String, Tensor)>) -> Result<()> {
        if loaded.len() != self.entries.len() {
            return Err(Error::shape(
                "load parameters",
                format!("expected {} entries, found {}", self.entries.len(), loaded.len()),
            ));
        }
        for ((name, value), (lname, lvalue)) in self.entries.iter().zip(&loaded) {
            if name != lname || value.shape() != lvalue.shape() {
                return Err(Error::shape(
                    "load parameters",
                    format!("{name} {:?} vs {lname} {:?}", value.shape(), lvalue.shape()),
                ));
            }
        }
        self.entries = loaded;
        Ok(())
    }

    /// Sets every value to `f(name, current)`.
    pub fn map_values(&mut self, mut f: impl FnMut(&str, &Tensor) -> Tensor) {
        for (name, value) in &mut self.entries {
            let next = f(name, value);
            assert_eq!(next.shape(), value.shape(), "{name}");
            *value = next;
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, R> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let value = Tensor::randn(shape, std, self.rng);
        self.store.add(self.qualify(name), value)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(self.qualify(name), Tensor::full(shape, value))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(self.qualify(name), value)
    }
}

/// Binds a [`ParamStore`] to one tape for one forward/backward pass.
///
/// Each parameter is recorded at most once, on first use. A frozen session
/// records constants, so nothing flows back into its parameters.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binds parameters to existing vars, one per entry in store order.
    pub fn from_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            tape,
            store,
            trainable: true,
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            self.tape
                .leaf(self.store.get(id).clone(), self.trainable)
        })
    }

    /// Gradients after backward, `None` for parameters the pass never touched.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| v.grad()))
            .collect()
    }
}
