use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSource;
use crate::tensor::{Tape, Tensor};

/// Which submodel paths read a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ownership {
    Shared,
    MoeOnly,
    SmallOnly,
}

impl Ownership {
    pub fn tag(self) -> u8 {
        match self {
            Ownership::Shared => 0,
            Ownership::MoeOnly => 1,
            Ownership::SmallOnly => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Ownership::Shared),
            1 => Some(Ownership::MoeOnly),
            2 => Some(Ownership::SmallOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Ownership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ownership::Shared => "shared",
            Ownership::MoeOnly => "moe-only",
            Ownership::SmallOnly => "small-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    ownership: Ownership,
}

impl ParamEntry {
    pub fn ownership(&self) -> Ownership {
        self.ownership
    }
}

/// Named parameters, each tagged with its ownership. Names are unique and
/// tags cannot change once inserted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, ownership: Ownership) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, ownership });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn ownership(&self, name: &str) -> Option<Ownership> {
        self.entries.get(name).map(|e| e.ownership)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), &mut v.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Scalar count per ownership tag.
    pub fn partition_sizes(&self) -> BTreeMap<Ownership, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            *out.entry(e.ownership).or_insert(0) += e.tensor.numel();
        }
        out
    }

    /// Adds the gradients of every parameter bound on `tape` to the stored
    /// tensors' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, grad) in tape.param_grads() {
            let Some(grad) = grad else { continue };
            let t = self
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("tape bound unknown parameter {name}")))?;
            t.accumulate_grad(grad);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// Deep copy of the named entries, keeping their tags.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<ParameterStore> {
        let mut out = ParameterStore::new();
        for n in names {
            let n = n.as_ref();
            let e = self
                .entries
                .get(n)
                .ok_or_else(|| Error::contract(format!("missing parameter {n}")))?;
            let mut tensor = e.tensor.clone();
            tensor.zero_grad();
            out.insert(n, tensor, e.ownership)?;
        }
        Ok(out)
    }
}

impl ParamSource for ParameterStore {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}
