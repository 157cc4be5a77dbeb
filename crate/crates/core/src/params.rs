//! Named parameter arrays and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform by-name access to a set of arrays.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Content digest per array, keyed by name.
    fn digests(&self) -> BTreeMap<String, [u8; 32]> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, t| {
            out.insert(n.to_string(), t.digest());
        });
        out
    }

    fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    /// Overwrites arrays from a snapshot taken of the same parameter set.
    fn restore(&mut self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = None;
        self.visit_mut(&mut |n, t| match snap.get(n) {
            Some(s) if s.shape() == t.shape() => *t = s.clone(),
            _ => missing = Some(n.to_string()),
        });
        match missing {
            Some(n) => Err(Error::Contract(format!(
                "snapshot lacks a compatible {n:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// Ordered name → array map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| Error::UnknownWeight {
            name: name.to_string(),
            valid: self.arrays.keys().cloned().collect(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            arrays: iter.into_iter().collect(),
        }
    }
}

impl Parameters for ParamStore {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in &self.arrays {
            f(n, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in self.arrays.iter_mut() {
            f(n, t);
        }
    }
}

/// Lazily records named arrays on a tape, once per name.
#[derive(Debug)]
pub struct Binder {
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl Binder {
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    pub fn trainable() -> Self {
        Self {
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = tape.leaf(value.clone(), self.trainable)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bind_store(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        self.bind(tape, name, t)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound array that received one.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| tape.grad_tensor(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Adds `src` into `dst` name-wise.
pub fn accumulate(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (n, g) in src {
        match dst.get_mut(&n) {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => {
                dst.insert(n, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, c: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}
