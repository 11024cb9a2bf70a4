//! Named parameter collections and the shared meta-initialisation.

use crate::autodiff::{Graph, Var};
use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Ordered collection of named tensors. Order is insertion order and is
/// stable across save/load, which the checkpoint round-trip tests rely on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Same names and shapes, every entry filled with `value`.
    pub fn like_filled(&self, value: f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, arr) in self.iter() {
            out.insert(name.clone(), ArrayD::from_elem(arr.raw_dim(), value));
        }
        out
    }

    /// Elementwise combine with a congruent set.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, a) in self.iter() {
            let b = other
                .get(name)
                .unwrap_or_else(|| panic!("param set missing entry '{name}'"));
            let mut v = a.clone();
            v.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out.insert(name.clone(), v);
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, a) in self.iter() {
            out.insert(name.clone(), a.mapv(&f));
        }
        out
    }

    /// Bind every entry onto a graph, as parameters or constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, arr) in self.iter() {
            let v = if trainable {
                g.param(arr.clone())
            } else {
                g.constant(arr.clone())
            };
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }

    /// Collect graph values back into a named set (for adapted parameters).
    pub fn from_bound(g: &Graph, bound: &BoundParams) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &v) in bound.vars.iter() {
            out.insert(name.clone(), (*g.value(v)).clone());
        }
        out
    }
}

/// Graph-bound view of a [`ParamSet`]: the same names mapped to graph vars.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("bound params missing entry '{name}'"))
    }

    pub fn var_list(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    /// Pair each var with its name, in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// The meta-learned state: encoder weights, classifier weights, and the
/// element-wise inner learning rate mirroring the adapted parameter set.
/// `alpha_phi` is present only when the objective adapts the classifier in
/// the inner loop (the adversarial-querying baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub alpha_theta: ParamSet,
    pub alpha_phi: Option<ParamSet>,
}

impl MetaParams {
    pub fn n_scalars(&self) -> usize {
        self.theta.n_scalars()
            + self.phi.n_scalars()
            + self.alpha_theta.n_scalars()
            + self.alpha_phi.as_ref().map_or(0, |a| a.n_scalars())
    }
}

/// Encoder parameters adapted to one episode view, with provenance.
#[derive(Clone, Debug)]
pub struct AdaptedEncoderParams {
    pub theta_tau: ParamSet,
    pub episode_id: u64,
    pub view_index: usize,
}
