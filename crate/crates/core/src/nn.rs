//! Parameter binding and the conv building blocks shared by both networks.

use crate::graph::{Gradients, Graph, Var};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{Real, Tensor};

/// A parameter store mounted on a graph as leaves.
pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(g: &mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        let vars = store.tensors().map(|t| g.leaf(t.clone(), trainable)).collect();
        Self { store, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).map(|i| self.vars[i])
    }

    /// Per-entry gradients aligned with the store; zeros where none flowed.
    pub fn take_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Group count for a normalization over `c` channels.
pub fn norm_groups(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

/// 3x3 (or `k`x`k`) conv without bias, followed by group norm affine params.
pub fn conv_norm_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), &[cout, cin, k, k]),
        ParamSpec::constant(format!("{prefix}.gn.g"), cout, 1.0),
        ParamSpec::constant(format!("{prefix}.gn.b"), cout, 0.0),
    ]
}

pub fn conv_bias_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), &[cout, cin, k, k]),
        ParamSpec::bias(format!("{prefix}.b"), cout, cin * k * k),
    ]
}

/// conv -> group norm -> SiLU.
pub fn conv_norm_act<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let k = g.value(w).shape()[2];
    let y = g.conv2d(x, w, None, stride, k / 2);
    let c = g.value(y).shape()[0];
    let y = g.group_norm(
        y,
        p.var(&format!("{prefix}.gn.g")),
        p.var(&format!("{prefix}.gn.b")),
        norm_groups(c),
    );
    g.silu(y)
}

/// Plain conv with bias and "same" padding.
pub fn conv_bias<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, prefix: &str, x: Var) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let k = g.value(w).shape()[2];
    g.conv2d(x, w, Some(p.var(&format!("{prefix}.b"))), 1, k / 2)
}
