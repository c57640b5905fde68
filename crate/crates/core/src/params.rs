//! Named parameter containers generic over their storage.
//!
//! Parameter structs are written once, generic over `T`: `T = Tensor` holds
//! values, `T = Var` holds the leaves bound on a tape, and mapping a bound
//! struct through [`Tape::grad_tensor`] yields a gradient struct of the same
//! layout.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub trait Visit<T> {
    type Mapped<U>;

    /// Visits every tensor in a fixed order with its dotted name.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T));
    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;
}

/// Visits `inner` with every name prefixed by `prefix.`.
pub(crate) fn nested<'a, T, P: Visit<T>>(
    prefix: &str,
    inner: &'a P,
    f: &mut dyn FnMut(&str, &'a T),
) {
    inner.visit(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub(crate) fn nested_mut<T, P: Visit<T>>(
    prefix: &str,
    inner: &mut P,
    f: &mut dyn FnMut(&str, &mut T),
) {
    inner.visit_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub(crate) fn nested_map<T, U, P: Visit<T>>(
    prefix: &str,
    inner: &P,
    f: &mut dyn FnMut(&str, &T) -> U,
) -> P::Mapped<U> {
    inner.map(&mut |n, t| f(&format!("{prefix}.{n}"), t))
}

/// Registers every tensor as a gradient-carrying leaf.
pub fn bind<P: Visit<Tensor>>(tape: &mut Tape, params: &P) -> P::Mapped<Var> {
    params.map(&mut |_, t| tape.param(t.clone()))
}

/// Gradients of bound leaves after a backward sweep.
pub fn gradients<P: Visit<Var>>(tape: &Tape, bound: &P) -> P::Mapped<Tensor> {
    bound.map(&mut |_, &v| tape.grad_tensor(v))
}

pub fn named<P: Visit<Tensor>>(params: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    params.visit(&mut |n, t| out.push((n.to_string(), t)));
    out
}

pub fn count<P: Visit<Tensor>>(params: &P) -> usize {
    let mut total = 0;
    params.visit(&mut |_, t| total += t.len());
    total
}

/// Tensors in visit order.
pub fn flatten<P: Visit<Tensor>>(params: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |_, t| out.push(t.clone()));
    out
}

/// Rebuilds the layout of `params` over `vars`, taken in visit order.
pub fn rebind<P: Visit<Tensor>>(params: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut it = vars.iter();
    params.map(&mut |name, _| *it.next().unwrap_or_else(|| panic!("no var left for {name}")))
}
