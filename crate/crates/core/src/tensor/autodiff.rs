use std::collections::BTreeMap;

use super::{GradientSet, ParameterSet, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Tape handles of every parameter in a [`ParameterSet`].
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Records every parameter as a differentiable leaf.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<ParamVars> {
    let mut vars = BTreeMap::new();
    for (name, _, value) in params.iter() {
        vars.insert(name.to_string(), tape.param(value.clone())?);
    }
    Ok(ParamVars { vars })
}

/// Records every parameter as a constant leaf (inference).
pub fn freeze_params<T: Scalar>(tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<ParamVars> {
    let mut vars = BTreeMap::new();
    for (name, _, value) in params.iter() {
        vars.insert(name.to_string(), tape.constant(value.clone())?);
    }
    Ok(ParamVars { vars })
}

/// A scalar loss recorded from parameters.
pub trait Objective<T: Scalar> {
    fn loss(&self, tape: &mut Tape<T>, params: &ParamVars) -> Result<Var>;
}

impl<T, F> Objective<T> for F
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamVars) -> Result<Var>,
{
    fn loss(&self, tape: &mut Tape<T>, params: &ParamVars) -> Result<Var> {
        self(tape, params)
    }
}

/// Loss value and its gradient with respect to every parameter.
///
/// Parameters the loss does not depend on get zero gradients, so the result
/// always mirrors `params`.
pub fn grad<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &ParameterSet<T>,
) -> Result<(T, GradientSet<T>)> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params)?;
    let loss = objective.loss(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let mut g = tape.backward(loss)?;
    let mut out = GradientSet::new();
    for (name, _, p) in params.iter() {
        let v = vars.get(name)?;
        let t = g.take(v).unwrap_or_else(|| super::Tensor::zeros(p.shape().to_vec()));
        out.insert(name, t);
    }
    Ok((value, out))
}

/// Hessian-vector product by central differences of the gradient along the
/// normalized direction:
/// `(grad(p + eps*u) - grad(p - eps*u)) * |v| / (2*eps)` with `u = v/|v|`.
///
/// `v` may name a subset of the parameters; the others are held fixed.
pub fn hvp<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &ParameterSet<T>,
    v: &GradientSet<T>,
    eps: T,
) -> Result<GradientSet<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Contract(format!("hvp step must be positive, got {eps}")));
    }
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Contract(format!("hvp direction has norm {norm}")));
    }
    let mut unit = v.clone();
    unit.scale(T::lit(1.0 / norm));
    let (_, g_plus) = grad(objective, &params.perturbed(&unit, eps)?)?;
    let (_, g_minus) = grad(objective, &params.perturbed(&unit, -eps)?)?;
    let factor = T::lit(norm) / (eps + eps);
    let mut out = g_plus;
    for (name, t) in out.iter_mut() {
        let m = g_minus.get(name).expect("both gradients mirror params");
        for (a, &b) in t.data_mut().iter_mut().zip(m.data()) {
            *a = (*a - b) * factor;
        }
    }
    Ok(out)
}
