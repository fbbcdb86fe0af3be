//! Named parameters, whole-model gradients, and the finite-difference
//! verification oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Tape, Var};

/// Ordered map of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { map: iter.into_iter().collect() }
    }
}

/// One gradient tensor per parameter, shapes matching.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    /// Scale every gradient in place by `c`.
    pub fn scale(&mut self, c: f64) {
        let cv = T::from_f64(c);
        for tensor in self.map.values_mut() {
            let data = tensor.data().iter().map(|v| *v * cv).collect();
            *tensor = Tensor::from_vec(tensor.shape().to_vec(), data).expect("same shape");
        }
    }

    /// Elementwise sum with another gradient set (same parameters).
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (name, tensor) in self.map.iter_mut() {
            let o = &other.map[name];
            let data = tensor.data().iter().zip(o.data()).map(|(a, b)| *a + *b).collect();
            *tensor = Tensor::from_vec(tensor.shape().to_vec(), data).expect("same shape");
        }
    }
}

/// Parameters bound onto a tape as leaf vars, by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Self {
        let vars = params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

/// Evaluate a scalar loss and return reverse-mode gradients for every
/// parameter. Parameters the loss never touches get zero gradients.
pub fn grad_with<T: Scalar, F>(params: &ParamSet<T>, loss_fn: F) -> Result<(T, Gradients<T>)>
where
    F: FnOnce(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let loss = loss_fn(&mut tape, &bound)?;
    let loss_val = tape.value(loss).item()?;
    if !loss_val.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(loss)?;
    let map = bound
        .vars
        .iter()
        .map(|(name, var)| (name.clone(), grads.wrt(*var)))
        .collect();
    Ok((loss_val, Gradients { map }))
}

/// Evaluate the loss value only.
pub fn value_with<T: Scalar, F>(params: &ParamSet<T>, loss_fn: F) -> Result<T>
where
    F: FnOnce(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.value(loss).item()
}

/// Central-difference gradient estimate, coordinate by coordinate:
/// (f(w + h e) - f(w - h e)) / 2h.
pub fn finite_difference_grad<T: Scalar, F>(
    params: &ParamSet<T>,
    loss_fn: F,
    h: f64,
) -> Result<Gradients<T>>
where
    F: Fn(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step h={h} must be > 0")));
    }
    let mut map = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let mut grad = Vec::with_capacity(tensor.numel());
        for i in 0..tensor.numel() {
            let w0 = tensor.data()[i].to_f64();
            let eval = |w: f64| -> Result<f64> {
                let mut shifted = params.clone();
                shifted.set(name, tensor.with_coord(i, T::from_f64(w)))?;
                Ok(value_with(&shifted, &loss_fn)?.to_f64())
            };
            let fp = eval(w0 + h)?;
            let fm = eval(w0 - h)?;
            grad.push(T::from_f64((fp - fm) / (2.0 * h)));
        }
        map.insert(name.clone(), Tensor::from_vec(tensor.shape().to_vec(), grad)?);
    }
    Ok(Gradients { map })
}

/// Per-parameter outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// max over coordinates of |analytic - numeric| / (atol + rtol * max(|analytic|, |numeric|))
    pub max_err_ratio: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

/// Report of an analytic-vs-numeric gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub atol: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: err_ratio {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e})",
                if c.pass { "pass" } else { "FAIL" },
                c.name,
                c.max_err_ratio,
                c.worst_index,
                c.analytic_at_worst,
                c.numeric_at_worst,
            )?;
        }
        Ok(())
    }
}

/// Compare two gradient sets parameter by parameter. A coordinate passes when
/// |a - n| <= atol + rtol * max(|a|, |n|).
pub fn check_gradients<A: Scalar, B: Scalar>(
    analytic: &Gradients<A>,
    numeric: &Gradients<B>,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    let names_a: Vec<&String> = analytic.map.keys().collect();
    let names_b: Vec<&String> = numeric.map.keys().collect();
    if names_a != names_b {
        return Err(Error::ShapeMismatch {
            op: "check_gradients",
            detail: format!("parameter sets differ: {names_a:?} vs {names_b:?}"),
        });
    }
    let mut checks = Vec::with_capacity(names_a.len());
    for (name, ga) in analytic.map.iter() {
        let gn = &numeric.map[name];
        if ga.shape() != gn.shape() {
            return Err(Error::ShapeMismatch {
                op: "check_gradients",
                detail: format!("{name}: {:?} vs {:?}", ga.shape(), gn.shape()),
            });
        }
        let mut worst = ParamCheck {
            name: name.clone(),
            max_err_ratio: 0.0,
            worst_index: 0,
            analytic_at_worst: ga.data().first().map(|v| v.to_f64()).unwrap_or(0.0),
            numeric_at_worst: gn.data().first().map(|v| v.to_f64()).unwrap_or(0.0),
            pass: true,
        };
        for (i, (a, n)) in ga.data().iter().zip(gn.data()).enumerate() {
            let (a, n) = (a.to_f64(), n.to_f64());
            let ratio = (a - n).abs() / (atol + rtol * a.abs().max(n.abs()));
            if ratio > worst.max_err_ratio {
                worst.max_err_ratio = ratio;
                worst.worst_index = i;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = n;
            }
        }
        worst.pass = worst.max_err_ratio <= 1.0;
        checks.push(worst);
    }
    Ok(GradCheckReport { rtol, atol, checks })
}

/// A loss definition usable at both precisions, so the analytic f32 path can
/// be checked against a 64-bit finite-difference run of the same model.
pub trait LossBuilder {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams) -> Result<Var>;
}

/// Full verification pipeline: analytic gradients in f32, central differences
/// in f64, compared at (rtol, atol).
pub fn verify_gradients<L: LossBuilder>(
    params: &ParamSet<f32>,
    loss: &L,
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = grad_with(params, |tape, bound| loss.build(tape, bound))?;
    let params64 = params.cast::<f64>();
    let numeric = finite_difference_grad(&params64, |tape, bound| loss.build(tape, bound), h)?;
    check_gradients(&analytic, &numeric, rtol, atol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, data: Vec<f32>) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::from_vec(vec![data.len()], data).unwrap());
        p
    }

    #[test]
    fn fd_of_square_at_three() {
        // f(w) = w^2 at w=3, h=1e-3: central difference is exact for quadratics
        let params = single("w", vec![3.0]);
        let g = finite_difference_grad(
            &params.cast::<f64>(),
            |tape, b| {
                let w = b.var("w")?;
                let sq = tape.mul(w, w)?;
                tape.sum(sq)
            },
            1e-3,
        )
        .unwrap();
        assert!((g.get("w").unwrap().data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let params = single("w", vec![1.0, 2.0, 3.0]);
        let g = finite_difference_grad(
            &params.cast::<f64>(),
            |tape, _| {
                let c = tape.leaf(Tensor::scalar(7.0));
                tape.sum(c)
            },
            1e-3,
        )
        .unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let params = single("w", vec![1.0]);
        let r = finite_difference_grad(&params, |tape, b| tape.sum(b.var("w")?), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn identical_gradients_pass_with_zero_error() {
        let (_, g) = grad_with(&single("w", vec![1.0, -2.0]), |tape, b| {
            let w = b.var("w")?;
            let sq = tape.mul(w, w)?;
            let half = tape.mul_scalar(sq, 0.5)?;
            tape.sum(half)
        })
        .unwrap();
        let report = check_gradients(&g, &g, 1e-3, 1e-5).unwrap();
        assert!(report.all_pass());
        assert!(report.checks.iter().all(|c| c.max_err_ratio == 0.0));
    }

    #[test]
    fn shifted_gradients_fail() {
        let (_, g) = grad_with(&single("w", vec![1.0, -2.0]), |tape, b| tape.sum(b.var("w")?)).unwrap();
        let mut shifted = g.clone();
        for (_, t) in shifted.map.iter_mut() {
            let data = t.data().iter().map(|v| v + 1.0).collect();
            *t = Tensor::from_vec(t.shape().to_vec(), data).unwrap();
        }
        let report = check_gradients(&g, &shifted, 1e-3, 1e-5).unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn mismatched_shapes_error() {
        let (_, g1) = grad_with(&single("w", vec![1.0, 2.0]), |tape, b| tape.sum(b.var("w")?)).unwrap();
        let (_, g2) = grad_with(&single("w", vec![1.0, 2.0, 3.0]), |tape, b| tape.sum(b.var("w")?)).unwrap();
        assert!(check_gradients(&g1, &g2, 1e-3, 1e-5).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut params = single("w", vec![1.0, 2.0]);
        params.insert("unused", Tensor::from_vec(vec![2], vec![5.0, 5.0]).unwrap());
        let (_, g) = grad_with(&params, |tape, b| tape.sum(b.var("w")?)).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.get("unused").unwrap().data().iter().all(|v| *v == 0.0));
    }
}
