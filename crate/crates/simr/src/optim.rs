//! Parameter updates. Adam is the training default; plain SGD is kept because
//! its one-step arithmetic is trivially hand-checkable in tests.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

impl OptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptKind::Sgd),
            "adam" => Ok(OptKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

pub struct Optimizer<S> {
    kind: OptKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Adam step counter, bumped once per `step` call.
    t: u64,
    m: IndexMap<String, Vec<S>>,
    v: IndexMap<String, Vec<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptKind::Adam, lr)
    }

    /// Apply one update from the gradients accumulated in `g`, then zero them.
    /// Parameters whose leaves received no gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        g: &mut Graph<S>,
        bound: &Bound,
    ) -> Result<()> {
        self.t += 1;
        let lr = S::from_f64(self.lr);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let eps = S::from_f64(self.eps);
        // bias-correction factors for the current step
        let c1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        for (name, &id) in bound.iter() {
            let Some(grad) = g.grad(id) else { continue };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("bound name `{name}` missing from params")))?;
            match self.kind {
                OptKind::Sgd => {
                    for (w, &gr) in p.data.iter_mut().zip(grad) {
                        *w = *w - lr * gr;
                    }
                }
                OptKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![S::zero(); grad.len()]);
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![S::zero(); grad.len()]);
                    for j in 0..grad.len() {
                        let gr = grad[j];
                        m[j] = b1 * m[j] + (S::one() - b1) * gr;
                        v[j] = b2 * v[j] + (S::one() - b2) * gr * gr;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        g.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(kind: OptKind, lr: f64, p0: f64, grad_factor: f64) -> f64 {
        // loss = grad_factor * p  =>  dL/dp = grad_factor
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("p", &[], vec![p0]).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let c = g.scalar(grad_factor);
        let loss = g.mul(bound.id("p").unwrap(), c).unwrap();
        g.backward(loss).unwrap();
        let mut opt = Optimizer::new(kind, lr).unwrap();
        opt.step(&mut params, &mut g, &bound).unwrap();
        assert!(g.grad(bound.id("p").unwrap()).is_none(), "grads zeroed after step");
        params.get("p").unwrap().data[0]
    }

    #[test]
    fn sgd_single_step() {
        assert!((one_step(OptKind::Sgd, 0.1, 1.0, 1.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_grad_is_stationary() {
        assert_eq!(one_step(OptKind::Sgd, 0.1, 1.0, 0.0), 1.0);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let lr = 0.1;
        let grad = 0.5;
        let got = one_step(OptKind::Adam, lr, 1.0, grad);
        // standard formulas at t=1, beta1=0.9, beta2=0.999, eps=1e-8
        let m_hat = (0.1 * grad) / (1.0 - 0.9);
        let v_hat = (0.001 * grad * grad) / (1.0 - 0.999);
        let want = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        // at t=1 the update is close to lr * sign(grad)
        assert!((1.0 - got - lr).abs() < 1e-6);
    }

    #[test]
    fn non_positive_lr_rejected() {
        assert!(matches!(Optimizer::<f32>::sgd(0.0), Err(Error::Config(_))));
        assert!(matches!(Optimizer::<f32>::adam(-1.0), Err(Error::Config(_))));
    }
}
