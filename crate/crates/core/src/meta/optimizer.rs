use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "SGD")]
    Sgd,
    Adam,
    #[serde(rename = "RMSProp")]
    RmsProp,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::RmsProp => "RMSProp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Accumulators of one optimizer instance. Only values are stored: when a
/// step runs on dual numbers the carried state is a constant of that step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Adam first moments.
    pub first: Vec<Tensor>,
    /// Adam or RMSProp second moments.
    pub second: Vec<Tensor>,
}

fn check_shapes<A: Real, B: Real>(a: &[Tensor<A>], b: &[Tensor<B>], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::Shape(format!("{what} do not match parameter shapes")));
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`. The scale
/// factor is differentiated along with the gradients.
pub fn clip_global_norm<T: Real>(grads: &[Tensor<T>], max_norm: f64) -> Vec<Tensor<T>> {
    let norm = grads.iter().fold(T::zero(), |acc, g| acc + g.squared_norm()).sqrt();
    if norm.value() <= max_norm {
        return grads.to_vec();
    }
    let factor = T::from_f64(max_norm) / norm;
    grads.iter().map(|g| g.map(|x| x * factor)).collect()
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, like: &[Tensor]) -> Self {
        let zeros = || like.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (first, second) = match config.kind {
            OptimizerKind::Sgd => (vec![], vec![]),
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::RmsProp => (vec![], zeros()),
        };
        OptimizerState {
            config,
            step: 0,
            first,
            second,
        }
    }

    fn prepare<T: Real>(&self, grads: &[Tensor<T>]) -> Vec<Tensor<T>> {
        match self.config.clip_norm {
            Some(c) => clip_global_norm(grads, c),
            None => grads.to_vec(),
        }
    }

    /// Second-moment accumulators after observing `grads` (clipped first).
    pub fn statistics<T: Real>(&self, grads: &[Tensor<T>]) -> Result<Vec<Tensor>> {
        let decay = match self.config.kind {
            OptimizerKind::Sgd => return Ok(vec![]),
            OptimizerKind::Adam => ADAM_BETA2,
            OptimizerKind::RmsProp => RMSPROP_DECAY,
        };
        check_shapes(&self.second, grads, "gradients")?;
        let g = self.prepare(grads);
        self.second
            .iter()
            .zip(&g)
            .map(|(v, g)| v.zip_map(&g.values(), |v, g| decay * v + (1.0 - decay) * g * g))
            .collect()
    }

    /// One update of `params` along `grads`.
    pub fn step<T: Real>(&self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, OptimizerState)> {
        let stats = self.statistics(grads)?;
        self.step_with_statistics(params, grads, stats)
    }

    /// One update using precomputed second moments, which enter the update as
    /// constants. Passing the statistics of a nearby point lets a perturbed
    /// replay differentiate the same function as the dual-number path.
    pub fn step_with_statistics<T: Real>(
        &self,
        params: &[Tensor<T>],
        grads: &[Tensor<T>],
        second: Vec<Tensor>,
    ) -> Result<(Vec<Tensor<T>>, OptimizerState)> {
        check_shapes(params, grads, "gradients")?;
        check_shapes(params, &second, "statistics").or_else(|e| {
            if self.config.kind == OptimizerKind::Sgd && second.is_empty() {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        let lr = self.config.learning_rate;
        let g = self.prepare(grads);
        let step = self.step + 1;
        let mut next = OptimizerState {
            config: self.config,
            step,
            first: self.first.clone(),
            second,
        };
        let out: Vec<Tensor<T>> = match self.config.kind {
            OptimizerKind::Sgd => params
                .iter()
                .zip(&g)
                .map(|(p, g)| p.zip_map(g, |p, g| p - g.scale(lr)))
                .collect::<Result<_>>()?,
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
                let mut out = Vec::with_capacity(params.len());
                for (k, (p, g)) in params.iter().zip(&g).enumerate() {
                    let m_prev = &self.first[k];
                    let m: Vec<T> = m_prev
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&m, &g)| T::from_f64(ADAM_BETA1 * m) + g.scale(1.0 - ADAM_BETA1))
                        .collect();
                    let v = &next.second[k];
                    let data = p
                        .data()
                        .iter()
                        .zip(&m)
                        .zip(v.data())
                        .map(|((&p, &m), &v)| p - m.scale(lr / c1 / ((v / c2).sqrt() + ADAM_EPSILON)))
                        .collect();
                    next.first[k] = Tensor::new(p.shape().to_vec(), m.iter().map(|x| x.value()).collect())?;
                    out.push(Tensor::new(p.shape().to_vec(), data)?);
                }
                out
            }
            OptimizerKind::RmsProp => params
                .iter()
                .zip(&g)
                .zip(&next.second)
                .map(|((p, g), v)| {
                    let data = p
                        .data()
                        .iter()
                        .zip(g.data())
                        .zip(v.data())
                        .map(|((&p, &g), &v)| p - g.scale(lr / (v + RMSPROP_EPSILON).sqrt()))
                        .collect();
                    Tensor::new(p.shape().to_vec(), data)
                })
                .collect::<Result<_>>()?,
        };
        if out.iter().any(|t| !t.all_finite()) {
            return Err(Error::Numerical(format!("non-finite {} update", self.config.kind.as_str())));
        }
        Ok((out, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;

    fn cfg(kind: OptimizerKind, lr: f64, clip: Option<f64>) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: lr,
            clip_norm: clip,
        }
    }

    fn one(x: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(x)]
    }

    #[test]
    fn sgd_example() {
        let s = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.5, None), &one(1.0));
        let (p, s2) = s.step(&one(1.0), &one(2.0)).unwrap();
        assert_eq!(p[0].data()[0], 0.0);
        assert_eq!(s2.step, 1);
        assert!(s2.first.is_empty() && s2.second.is_empty());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let s = OptimizerState::new(cfg(OptimizerKind::Adam, 0.1, None), &one(0.0));
        let (p, _) = s.step(&one(0.0), &one(1.0)).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_on_quadratic_match_recurrence() {
        // f(x) = 1.5 x^2, g = 3x
        let lr = 0.05;
        let mut s = OptimizerState::new(cfg(OptimizerKind::Adam, lr, None), &one(2.0));
        let mut x = one(2.0);
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=2 {
            let g = 3.0 * xr;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            xr -= lr * mh / (vh.sqrt() + 1e-8);
            let grads = one(3.0 * x[0].data()[0]);
            let (nx, ns) = s.step(&x, &grads).unwrap();
            x = nx;
            s = ns;
            assert!((x[0].data()[0] - xr).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsprop_on_quadratic_matches_recurrence() {
        let lr = 5e-4;
        let s = OptimizerState::new(cfg(OptimizerKind::RmsProp, lr, None), &one(1.0));
        let g = 2.0 * 1.0;
        let v = 0.01 * g * g;
        let expect = 1.0 - lr * g / (v + 1e-8f64).sqrt();
        let (p, s2) = s.step(&one(1.0), &one(g)).unwrap();
        assert!((p[0].data()[0] - expect).abs() < 1e-12);
        assert!((s2.second[0].data()[0] - v).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_to_norm() {
        let g = vec![Tensor::vector(vec![0.6, 0.8])];
        let c = clip_global_norm(&g, 0.1);
        assert!((c[0].data()[0] - 0.06).abs() < 1e-15);
        assert!((c[0].data()[1] - 0.08).abs() < 1e-15);
        assert_eq!(clip_global_norm(&g, 2.0), g);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let s = OptimizerState::new(cfg(kind, 0.0, None), &one(0.3));
            let (p, _) = s.step(&one(0.3), &one(5.0)).unwrap();
            assert_eq!(p[0].data()[0], 0.3);
        }
    }

    #[test]
    fn dual_step_differentiates_update_with_statistics_fixed() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let s = OptimizerState::new(cfg(kind, 0.1, Some(10.0)), &one(0.0));
            let g = |z: f64| 1.0 + z * z;
            let z0 = 0.7;
            let gd = vec![Tensor::scalar(Dual::variable(z0)).map(|z| Dual::constant(1.0) + z * z)];
            let (pd, _) = s.step(&[Tensor::scalar(Dual::constant(0.5))], &gd).unwrap();
            let stats = s.statistics(&one(g(z0))).unwrap();
            let at = |z: f64| s.step_with_statistics(&one(0.5), &one(g(z)), stats.clone()).unwrap().0[0].data()[0];
            let fd = (at(z0 + 1e-6) - at(z0 - 1e-6)) / 2e-6;
            let an = pd[0].data()[0].eps;
            assert!((an - fd).abs() / an.abs().max(1e-12) < 1e-7, "{kind:?}: {an} vs {fd}");
        }
    }

    #[test]
    fn non_finite_update_is_numerical_error() {
        let s = OptimizerState::new(cfg(OptimizerKind::Sgd, 1.0, None), &one(0.0));
        assert!(matches!(s.step(&one(0.0), &one(f64::INFINITY)), Err(Error::Numerical(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = OptimizerState::new(cfg(OptimizerKind::Adam, 1.0, None), &one(0.0));
        assert!(matches!(s.step(&one(0.0), &[Tensor::vector(vec![1.0, 2.0])]), Err(Error::Shape(_))));
    }
}
