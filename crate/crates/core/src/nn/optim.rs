use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Bound, Params, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `p ← p − lr·g` for every parameter. Gradients must be keyed exactly like
/// the parameters and be finite.
pub fn sgd_step(params: &mut Params, grads: &Params, learning_rate: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= learning_rate * g;
        }
    }
    Ok(())
}

fn check_grads(params: &Params, grads: &Params) -> Result<()> {
    for (name, p) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::invalid(format!(
            "gradient for unknown parameter `{extra}`"
        )));
    }
    Ok(())
}

/// Update rule selected by [`TrainConfig::optimizer`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `v ← μv + g`, `p ← p − lr·v`; plain SGD when `μ = 0`.
    #[default]
    Sgd,
    /// Bias-corrected Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-7.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    first: Params,
    second: Params,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, learning_rate, momentum)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Adam, learning_rate, 0.0)
    }

    fn with_kind(kind: OptimizerKind, learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum,
            first: Params::new(),
            second: Params::new(),
            steps: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::with_kind(cfg.optimizer, cfg.learning_rate, cfg.momentum)
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if self.kind == OptimizerKind::Sgd && self.momentum == 0.0 {
            return sgd_step(params, grads, self.learning_rate);
        }
        check_grads(params, grads)?;
        self.steps += 1;
        let lr = self.learning_rate;
        let (c1, c2) = (
            1.0 - ADAM_BETA1.powi(self.steps as i32),
            1.0 - ADAM_BETA2.powi(self.steps as i32),
        );
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((p, v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *v = self.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(s.data_mut())
                        .zip(g.data());
                    for (((p, m), s), g) in it {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub min_loss: f64,
    pub max_loss: f64,
    pub batches: usize,
}

/// One pass over `batches`: forward, backward and an optimizer step per batch.
///
/// `loss_fn` records the loss for one batch on a fresh tape with the
/// parameters bound as trainable leaves.
pub fn train_epoch<B, F>(
    params: &mut Params,
    batches: &[B],
    optimizer: &mut Optimizer,
    rng: &mut dyn RngCore,
    mut loss_fn: F,
) -> Result<EpochStats>
where
    F: FnMut(&mut Tape, &Bound, &B, &mut dyn RngCore) -> Result<Var>,
{
    if batches.is_empty() {
        return Err(Error::invalid("no batches to train on"));
    }
    let mut losses = Vec::with_capacity(batches.len());
    for (i, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = Bound::new(params, &mut tape, true);
        let loss = loss_fn(&mut tape, &bound, batch, rng).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFiniteLoss {
                context: format!("batch {i} ({op})"),
                value: f64::NAN,
            },
            other => other,
        })?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("batch {i}"),
                value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads = bound.collect(&mut grads);
        optimizer.step(params, &grads)?;
        losses.push(value);
    }
    Ok(EpochStats {
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
        max_loss: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        batches: losses.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn one_step_moves_by_lr_times_grad() {
        let mut p = params(1.0);
        sgd_step(&mut p, &params(0.5), 0.001).unwrap();
        assert_eq!(p["w"].item().unwrap(), 1.0 - 0.001 * 0.5);
        assert_eq!(p["w"].item().unwrap(), 0.9995);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = params(1.25);
        sgd_step(&mut p, &params(0.0), 0.1).unwrap();
        assert_eq!(p["w"].item().unwrap(), 1.25);
    }

    #[test]
    fn missing_or_bad_gradients_are_rejected() {
        let mut p = params(1.0);
        assert!(matches!(
            sgd_step(&mut p, &Params::new(), 0.1),
            Err(Error::MissingGradient(n)) if n == "w"
        ));
        let mut bad = Params::new();
        bad.insert("w".into(), Tensor::from_parts(vec![], vec![f64::NAN]));
        assert!(sgd_step(&mut p, &bad, 0.1).is_err());
        let mut extra = params(0.0);
        extra.insert("v".into(), Tensor::scalar(0.0));
        assert!(sgd_step(&mut p, &extra, 0.1).is_err());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = params(0.0);
        let mut opt = Optimizer::sgd(0.1, 0.9);
        opt.step(&mut p, &params(1.0)).unwrap();
        opt.step(&mut p, &params(1.0)).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p["w"].item().unwrap() + 0.1 * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_steps_follow_the_bias_corrected_moments() {
        // Reference recursion written out by hand for two constant-gradient
        // steps and one sign flip.
        let mut p = params(1.0);
        let mut opt = Optimizer::adam(0.001);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-7, 0.001);
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        for (t, g) in [(1, 0.5), (2, 0.5), (3, -2.0)] {
            opt.step(&mut p, &params(g)).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            assert!((p["w"].item().unwrap() - w).abs() < 1e-15);
        }
        // The first step has magnitude lr regardless of the gradient scale.
        let mut q = params(0.0);
        Optimizer::adam(0.001).step(&mut q, &params(1e4)).unwrap();
        assert!((q["w"].item().unwrap() + 0.001).abs() < 1e-12);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut p = params(0.0);
        let mut opt = Optimizer::sgd(0.1, 0.0);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let res = train_epoch::<(), _>(&mut p, &[], &mut opt, &mut rng, |t, _, _, _| {
            Ok(t.constant(Tensor::scalar(0.0)))
        });
        assert!(res.is_err());
    }

    #[test]
    fn param_independent_loss_leaves_params_unchanged() {
        let mut p = params(3.0);
        let before = p.clone();
        let mut opt = Optimizer::sgd(0.1, 0.0);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let stats = train_epoch(&mut p, &[1.0, 2.0], &mut opt, &mut rng, |t, _, &b, _| {
            Ok(t.constant(Tensor::scalar(b)))
        })
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(stats.mean_loss, 1.5);
    }

    #[test]
    fn nan_loss_aborts_with_context() {
        let mut p = params(0.0);
        let mut opt = Optimizer::sgd(0.1, 0.0);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let res = train_epoch(&mut p, &[0.0], &mut opt, &mut rng, |t, b, _, _| {
            let w = b.get("w")?;
            let z = t.mul(w, w)?;
            t.log(z)
        });
        assert!(matches!(res, Err(Error::NonFiniteLoss { .. })));
    }
}
