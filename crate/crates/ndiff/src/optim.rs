use crate::params::{ParamGrads, ParamStore};
use crate::{NdiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
///
/// `lr` is passed separately so schedules can vary it per step.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(NdiffError::Shape {
            op: "adamw_step",
            left: vec![param.len()],
            right: vec![grad.len(), state.m.len()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for k in 0..param.len() {
        let g = grad[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        param[k] = param[k] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a [`ParamStore`]. Parameters without a gradient entry are left
/// untouched (their moments do not advance either), which is how frozen
/// parameters are expressed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<Option<AdamState>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr)
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            let state = self.states[id.index()].get_or_insert_with(|| AdamState::zeros(param.len()));
            adamw_step(param.data_mut(), g, state, &self.config, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg, cfg.lr).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after one step, so Δ = -lr·g/(|g|+eps).
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [3.0, -0.2, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::zeros(3);
        adamw_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        for (pk, gk) in p.iter().zip(g) {
            let expected = -cfg.lr * gk / (gk.abs() + cfg.eps);
            assert!((pk - expected).abs() < 1e-15);
            assert!((pk + cfg.lr * gk.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_only_shrinks_by_factor() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut s = AdamState::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg, cfg.lr).unwrap();
        assert_eq!(p, vec![2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut s = AdamState::zeros(2);
        assert!(adamw_step(&mut [0.0; 2], &[0.0; 3], &mut s, &AdamWConfig::default(), 0.1).is_err());
    }

    #[test]
    fn optimizer_skips_params_without_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(1.0));
        let mut grads = ParamGrads::new();
        grads.accumulate(a, &[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &grads).unwrap();
        assert!(store.get(a).item() < 1.0);
        assert_eq!(store.get(b).item(), 1.0);
    }
}
