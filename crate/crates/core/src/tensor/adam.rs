use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round parameters to the nearest f32 after every update so that
    /// training state is exactly representable in a checkpoint.
    pub round_to_f32: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            round_to_f32: false,
        }
    }
}

/// First/second moment accumulators, one pair per trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, _, t)| if t.requires_grad { vec![0.0; t.numel()] } else { Vec::new() })
            .collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One bias-corrected Adam update. Parameters without a gradient in `grads`
/// are treated as having zero gradient; frozen parameters are untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<(), TensorError> {
    if state.first.len() != params.len() {
        return Err(TensorError::dim("adam_step", &[params.len()], &[state.first.len()]));
    }
    for id in params.ids() {
        let t = params.get(id);
        if !t.requires_grad {
            continue;
        }
        if state.first[id.index()].len() != t.numel() {
            return Err(TensorError::dim("adam_step", &t.shape, &[state.first[id.index()].len()]));
        }
        if let Some(g) = grads.param(id) {
            if g.len() != t.numel() {
                return Err(TensorError::dim("adam_step", &t.shape, &[g.len()]));
            }
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        round_to_f32,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        let grad = grads.param(id);
        let p = &mut params.get_mut(id).data;
        for i in 0..p.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            if round_to_f32 {
                p[i] = p[i] as f32 as f64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn quadratic_grad(store: &ParamStore) -> Gradients {
        // f(x) = (x - 3)^2
        let id = store.id("x").unwrap();
        let mut g = Graph::new(store);
        let x = g.param(id);
        let shifted = g.affine(x, 1.0, -3.0);
        let sq = g.mul(shifted, shifted).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.5, -1.25, 2.0]));
        let before = store.get(id).clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let grads = Gradients::zeros(&store);
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut state).unwrap();
        }
        assert_eq!(store.get(id), &before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 at step 1, so the update is lr * g / (|g| + eps).
        let g: f64 = 0.37;
        let lr = 1e-3;
        let expected = lr * g / (g + 1e-8);
        assert!((expected - 0.0009999999729729736).abs() < 1e-18);

        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0; 4]));
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut g1 = Graph::new(&store);
        let x = g1.param(id);
        let scaled = g1.affine(x, g, 0.0);
        let loss = g1.sum(scaled);
        let grads = g1.backward(loss).unwrap();
        adam_step(&mut store, &grads, &mut state).unwrap();
        for &p in &store.get(id).data {
            assert!((p + expected).abs() < 1e-15);
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // Reference recurrence (lr 0.1, default betas) ends at 3.0000530297387056.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0]));
        let mut state = AdamState::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..200 {
            let grads = quadratic_grad(&store);
            adam_step(&mut store, &grads, &mut state).unwrap();
        }
        let x = store.get(id).data[0];
        assert!((x - 3.0).abs() < 0.01);
        assert!((x - 3.0000530297387056).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![0.0; 2]));
        let mut state = AdamState::new(&store, AdamConfig::default());
        store.add("y", Tensor::vector(vec![0.0; 3]));
        let grads = Gradients::zeros(&store);
        assert!(adam_step(&mut store, &grads, &mut state).is_err());
    }

    #[test]
    fn step_counter_increments_and_moments_match_shapes() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[2, 3]));
        let mut state = AdamState::new(&store, AdamConfig::default());
        let grads = Gradients::zeros(&store);
        for k in 1..=3 {
            adam_step(&mut store, &grads, &mut state).unwrap();
            assert_eq!(state.step, k);
        }
        assert_eq!(state.first_moment(0).len(), 6);
        assert_eq!(state.second_moment(0).len(), 6);
    }
}
