use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: Adam,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(hyper: Adam, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            hyper,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }
}

/// Applies one bias-corrected Adam step in place.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    let Adam {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    if !(lr > 0.0 && beta1 > 0.0 && beta2 > 0.0 && eps > 0.0) {
        return Err(TensorError::Shape {
            op: "adam",
            detail: "hyperparameters must be positive".into(),
        });
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(TensorError::Shape {
            op: "adam",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(TensorError::Shape {
                op: "adam",
                detail: format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![scalar(1.5), Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(Adam::default(), &p);
        let g = vec![scalar(0.0), Tensor::zeros(&[2])];
        adam_update(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        assert!(st.first.iter().chain(&st.second).all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = Adam {
            lr: 1e-3,
            ..Adam::default()
        };
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(hyper, &p);
        adam_update(&mut p, &[scalar(1.0)], &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((p[0].item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((p[0].item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let hyper = Adam {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
        };
        let grads = [0.3, -1.7];
        let mut p = vec![scalar(2.0)];
        let mut st = AdamState::new(hyper, &p);
        for g in grads {
            adam_update(&mut p, &[scalar(g)], &mut st).unwrap();
        }
        // hand-rolled reference
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.8 * m + 0.2 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].item() - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(Adam::default(), &p);
        assert!(adam_update(&mut p, &[Tensor::zeros(&[3])], &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
