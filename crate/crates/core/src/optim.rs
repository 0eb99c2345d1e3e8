use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_hyperparams(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar Adam used as a reference.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            theta - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.5, -2.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::zeros(&[2])];
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 at t = 1, so Δθ = −lr·1/(1+ε).
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 0.1).unwrap();
        let delta = params[0].data()[0];
        assert!((delta + 0.1).abs() < 1e-8, "delta = {delta}");
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let mut params = vec![Tensor::vector(vec![0.5, -0.25])];
        let mut state = AdamState::new(&params);
        let mut refs = [ScalarAdam { m: 0.0, v: 0.0, t: 0 }, ScalarAdam { m: 0.0, v: 0.0, t: 0 }];
        let mut expect = [0.5, -0.25];
        let g = Tensor::vector(vec![0.3, -1.7]);
        for _ in 0..2 {
            adam_step(&mut params, std::slice::from_ref(&g), &mut state, 0.01).unwrap();
            for i in 0..2 {
                expect[i] = refs[i].step(expect[i], g.data()[i], 0.01);
            }
        }
        for (got, want) in params[0].data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(state.step(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 0.1);
        assert!(err.is_err());
        assert_eq!(state.step(), 0);
    }
}
