use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {learning_rate}")));
        }
        let zeros = |_| params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect::<Vec<_>>();
        Ok(AdamState {
            step_count: 0,
            first_moment: zeros(()),
            second_moment: zeros(()),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    /// One Adam update of every parameter. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("state tracks {} tensors, store has {}", self.first_moment.len(), params.len()),
            ));
        }
        for ((name, t), m) in params.iter_mut().zip(&self.first_moment) {
            if t.grad.is_none() {
                return Err(Error::InvalidArgument(format!("parameter {name} has no gradient")));
            }
            if m.len() != t.numel() {
                return Err(Error::shape("adam_step", format!("moment size mismatch for {name}")));
            }
        }
        self.step_count += 1;
        let step = self.step_count as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(step));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(step));
        let lr = T::from_f64_lossy(self.learning_rate);
        let eps = T::from_f64_lossy(self.epsilon);
        let one = T::one();
        for (((_, t), m), v) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grad = t.grad.take().expect("checked above");
            for (((p, &g), mi), vi) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
