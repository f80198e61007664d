use crate::error::{Error, Result};

use super::{ModelParams, ParamKind, Real};

/// Adam moments and hyperparameters over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }

    /// Updates `params` with moments `m[offset..]`, `v[offset..]` at the
    /// current step count.
    fn apply(&mut self, offset: usize, params: &mut [T], grads: &[T]) {
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let (lr, eps) = (T::of(self.lr), T::of(self.epsilon));
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn check_finite<T: Real>(name: &str, grads: &[T]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {name}[{i}] is {}",
            grads[i]
        )));
    }
    Ok(())
}

/// One bias-corrected Adam update of a single flat parameter vector.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    name: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} values", state.m.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    check_finite(name, grads)?;
    state.step += 1;
    state.apply(0, params, grads);
    Ok(())
}

/// A single Adam state spanning every trainable tensor of one or more
/// networks, visited in registration order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(nets: &[&ModelParams<T>], lr: f64) -> Self {
        let len = nets.iter().map(|p| p.scalar_count(ParamKind::Trainable)).sum();
        Self {
            state: AdamState::new(len, lr),
        }
    }

    /// Applies the accumulated gradients. Frozen tensors keep their values
    /// and moments; missing gradients count as zero.
    pub fn step(&mut self, nets: &mut [&mut ModelParams<T>]) -> Result<()> {
        let expected: usize = nets
            .iter()
            .map(|p| p.scalar_count(ParamKind::Trainable))
            .sum();
        if expected != self.state.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} trainable values", self.state.m.len()),
                expected,
            ));
        }
        for net in nets.iter() {
            for e in net.entries().iter().filter(|e| e.kind == ParamKind::Trainable) {
                if let Some(g) = e.tensor.grad() {
                    check_finite(&e.name, g)?;
                }
            }
        }
        self.state.step += 1;
        let mut offset = 0;
        for net in nets.iter_mut() {
            let frozen = net.frozen_groups().to_vec();
            for e in net.entries_mut().iter_mut() {
                if e.kind != ParamKind::Trainable {
                    continue;
                }
                let len = e.tensor.len();
                if !frozen.contains(&e.group()) {
                    let grads = e
                        .tensor
                        .grad()
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); len]);
                    self.state.apply(offset, e.tensor.data_mut(), &grads);
                }
                offset += len;
            }
        }
        Ok(())
    }
}
