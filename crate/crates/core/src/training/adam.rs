use super::TrainError;
use crate::numerics::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `weight_decay` adds `wd * p` to the
/// gradient (L2). Tensors with `frozen[i] == true` are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    frozen: Option<&[bool]>,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.len() {
            return Err(TrainError::Config(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let gj = g[j] + weight_decay * *p;
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![values.len()], values).unwrap());
        p
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = store(vec![1.0, -2.0, 0.5]);
        let g = vec![vec![0.3, -4.0, 1e-3]];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.01, 0.0, None).unwrap();
        // m_hat = g, v_hat = g², so the update is -lr * g / (|g| + eps).
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(&g[0])
            .map(|(p, g)| p - 0.01 * g / (g.abs() + ADAM_EPS))
            .collect();
        for (a, b) in p.get("w").unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(vec![1.0, 2.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0, 0.0]], &mut s, 0.1, 0.0, None).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = store(vec![0.0, 0.0]);
        let mut s = AdamState::new(&p);
        let mut prev = p.get("w").unwrap().data().to_vec();
        for _ in 0..200 {
            adam_step(&mut p, &[vec![2.5, -0.1]], &mut s, 1e-3, 0.0, None).unwrap();
            let now = p.get("w").unwrap().data().to_vec();
            let d0 = now[0] - prev[0];
            let d1 = now[1] - prev[1];
            assert!((d0 + 1e-3).abs() < 1e-6 && (d1 - 1e-3).abs() < 1e-6, "{d0} {d1}");
            prev = now;
        }
    }

    #[test]
    fn frozen_and_non_finite() {
        let mut p = store(vec![1.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![1.0]], &mut s, 0.1, 0.0, Some(&[true])).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
        let err = adam_step(&mut p, &[vec![f64::NAN]], &mut s, 0.1, 0.0, None).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = store(vec![3.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, 0.1, 0.5, None).unwrap();
        assert!(p.get("w").unwrap().data()[0] < 3.0);
    }
}
