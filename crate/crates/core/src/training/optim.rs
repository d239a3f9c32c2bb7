use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// `0.5 · lr_max · (1 + cos(π · step / total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule length {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr_max * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// AdamW moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .filter(|p| p.trainable)
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-decay Adam update. Parameters that are not trainable, or
/// have no entry in `grads`, are left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let Some(g) = grads.get(&p.name) else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!("{}: grad {:?} vs value {:?}", p.name, g.shape(), p.value.shape()),
            });
        }
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x = *x - lr * wd * *x - lr * mhat / (vhat.sqrt() + eps);
        }
        p.grad = Some(g.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2.0).unwrap(), 2.0);
        assert!(cosine_lr(10, 10, 2.0).unwrap().abs() < 1e-15);
        assert!((cosine_lr(5, 10, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1.0).is_err());
    }

    fn one(v: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![v]), trainable).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one(1.0, true);
        let mut st = OptimizerState::new(&s, 0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![1.0]))]);
        adamw_step(&mut s, &g, &mut st, 0.1).unwrap();
        let got = s.value("w").unwrap().data()[0];
        assert!((got - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_and_frozen() {
        let mut s = one(2.0, true);
        let mut st = OptimizerState::new(&s, 0.01);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![0.0]))]);
        for _ in 0..3 {
            adamw_step(&mut s, &g, &mut st, 0.5).unwrap();
        }
        let expect = 2.0 * (1.0 - 0.5 * 0.01f64).powi(3);
        assert!((s.value("w").unwrap().data()[0] - expect).abs() < 1e-15);

        let mut f = one(2.0, false);
        let mut st = OptimizerState::new(&f, 0.01);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![5.0]))]);
        adamw_step(&mut f, &g, &mut st, 0.5).unwrap();
        assert_eq!(f.value("w").unwrap().data()[0].to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut s = one(1.0, true);
        let mut st = OptimizerState::new(&s, 0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![f64::NAN]))]);
        let e = adamw_step(&mut s, &g, &mut st, 0.1).unwrap_err();
        assert!(e.to_string().contains('w'));
    }
}
