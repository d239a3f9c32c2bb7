use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst relative error seen for one parameter across all seeds.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// `(seed, flat index, analytic, numeric, relative error)` of every entry over tolerance.
    pub failures: Vec<(u64, usize, f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub h: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let worst = self
            .params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|p| p.name.as_str())
            .unwrap_or("-");
        format!(
            "{} params, max rel err {:.3e} ({worst}), tol {:.0e}: {}",
            self.params.len(),
            self.max_rel_err,
            self.tol,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_loss<F>(builder: &F, store: &ParamStore, seed: u64) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore, u64) -> Result<Var>,
{
    let tape = Tape::no_grad();
    let root = builder(&tape, store, seed)?;
    let v = tape.with_value(root, |t| t.item())?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v} at seed {seed}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of a scalar loss with central finite
/// differences over every entry of every trainable parameter.
///
/// `params(seed)` produces the parameter set and `builder(tape, store, seed)`
/// records the loss; both must be deterministic in `seed`.
pub fn grad_check<P, F>(params: P, builder: F, seeds: &[u64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    P: Fn(u64) -> Result<ParamStore>,
    F: Fn(&Tape, &ParamStore, u64) -> Result<Var>,
{
    let mut checks: Vec<ParamCheck> = Vec::new();
    for &seed in seeds {
        let mut store = params(seed)?;
        let tape = Tape::new();
        let root = builder(&tape, &store, seed)?;
        let loss = tape.with_value(root, |t| t.item())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at seed {seed}")));
        }
        let analytic = tape.backward(root)?.for_store(&store);
        drop(tape);
        for (name, grad) in &analytic {
            let idx = match checks.iter().position(|c| &c.name == name) {
                Some(i) => i,
                None => {
                    checks.push(ParamCheck {
                        name: name.clone(),
                        entries: 0,
                        max_rel_err: 0.0,
                        failures: Vec::new(),
                    });
                    checks.len() - 1
                }
            };
            for i in 0..grad.numel() {
                let orig = store.value(name)?.data()[i];
                store.get_mut(name)?.value.data_mut()[i] = orig + h;
                let plus = eval_loss(&builder, &store, seed)?;
                store.get_mut(name)?.value.data_mut()[i] = orig - h;
                let minus = eval_loss(&builder, &store, seed)?;
                store.get_mut(name)?.value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = grad.data()[i];
                let rel = relative_error(a, numeric);
                let c = &mut checks[idx];
                c.entries += 1;
                c.max_rel_err = c.max_rel_err.max(rel);
                if rel > tol {
                    c.failures.push((seed, i, a, numeric, rel));
                }
            }
        }
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: checks.iter().all(|c| c.failures.is_empty()),
        params: checks,
        tol,
        h,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_builder_passes() {
        let params = |_| {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::from_vec(vec![1.0, 2.0]), true)?;
            Ok(s)
        };
        let report = grad_check(
            params,
            |tape, _, _| Ok(tape.constant(Tensor::scalar(3.0))),
            &[0],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let params = |_| Ok(ParamStore::new());
        let err = grad_check(
            params,
            |tape, _, _| Ok(tape.constant(Tensor::scalar(f64::NAN))),
            &[0],
            1e-6,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
