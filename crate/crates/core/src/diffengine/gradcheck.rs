use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e−12)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Relative step used when `rel_step` is `None`.
pub const DEFAULT_REL_STEP: f64 = 1e-6;

/// Checks `f`'s tape gradient with respect to every parameter in `point`.
///
/// `f` must build its loss from parameters bound with [`Tape::param`].
/// Each coordinate `x` is probed at `x ± h` with `h = rel_step · (1 + |x|)`.
pub fn grad_check<F>(point: &ParamStore, f: F, rel_step: Option<f64>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let rel = rel_step.unwrap_or(DEFAULT_REL_STEP);
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, store)?.value().item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check probe"))
        }
    };

    let tape = Tape::new();
    let loss = f(&tape, point)?;
    let grads = tape.backward(loss)?;

    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in names {
        let base = point.get(&name)?.clone();
        let analytic = grads.param(&name).cloned().unwrap_or_else(|| super::Tensor::zeros(base.shape()));
        for i in 0..base.len() {
            let x = base.data()[i];
            let h = rel * (1.0 + x.abs());
            let mut shifted = base.clone();
            shifted.data_mut()[i] = x + h;
            probe.set(&name, shifted.clone())?;
            let up = eval(&probe)?;
            shifted.data_mut()[i] = x - h;
            probe.set(&name, shifted)?;
            let down = eval(&probe)?;
            probe.set(&name, base.clone())?;

            let fd = (up - down) / (2.0 * h);
            let ad = analytic.data()[i];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tensor;

    #[test]
    fn quadratic_loss_matches() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.3, -1.7, 2.2])).unwrap();
        let r = grad_check(
            &p,
            |tape, s| {
                let x = tape.param(s, "x")?;
                x.mul(x)?.sum()?.scale(0.5)
            },
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = grad_check(
            &p,
            |tape, s| {
                let _x = tape.param(s, "x")?;
                tape.constant(Tensor::scalar(4.0))
            },
            None,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(&p, |tape, s| tape.param(s, "x")?.log(), None);
        assert!(r.is_err());
    }
}
