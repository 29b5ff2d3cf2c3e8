use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub failing: Vec<usize>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

fn eval<E: From<TensorError>>(
    f: &dyn Fn(&mut Graph<f64>, Var) -> std::result::Result<Var, E>,
    x: &Tensor<f64>,
) -> std::result::Result<f64, E> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()).into());
    }
    Ok(v.item())
}

/// Compare `d f / d x` from [`Graph::backward`] with `(f(x+εe) − f(x−εe)) / 2ε`
/// for every coordinate `e`. Relative error is `|a − n| / max(|a|, |n|, 1e-3)`.
/// The closure may use any error type that tensor errors convert into.
pub fn finite_diff_gradcheck<E: From<TensorError>>(
    f: impl Fn(&mut Graph<f64>, Var) -> std::result::Result<Var, E>,
    x: &Tensor<f64>,
    eps: f64,
    rel_tol: f64,
) -> std::result::Result<GradcheckReport, E> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss).map_err(E::from)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        failing: Vec::new(),
        checked: x.len(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if !(rel <= rel_tol) {
            report.failing.push(i);
        }
        report.max_rel_error = report.max_rel_error.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let r = finite_diff_gradcheck(
            |g, x| -> std::result::Result<Var, TensorError> {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed() && r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(&[4], vec![0.5, -0.5, 1e-3, -1e-3]).unwrap();
        let r = finite_diff_gradcheck(
            |g, x| -> std::result::Result<Var, TensorError> {
                let y = g.relu(x);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::from_vec(&[3], vec![0.5, 1.0, -0.7]).unwrap();
        // detach one factor: autodiff sees x, the function is x²
        let r = finite_diff_gradcheck(
            |g, x| -> std::result::Result<Var, TensorError> {
                let d = g.stop_gradient(x);
                let p = g.mul(d, x)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.failing, vec![0, 1, 2]);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }
}
