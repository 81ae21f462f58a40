use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst disagreement between tape gradients and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks a scalar function of one tensor. Returns the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-8)` over all coordinates.
///
/// Functions containing the floor-and-scale slot path are not differentiable
/// there: the tape reports the straight-through gradient, so a mismatch on
/// those coordinates is expected rather than a defect.
pub fn finite_diff_check(
    f: impl Fn(&Graph<f64>, Var) -> Result<Var>,
    point: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let report = check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`finite_diff_check`].
pub fn check_gradients(
    f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    points: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheck> {
    let graph = Graph::new().with_finite_check(true);
    let vars: Vec<Var> = points.iter().map(|p| graph.leaf(p.clone())).collect();
    let out = f(&graph, &vars)?;
    if graph.value(out).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    let grads = graph.backward(out)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let o = f(&g, &vs)?;
        Ok(g.value(o).item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("leaf gradient").clone();
        for i in 0..points[input].len() {
            let x0 = points[input].data()[i];
            probe[input].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[input].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[input].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = rel_error(a, numeric);
            if err >= report.max_rel_error {
                report = GradCheck { max_rel_error: err, worst: (input, i), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let point = Tensor::scalar(3.0);
        let g = Graph::new();
        let x = g.leaf(point.clone());
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
        let err = finite_diff_check(|g, x| Ok(g.square(x)), &point, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
