use std::collections::BTreeMap;

use super::{AdError, Bindings, Graph, Tensor};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per trainable input.
    pub per_input: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub compared: usize,
    /// Coordinates skipped because a hinge sits on (or crosses) its kink
    /// within one step.
    pub excluded: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominators below this are treated as absolute error; both gradients are
/// then numerically zero.
const ZERO_FLOOR: f64 = 1e-10;

/// `|a - n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both are (numerically) zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if denom < ZERO_FLOOR {
        diff
    } else {
        diff / denom
    }
}

/// Perturbs every trainable input coordinate by `±step` and compares
/// `(f(x+h) - f(x-h)) / 2h` against the analytic gradient.
pub fn finite_difference_check(
    graph: &mut Graph,
    inputs: &Bindings,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AdError> {
    if !(step > 0.0) {
        return Err(AdError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let base = graph.forward(inputs)?;
    if base.len() != 1 {
        return Err(AdError::NonScalarOutput(base.shape().to_vec()));
    }
    let base_sig = graph.hinge_signature();
    let analytic = graph.backward(&Tensor::full(base.shape(), 1.0))?;

    let mut probe = inputs.clone();
    let mut per_input = BTreeMap::new();
    let mut compared = 0;
    let mut excluded = 0;
    let mut max_rel_error: f64 = 0.0;

    for (name, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for k in 0..grad.len() {
            let original = probe[name].values()[k];

            probe.get_mut(name).expect("bound").values_mut()[k] = original + step;
            let plus = graph.forward(&probe)?.values()[0];
            let sig_plus = graph.hinge_signature();

            probe.get_mut(name).expect("bound").values_mut()[k] = original - step;
            let minus = graph.forward(&probe)?.values()[0];
            let sig_minus = graph.hinge_signature();

            probe.get_mut(name).expect("bound").values_mut()[k] = original;

            let at_kink = sig_plus != base_sig || sig_minus != base_sig;
            if at_kink {
                excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.values()[k], numeric);
            worst = worst.max(err);
            compared += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_input.insert(name.clone(), worst);
    }
    // Leave the graph holding the unperturbed evaluation.
    graph.forward(inputs)?;

    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        compared,
        excluded,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Axis;

    fn bind(name: &str, t: Tensor) -> Bindings {
        [(name.to_string(), t)].into_iter().collect()
    }

    #[test]
    fn quadratic_passes_tightly() {
        // f(x) = sum((A x)^2) + 3 sum(x)
        let mut g = Graph::new();
        let x = g.input("x", true);
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 3.0]).unwrap());
        let ax = g.matmul(a, x);
        let sq = g.square(ax);
        let s = g.sum(sq, Axis::All);
        let lin = g.sum(x, Axis::All);
        let lin3 = g.scale(lin, 3.0);
        g.add(s, lin3);
        let report =
            finite_difference_check(&mut g, &bind("x", Tensor::matrix(2, 1, vec![0.3, -1.2]).unwrap()), 1e-5, 1e-6)
                .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.compared, 2);
    }

    #[test]
    fn constant_graph_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input("x", true);
        let zero = g.scale(x, 0.0);
        let s = g.sum(zero, Axis::All);
        g.offset(s, 7.0);
        let report =
            finite_difference_check(&mut g, &bind("x", Tensor::vector(vec![1.0, 2.0]).unwrap()), 1e-5, 1e-6).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn hinge_kink_is_excluded() {
        let mut g = Graph::new();
        let x = g.input("x", true);
        let r = g.max_const(x, 0.0);
        g.sum(r, Axis::All);
        let report =
            finite_difference_check(&mut g, &bind("x", Tensor::vector(vec![0.0, 1.0]).unwrap()), 1e-5, 1e-6).unwrap();
        // Only the coordinate sitting on the kink is skipped.
        assert_eq!(report.excluded, 1);
        assert_eq!(report.compared, 1);
        assert!(report.passed);

        let mut g = Graph::new();
        let x = g.input("x", true);
        let r = g.relu(x);
        g.sum(r, Axis::All);
        let report = finite_difference_check(&mut g, &bind("x", Tensor::vector(vec![-2.0, 1.0]).unwrap()), 1e-5, 1e-6)
            .unwrap();
        assert_eq!(report.excluded, 0);
        assert!(report.passed);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", true);
        g.square(x);
        let err = finite_difference_check(&mut g, &bind("x", Tensor::vector(vec![1.0, 2.0]).unwrap()), 1e-5, 1e-6)
            .unwrap_err();
        assert!(matches!(err, AdError::NonScalarOutput(_)));
    }
}
