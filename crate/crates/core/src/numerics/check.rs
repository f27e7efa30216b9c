use super::{Bindings, Element, Graph, LeafId, NumericsError};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(|analytic|, floor)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Leaf and flat coordinate where the maximum was attained.
    pub worst: Option<(LeafId, usize)>,
    pub coordinates: usize,
}

/// Checks every coordinate of every leaf in `wrt` and returns the worst
/// relative error. Mismatches are reported, never raised.
pub fn finite_difference_check(
    graph: &Graph<f64>,
    bindings: &Bindings<f64>,
    wrt: &[LeafId],
    eps: f64,
) -> Result<f64, NumericsError> {
    Ok(finite_difference_check_leaves(graph, bindings, wrt, eps, 1e-12, None)?.max_rel_error)
}

/// Like [`finite_difference_check`] with a configurable denominator floor:
/// each coordinate scores `|analytic - numeric| / max(|analytic|, floor)`.
///
/// A floor near the central-difference noise level (`~1e-16 / eps` times
/// the root magnitude) keeps near-zero gradients from reporting pure
/// cancellation noise as relative error. `max_coords_per_leaf` optionally
/// restricts each leaf to evenly strided coordinates.
pub fn finite_difference_check_leaves(
    graph: &Graph<f64>,
    bindings: &Bindings<f64>,
    wrt: &[LeafId],
    eps: f64,
    floor: f64,
    max_coords_per_leaf: Option<usize>,
) -> Result<FdReport, NumericsError> {
    let analytic = graph.gradient(bindings, wrt)?;
    let mut probe = bindings.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (leaf, grad) in wrt.iter().zip(&analytic) {
        let n = grad.numel();
        let stride = max_coords_per_leaf.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride) {
            let numeric = central_difference(graph, &mut probe, *leaf, i, eps)?;
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(floor);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((*leaf, i));
            }
        }
    }
    Ok(report)
}

fn central_difference<T: Element>(
    graph: &Graph<T>,
    probe: &mut Bindings<T>,
    leaf: LeafId,
    index: usize,
    eps: f64,
) -> Result<f64, NumericsError> {
    let original = probe.get(leaf).expect("bound").data()[index];
    let h = T::from_f64(eps);
    let mut eval_at = |v: T| -> Result<f64, NumericsError> {
        probe.get_mut(leaf).expect("bound").data_mut()[index] = v;
        let out = graph.evaluate(probe)?;
        Ok(out.item().map(Element::to_f64).unwrap_or(f64::NAN))
    };
    let plus = eval_at(original + h)?;
    let minus = eval_at(original - h)?;
    probe.get_mut(leaf).expect("bound").data_mut()[index] = original;
    Ok((plus - minus) / (2.0 * eps))
}
