use crate::error::Result;
use crate::graph::{Graph, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences of step `step`, coordinate by coordinate. The relative error
/// is `|an - fd| / max(|an|, |fd|, floor)`.
pub fn gradient_check<F>(f: F, point: &[Tensor], step: f64, floor: f64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = point.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&g, &vars)?;
        let grads = g.backward(root)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = pt.iter().map(|p| g.constant(p.clone())).collect();
        f(&g, &vars)?.item()
    };
    let mut best = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<Tensor> = point.iter().map(|p| p.as_standard_layout().into_owned()).collect();
    for t in 0..probe.len() {
        let an = analytic[t].as_standard_layout().into_owned();
        for i in 0..probe[t].len() {
            let x0 = probe[t].as_slice().expect("standard")[i];
            probe[t].as_slice_mut().expect("standard")[i] = x0 + step;
            let plus = eval(&probe)?;
            probe[t].as_slice_mut().expect("standard")[i] = x0 - step;
            let minus = eval(&probe)?;
            probe[t].as_slice_mut().expect("standard")[i] = x0;
            let fd = (plus - minus) / (2.0 * step);
            let a = an.as_slice().expect("standard")[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > best.max_rel_error || (t, i) == (0, 0) {
                best = GradCheck { max_rel_error: rel, worst: (t, i), analytic: a, numeric: fd };
            }
        }
    }
    Ok(best)
}
