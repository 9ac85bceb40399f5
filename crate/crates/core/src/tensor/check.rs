//! Central finite-difference gradient checking.
//!
//! The oracle evaluates the recorded tape in 64-bit via `replay_f64`, so the
//! difference quotient is free of f32 rounding; only the autodiff side runs
//! in f32.

use super::{Graph, NodeId, Result, Tensor, TensorError};

// Step size for the central difference. The replay is f64, so rounding in
// the quotient is ~1e-12 at this h while truncation is ~1e-10; both stay
// far below the per-coordinate relative tolerance even where a gradient
// coordinate passes near zero.
const FD_H: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Check autodiff against central differences for a single input point.
pub fn finite_diff_check<F>(build: F, point: &Tensor, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    finite_diff_check_multi(build, std::slice::from_ref(point), tol)
}

/// Multi-input variant: the builder receives one node id per point, all
/// registered with `requires_grad = true`.
pub fn finite_diff_check_multi<F>(build: F, points: &[Tensor], tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let build_graph = || {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|p| g.input(p.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        (g, ids, loss)
    };

    let (graph, ids, loss) = build_graph();
    let numel = graph.value(loss).numel();
    if numel != 1 {
        return Err(TensorError::NonScalarLoss(numel));
    }

    // Determinism guard: a second build must reproduce every node bitwise.
    let (graph2, _, loss2) = build_graph();
    if graph.len() != graph2.len() || loss != loss2 {
        return Err(TensorError::Nondeterministic);
    }
    for id in 0..graph.len() {
        if graph.value(id).data() != graph2.value(id).data() {
            return Err(TensorError::Nondeterministic);
        }
    }

    let grads = graph.backward(loss)?;
    let mut max_rel_err = 0.0f64;
    for (slot, &input_id) in ids.iter().enumerate() {
        let base: Vec<f64> = points[slot].data().iter().map(|&x| x as f64).collect();
        let g_ad = grads.dense_f64(input_id);
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += FD_H;
            let mut minus = base.clone();
            minus[j] -= FD_H;
            let lp = graph.replay_f64(&[(input_id, plus)], loss)[0];
            let lm = graph.replay_f64(&[(input_id, minus)], loss)[0];
            let g_fd = (lp - lm) / (2.0 * FD_H);
            let rel = (g_ad[j] - g_fd).abs() / (g_fd.abs() + 1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(FdReport { max_rel_err, passed: max_rel_err < tol })
}
