//! Central finite-difference verification of tape gradients.
//!
//! Every differentiable loss in the crate is required to agree with central
//! differences to 1e-4 relative error per coordinate. The checker only ever
//! evaluates loss *values*, so it stays independent of the reverse pass it
//! verifies.

use crate::matrix::RealMatrix;
use crate::tape::{Tape, Var};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Total parameter coordinates checked.
    pub coords: usize,
    pub max_rel_err: f64,
    /// (parameter index, row, col) of the worst coordinate.
    pub worst: (usize, usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error contract: |a - f| / max(1e-6, |a| + |f|).
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-6)
}

/// Compare the tape gradient of `build`'s loss against central differences
/// with the given step, over every coordinate of every parameter.
///
/// `build` receives a fresh tape plus one leaf per parameter and must return
/// a scalar loss node; it is re-invoked for every perturbed evaluation.
pub fn check_gradients(
    params: &[RealMatrix],
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var,
    step: f64,
) -> GradCheckReport {
    let eval = |ps: &[RealMatrix], build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).as_scalar()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<RealMatrix> = vars.iter().map(|&v| grads.get(&tape, v)).collect();

    let mut report = GradCheckReport { coords: 0, max_rel_err: 0.0, worst: (0, 0, 0) };
    let mut work: Vec<RealMatrix> = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        for i in 0..param.rows() {
            for j in 0..param.cols() {
                let orig = param.get(i, j);
                work[p].set(i, j, orig + step);
                let up = eval(&work, build);
                work[p].set(i, j, orig - step);
                let down = eval(&work, build);
                work[p].set(i, j, orig);
                let fd = (up - down) / (2.0 * step);
                let rel = relative_error(analytic[p].get(i, j), fd);
                report.coords += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (p, i, j);
                }
            }
        }
    }
    report
}
