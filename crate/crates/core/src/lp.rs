//! Thin helpers over `microlp` for the small programs used by the geometry
//! and fitting code.

use microlp::{ComparisonOp, OptimizationDirection, Problem, Solution, Variable};

use crate::error::{Error, Result};
use crate::polytope::Halfspace;

/// Relative slack applied to halfspace offsets in feasibility tests.
pub const FEASIBILITY_TOL: f64 = 1e-8;

pub(crate) enum LpOutcome {
    Optimal { point: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

pub(crate) fn solve(problem: &Problem) -> Result<Solution> {
    match problem.solve() {
        Ok(outcome) => outcome
            .into_solution()
            .map_err(|_| Error::Solver("solve interrupted".into())),
        Err(err) => Err(Error::Solver(err.to_string())),
    }
}

pub(crate) fn free_vars(problem: &mut Problem, count: usize) -> Vec<Variable> {
    (0..count)
        .map(|_| problem.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect()
}

fn relaxed(offset: f64, slack: f64) -> f64 {
    offset + slack * (1.0 + offset.abs())
}

fn add_halfspaces(problem: &mut Problem, vars: &[Variable], halfspaces: &[Halfspace], slack: f64) {
    for h in halfspaces {
        let terms: Vec<(Variable, f64)> = vars
            .iter()
            .zip(&h.normal)
            .filter(|(_, c)| **c != 0.0)
            .map(|(v, c)| (*v, *c))
            .collect();
        if terms.is_empty() {
            continue;
        }
        problem.add_constraint(terms.as_slice(), ComparisonOp::Le, relaxed(h.offset, slack));
    }
}

/// Optimizes `direction · x` over the halfspace system, with offsets relaxed
/// by `slack`.
pub(crate) fn optimize(
    dim: usize,
    halfspaces: &[Halfspace],
    direction: &[f64],
    sense: OptimizationDirection,
    slack: f64,
) -> Result<LpOutcome> {
    // Zero-normal rows reduce to 0 <= offset.
    if halfspaces
        .iter()
        .any(|h| h.normal.iter().all(|c| *c == 0.0) && relaxed(h.offset, slack) < 0.0)
    {
        return Ok(LpOutcome::Infeasible);
    }
    let mut problem = Problem::new(sense);
    let vars: Vec<Variable> = direction
        .iter()
        .map(|c| problem.add_var(*c, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    debug_assert_eq!(vars.len(), dim);
    add_halfspaces(&mut problem, &vars, halfspaces, slack);
    match problem.solve() {
        Ok(outcome) => match outcome.into_solution() {
            Ok(sol) => Ok(LpOutcome::Optimal {
                point: vars.iter().map(|v| sol.var_value(*v)).collect(),
                value: sol.objective(),
            }),
            Err(_) => Err(Error::Solver("solve interrupted".into())),
        },
        Err(microlp::Error::Infeasible) => Ok(LpOutcome::Infeasible),
        Err(microlp::Error::Unbounded) => Ok(LpOutcome::Unbounded),
        Err(err) => Err(Error::Solver(err.to_string())),
    }
}

/// Phase-one feasibility: returns a point satisfying the relaxed system.
pub(crate) fn feasible_point(dim: usize, halfspaces: &[Halfspace]) -> Result<Option<Vec<f64>>> {
    let zero = vec![0.0; dim];
    match optimize(dim, halfspaces, &zero, OptimizationDirection::Minimize, FEASIBILITY_TOL)? {
        LpOutcome::Optimal { point, .. } => Ok(Some(point)),
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Ok(Some(zero)),
    }
}
