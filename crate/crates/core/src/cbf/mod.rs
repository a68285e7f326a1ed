//! Barrier-function core: expressions, gradients, constraints and the QP filter.

mod ast;
mod constraint;
mod eval;
mod parse;
mod qp;

pub use ast::{print_barrier, BinOp, Expr, Func};
pub use constraint::{
    cbf_constraint, compose_min, Barrier, BarrierError, ConstraintError, IntegratorPlant, LinearConstraint, PlantModel,
    RELATIVE_DEGREE_TOL,
};
pub use eval::{eval_barrier, eval_with_gradient, grad_barrier, EvalError, Params};
pub use parse::{parse_barrier, ParseError, ParseErrorKind};
pub use qp::{
    kkt_residual, qp_filter, BoxBounds, ConstraintRef, FilterResult, QpError, FEASIBILITY_TOL, MAX_CONTROL_DIM,
};
