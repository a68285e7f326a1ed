//! Barrier specs as exchangeable safety artifacts: documents, condition
//! leaves, safety branches and filtered actions.

mod branch;
mod condition;
mod filter;
mod spec;

pub use branch::{attach, detach, make_safety_branch, make_safety_branch_named, BranchError, ROLE_PARAM};
pub use condition::{
    register_barrier_conditions, ConditionFault, ConditionInstance, ConditionLeaf, InstantiationError, BARRIER_LEAF,
};
pub use filter::{
    FilterError, FilterFault, FilterOutcome, FilteredAction, InputBarrier, RateBinding, SafetyFilter, StateBarrier,
};
pub use spec::{
    builtin_spec, builtin_spec_documents, builtin_specs, validate_spec, BarrierLibrary, BarrierSpec, ChannelBinding,
    LibraryError, ParamDecl, SpecFormatError, SpecViolation,
};
