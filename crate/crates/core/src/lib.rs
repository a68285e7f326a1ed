//! Behavior trees whose condition nodes encapsulate control barrier
//! functions, a QP safety filter for control-affine plants, shareable
//! barrier specifications and a kinematic cell simulator to exercise them.

pub mod bt;
pub mod cbf;
pub mod safety;
pub mod sim;
