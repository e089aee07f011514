//! Energy-based magnetic vector hysteresis and the semi-smooth Newton
//! solution of nonlinear magnetostatic scalar-potential problems.

pub mod fem;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod sim;
pub mod solvers;
pub mod verify;
