//! Centralized multi-robot 3D scene graph fusion.
//!
//! Robots stream their full local scene graphs and oracle loop closures to
//! the fusion station. The frontend keeps the raw union; the backend
//! estimates inter-robot frames by robust pose averaging, optimizes the
//! joint graph as an embedded deformation graph under a truncated-least-
//! squares cost, and reconciles duplicate nodes with an all-or-nothing
//! undo rule.

pub mod align;
pub mod backend;
pub mod deform;
pub mod frontend;
pub mod gnc;
pub mod graph;
pub mod metrics;
pub mod reconcile;
pub mod scenario;
pub mod sim;
pub mod se3;
pub mod wire;
