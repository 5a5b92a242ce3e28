//! Single-workstation emulation of distributed receding-horizon control for
//! multi-robot fleets.
//!
//! Every agent runs the same program on its own thread: it predicts its own
//! planar double-integrator motion, solves its share of an aggregative game
//! with barrier-function collision constraints, and talks only to its graph
//! neighbours through an emulated network.

pub mod comms;
pub mod game;
pub mod model;
pub mod runtime;
pub mod safety;
pub mod scenario;
pub mod solver;
