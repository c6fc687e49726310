//! Desk-scale social navigation simulator.
//!
//! People are localized from fused point clouds and segmentation masks,
//! tracked across frames, encoded by an LSTM autoencoder and forecast by a
//! graph attention network. The robot plans on an occupancy grid, accepts
//! gesture directives (wait, go left, go right, continue) and explains each
//! rerouting decision with a fixed set of sentences.

pub mod autoencoder;
pub mod explain;
pub mod forecast;
pub mod gat;
pub mod geom;
pub mod gesture;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod lstm;
pub mod metrics;
pub mod nav;
pub mod perception;
pub mod planner;
pub mod sim;
pub mod synth;
