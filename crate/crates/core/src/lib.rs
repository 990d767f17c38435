//! Simulation and learning toolkit for an ultrasonic hand-tracking glove.

pub mod kinematics;
pub mod sensorsim;
pub mod geometry;
pub mod nn;
pub mod posenet;
pub mod pipeline;
