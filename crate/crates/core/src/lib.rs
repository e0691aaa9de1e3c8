//! Multi-vehicle ground robot simulation.
//!
//! Two physics layers cooperate every tick: planar rigid bodies with convex
//! polygon contacts, and a per-wheel friction model that turns motor torques
//! and normal loads into the forces applied to each chassis.

pub mod geometry;
pub mod physics2d;
pub mod sensors;
pub mod terrain;
pub mod vehicle;
pub mod world;
pub mod worldfile;
