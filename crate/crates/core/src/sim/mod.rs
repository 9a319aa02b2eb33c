//! Closed-loop synthetic driving world.

pub mod geometry;
pub mod scenario;
pub mod world;
pub mod episode;
