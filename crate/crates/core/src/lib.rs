//! Lane-level driving stack over double-edge lanes: perception network,
//! attribute fusion, target-guided planning, rule-based interpretation, MPC
//! control and a closed-loop synthetic world.

pub mod checks;
pub mod cli;
pub mod controller;
pub mod fusion;
pub mod interpreter;
pub mod loss;
pub mod matching;
pub mod nn;
pub mod oracle;
pub mod perception;
pub mod pipeline;
pub mod planner;
pub mod scene;
pub mod sim;
pub mod tensor;
