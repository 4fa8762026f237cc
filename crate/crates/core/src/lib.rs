pub mod actuators;
pub mod data;
pub mod dynamics;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod ident;
pub mod lie;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod systems;
