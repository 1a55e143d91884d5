pub mod bench;
pub mod model;
pub mod problems;
pub mod scaling;
pub mod sharpness;
pub mod solver;
pub mod theory;
pub mod verify;
