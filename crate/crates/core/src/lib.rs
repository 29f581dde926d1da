pub mod camera;
pub mod conic;
pub mod env;
pub mod nn;
pub mod parallel;
pub mod region;
pub mod scene;
