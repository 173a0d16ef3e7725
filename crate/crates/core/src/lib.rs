pub mod camera;
pub mod error;
pub mod img;
pub mod math;
pub mod render;
pub mod scene;
