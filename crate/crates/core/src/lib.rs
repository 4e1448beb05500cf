pub mod camera;
pub mod cloud;
pub mod config;
pub mod datagen;
pub mod error;
pub mod inpaint;
pub mod io;
pub mod label;
pub mod mdp;
pub mod planner;
pub mod metrics;
pub mod render;
pub mod spatial;
pub mod volume;
pub mod voxel;

pub use error::{Error, Result};
