pub mod analysis;
pub mod evalmetrics;
pub mod features;
pub mod regmodel;
pub mod sceneworld;
pub mod seed;
