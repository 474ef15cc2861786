pub mod dataset;
pub mod distort;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod map;
pub mod mapping;
pub mod optim;
pub mod place;
pub mod system;
pub mod tracking;
