//! Self-blended video synthesis, vulnerability targets and a divided
//! space-time attention detector, on a small autodiff engine.

pub mod geometry;
pub mod harness;
pub mod media_io;
pub mod model;
pub mod numerics;
pub mod synthesis;
pub mod vulnerability;
