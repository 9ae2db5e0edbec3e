pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod pool;
pub mod shape;
