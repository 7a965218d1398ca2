pub mod data;
pub mod eval;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod scale;
pub mod train;
pub mod transforms;
