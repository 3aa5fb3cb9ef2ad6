pub mod ablate;
pub mod bench;
pub mod eval;
pub mod register;
pub mod stability;
pub mod synth;
pub mod train;
