pub mod cost;
pub mod describe;
pub mod report;
pub mod search;
pub mod simulate;
pub mod synth;
pub mod train;
