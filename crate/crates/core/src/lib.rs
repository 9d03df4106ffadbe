pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod controller;
pub mod evaluation;
pub mod memory;
pub mod tasks;
pub mod training;
