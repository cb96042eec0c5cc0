pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod grad_align;
pub mod harness;
pub mod history;
pub mod lora;
pub mod model;
pub mod optim;
pub mod regularizers;
pub mod report;
pub mod selftest;
pub mod train;
