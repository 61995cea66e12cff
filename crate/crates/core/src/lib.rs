#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod composite;
pub mod config;
pub mod data;
pub mod losses;
pub mod netcore;
pub mod optim;
pub mod pacbayes;
pub mod spectral;
pub mod verify;
