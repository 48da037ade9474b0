//! Panel mixed logit estimation by simulated maximum likelihood, with
//! model averaging across mixing distributions.

pub mod averaging;
pub mod data;
pub mod draws;
pub mod estimation;
pub mod mixing;
pub mod models;
pub mod postest;
pub mod simgen;
