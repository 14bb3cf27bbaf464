//! Checks shared by the integration tests and the acceptance suite. Each
//! test target uses a different subset.
#![allow(dead_code)]

pub mod grad;
pub mod oracles;
pub mod replay;
pub mod surgery;
