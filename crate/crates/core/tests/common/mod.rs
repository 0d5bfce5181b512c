//! Checks shared by the focused test targets and the acceptance run.
#![allow(dead_code)]

pub mod cdp;
pub mod grad;
pub mod macs;
pub mod parse;
pub mod toy;
