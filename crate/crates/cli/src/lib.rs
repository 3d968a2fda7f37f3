//! Batch front end for the synchronisation-oriented adaptive control
//! library: experiment configuration, parallel grid execution, CSV/SVG
//! reports, and the acceptance check suite.

pub mod checks;
pub mod config;
pub mod csvio;
pub mod grid;
pub mod plot;
