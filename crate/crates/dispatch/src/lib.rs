//! File formats, exports and the `dispatch` command line for
//! [`tcl_dispatch_core`].

pub mod cli;
pub mod error;
pub mod exec;
pub mod export;
pub mod gridfile;
pub mod manifest;
pub mod matpower;
pub mod scenario_file;

pub use error::{ExportError, IngestError};
pub use exec::{RayonExecutor, WallClock};
pub use gridfile::{parse_grid, write_grid};
pub use matpower::parse_matpower;
pub use scenario_file::load_scenario;
