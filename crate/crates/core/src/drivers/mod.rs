//! Driver realizations and their rough-path lifts.

mod fbm;
mod grid;
mod io;

pub use fbm::{default_gamma, fbm_grid, fgn_autocovariance, sample_fbm, FbmSpec, RandomScenario};
pub use grid::{uniform_times, DriverKind, DriverMeta, Orientation, RoughPathGrid};
pub use io::{read_grid_binary, read_grid_csv, write_grid_binary, write_grid_csv, GRID_MAGIC, GRID_VERSION};
