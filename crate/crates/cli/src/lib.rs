//! Command-line front end for `patchwise`: config parsing, PPM/PGM I/O,
//! run reports and the `generate` command.

pub mod config;
pub mod generate;
pub mod pnm;
pub mod report;

pub use config::{parse_config, CodecChoice, ConfigError, ConfigErrors, DenoiserChoice, RunConfig};
pub use generate::{cmd_generate, load_config, stage_image_path, CliError, Generated, Overrides};
pub use pnm::{read_image, write_image, PnmError};
pub use report::{build_report, RunReport};
