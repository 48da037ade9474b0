//! `mixl` command-line front end.

pub mod commands;
pub mod error;
pub mod io;
pub mod replicate;
pub mod specfile;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult, ErrorKind};
