//! Dataset readers and writers plus seeded synthetic generators.

mod bal;
mod g2o;
mod synth;
mod tokens;

pub use bal::{parse_bal, write_bal, BalCamera, BalProblem};
pub use g2o::{parse_g2o, write_g2o, PoseGraphData};
pub use synth::{synth_ba, synth_pgo, SyntheticBa, SyntheticPgo, SYNTH_FOCAL, SYNTH_RING_RADIUS};

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_bal(path: impl AsRef<Path>) -> Result<BalProblem> {
    parse_bal(open(path.as_ref())?)
}

pub fn load_g2o(path: impl AsRef<Path>) -> Result<PoseGraphData> {
    parse_g2o(open(path.as_ref())?)
}
