//! File access and the mapping from failures to exit codes.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rcm_core::chansim::{read_dataset, ChannelGrid};
use rcm_core::nn::{read_checkpoint, Checkpoint};
use rcm_core::tokenizer::{FeatureMap, Vocabulary};
use rcm_core::Error;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or missing inputs.
    Usage(String),
    Core(Error),
    /// A check ran to completion and did not pass.
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 4,
            Failure::Core(e) => match e {
                Error::InvalidConfig(_) => 2,
                Error::NonFinite(_)
                | Error::NonFiniteActivation { .. }
                | Error::Divergence { .. }
                | Error::AllPerplexityInfinite => 4,
                _ => 3,
            },
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn open(path: &Path) -> CmdResult<BufReader<File>> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("input file {} does not exist", path.display())));
    }
    Ok(BufReader::new(File::open(path)?))
}

pub fn read_grid(path: &Path) -> CmdResult<ChannelGrid> {
    Ok(read_dataset(open(path)?)?)
}

pub fn read_grids(paths: &[impl AsRef<Path>]) -> CmdResult<Vec<ChannelGrid>> {
    paths.iter().map(|p| read_grid(p.as_ref())).collect()
}

pub fn read_vocab(path: &Path) -> CmdResult<Vocabulary> {
    Ok(Vocabulary::read(open(path)?)?)
}

pub fn read_features(path: &Path) -> CmdResult<FeatureMap> {
    Ok(FeatureMap::read(open(path)?)?)
}

pub fn read_model(path: &Path) -> CmdResult<Checkpoint> {
    Ok(read_checkpoint(open(path)?)?)
}

/// Creates `dir/name` and hands a buffered writer to `body`.
pub fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> CmdResult) -> CmdResult {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `key<TAB>value` report.
pub fn write_report(dir: &Path, name: &str, rows: &[(&str, String)]) -> CmdResult {
    write_file(dir, name, |w| {
        for (k, v) in rows {
            writeln!(w, "{k}\t{v}")?;
        }
        Ok(())
    })
}
