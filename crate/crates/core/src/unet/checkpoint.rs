//! Checkpoint directories: `arch.cfg` (the spec), `params.rvt` (one tensor
//! record per parameter, registry order) and `manifest.tsv` (id, name and
//! shape per line, same order).

use std::fmt::Write as _;
use std::path::Path;

use super::{ArchitectureSpec, Network};
use crate::engine::io;
use crate::error::{Error, Result};

pub const ARCH_FILE: &str = "arch.cfg";
pub const PARAMS_FILE: &str = "params.rvt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn save_checkpoint(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    net.spec().save(dir.join(ARCH_FILE))?;
    let values: Vec<_> = net.params().iter().map(|p| &p.value).collect();
    io::save_all(dir.join(PARAMS_FILE), &values)?;
    let mut manifest = String::new();
    for p in net.params().iter() {
        let _ = writeln!(manifest, "{}\t{}\t{}", p.id.0, p.name, p.shape());
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let spec = ArchitectureSpec::load(dir.join(ARCH_FILE))?;
    let mut net = Network::build(&spec, 0)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&manifest_path)?;
    let records = io::load_all(dir.join(PARAMS_FILE))?;
    let bad = |reason: String| Error::Format {
        path: manifest_path.clone(),
        reason,
    };
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != net.params().len() || records.len() != lines.len() {
        return Err(bad(format!(
            "{} manifest lines and {} records for {} parameters",
            lines.len(),
            records.len(),
            net.params().len()
        )));
    }
    for ((line, value), param) in lines.iter().zip(records).zip(net.params_mut().iter_mut()) {
        let mut cols = line.split('\t');
        let (id, name) = (cols.next(), cols.next());
        if id != Some(param.id.0.to_string().as_str()) || name != Some(param.name.as_str()) {
            return Err(bad(format!(
                "expected `{}` at id {}, found `{line}`",
                param.name, param.id.0
            )));
        }
        if value.shape() != param.shape() {
            return Err(bad(format!(
                "{}: shape {} vs {}",
                param.name,
                value.shape(),
                param.shape()
            )));
        }
        param.value = value;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Shape, Tensor};

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::build(&ArchitectureSpec::tiny(), 17).unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let x = Tensor::full(Shape::new(1, 4, 4, 4, 4), 0.3);
        assert_eq!(
            net.forward_full_volume(&x).unwrap(),
            back.forward_full_volume(&x).unwrap()
        );
    }

    #[test]
    fn mismatched_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::build(&ArchitectureSpec::tiny(), 1).unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&m)
            .unwrap()
            .replacen("stem", "trunk", 1);
        std::fs::write(&m, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
