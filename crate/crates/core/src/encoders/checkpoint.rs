use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::scalar::Real;
use crate::tensor::{io, ParamSet};

/// Checkpoint metadata written next to the parameter files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: usize,
    pub frozen: bool,
    /// Free-form `key value` records, e.g. validation scores.
    pub meta: BTreeMap<String, String>,
}

fn file_name(name: &str) -> String {
    format!("{name}.ten")
}

/// Writes one `.ten` file per parameter and `manifest.txt` with
/// `param <name> <shape> <checksum>` lines plus step, frozen and meta records.
pub fn save_checkpoint<T: Real>(dir: &Path, params: &ParamSet<T>, info: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = String::new();
    for (name, value) in params.iter() {
        io::write(&dir.join(file_name(name)), value)?;
        let shape: Vec<String> = value.shape().iter().map(usize::to_string).collect();
        manifest += &format!("param {name} {} {}\n", shape.join("x"), value.checksum());
    }
    manifest += &format!("step {}\nfrozen {}\nchecksum {}\n", info.step, info.frozen, params.checksum());
    for (k, v) in &info.meta {
        manifest += &format!("meta {k} {v}\n");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).at(&path)
}

/// Loads values into `params` (whose names and shapes must match) and
/// applies the stored frozen flag.
pub fn load_checkpoint<T: Real>(dir: &Path, params: &mut ParamSet<T>) -> Result<Checkpoint> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).at(&path)?;
    let bad = |reason: String| Error::Format {
        path: path.clone(),
        reason,
    };
    let mut info = Checkpoint::default();
    let mut seen = 0;
    for line in text.lines() {
        let f: Vec<&str> = line.splitn(3, ' ').collect();
        match f.as_slice() {
            ["param", name, rest] => {
                let i = params
                    .index_of(name)
                    .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
                let checksum = rest.split(' ').nth(1).ok_or_else(|| bad(format!("no checksum for {name}")))?;
                let value = io::read::<T>(&dir.join(file_name(name)))?;
                if value.checksum() != checksum {
                    return Err(bad(format!("checksum mismatch for {name}")));
                }
                params.set(i, value)?;
                seen += 1;
            }
            ["step", v] => info.step = v.parse().map_err(|_| bad(format!("bad step {v}")))?,
            ["frozen", v] => info.frozen = v.parse().map_err(|_| bad(format!("bad frozen flag {v}")))?,
            ["checksum", _] => {}
            ["meta", k, v] => {
                info.meta.insert(k.to_string(), v.to_string());
            }
            [""] => {}
            _ => return Err(bad(format!("unrecognized line {line:?}"))),
        }
    }
    if seen != params.len() {
        return Err(bad(format!("expected {} parameters, found {seen}", params.len())));
    }
    if info.frozen {
        params.freeze();
    }
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, TeacherEncoder};
    use crate::geometry::BevGrid;

    #[test]
    fn round_trip_restores_parameters_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TeacherEncoder::<f64>::new(&EncoderConfig::default(), BevGrid::standard(), 1).unwrap();
        a.freeze();
        let mut info = Checkpoint {
            step: 42,
            frozen: true,
            ..Default::default()
        };
        info.meta.insert("val_map".into(), "0.5".into());
        save_checkpoint(dir.path(), &a.params, &info).unwrap();
        let mut b = TeacherEncoder::<f64>::new(&EncoderConfig::default(), BevGrid::standard(), 2).unwrap();
        assert_ne!(a.params.checksum(), b.params.checksum());
        let got = load_checkpoint(dir.path(), &mut b.params).unwrap();
        assert_eq!(got, info);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn corrupted_value_detected() {
        let dir = tempfile::tempdir().unwrap();
        let a = TeacherEncoder::<f64>::new(&EncoderConfig::default(), BevGrid::standard(), 1).unwrap();
        save_checkpoint(dir.path(), &a.params, &Checkpoint::default()).unwrap();
        let name = a.params.name(0).to_string();
        let mut t = io::read::<f64>(&dir.path().join(file_name(&name))).unwrap();
        t.data_mut()[0] += 1.0;
        io::write(&dir.path().join(file_name(&name)), &t).unwrap();
        let mut b = a.clone();
        assert!(load_checkpoint(dir.path(), &mut b.params).is_err());
    }
}
