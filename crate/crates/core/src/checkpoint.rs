//! Parameter checkpoints.
//!
//! A checkpoint is a pair of files: `<stem>.bin` holds every tensor as
//! little-endian `f64` values back to back, and `<stem>.manifest` lists one
//! tensor per line as `name dim0 [dim1 ..]` in the same order. Reloading into
//! a parameter set of the same layout is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CalibError, Result};

pub type TensorVisitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;
pub type TensorVisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

/// Parameter sets expose their tensors in a fixed order.
pub trait NamedTensors {
    fn visit(&self, f: &mut TensorVisitor<'_>);
    fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_>);

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }
}

/// Prefixes every tensor name of `inner` with `prefix.`.
pub fn visit_prefixed<T: NamedTensors + ?Sized>(inner: &T, prefix: &str, f: &mut TensorVisitor<'_>) {
    inner.visit(&mut |name, shape, data| f(&format!("{prefix}.{name}"), shape, data));
}

pub fn visit_prefixed_mut<T: NamedTensors + ?Sized>(inner: &mut T, prefix: &str, f: &mut TensorVisitorMut<'_>) {
    inner.visit_mut(&mut |name, shape, data| f(&format!("{prefix}.{name}"), shape, data));
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

pub fn encode<T: NamedTensors + ?Sized>(params: &T) -> (Vec<u8>, String) {
    let mut bin = Vec::with_capacity(params.num_values() * 8);
    let mut manifest = String::new();
    params.visit(&mut |name, shape, data| {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(manifest, "{name} {}", dims.join(" "));
        for v in data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    });
    (bin, manifest)
}

pub fn save<T: NamedTensors + ?Sized>(params: &T, stem: &Path) -> Result<()> {
    let (bin_path, man_path) = paths(stem);
    let (bin, manifest) = encode(params);
    fs::write(&bin_path, bin).map_err(|e| CalibError::io(&bin_path, e))?;
    fs::write(&man_path, manifest).map_err(|e| CalibError::io(&man_path, e))?;
    Ok(())
}

/// Overwrites the tensors of `params`, which must have the manifest's layout.
pub fn decode_into<T: NamedTensors + ?Sized>(params: &mut T, bin: &[u8], manifest: &str) -> Result<()> {
    let entries: Vec<(usize, &str, Vec<usize>)> = manifest
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.split_whitespace();
            let name = parts.next().unwrap_or_default();
            let dims = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|e| CalibError::Parse {
                        line: i + 1,
                        msg: format!("bad dimension `{p}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((i + 1, name, dims))
        })
        .collect::<Result<_>>()?;
    let total: usize = entries.iter().map(|(_, _, d)| d.iter().product::<usize>()).sum();
    if bin.len() != total * 8 {
        return Err(CalibError::shape(format!(
            "binary holds {} bytes, manifest describes {}",
            bin.len(),
            total * 8
        )));
    }
    let mut idx = 0usize;
    let mut offset = 0usize;
    let mut err: Option<CalibError> = None;
    params.visit_mut(&mut |name, shape, data| {
        if err.is_some() {
            return;
        }
        let Some((line, mname, mdims)) = entries.get(idx) else {
            err = Some(CalibError::shape(format!("manifest ends before tensor `{name}`")));
            return;
        };
        if *mname != name || mdims.as_slice() != shape {
            err = Some(CalibError::Parse {
                line: *line,
                msg: format!("expected `{name}` {shape:?}, found `{mname}` {mdims:?}"),
            });
            return;
        }
        for v in data.iter_mut() {
            let bytes: [u8; 8] = bin[offset..offset + 8].try_into().expect("8-byte chunk");
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != entries.len() {
        return Err(CalibError::shape(format!(
            "manifest lists {} tensors, parameters have {idx}",
            entries.len()
        )));
    }
    Ok(())
}

pub fn load_into<T: NamedTensors + ?Sized>(params: &mut T, stem: &Path) -> Result<()> {
    let (bin_path, man_path) = paths(stem);
    let bin = fs::read(&bin_path).map_err(|e| CalibError::io(&bin_path, e))?;
    let manifest = fs::read_to_string(&man_path).map_err(|e| CalibError::io(&man_path, e))?;
    decode_into(params, &bin, &manifest)
}
