use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use stereopose::Error;

/// SHA-256 over relative paths and contents of every file under `root`, in sorted order.
pub fn tree_hash(root: &Path) -> Result<String, Error> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0u8]);
        let path = root.join(&rel);
        h.update(fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn is_sample_name(s: &str) -> bool {
    s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit())
}

/// Prediction files keyed by sample directory name: `NNNNN.<ext>` directly in
/// `dir`, or `NNNNN/<inner>` when laid out like a dataset.
pub fn predictions(dir: &Path, ext: &str, inner: &str) -> Result<BTreeMap<String, PathBuf>, Error> {
    let io = |e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_dir() {
            if is_sample_name(name) && path.join(inner).is_file() {
                out.insert(name.to_string(), path.join(inner));
            }
        } else if let Some(stem) = name.strip_suffix(ext).and_then(|s| s.strip_suffix('.')) {
            if is_sample_name(stem) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_to_string(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
