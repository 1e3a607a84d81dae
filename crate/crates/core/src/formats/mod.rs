//! On-disk formats.
//!
//! Text: XYZ and ASCII PLY clouds, keypoint and label lists, correspondence
//! files and the dataset manifest. Binary (all little-endian, with a
//! trailing CRC32 where noted): checkpoints (`DP3D`), descriptor files
//! (`DP3F`), binary codes (`DP3B`), ITQ models (`DP3Q`) and mined training
//! sets (`DP3T`).
//!
//! Writers go through [`write_atomic`], so a failed command never leaves a
//! half-written output behind.

mod binary;
mod text;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use binary::{
    decode_checkpoint, decode_codes, decode_descriptors, decode_itq, decode_training_set,
    encode_checkpoint, encode_codes, encode_descriptors, encode_itq, encode_training_set,
    load_checkpoint, load_codes, load_descriptors, load_itq, load_training_set, save_checkpoint,
    save_codes, save_descriptors, save_itq, save_training_set, DescriptorRecord,
};
pub use text::{
    format_correspondences, format_indices, format_labels, format_xyz, load_cloud, load_corpus,
    load_correspondences, load_indices, load_labels, parse_correspondences, parse_indices,
    parse_labels, parse_ply, parse_xyz, Manifest,
};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Prefixes format errors with the file they came from.
pub(crate) fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        e => e,
    })
}
