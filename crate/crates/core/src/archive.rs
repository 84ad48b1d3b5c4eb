//! tar+gzip archives: job payloads sent to stations and cleaned job directories.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is not valid tar+gzip data: {0}")]
    Corrupt(io::Error),
    #[error("archive entry `{0}` is not a plain file")]
    UnsafeEntry(String),
    #[error("cannot write `{name}`: {source}")]
    Write { name: String, source: io::Error },
}

/// Packs the named files of `dir` as top-level entries.
pub fn pack_files(dir: &Path, names: &[String]) -> io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    for name in names {
        builder.append_path_with_name(dir.join(name), name)?;
    }
    builder.into_inner()?.finish()
}

/// Writes `dir` recursively into `out` under the top-level name `root`.
pub fn pack_dir(dir: &Path, root: &str, out: &Path) -> io::Result<()> {
    let file = fs::File::create(out)?;
    let mut builder = tar::Builder::new(GzEncoder::new(file, Compression::default()));
    builder.follow_symlinks(false);
    builder.append_dir_all(root, dir)?;
    let mut gz = builder.into_inner()?;
    gz.flush()?;
    gz.finish()?.sync_all()
}

/// Unpacks an archive of plain top-level files into `dest`, returning the
/// file names in archive order. Directories, links and nested paths are
/// refused.
pub fn unpack_files(data: &[u8], dest: &Path) -> Result<Vec<String>, ArchiveError> {
    let mut archive = tar::Archive::new(GzDecoder::new(data));
    let mut names = Vec::new();
    for entry in archive.entries().map_err(ArchiveError::Corrupt)? {
        let mut entry = entry.map_err(ArchiveError::Corrupt)?;
        let path = entry.path().map_err(ArchiveError::Corrupt)?.into_owned();
        let name = path.to_string_lossy().into_owned();
        let plain = path.components().count() == 1
            && !name.is_empty()
            && name != "."
            && name != ".."
            && !name.contains('/');
        if !plain || !entry.header().entry_type().is_file() {
            return Err(ArchiveError::UnsafeEntry(name));
        }
        let mut contents = Vec::new();
        entry
            .read_to_end(&mut contents)
            .map_err(ArchiveError::Corrupt)?;
        fs::write(dest.join(&name), &contents).map_err(|source| ArchiveError::Write {
            name: name.clone(),
            source,
        })?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_round_trip_bit_exact() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let blob: Vec<u8> = (0..=255u8).cycle().take(5000).collect();
        fs::write(src.path().join("blob"), &blob).unwrap();
        fs::write(src.path().join("FCN"), b"text\r\n").unwrap();
        let names = vec!["blob".to_string(), "FCN".to_string()];
        let tgz = pack_files(src.path(), &names).unwrap();
        assert_eq!(&tgz[..2], &[0x1f, 0x8b]);
        assert_eq!(unpack_files(&tgz, dst.path()).unwrap(), names);
        assert_eq!(fs::read(dst.path().join("blob")).unwrap(), blob);
        assert_eq!(fs::read(dst.path().join("FCN")).unwrap(), b"text\r\n");
    }

    #[test]
    fn refuses_nested_entries_and_garbage() {
        let src = tempfile::tempdir().unwrap();
        fs::create_dir(src.path().join("sub")).unwrap();
        fs::write(src.path().join("sub/x"), b"x").unwrap();
        let out = src.path().join("a.tar.gz");
        pack_dir(&src.path().join("sub"), "sub", &out).unwrap();
        let dst = tempfile::tempdir().unwrap();
        let err = unpack_files(&fs::read(&out).unwrap(), dst.path()).unwrap_err();
        assert!(matches!(err, ArchiveError::UnsafeEntry(_)), "{err}");
        assert!(unpack_files(b"not an archive", dst.path()).is_err());
    }
}
