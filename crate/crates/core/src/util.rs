use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Write `path` through a sibling temporary file and an atomic rename, so a
/// reader never observes a partially written file. On error the temporary
/// file is removed and `path` is left as it was.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ckpt.bin");
        let err = atomic_write(&target, |w| {
            w.write_all(&[1u8; 4096])?;
            Err(io::Error::new(io::ErrorKind::Interrupted, "killed"))
        });
        assert!(err.is_err());
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn failed_overwrite_keeps_previous_contents() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("a.txt");
        atomic_write(&target, |w| w.write_all(b"old")).unwrap();
        let _ = atomic_write(&target, |w| {
            w.write_all(b"new-partial")?;
            Err(io::Error::other("boom"))
        });
        assert_eq!(fs::read(&target).unwrap(), b"old");
    }
}
