//! On-disk layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/00000/image.ppm
//! <dir>/train/00000/<concept>.ppm        instance, P6
//! <dir>/train/00000/<concept>.mask.pbm   region, P4
//! <dir>/train/00000/label.json
//! <dir>/test/...
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConceptSample, DataError, Dataset, DatasetManifest, Image, Mask, FORMAT_VERSION};
use crate::util::atomic_write;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    label: usize,
    class: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    let row_bytes = mask.width.div_ceil(8);
    for y in 0..mask.height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..mask.width {
            if mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend(row);
    }
    out
}

/// Parse a netpbm header with `fields` numeric fields after the magic.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &str, fields: usize) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(format_err(path, format!("bad magic, expected {magic}")));
    }
    let mut pos = magic.len();
    let mut values = Vec::with_capacity(fields);
    while values.len() < fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        let v: usize = text.parse().map_err(|_| format_err(path, "corrupt header"))?;
        values.push(v);
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "corrupt header"));
    }
    Ok((values, &bytes[pos + 1..]))
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Image, DataError> {
    let (v, raster) = parse_header(path, bytes, "P6", 3)?;
    let (w, h, maxval) = (v[0], v[1], v[2]);
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    if raster.len() != w * h * 3 {
        return Err(format_err(path, format!("expected {} raster bytes, found {}", w * h * 3, raster.len())));
    }
    Ok(Image::from_bytes(w, h, raster))
}

pub fn decode_pbm(path: &Path, bytes: &[u8]) -> Result<Mask, DataError> {
    let (v, raster) = parse_header(path, bytes, "P4", 2)?;
    let (w, h) = (v[0], v[1]);
    let row_bytes = w.div_ceil(8);
    if raster.len() != row_bytes * h {
        return Err(format_err(path, format!("expected {} raster bytes, found {}", row_bytes * h, raster.len())));
    }
    let mut mask = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            mask.bits[y * w + x] = raster[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0;
        }
    }
    Ok(mask)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    atomic_write(path, |f| f.write_all(bytes)).map_err(io_err(path))
}

fn read_file(path: &Path, concept: Option<&str>) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| match (e.kind(), concept) {
        (std::io::ErrorKind::NotFound, Some(c)) => DataError::MissingConceptFile {
            path: path.to_path_buf(),
            concept: c.to_string(),
        },
        (std::io::ErrorKind::NotFound, None) => DataError::MissingFile {
            path: path.to_path_buf(),
        },
        _ => DataError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn sample_dir(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join(split).join(format!("{index:05}"))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let names = dataset.manifest.concept_names();
    let classes = dataset.manifest.class_names();
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (i, s) in samples.iter().enumerate() {
            let d = sample_dir(dir, split, i);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            write_file(&d.join("image.ppm"), &encode_ppm(&s.image))?;
            for (c, name) in names.iter().enumerate() {
                write_file(&d.join(format!("{name}.ppm")), &encode_ppm(&s.instances[c]))?;
                write_file(&d.join(format!("{name}.mask.pbm")), &encode_pbm(&s.masks[c]))?;
            }
            let label = LabelRecord {
                label: s.label,
                class: classes[s.label].clone(),
            };
            let json = serde_json::to_vec_pretty(&label).expect("label record serialises");
            write_file(&d.join("label.json"), &json)?;
        }
    }
    let manifest = serde_json::to_vec_pretty(&dataset.manifest).expect("manifest serialises");
    write_file(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join("manifest.json");
    let bytes = read_file(&mpath, None)?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| format_err(&mpath, e.to_string()))?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(DataError::Version {
            path: mpath,
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(raw).map_err(|e| format_err(&mpath, e.to_string()))?;
    manifest
        .config
        .validate()
        .map_err(|e| format_err(&mpath, e.to_string()))?;
    let names = manifest.concept_names();
    let size = manifest.config.image_size;
    let classes = manifest.config.classes.len();

    let load_split = |split: &str, n: usize| -> Result<Vec<ConceptSample>, DataError> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let d = sample_dir(dir, split, i);
            let check = |p: &Path, w: usize, h: usize| {
                if (w, h) != (size, size) {
                    Err(format_err(p, format!("size {w}x{h} differs from manifest {size}x{size}")))
                } else {
                    Ok(())
                }
            };
            let ip = d.join("image.ppm");
            let image = decode_ppm(&ip, &read_file(&ip, None)?)?;
            check(&ip, image.width, image.height)?;
            let mut instances = Vec::with_capacity(names.len());
            let mut masks = Vec::with_capacity(names.len());
            for name in &names {
                let p = d.join(format!("{name}.ppm"));
                let inst = decode_ppm(&p, &read_file(&p, Some(name))?)?;
                check(&p, inst.width, inst.height)?;
                let mp = d.join(format!("{name}.mask.pbm"));
                let mask = decode_pbm(&mp, &read_file(&mp, Some(name))?)?;
                check(&mp, mask.width, mask.height)?;
                instances.push(inst);
                masks.push(mask);
            }
            let lp = d.join("label.json");
            let rec: LabelRecord =
                serde_json::from_slice(&read_file(&lp, None)?).map_err(|e| format_err(&lp, e.to_string()))?;
            if rec.label >= classes {
                return Err(format_err(&lp, format!("label {} out of range", rec.label)));
            }
            out.push(ConceptSample {
                image,
                label: rec.label,
                instances,
                masks,
            });
        }
        // the manifest's count must match what is on disk
        let extra = sample_dir(dir, split, n);
        if extra.exists() {
            return Err(format_err(&extra, format!("more {split} samples than the manifest's {n}")));
        }
        Ok(out)
    };
    let train = load_split("train", manifest.config.n_train)?;
    let test = load_split("test", manifest.config.n_test)?;
    Ok(Dataset { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pbm_odd_width_round_trip() {
        let mut m = Mask::empty(11, 3);
        for i in [0, 7, 8, 10, 15, 32] {
            m.bits[i] = true;
        }
        let bytes = encode_pbm(&m);
        assert_eq!(decode_pbm(Path::new("m"), &bytes).unwrap(), m);
    }

    #[test]
    fn ppm_header_corruption_detected() {
        let img = Image::filled(4, 2, [1, 2, 3]);
        let mut bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(Path::new("x"), &bytes).unwrap(), img);
        bytes[0] = b'Q';
        assert!(matches!(decode_ppm(Path::new("x"), &bytes), Err(DataError::Format { .. })));
        let truncated = &encode_ppm(&img)[..12];
        assert!(decode_ppm(Path::new("x"), truncated).is_err());
    }
}
