//! On-disk dataset cache: one binary PPM (P6) per sample, an index CSV
//! `path,identity,age,gender` and a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthConfig;
use super::{age_to_group, normalize, to_bytes, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{GENDERS, IMAGE_CHANNELS};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub path: String,
    pub identity: usize,
    pub age: f64,
    pub gender: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub synth: Option<SynthConfig>,
    pub samples: usize,
    pub image_size: usize,
    pub index_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a `3 × H × W` image in [-1, 1] as P6.
pub fn write_ppm(path: &Path, pixels: &Tensor) -> Result<()> {
    let &[c, h, w] = pixels.shape() else {
        return Err(Error::Shape {
            op: "write_ppm",
            shape: pixels.shape().to_vec(),
            reason: "expected 3×H×W".into(),
        });
    };
    if c != IMAGE_CHANNELS {
        return Err(Error::dim("write_ppm", "channels (axis 0)", IMAGE_CHANNELS, c));
    }
    let planes = to_bytes(pixels.data());
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(planes.len());
    for i in 0..h * w {
        for ch in 0..c {
            buf.push(planes[ch * h * w + i]);
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn header_fields(bytes: &[u8], path: &Path) -> Result<([usize; 3], usize)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a binary PPM (missing P6 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    Ok((fields, pos + 1))
}

/// Reads a P6 file into a `3 × H × W` tensor in [-1, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ([w, h, max], start) = header_fields(&bytes, path)?;
    if max != 255 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("maxval {max} unsupported (expected 255)"),
        });
    }
    let body = &bytes[start..];
    if body.len() != w * h * 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} pixel bytes, found {}", w * h * 3, body.len()),
        });
    }
    let mut raw = vec![0.0; 3 * h * w];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            raw[ch * h * w + i] = px[ch] as f64;
        }
    }
    Tensor::new(&[3, h, w], normalize(&raw))
}

fn index_bytes(rows: &[IndexRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::arg(format!("csv flush: {e}")))
}

/// Writes images, index and manifest under `dir` (created if needed).
pub fn write_dataset(dir: &Path, samples: &[LabeledImage], synth: Option<SynthConfig>) -> Result<DatasetManifest> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("{IMAGE_DIR}/{i:06}.ppm");
        write_ppm(&dir.join(&rel), &s.pixels)?;
        rows.push(IndexRow {
            path: rel,
            identity: s.identity,
            age: s.age,
            gender: s.gender,
        });
    }
    let index = index_bytes(&rows)?;
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, &index).map_err(|e| Error::io(&index_path, e))?;
    let manifest = DatasetManifest {
        synth,
        samples: samples.len(),
        image_size: samples.first().map_or(0, |s| s.size()),
        index_sha256: sha256_hex(&index),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads every sample listed in `dir/index.csv`.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let index_path: PathBuf = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        let row: IndexRow = row?;
        age_to_group(row.age)?;
        if row.gender >= GENDERS {
            return Err(Error::Format {
                path: index_path.clone(),
                reason: format!("gender {} out of range for {}", row.gender, row.path),
            });
        }
        out.push(LabeledImage {
            pixels: read_ppm(&dir.join(&row.path))?,
            identity: row.identity,
            age: row.age,
            gender: row.gender,
        });
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: index_path,
            reason: "dataset index lists no samples".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::generate_synthetic;
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            identities: 2,
            per_identity: 3,
            size: 16,
            seed: 11,
        };
        let data = generate_synthetic(&cfg).unwrap();
        let m = write_dataset(dir.path(), &data, Some(cfg)).unwrap();
        assert_eq!(m.samples, 6);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert!(index.starts_with("path,identity,age,gender\n"));
        assert_eq!(index.lines().count(), 7);
    }

    #[test]
    fn ppm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P3\n1 1\n255\n000").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::write(&p, b"P6\n2 2\n255\n\x00\x00").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::write(&p, b"P6\n# comment\n1 1\n255\n\x00\x80\xff").unwrap();
        let t = read_ppm(&p).unwrap();
        assert_eq!(t.data(), &[-1.0, 128.0 / 127.5 - 1.0, 1.0]);
    }
}
