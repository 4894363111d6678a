//! Binary PPM/PGM files and the on-disk dataset layout: `NNNNN.ppm` image,
//! `NNNNN_mask.pgm` mask, and `manifest.csv`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ManipSample;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.csv";

fn to_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("{magic}\n{w} {h}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Writes a `[3,H,W]` image as binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("write_ppm", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for j in 0..h * w {
        for c in 0..3 {
            bytes.push(to_byte(d[c * h * w + j]));
        }
    }
    write_netpbm(path, "P6", h, w, &bytes)
}

/// Writes a `[1,H,W]` map as binary PGM (P5).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim("write_pgm", format!("expected [1,H,W], got {s:?}")));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_byte(v)).collect();
    write_netpbm(path, "P5", s[1], s[2], &bytes)
}

fn read_netpbm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |what: &str| Error::Config(format!("{}: {what}", path.display()));
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", tokens[0])));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("malformed header"));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok((h, w, bytes))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (h, w, bytes) = read_netpbm(path, "P6")?;
    if bytes.len() != 3 * h * w {
        return Err(Error::Config(format!("{}: pixel data has wrong length", path.display())));
    }
    let mut data = vec![0.0 as Real; 3 * h * w];
    for j in 0..h * w {
        for c in 0..3 {
            data[c * h * w + j] = bytes[3 * j + c] as Real / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (h, w, bytes) = read_netpbm(path, "P5")?;
    if bytes.len() != h * w {
        return Err(Error::Config(format!("{}: pixel data has wrong length", path.display())));
    }
    Tensor::new(&[1, h, w], bytes.iter().map(|&b| b as Real / 255.0).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub filename: String,
    pub kind: String,
    pub seed: u64,
    pub mask_fraction: f64,
}

/// Writes the samples and their manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[ManipSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        write_ppm(&dir.join(format!("{stem}.ppm")), &s.image)?;
        write_pgm(&dir.join(format!("{stem}_mask.pgm")), &s.mask)?;
        manifest.serialize(ManifestRecord {
            filename: format!("{stem}.ppm"),
            kind: s.kind.clone(),
            seed: s.seed,
            mask_fraction: s.mask_fraction(),
        })?;
    }
    manifest.flush().map_err(|e| Error::io(dir.join(MANIFEST), e))
}

/// Reads a dataset written by [`write_dataset`]. Pixel values come back
/// quantized to 1/255.
pub fn read_dataset(dir: &Path) -> Result<Vec<ManipSample>> {
    let mut reader = csv::Reader::from_path(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for rec in reader.deserialize::<ManifestRecord>() {
        let rec = rec?;
        let stem = rec.filename.trim_end_matches(".ppm");
        out.push(ManipSample {
            image: read_ppm(&dir.join(&rec.filename))?,
            mask: read_pgm(&dir.join(format!("{stem}_mask.pgm")))?,
            kind: rec.kind,
            seed: rec.seed,
        });
    }
    Ok(out)
}
