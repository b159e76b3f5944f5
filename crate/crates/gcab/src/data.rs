//! Dataset loading (IDX binary, sharded manifest directories) and the
//! deterministic synthetic grating generator used by the desk presets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Flat H*W*C buffers, channel-last, values in [0, 1].
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let pix = self.image_h * self.image_w * self.channels;
        for (i, img) in self.images.iter().enumerate() {
            if img.len() != pix {
                return Err(Error::Data(format!(
                    "image {i} has {} values, expected {pix}",
                    img.len()
                )));
            }
        }
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            if l >= self.num_classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes
                )));
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        Ok(())
    }

    /// Samples whose label falls in [lo, hi).
    pub fn filter_classes(&self, lo: usize, hi: usize) -> Dataset {
        let mut out = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            ..self.clone()
        };
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if (lo..hi).contains(&l) {
                out.images.push(img.clone());
                out.labels.push(l);
            }
        }
        out
    }
}

const IDX_IMAGES_3D: u32 = 0x0000_0803;
const IDX_IMAGES_4D: u32 = 0x0000_0804;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|e| Error::Data(format!("truncated IDX file reading {what}: {e}")))
}

/// Read an IDX image file (magic 0x803 for N,H,W or 0x804 for N,H,W,C;
/// u8 payload). Pixels are scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "magic")?;
    let ndims = match magic {
        IDX_IMAGES_3D => 3,
        IDX_IMAGES_4D => 4,
        other => {
            return Err(Error::Data(format!(
                "bad IDX image magic {other:#010x} in {}",
                path.display()
            )))
        }
    };
    let n = read_u32(&mut r, "count")? as usize;
    let h = read_u32(&mut r, "height")? as usize;
    let w = read_u32(&mut r, "width")? as usize;
    let c = if ndims == 4 {
        read_u32(&mut r, "channels")? as usize
    } else {
        1
    };
    let per = h * w * c;
    let mut raw = vec![0u8; n * per];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("truncated IDX payload in {}: {e}", path.display())))?;
    let images = raw
        .chunks_exact(per)
        .map(|ch| ch.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok((images, h, w, c))
}

/// Read an IDX label file (magic 0x801, u8 payload).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "magic")?;
    if magic != IDX_LABELS {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x} in {}",
            path.display()
        )));
    }
    let n = read_u32(&mut r, "count")? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("truncated IDX payload in {}: {e}", path.display())))?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let (imgs, h, w, c) = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    let ds = Dataset {
        images: imgs,
        labels: labs,
        num_classes,
        image_h: h,
        image_w: w,
        channels: c,
    };
    ds.validate()?;
    Ok(ds)
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(images)?);
    w.write_u32::<BigEndian>(IDX_IMAGES_4D)?;
    w.write_u32::<BigEndian>(ds.len() as u32)?;
    w.write_u32::<BigEndian>(ds.image_h as u32)?;
    w.write_u32::<BigEndian>(ds.image_w as u32)?;
    w.write_u32::<BigEndian>(ds.channels as u32)?;
    for img in &ds.images {
        let bytes: Vec<u8> = img.iter().map(|&v| quantize_u8(v)).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels)?);
    w.write_u32::<BigEndian>(IDX_LABELS)?;
    w.write_u32::<BigEndian>(ds.len() as u32)?;
    for &l in &ds.labels {
        if l > 255 {
            return Err(Error::Data(format!("label {l} does not fit in a byte")));
        }
        w.write_u8(l as u8)?;
    }
    w.flush()?;
    Ok(())
}

/// Directory layout: `manifest.txt` with `key=value` header lines
/// (height, width, channels, classes) followed by one `class file count`
/// line per class; each shard file holds `count` raw H*W*C u8 images.
pub fn write_manifest_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = vec![
        format!("height={}", ds.image_h),
        format!("width={}", ds.image_w),
        format!("channels={}", ds.channels),
        format!("classes={}", ds.num_classes),
    ];
    for k in 0..ds.num_classes {
        let file = format!("class{k}.bin");
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        let mut count = 0usize;
        for (img, &l) in ds.images.iter().zip(&ds.labels) {
            if l == k {
                let bytes: Vec<u8> = img.iter().map(|&v| quantize_u8(v)).collect();
                w.write_all(&bytes)?;
                count += 1;
            }
        }
        w.flush()?;
        lines.push(format!("{k} {file} {count}"));
    }
    std::fs::write(dir.join("manifest.txt"), lines.join("\n") + "\n")?;
    Ok(())
}

pub fn load_manifest_dir(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Data(format!("missing manifest.txt in {}: {e}", dir.display())))?;
    let mut header = std::collections::HashMap::new();
    let mut shards = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!("bad manifest line: {line}")));
            }
            let class: usize = parts[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad class id in manifest: {line}")))?;
            let count: usize = parts[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad count in manifest: {line}")))?;
            shards.push((class, parts[1].to_string(), count));
        }
    }
    let field = |k: &str| -> Result<usize> {
        header
            .get(k)
            .ok_or_else(|| Error::Data(format!("manifest missing {k}=")))?
            .parse()
            .map_err(|_| Error::Data(format!("manifest {k}= is not a number")))
    };
    let (h, w, c) = (field("height")?, field("width")?, field("channels")?);
    let num_classes = field("classes")?;
    let per = h * w * c;
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        num_classes,
        image_h: h,
        image_w: w,
        channels: c,
    };
    for (class, file, count) in shards {
        let mut raw = vec![0u8; count * per];
        let mut r = BufReader::new(File::open(dir.join(&file))?);
        r.read_exact(&mut raw)
            .map_err(|e| Error::Data(format!("truncated shard {file}: {e}")))?;
        for chunk in raw.chunks_exact(per) {
            ds.images
                .push(chunk.iter().map(|&b| b as f64 / 255.0).collect());
            ds.labels.push(class);
        }
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// 0.0 = noiseless gratings (linearly separable); larger values add
    /// phase jitter and pixel noise proportionally.
    pub difficulty: f64,
}

fn grating(spec: &SynthSpec, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = spec.image_size as f64;
    let theta = std::f64::consts::PI * class as f64 / spec.num_classes as f64;
    let freq = 1.5 + 0.5 * (class % 3) as f64;
    let phase = if spec.difficulty > 0.0 {
        rng.gen_range(-1.0..1.0) * spec.difficulty * std::f64::consts::PI
    } else {
        0.0
    };
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = Vec::with_capacity(spec.image_size * spec.image_size);
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let proj = (x as f64 * ct + y as f64 * st) / s;
            let mut v = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * proj + phase).sin();
            if spec.difficulty > 0.0 {
                v += rng.gen_range(-0.5..0.5) * spec.difficulty;
            }
            img.push(v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Generate class-conditional grating images: per-class orientation and
/// frequency, with phase jitter and pixel noise scaled by `difficulty`.
/// Returns (train, test); test gets max(2, per_class/4) samples per class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::Data("synth spec parameters must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.difficulty) {
        return Err(Error::Data(format!(
            "difficulty {} outside [0, 1]",
            spec.difficulty
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blank = |n_hint: usize| Dataset {
        images: Vec::with_capacity(n_hint),
        labels: Vec::with_capacity(n_hint),
        num_classes: spec.num_classes,
        image_h: spec.image_size,
        image_w: spec.image_size,
        channels: 1,
    };
    let test_per_class = (spec.per_class / 4).max(2);
    let mut train = blank(spec.num_classes * spec.per_class);
    let mut test = blank(spec.num_classes * test_per_class);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            train.images.push(grating(spec, class, &mut rng));
            train.labels.push(class);
        }
        for _ in 0..test_per_class {
            test.images.push(grating(spec, class, &mut rng));
            test.labels.push(class);
        }
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 10,
            per_class: 100,
            image_size: 8,
            difficulty: 0.3,
        }
    }

    #[test]
    fn synth_counts() {
        let (train, test) = synth_dataset(&toy_spec(), 1).unwrap();
        assert_eq!(train.len(), 1000);
        assert_eq!(test.len(), 10 * 25);
    }

    #[test]
    fn synth_deterministic() {
        let (a, _) = synth_dataset(&toy_spec(), 42).unwrap();
        let (b, _) = synth_dataset(&toy_spec(), 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn difficulty_zero_is_class_constant() {
        let spec = SynthSpec {
            difficulty: 0.0,
            ..toy_spec()
        };
        let (train, test) = synth_dataset(&spec, 3).unwrap();
        // every sample of a class is the identical prototype
        for k in 0..spec.num_classes {
            let tr = train.filter_classes(k, k + 1);
            let te = test.filter_classes(k, k + 1);
            assert!(tr.images.iter().all(|i| *i == tr.images[0]));
            assert_eq!(te.images[0], tr.images[0]);
        }
        // and prototypes differ across classes
        let p0 = &train.filter_classes(0, 1).images[0];
        let p1 = &train.filter_classes(1, 2).images[0];
        assert_ne!(p0, p1);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 4,
            per_class: 3,
            image_size: 8,
            difficulty: 0.2,
        };
        let (train, _) = synth_dataset(&spec, 9).unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx(&train, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, 4).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.labels, train.labels);
        assert_eq!(back.image_h, 8);
        assert_eq!(back.channels, 1);
        // u8 quantization bounds the round-trip error
        for (a, b) in back.images.iter().zip(&train.images) {
            for (&x, &y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // second write from the loaded set is bit-exact
        let ip2 = dir.path().join("img2.idx");
        let lp2 = dir.path().join("lab2.idx");
        write_idx(&back, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("lab.idx");
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_LABELS.to_be_bytes());
        buf.extend_from_slice(&1u32.to_be_bytes());
        buf.push(255);
        std::fs::write(&lp, &buf).unwrap();
        let ip = dir.path().join("img.idx");
        let ds = Dataset {
            images: vec![vec![0.0; 64]],
            labels: vec![0],
            num_classes: 10,
            image_h: 8,
            image_w: 8,
            channels: 1,
        };
        write_idx(&ds, &ip, &dir.path().join("unused.idx")).unwrap();
        let err = load_idx(&ip, &lp, 10).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.idx");
        std::fs::write(&p, [0u8; 16]).unwrap();
        assert!(read_idx_images(&p).unwrap_err().to_string().contains("magic"));
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_IMAGES_3D.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&8u32.to_be_bytes());
        buf.extend_from_slice(&8u32.to_be_bytes());
        buf.extend_from_slice(&[0u8; 10]); // far short of 2*64
        std::fs::write(&p, &buf).unwrap();
        assert!(read_idx_images(&p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 3,
            per_class: 5,
            image_size: 4,
            difficulty: 0.1,
        };
        let (train, _) = synth_dataset(&spec, 5).unwrap();
        write_manifest_dir(&train, dir.path()).unwrap();
        let back = load_manifest_dir(dir.path()).unwrap();
        assert_eq!(back.len(), train.len());
        // manifest groups by class; counts per class must match
        for k in 0..3 {
            assert_eq!(
                back.filter_classes(k, k + 1).len(),
                train.filter_classes(k, k + 1).len()
            );
        }
    }
}
