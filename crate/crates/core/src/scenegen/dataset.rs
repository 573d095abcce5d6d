//! On-disk dataset format: `manifest.jsonl` plus one 8-bit PNG per scene.
//!
//! Each manifest line carries the scene seed, the image path relative to the
//! dataset root, a sha256 of the PNG bytes, and full annotations (RLE masks,
//! boxes, hardness). Images are quantized at generation time, so
//! write -> read is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rle::Rle;
use super::{BBox, Category, HardnessFactors, Image, Mask, ObjectAnnotation, Scene};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    category: Category,
    bbox: BBox,
    mask: Rle,
    hardness: HardnessFactors,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    index: usize,
    seed: u64,
    image: String,
    sha256: String,
    height: usize,
    width: usize,
    objects: Vec<ObjectRecord>,
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset { path: path.display().to_string(), msg: msg.into() }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write scenes to `dir` (created if missing): `dir/images/scene_%05d.png`
/// and `dir/manifest.jsonl`.
pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(fs::File::create(&manifest_path)?);
    for (index, scene) in scenes.iter().enumerate() {
        let rel = format!("images/scene_{index:05}.png");
        let png_path = dir.join(&rel);
        let bytes = encode_png(&scene.image, &png_path)?;
        let mut objects = Vec::with_capacity(scene.objects.len());
        for o in &scene.objects {
            objects.push(ObjectRecord {
                category: o.category,
                bbox: o.bbox,
                mask: Rle::encode(&o.mask.bits, o.mask.h, o.mask.w)?,
                hardness: o.hardness,
            });
        }
        let record = SceneRecord {
            index,
            seed: scene.seed,
            image: rel,
            sha256: sha256_hex(&bytes),
            height: scene.image.h,
            width: scene.image.w,
            objects,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| dataset_err(&manifest_path, e.to_string()))?;
        writeln!(manifest, "{line}")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Encode one image as an 8-bit RGB PNG at `path`, creating parent
/// directories as needed. Encoding is deterministic for equal pixel data.
pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    encode_png(image, path)?;
    Ok(())
}

fn encode_png(image: &Image, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
        image::ImageEncoder::write_image(
            encoder,
            &image.to_u8(),
            image.w as u32,
            image.h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| dataset_err(path, e.to_string()))?;
    }
    fs::write(path, &bytes)?;
    Ok(bytes)
}

fn decode_png(path: &Path, h: usize, w: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| dataset_err(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != w || rgb.height() as usize != h {
        return Err(dataset_err(
            path,
            format!("image is {}x{}, manifest says {w}x{h}", rgb.width(), rgb.height()),
        ));
    }
    Ok(Image::from_u8(h, w, rgb.as_raw()))
}

/// Read a dataset back, verifying every image checksum and mask shape.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path)
        .map_err(|e| dataset_err(&manifest_path, format!("cannot open manifest: {e}")))?;
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| dataset_err(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let png_path: PathBuf = dir.join(&record.image);
        let bytes = fs::read(&png_path)?;
        let digest = sha256_hex(&bytes);
        if digest != record.sha256 {
            return Err(dataset_err(
                &png_path,
                format!("sha256 mismatch: manifest {} vs file {digest}", record.sha256),
            ));
        }
        let image = decode_png(&png_path, record.height, record.width)?;
        let mut objects = Vec::with_capacity(record.objects.len());
        for o in record.objects {
            let bits = o
                .mask
                .decode()
                .map_err(|e| dataset_err(&png_path, format!("mask: {e}")))?;
            let [mh, mw] = o.mask.size;
            if mh != record.height || mw != record.width {
                return Err(dataset_err(
                    &png_path,
                    format!("mask size {mh}x{mw} does not match image"),
                ));
            }
            objects.push(ObjectAnnotation {
                category: o.category,
                bbox: o.bbox,
                mask: Mask::new(mh, mw, bits),
                hardness: o.hardness,
            });
        }
        scenes.push(Scene { image, objects, seed: record.seed });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, SceneConfig};

    #[test]
    fn write_read_roundtrip_is_exact() {
        let cfg = SceneConfig { image_size: 32, ..Default::default() };
        let scenes = generate_dataset(11, 5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(scenes, back);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_image_is_rejected() {
        let cfg = SceneConfig { image_size: 32, ..Default::default() };
        let scenes = generate_dataset(3, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        let png = dir.path().join("images/scene_00000.png");
        let mut bytes = fs::read(&png).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        fs::write(&png, &bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Dataset { msg, .. }) => assert!(msg.contains("sha256"), "{msg}"),
            other => panic!("expected Dataset error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        match read_dataset(&dir.path().join("nope")) {
            Err(Error::Dataset { path, .. }) => assert!(path.contains("manifest.jsonl")),
            other => panic!("expected Dataset error, got {other:?}"),
        }
    }
}
