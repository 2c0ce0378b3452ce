//! On-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.json      generator config, seed and identity specs
//! <dir>/manifest.jsonl    one record per image, with its PNG path
//! <dir>/skeletons.jsonl   {"image": path, "keypoints": [[x, y, c] x 17]}
//! <dir>/images/NNNNNN.png RGB pixels
//! <dir>/masks/NNNNNN.png  8-bit body-part labels
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rlq_core::image::Image;
use rlq_core::pose::{Skeleton, NUM_KEYPOINTS};
use rlq_core::synthdata::{Dataset, DatasetConfig, Mask, PersonSpec, Record};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SKELETONS: &str = "skeletons.jsonl";
pub const DATASET_META: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: DatasetConfig,
    pub persons: Vec<PersonSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub mask: String,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEntry {
    pub image: String,
    pub keypoints: [[f64; 3]; NUM_KEYPOINTS],
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(h as usize, w as usize, rgb.into_raw())
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    image::save_buffer(
        path,
        &mask.labels,
        mask.width as u32,
        mask.height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

fn read_mask(path: &Path) -> Result<Mask> {
    let l = image::open(path)?.to_luma8();
    let (w, h) = l.dimensions();
    Ok(Mask {
        height: h as usize,
        width: w as usize,
        labels: l.into_raw(),
    })
}

/// Writes `items` as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::runtime(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s =
        fs::read_to_string(path).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

fn image_name(i: usize) -> String {
    format!("images/{i:06}.png")
}

fn mask_name(i: usize) -> String {
    format!("masks/{i:06}.png")
}

pub fn save_dataset(dir: &Path, data: &Dataset, config: &DatasetConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let meta = DatasetMeta {
        seed,
        config: config.clone(),
        persons: data.persons.clone(),
    };
    write_json(&dir.join(DATASET_META), &meta)?;
    let mut manifest = Vec::with_capacity(data.records.len());
    let mut skeletons = Vec::with_capacity(data.records.len());
    for (i, rec) in data.records.iter().enumerate() {
        write_png(&dir.join(image_name(i)), &data.images[i])?;
        write_mask(&dir.join(mask_name(i)), &data.masks[i])?;
        manifest.push(ManifestEntry {
            path: image_name(i),
            mask: mask_name(i),
            record: rec.clone(),
        });
        skeletons.push(SkeletonEntry {
            image: image_name(i),
            keypoints: data.skeletons[i].keypoints,
        });
    }
    write_jsonl(&dir.join(MANIFEST), &manifest)?;
    write_jsonl(&dir.join(SKELETONS), &skeletons)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    read_json(&dir.join(DATASET_META))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(MANIFEST).exists() {
        return Err(Error::runtime(format!(
            "{} has no {MANIFEST}",
            dir.display()
        )));
    }
    let meta = load_meta(dir)?;
    let manifest: Vec<ManifestEntry> = read_jsonl(&dir.join(MANIFEST))?;
    let skel: HashMap<String, Skeleton> =
        load_skeletons(&dir.join(SKELETONS))?.into_iter().collect();
    let mut data = Dataset {
        records: Vec::with_capacity(manifest.len()),
        images: Vec::with_capacity(manifest.len()),
        skeletons: Vec::with_capacity(manifest.len()),
        masks: Vec::with_capacity(manifest.len()),
        persons: meta.persons,
    };
    for e in manifest {
        let sk = *skel
            .get(&e.path)
            .ok_or_else(|| Error::runtime(format!("no skeleton for {}", e.path)))?;
        data.images.push(read_png(&dir.join(&e.path))?);
        data.masks.push(read_mask(&dir.join(&e.mask))?);
        data.skeletons.push(sk);
        data.records.push(e.record);
    }
    Ok(data)
}

/// Skeletons keyed by image path, in file order.
pub fn load_skeletons(path: &Path) -> Result<Vec<(String, Skeleton)>> {
    let entries: Vec<SkeletonEntry> = read_jsonl(path)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            (
                e.image,
                Skeleton {
                    keypoints: e.keypoints,
                },
            )
        })
        .collect())
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlq_core::synthdata::generate_dataset;

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = DatasetConfig {
            ids: 4,
            clothes_per_id: 2,
            images_per_clothes: 4,
            queries_per_clothes: 1,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data, &cfg, 3).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(load_meta(dir.path()).unwrap().config, cfg);
    }
}
