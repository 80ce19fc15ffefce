//! On-disk dataset container: a manifest plus one directory of little-endian
//! f32 arrays per scene.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    SearchTrain,
    SearchVal,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::SearchTrain, Split::SearchVal, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::SearchTrain => "search-train",
            Split::SearchVal => "search-val",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// One scene, in storage precision.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    /// [n,H,W]
    pub images: Tensor<f32>,
    /// [3,H,W]
    pub normals: Tensor<f32>,
    pub mask: Vec<bool>,
    /// [n,3]
    pub lights: Tensor<f32>,
    /// [n]
    pub intensities: Tensor<f32>,
}

impl SceneRecord {
    pub fn num_images(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub lights: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub resolution: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("psnas-dataset v1\n");
        out.push_str(&format!("resolution = {}\n", self.resolution));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("noise_sigma = {}\n", self.noise_sigma));
        out.push_str(&format!("scenes = {}\n", self.entries.len()));
        for e in &self.entries {
            out.push_str(&format!("scene {} split={} lights={}\n", e.id, e.split.name(), e.lights));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("empty manifest"))?;
        if header.trim() != "psnas-dataset v1" {
            return Err(Error::parse(format!("unsupported manifest header `{header}`")));
        }
        let mut resolution = None;
        let mut seed = None;
        let mut noise_sigma = None;
        let mut declared = None;
        let mut entries = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("scene ") {
                let mut parts = rest.split_whitespace();
                let id = parts
                    .next()
                    .ok_or_else(|| Error::parse(format!("line {lineno}: missing scene id")))?
                    .to_string();
                let mut split = None;
                let mut lights = None;
                for p in parts {
                    if let Some(v) = p.strip_prefix("split=") {
                        split = Split::from_name(v);
                        if split.is_none() {
                            return Err(Error::parse(format!("line {lineno}: unknown split `{v}`")));
                        }
                    } else if let Some(v) = p.strip_prefix("lights=") {
                        lights = v.parse::<usize>().ok();
                    }
                }
                entries.push(ManifestEntry {
                    id,
                    split: split.ok_or_else(|| Error::parse(format!("line {lineno}: missing split=")))?,
                    lights: lights.ok_or_else(|| Error::parse(format!("line {lineno}: missing lights=")))?,
                });
            } else if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "resolution" => resolution = v.parse::<usize>().ok(),
                    "seed" => seed = v.parse::<u64>().ok(),
                    "noise_sigma" => noise_sigma = v.parse::<f64>().ok(),
                    "scenes" => declared = v.parse::<usize>().ok(),
                    _ => return Err(Error::parse(format!("line {lineno}: unknown key `{k}`"))),
                }
            } else {
                return Err(Error::parse(format!("line {lineno}: unparseable `{line}`")));
            }
        }
        let m = Manifest {
            resolution: resolution.ok_or_else(|| Error::parse("manifest missing resolution"))?,
            seed: seed.ok_or_else(|| Error::parse("manifest missing seed"))?,
            noise_sigma: noise_sigma.unwrap_or(0.0),
            entries,
        };
        if let Some(d) = declared {
            if d != m.entries.len() {
                return Err(Error::parse(format!(
                    "manifest declares {d} scenes but lists {}",
                    m.entries.len()
                )));
            }
        }
        Ok(m)
    }
}

// ---- binary array files ----

pub fn write_f32s(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Invalid(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(Error::parse(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---- scene directories ----

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn write_scene(root: &Path, rec: &SceneRecord) -> Result<()> {
    let dir = scene_dir(root, &rec.id);
    fs::create_dir_all(&dir)?;
    let (n, h, w) = rec.images.dims3()?;
    let meta = format!("id = {}\nn = {n}\nheight = {h}\nwidth = {w}\n", rec.id);
    fs::write(dir.join("meta.txt"), meta)?;
    write_f32s(&dir.join("images.bin"), rec.images.as_slice())?;
    write_f32s(&dir.join("normals.bin"), rec.normals.as_slice())?;
    let mask: Vec<f32> = rec.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_f32s(&dir.join("mask.bin"), &mask)?;
    write_f32s(&dir.join("lights.bin"), rec.lights.as_slice())?;
    write_f32s(&dir.join("intensities.bin"), rec.intensities.as_slice())?;
    Ok(())
}

fn parse_meta(path: &Path) -> Result<(String, usize, usize, usize)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let (mut id, mut n, mut h, mut w) = (None, None, None, None);
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v = v.trim();
            match k.trim() {
                "id" => id = Some(v.to_string()),
                "n" => n = v.parse().ok(),
                "height" => h = v.parse().ok(),
                "width" => w = v.parse().ok(),
                _ => {}
            }
        }
    }
    Ok((
        id.ok_or_else(|| Error::parse("scene meta missing id"))?,
        n.ok_or_else(|| Error::parse("scene meta missing n"))?,
        h.ok_or_else(|| Error::parse("scene meta missing height"))?,
        w.ok_or_else(|| Error::parse("scene meta missing width"))?,
    ))
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneRecord> {
    let (id, n, h, w) = parse_meta(&dir.join("meta.txt"))?;
    let images = Tensor::from_vec(&[n, h, w], read_f32s(&dir.join("images.bin"), n * h * w)?)?;
    let normals = Tensor::from_vec(&[3, h, w], read_f32s(&dir.join("normals.bin"), 3 * h * w)?)?;
    let mask_raw = read_f32s(&dir.join("mask.bin"), h * w)?;
    let mask = mask_raw.iter().map(|&v| v != 0.0).collect();
    let lights = Tensor::from_vec(&[n, 3], read_f32s(&dir.join("lights.bin"), n * 3)?)?;
    let intensities = Tensor::from_vec(&[n], read_f32s(&dir.join("intensities.bin"), n)?)?;
    Ok(SceneRecord { id, images, normals, mask, lights, intensities })
}

pub fn read_scene(root: &Path, id: &str) -> Result<SceneRecord> {
    read_scene_dir(&scene_dir(root, id))
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("manifest.txt"), manifest.serialize())?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join("manifest.txt"))
        .map_err(|e| Error::Invalid(format!("cannot read manifest in {}: {e}", root.display())))?;
    Manifest::parse(&text)
}
