//! On-disk dataset formats.
//!
//! Snippet file: magic `SNIP`, version u32, channels u8, side u16, then the
//! payload as little-endian f32, row-major within each channel, channels in
//! order. Manifest: JSON lines with keys id, path, split, label
//! (integer or null), channels. Scene file: magic `SCNE`, version u32,
//! side u16, hf then lf payloads as little-endian f32, truth count u32,
//! then (x u16, y u16, class u8) per truth object.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::raster::Raster;
use crate::sonargen::{ObjectClass, Scene, TruthObject};

const SNIP_MAGIC: &[u8; 4] = b"SNIP";
const SCENE_MAGIC: &[u8; 4] = b"SCNE";
const VERSION: u32 = 1;

/// Fixed-size multiband image chip. Data is channel-major, f32 to match
/// the file payload exactly (round-trips are bit-exact).
#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl Snippet {
    pub fn new(channels: usize, side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * side * side {
            return Err(DataError::Format(format!(
                "snippet payload {} does not match {channels}x{side}x{side}",
                data.len()
            )));
        }
        Ok(Snippet { channels, side, data })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Snippet { channels, side, data: vec![0.0; channels * side * side] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.side * self.side..(c + 1) * self.side * self.side]
    }

    /// Single-channel view of one band (used for HF-only runs).
    pub fn select_channel(&self, c: usize) -> Snippet {
        Snippet { channels: 1, side: self.side, data: self.channel(c).to_vec() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(SNIP_MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.channels as u8])?;
        out.write_all(&(self.side as u16).to_le_bytes())?;
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SNIP_MAGIC {
            return Err(DataError::Format(format!("bad snippet magic {magic:?}")));
        }
        let mut v4 = [0u8; 4];
        input.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported snippet version {version}")));
        }
        let mut ch = [0u8; 1];
        input.read_exact(&mut ch)?;
        let mut side2 = [0u8; 2];
        input.read_exact(&mut side2)?;
        let channels = ch[0] as usize;
        let side = u16::from_le_bytes(side2) as usize;
        let mut data = Vec::with_capacity(channels * side * side);
        let mut buf = [0u8; 4];
        for _ in 0..channels * side * side {
            input.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        Snippet::new(channels, side, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Pretrain => write!(f, "pretrain"),
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub split: Split,
    pub label: Option<u8>,
    pub channels: usize,
}

/// Index of all snippets and splits of one generated dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| DataError::Format(format!("manifest encode: {e}")))?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let input = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| DataError::Format(format!("manifest decode: {e}")))?,
            );
        }
        Ok(DatasetManifest { entries })
    }
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let side = scene.hf.w;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SCENE_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(side as u16).to_le_bytes())?;
    for raster in [&scene.hf, &scene.lf] {
        for &v in &raster.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.write_all(&(scene.truth.len() as u32).to_le_bytes())?;
    for obj in &scene.truth {
        out.write_all(&(obj.x as u16).to_le_bytes())?;
        out.write_all(&(obj.y as u16).to_le_bytes())?;
        out.write_all(&[match obj.class {
            ObjectClass::Target => 0u8,
            ObjectClass::Clutter => 1u8,
        }])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(DataError::Format(format!("bad scene magic {magic:?}")));
    }
    let mut v4 = [0u8; 4];
    input.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != VERSION {
        return Err(DataError::Format("unsupported scene version".into()));
    }
    let mut s2 = [0u8; 2];
    input.read_exact(&mut s2)?;
    let side = u16::from_le_bytes(s2) as usize;
    let mut read_raster = || -> Result<Raster> {
        let mut data = Vec::with_capacity(side * side);
        let mut buf = [0u8; 4];
        for _ in 0..side * side {
            input.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(Raster::from_data(side, side, data))
    };
    let hf = read_raster()?;
    let lf = read_raster()?;
    let mut c4 = [0u8; 4];
    input.read_exact(&mut c4)?;
    let count = u32::from_le_bytes(c4) as usize;
    let mut truth = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x2 = [0u8; 2];
        let mut y2 = [0u8; 2];
        let mut c1 = [0u8; 1];
        input.read_exact(&mut x2)?;
        input.read_exact(&mut y2)?;
        input.read_exact(&mut c1)?;
        truth.push(TruthObject {
            x: u16::from_le_bytes(x2) as usize,
            y: u16::from_le_bytes(y2) as usize,
            class: if c1[0] == 0 { ObjectClass::Target } else { ObjectClass::Clutter },
        });
    }
    Ok(Scene { hf, lf, truth })
}
