//! Scene dataset files: one JSON record per line under a versioned header.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::LastlabError;
use crate::microworld::oracles::{teacher_features, TeacherFeatures};
use crate::microworld::raster::{rasterize, Raster, RASTER_RESOLUTION, RASTER_SIZE};
use crate::microworld::scene::{generate_scene, Difficulty, SceneRecord};

pub const SCENE_FORMAT: &str = "lastlab-scene-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub config_hash: String,
    pub count: usize,
    pub split: String,
    pub k_geo: usize,
    pub k_wm: usize,
}

/// One stored example: the scene plus everything training consumes at t = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneExample {
    pub scene: SceneRecord,
    pub teacher: TeacherFeatures,
    /// Flat 3 x 64 x 64 raster at t = 0, f32 little-endian, base64.
    pub raster_b64: String,
}

fn encode_raster(r: &Raster) -> String {
    let mut bytes = Vec::with_capacity(r.data.len() * 4);
    for &v in &r.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_raster(b64: &str) -> Result<Raster, LastlabError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| LastlabError::Dataset(format!("raster base64: {e}")))?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.len() != 3 * RASTER_SIZE * RASTER_SIZE {
        return Err(LastlabError::Dataset("raster payload size".into()));
    }
    Ok(Raster {
        data,
        size: RASTER_SIZE,
        resolution: RASTER_RESOLUTION,
    })
}

impl SceneExample {
    pub fn build(seed: u64, difficulty: Difficulty, k_geo: usize, k_wm: usize) -> Result<Self, LastlabError> {
        let scene = generate_scene(seed, difficulty);
        let teacher = teacher_features(&scene, 0.0, k_geo, k_wm)?;
        let raster = rasterize(&scene, 0.0)?;
        Ok(Self {
            scene,
            teacher,
            raster_b64: encode_raster(&raster),
        })
    }

    pub fn raster(&self) -> Result<Raster, LastlabError> {
        decode_raster(&self.raster_b64)
    }
}

pub fn write_dataset(
    path: &Path,
    examples: &[SceneExample],
    split: &str,
    config_hash: &str,
    k_geo: usize,
    k_wm: usize,
) -> Result<(), LastlabError> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    let header = DatasetHeader {
        format: SCENE_FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        count: examples.len(),
        split: split.to_string(),
        k_geo,
        k_wm,
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| LastlabError::Dataset(e.to_string()))?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| LastlabError::Dataset(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneExample>), LastlabError> {
    let f = std::fs::File::open(path)
        .map_err(|e| LastlabError::Dataset(format!("open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| LastlabError::Dataset("empty dataset file".into()))?
        .map_err(LastlabError::Io)?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| LastlabError::Dataset(format!("header: {e}")))?;
    if header.format != SCENE_FORMAT {
        return Err(LastlabError::Dataset(format!(
            "unsupported dataset format {:?}",
            header.format
        )));
    }
    let mut examples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(LastlabError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SceneExample =
            serde_json::from_str(&line).map_err(|e| LastlabError::Dataset(format!("record: {e}")))?;
        examples.push(ex);
    }
    if examples.len() != header.count {
        return Err(LastlabError::Dataset(format!(
            "header count {} != records {}",
            header.count,
            examples.len()
        )));
    }
    Ok((header, examples))
}
