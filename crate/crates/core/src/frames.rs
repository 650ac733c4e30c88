//! Frame identity and pixel access.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a frame sits in its source video.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: String,
    pub scene: String,
    pub seq: u64,
}

impl FrameMeta {
    pub fn new(frame_id: impl Into<String>, scene: impl Into<String>, seq: u64) -> Self {
        Self { frame_id: frame_id.into(), scene: scene.into(), seq }
    }
}

pub trait FrameStore: Send + Sync {
    fn load(&self, frame_id: &str) -> Result<Arc<RgbImage>>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryFrames {
    frames: HashMap<String, Arc<RgbImage>>,
}

impl MemoryFrames {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_id: impl Into<String>, image: RgbImage) {
        self.frames.insert(frame_id.into(), Arc::new(image));
    }

    /// Register `alias` as another name for an already stored frame.
    pub fn alias(&mut self, alias: impl Into<String>, frame_id: &str) -> Result<()> {
        let img = self.frames.get(frame_id).cloned().ok_or_else(|| Error::UnknownFrame(frame_id.into()))?;
        self.frames.insert(alias.into(), img);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl FrameStore for MemoryFrames {
    fn load(&self, frame_id: &str) -> Result<Arc<RgbImage>> {
        self.frames.get(frame_id).cloned().ok_or_else(|| Error::UnknownFrame(frame_id.into()))
    }
}

/// Image files on disk, resolved relative to `root`.
#[derive(Debug, Clone)]
pub struct DiskFrames {
    root: PathBuf,
    paths: HashMap<String, PathBuf>,
}

impl DiskFrames {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), paths: HashMap::new() }
    }

    pub fn insert(&mut self, frame_id: impl Into<String>, path: impl Into<PathBuf>) {
        self.paths.insert(frame_id.into(), path.into());
    }

    pub fn resolve(&self, frame_id: &str) -> Result<PathBuf> {
        let rel = self.paths.get(frame_id).ok_or_else(|| Error::UnknownFrame(frame_id.into()))?;
        Ok(if rel.is_absolute() { rel.clone() } else { self.root.join(rel) })
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img =
        image::ImageReader::open(path).map_err(|e| Error::io(path, e))?.with_guessed_format().map_err(|e| Error::io(path, e))?.decode()?;
    Ok(img.to_rgb8())
}

impl FrameStore for DiskFrames {
    fn load(&self, frame_id: &str) -> Result<Arc<RgbImage>> {
        Ok(Arc::new(load_rgb(&self.resolve(frame_id)?)?))
    }
}
