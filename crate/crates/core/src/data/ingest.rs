//! Frame-folder ingestion: `<root>/<class>/<clip>/<frame-index>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{DpatError, Result};
use crate::model::VideoClip;

/// Clips read from disk with labels assigned in lexicographic class order.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedClips {
    pub class_names: Vec<String>,
    pub clips: Vec<VideoClip>,
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.retain(|p| p.is_dir());
    out.sort();
    Ok(out)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let index: usize = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DpatError::Data(format!("frame name {} is not an integer index", path.display())))?;
        frames.push((index, path));
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Indices of `frames` evenly strided samples from `available` frames.
pub fn uniform_indices(available: usize, frames: usize) -> Vec<usize> {
    let stride = (available / frames.max(1)).max(1);
    (0..frames).map(|i| i * stride).collect()
}

/// Reads every clip under `root`, subsampling each to `frames` frames.
/// Clips with fewer frames are skipped with a warning; a class left with
/// no clips is an error.
pub fn ingest_folder(root: &Path, frames: usize) -> Result<IngestedClips> {
    if frames == 0 {
        return Err(DpatError::Data("frame count must be positive".into()));
    }
    let classes = sorted_dirs(root)?;
    if classes.is_empty() {
        return Err(DpatError::Data(format!("no class folders under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut clips = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut kept = 0;
        for clip_dir in sorted_dirs(class_dir)? {
            let files = frame_files(&clip_dir)?;
            if files.len() < frames {
                log::warn!(
                    "skipping {}: {} frames, {frames} needed",
                    clip_dir.display(),
                    files.len()
                );
                continue;
            }
            clips.push(read_clip(&files, frames, label)?);
            kept += 1;
        }
        if kept == 0 {
            return Err(DpatError::Data(format!("class folder {} has no usable clips", class_dir.display())));
        }
        class_names.push(name);
    }
    Ok(IngestedClips { class_names, clips })
}

fn read_clip(files: &[PathBuf], frames: usize, label: usize) -> Result<VideoClip> {
    let mut pixels = Vec::new();
    let mut size = None;
    for i in uniform_indices(files.len(), frames) {
        let img = image::open(&files[i])?.to_rgb8();
        let dims = img.dimensions();
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(DpatError::Data(format!(
                    "{} is {}x{}, earlier frames are {}x{}",
                    files[i].display(),
                    dims.0,
                    dims.1,
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        pixels.extend(img.into_raw().into_iter().map(|v| v as f64 / 255.0));
    }
    let (w, h) = size.expect("at least one frame");
    VideoClip::new(frames, h as usize, w as usize, 3, pixels, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_picks_even_frames() {
        assert_eq!(uniform_indices(32, 16), (0..16).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(uniform_indices(20, 16), (0..16).collect::<Vec<_>>());
    }
}
