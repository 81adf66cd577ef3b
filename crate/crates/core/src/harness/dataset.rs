use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use super::synth::SyntheticScene;
use crate::error::{Error, Result};
use crate::geometry::LineSegment;
use crate::pyramid::ImageTensor;

/// File name of the annotation list inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// One annotation record: pixel-coordinate lines of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireframeRecord {
    pub filename: String,
    pub width: f64,
    pub height: f64,
    pub lines: Vec<[f64; 4]>,
}

/// Normalized annotations of one image, with pixels when they were loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub filename: String,
    pub width: f64,
    pub height: f64,
    pub lines: Vec<LineSegment>,
    pub image: Option<ImageTensor>,
}

/// A training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: ImageTensor,
    pub gt: Vec<LineSegment>,
}

impl From<SyntheticScene> for Sample {
    fn from(s: SyntheticScene) -> Self {
        Self {
            name: scene_filename(s.index),
            image: s.image,
            gt: s.gt,
        }
    }
}

fn scene_filename(index: usize) -> String {
    format!("{index:06}.png")
}

/// Parses annotation records, normalizing by image size and canonicalizing.
///
/// Lines with identical endpoints are dropped with a warning.
pub fn parse_wireframe(text: &str) -> Result<Vec<AnnotatedImage>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
        index: 0,
        reason: format!("annotation file is not a JSON array of records: {e}"),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(index, v)| {
            let rec: WireframeRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
                index,
                reason: e.to_string(),
            })?;
            if !(rec.width > 0.0 && rec.height > 0.0) {
                return Err(Error::Parse {
                    index,
                    reason: format!("non-positive image size {}x{}", rec.width, rec.height),
                });
            }
            let mut lines = Vec::with_capacity(rec.lines.len());
            for (k, l) in rec.lines.iter().enumerate() {
                if l[0] == l[2] && l[1] == l[3] {
                    log::warn!("record {index} ({}): line {k} has identical endpoints, dropped", rec.filename);
                    continue;
                }
                lines.push(
                    LineSegment::new(l[0] / rec.width, l[1] / rec.height, l[2] / rec.width, l[3] / rec.height)
                        .clamp_unit()
                        .canonicalize(),
                );
            }
            Ok(AnnotatedImage {
                filename: rec.filename,
                width: rec.width,
                height: rec.height,
                lines,
                image: None,
            })
        })
        .collect()
}

/// Reads an annotation file; images are not loaded.
pub fn wireframe_ingest(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_wireframe(&text)
}

/// Loads an image file as a `size × size` tensor with `channels` channels in `[0, 1]`.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    let (w, h) = (size as u32, size as u32);
    let img = if img.width() == w && img.height() == h {
        img
    } else {
        img.resize_exact(w, h, FilterType::Triangle)
    };
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        c => return Err(Error::arg(format!("images have 1 or 3 channels, got {c}"))),
    };
    ImageTensor::new(size, size, channels, data)
}

/// Loads `dir/annotations.json` and every referenced image.
pub fn load_dataset(dir: &Path, size: usize, channels: usize) -> Result<Vec<Sample>> {
    let records = wireframe_ingest(&dir.join(ANNOTATIONS_FILE))?;
    records
        .into_iter()
        .map(|r| {
            let image = load_image(&dir.join(&r.filename), size, channels)?;
            Ok(Sample {
                name: r.filename,
                image,
                gt: r.lines,
            })
        })
        .collect()
}

/// Annotations only, for evaluation sets without pixels.
pub fn annotations_path(dir: &Path) -> PathBuf {
    dir.join(ANNOTATIONS_FILE)
}

/// Writes scenes as 8-bit grayscale PNGs plus an annotation file in pixel coordinates.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (h, w) = (s.image.height(), s.image.width());
        if s.image.channels() != 1 {
            return Err(Error::arg("synthetic scenes are grayscale"));
        }
        let mut img = GrayImage::new(w as u32, h as u32);
        for (i, v) in s.image.data.data().iter().enumerate() {
            let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % w) as u32, (i / w) as u32, Luma([q]));
        }
        let name = scene_filename(s.index);
        let path = dir.join(&name);
        img.save(&path)?;
        records.push(WireframeRecord {
            filename: name,
            width: w as f64,
            height: h as f64,
            lines: s
                .gt
                .iter()
                .map(|l| [l.x1 * w as f64, l.y1 * h as f64, l.x2 * w as f64, l.y2 * h as f64])
                .collect(),
        });
    }
    let path = annotations_path(dir);
    let text = serde_json::to_string_pretty(&records)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_and_canonicalizes() {
        let text = r#"[{"filename": "a.png", "width": 640, "height": 480, "lines": [[640, 480, 0, 0], [5, 5, 5, 5]]},
                       {"filename": "b.png", "width": 10, "height": 10, "lines": []}]"#;
        let r = parse_wireframe(text).unwrap();
        assert_eq!(r[0].lines, vec![LineSegment::new(0.0, 0.0, 1.0, 1.0)]);
        assert!(r[1].lines.is_empty());
    }

    #[test]
    fn missing_field_names_index() {
        let text = r#"[{"filename": "a.png", "width": 4, "height": 4, "lines": []},
                       {"filename": "b.png", "height": 4, "lines": []}]"#;
        match parse_wireframe(text) {
            Err(Error::Parse { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("width"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
