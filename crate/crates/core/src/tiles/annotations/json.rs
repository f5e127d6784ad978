use std::path::Path;

use serde::Deserialize;

use super::{image_id, resolve_image, AnnotatedImage, AnnotationFormat};
use crate::tiles::{DefectBox, Result, TilesError};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    class: String,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    image: String,
    width: u32,
    height: u32,
    #[serde(default)]
    boxes: Vec<RawBox>,
}

pub struct JsonFormat;

impl AnnotationFormat for JsonFormat {
    fn name(&self) -> &'static str {
        "json"
    }

    fn extensions(&self) -> &'static [&'static str] {
        &["json"]
    }

    fn parse(&self, src: &str, path: &Path) -> Result<AnnotatedImage> {
        let raw: RawImage = serde_json::from_str(src).map_err(|e| TilesError::Markup {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let boxes = raw
            .boxes
            .into_iter()
            .map(|b| {
                Ok(DefectBox {
                    class: b.class.parse()?,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let image = resolve_image(path, &raw.image);
        Ok(AnnotatedImage {
            id: image_id(&image),
            image,
            width: raw.width,
            height: raw.height,
            boxes,
        })
    }
}

/// Serializes `img` in the schema [`JsonFormat`] reads, with the image
/// reference reduced to its file name.
pub fn to_json(img: &AnnotatedImage) -> String {
    let boxes: Vec<serde_json::Value> = img
        .boxes
        .iter()
        .map(|b| serde_json::json!({"class": b.class.as_str(), "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1}))
        .collect();
    let name = img.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    serde_json::json!({"image": name, "width": img.width, "height": img.height, "boxes": boxes}).to_string()
}
