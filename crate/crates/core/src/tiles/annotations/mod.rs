//! Annotation readers. Formats are registered by name in a
//! [`FormatRegistry`] and picked by file extension.
//!
//! JSON schema (one board per file):
//!
//! ```json
//! {
//!   "image": "board_0001.png",
//!   "width": 400,
//!   "height": 400,
//!   "boxes": [ { "class": "open_circuit", "x0": 12, "y0": 40, "x1": 30, "y1": 52 } ]
//! }
//! ```
//!
//! `image` is resolved relative to the annotation file. Coordinates are
//! pixel edges (`x0 <= x < x1`). The XML reader accepts the VOC subset
//! `annotation/{filename, size/{width,height}, object/{name, bndbox/{xmin,
//! ymin, xmax, ymax}}}` and reads `xmin..xmax` as the same edge interval.

mod json;
mod voc;

use std::fs;
use std::path::{Path, PathBuf};

pub use json::{to_json, JsonFormat};
pub use voc::VocFormat;

use super::{io_err, DefectBox, Result, TilesError};

/// One annotated board.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedImage {
    /// Stable identifier: the image file stem.
    pub id: String,
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<DefectBox>,
}

impl AnnotatedImage {
    /// Validates every box against the image bounds.
    pub fn check(&self, path: &Path) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(TilesError::BadBox {
                path: path.to_path_buf(),
                detail: "image size must be positive".into(),
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.check(self.width, self.height).map_err(|detail| TilesError::BadBox {
                path: path.to_path_buf(),
                detail: format!("box {} (`{}`): {detail}", i + 1, b.class),
            })?;
        }
        Ok(())
    }
}

pub trait AnnotationFormat: Send + Sync {
    fn name(&self) -> &'static str;

    /// Lower-case file extensions this format reads.
    fn extensions(&self) -> &'static [&'static str];

    /// Parses `src`, read from `path`. Relative image references are
    /// resolved against `path`'s directory.
    fn parse(&self, src: &str, path: &Path) -> Result<AnnotatedImage>;
}

pub struct FormatRegistry {
    formats: Vec<Box<dyn AnnotationFormat>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut r = Self { formats: Vec::new() };
        r.register(Box::new(JsonFormat));
        r.register(Box::new(VocFormat));
        r
    }
}

impl FormatRegistry {
    pub fn empty() -> Self {
        Self { formats: Vec::new() }
    }

    /// Adds `format`, replacing one registered under the same name.
    pub fn register(&mut self, format: Box<dyn AnnotationFormat>) {
        self.formats.retain(|f| f.name() != format.name());
        self.formats.push(format);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.formats.iter().map(|f| f.name()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&dyn AnnotationFormat> {
        self.formats.iter().find(|f| f.name() == name).map(|f| f.as_ref())
    }

    pub fn for_path(&self, path: &Path) -> Option<&dyn AnnotationFormat> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        self.formats
            .iter()
            .find(|f| f.extensions().contains(&ext.as_str()))
            .map(|f| f.as_ref())
    }

    pub fn parse_file(&self, path: &Path) -> Result<AnnotatedImage> {
        let format = self.for_path(path).ok_or_else(|| TilesError::UnknownFormat(path.to_path_buf()))?;
        let src = fs::read_to_string(path).map_err(io_err(path))?;
        let img = format.parse(&src, path)?;
        img.check(path)?;
        Ok(img)
    }

    /// A single file, or every readable annotation in a directory ordered
    /// by file name. Files with unregistered extensions are skipped.
    pub fn parse_path(&self, path: &Path) -> Result<Vec<AnnotatedImage>> {
        if !path.is_dir() {
            return Ok(vec![self.parse_file(path)?]);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(path)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.is_file() && self.for_path(p).is_some());
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        files.iter().map(|p| self.parse_file(p)).collect()
    }
}

/// [`FormatRegistry::parse_path`] with the JSON and VOC readers.
pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    FormatRegistry::default().parse_path(path)
}

pub(super) fn resolve_image(annotation: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        annotation.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub(super) fn image_id(image: &Path) -> String {
    image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiles::DefectClass;

    #[test]
    fn mixed_directory_is_ordered_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let json = |name: &str| {
            format!(r#"{{"image":"{name}.png","width":50,"height":50,"boxes":[{{"class":"short","x0":1,"y0":1,"x1":5,"y1":5}}]}}"#)
        };
        let xml = |name: &str| {
            format!(
                "<annotation><filename>{name}.jpg</filename><size><width>60</width><height>40</height></size>\
                 <object><name>spur</name><bndbox><xmin>2</xmin><ymin>3</ymin><xmax>9</xmax><ymax>7</ymax></bndbox></object></annotation>"
            )
        };
        fs::write(dir.path().join("c.json"), json("c")).unwrap();
        fs::write(dir.path().join("a.json"), json("a")).unwrap();
        fs::write(dir.path().join("b.xml"), xml("b")).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let all = parse_annotations(dir.path()).unwrap();
        let ids: Vec<_> = all.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(all[1].boxes[0].class, DefectClass::Spur);
        assert_eq!(all[1].image, dir.path().join("b.jpg"));
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, r#"{"image":"x.png","width":10,"height":10,"boxes":[{"class":"short","x0":1,"y0":1,"x1":11,"y1":5}]}"#).unwrap();
        let err = parse_annotations(&p).unwrap_err();
        assert!(matches!(err, TilesError::BadBox { .. }), "{err}");
        assert!(err.to_string().contains("box 1"));
    }

    #[test]
    fn registry_selects_by_extension() {
        let r = FormatRegistry::default();
        assert_eq!(r.names(), ["json", "voc"]);
        assert_eq!(r.for_path(Path::new("a/b.XML")).unwrap().name(), "voc");
        assert!(r.for_path(Path::new("a/b.yaml")).is_none());
        assert!(matches!(r.parse_file(Path::new("b.yaml")), Err(TilesError::UnknownFormat(_))));
    }
}
