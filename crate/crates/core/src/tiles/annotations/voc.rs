use std::path::Path;

use roxmltree::{Document, Node};

use super::{image_id, resolve_image, AnnotatedImage, AnnotationFormat};
use crate::tiles::{DefectBox, Result, TilesError};

pub struct VocFormat;

fn child<'a, 'i>(node: Node<'a, 'i>, tag: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn text<'a>(node: Node<'a, '_>, tag: &str) -> Option<&'a str> {
    child(node, tag).and_then(|c| c.text()).map(str::trim)
}

/// Pixel coordinate; some exporters write `12.0`.
fn coord(s: &str) -> Option<u32> {
    let v: f64 = s.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX)).then_some(v as u32)
}

impl AnnotationFormat for VocFormat {
    fn name(&self) -> &'static str {
        "voc"
    }

    fn extensions(&self) -> &'static [&'static str] {
        &["xml"]
    }

    fn parse(&self, src: &str, path: &Path) -> Result<AnnotatedImage> {
        let markup = |detail: String| TilesError::Markup {
            path: path.to_path_buf(),
            detail,
        };
        let doc = Document::parse(src).map_err(|e| markup(e.to_string()))?;
        let root = doc.root_element();
        if !root.has_tag_name("annotation") {
            return Err(markup(format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
        }
        let size = child(root, "size").ok_or_else(|| markup("missing <size>".into()))?;
        let dim = |tag: &str| {
            text(size, tag)
                .and_then(coord)
                .ok_or_else(|| markup(format!("missing or invalid <size>/<{tag}>")))
        };
        let (width, height) = (dim("width")?, dim("height")?);
        let filename = match text(root, "filename") {
            Some(f) if !f.is_empty() => f.to_string(),
            _ => {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                format!("{stem}.jpg")
            }
        };
        let mut boxes = Vec::new();
        for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
            let name = text(obj, "name").ok_or_else(|| markup(format!("object {}: missing <name>", i + 1)))?;
            let label = format!("object {} (`{name}`)", i + 1);
            let class = name.parse()?;
            let bb = child(obj, "bndbox").ok_or_else(|| markup(format!("{label}: missing <bndbox>")))?;
            let c = |tag: &str| {
                text(bb, tag)
                    .and_then(coord)
                    .ok_or_else(|| markup(format!("{label}: missing or invalid <{tag}>")))
            };
            let (x0, y0, x1, y1) = (c("xmin")?, c("ymin")?, c("xmax")?, c("ymax")?);
            if x0 >= x1 || y0 >= y1 {
                let detail = if x0 >= x1 {
                    format!("{label}: xmin {x0} >= xmax {x1}")
                } else {
                    format!("{label}: ymin {y0} >= ymax {y1}")
                };
                return Err(TilesError::BadBox {
                    path: path.to_path_buf(),
                    detail,
                });
            }
            boxes.push(DefectBox { class, x0, y0, x1, y1 });
        }
        let image = resolve_image(path, &filename);
        Ok(AnnotatedImage {
            id: image_id(&image),
            image,
            width,
            height,
            boxes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiles::DefectClass;

    const DOC: &str = r#"<annotation>
  <folder>Spur</folder>
  <filename>01_spur_07.jpg</filename>
  <size><width>3034</width><height>1586</height><depth>3</depth></size>
  <object>
    <name>spur</name><pose>Unspecified</pose>
    <bndbox><xmin>2459</xmin><ymin>1274</ymin><xmax>2530</xmax><ymax>1329</ymax></bndbox>
  </object>
  <object>
    <name>Missing_hole</name>
    <bndbox><xmin>10.0</xmin><ymin>20</ymin><xmax>30</xmax><ymax>40</ymax></bndbox>
  </object>
</annotation>"#;

    #[test]
    fn reads_subset() {
        let img = VocFormat.parse(DOC, Path::new("ann/01_spur_07.xml")).unwrap();
        assert_eq!((img.width, img.height), (3034, 1586));
        assert_eq!(img.id, "01_spur_07");
        assert_eq!(img.boxes.len(), 2);
        assert_eq!(img.boxes[0].class, DefectClass::Spur);
        assert_eq!(img.boxes[1].class, DefectClass::MissingHole);
        assert_eq!(img.boxes[1].x0, 10);
    }

    #[test]
    fn inverted_box_names_object() {
        let bad = DOC.replace("<xmin>2459</xmin>", "<xmin>2600</xmin>");
        let err = VocFormat.parse(&bad, Path::new("a.xml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("object 1") && msg.contains("spur") && msg.contains("xmin 2600"), "{msg}");
    }

    #[test]
    fn malformed_markup() {
        assert!(matches!(VocFormat.parse("<annotation><size>", Path::new("a.xml")), Err(TilesError::Markup { .. })));
        assert!(VocFormat.parse("<root/>", Path::new("a.xml")).is_err());
        let no_box = DOC.replace("<bndbox><xmin>10.0</xmin><ymin>20</ymin><xmax>30</xmax><ymax>40</ymax></bndbox>", "");
        assert!(VocFormat.parse(&no_box, Path::new("a.xml")).unwrap_err().to_string().contains("object 2"));
    }

    #[test]
    fn unknown_class() {
        let bad = DOC.replace("<name>spur</name>", "<name>crack</name>");
        assert!(matches!(VocFormat.parse(&bad, Path::new("a.xml")), Err(TilesError::UnknownClass(_))));
    }
}
