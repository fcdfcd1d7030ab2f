//! Pascal VOC XML annotations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::metrics::GtBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocObject {
    pub name: String,
    /// Pixel corners, clamped to the image.
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub objects: Vec<VocObject>,
}

/// Class ids for the given names, plus any names not in `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub boxes: Vec<GtBox>,
    pub unknown: Vec<String>,
}

impl Annotation {
    pub fn labels(&self, classes: &[String]) -> Labels {
        let mut boxes = Vec::new();
        let mut unknown = Vec::new();
        for o in &self.objects {
            match classes.iter().position(|c| *c == o.name) {
                Some(class) => boxes.push(GtBox { class, bbox: o.bbox }),
                None => unknown.push(o.name.clone()),
            }
        }
        Labels { boxes, unknown }
    }
}

pub fn parse_voc_file(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    parse_voc_str(&text, path)
}

/// Parses an annotation; `path` is only used in error messages.
pub fn parse_voc_str(text: &str, path: &Path) -> Result<Annotation> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let (line, column) = match e {
            // reported at 1:1; the end of the text is more useful
            roxmltree::Error::UnexpectedEndOfStream | roxmltree::Error::UnclosedRootNode => {
                let last = text.lines().last().unwrap_or("");
                (text.lines().count().max(1) as u32, last.chars().count() as u32 + 1)
            }
            _ => (e.pos().row, e.pos().col),
        };
        Error::Parse { path: path.to_path_buf(), line, column, msg: e.to_string() }
    })?;
    let record = |msg: String| Error::Record { path: path.to_path_buf(), msg };
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(record(format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
    }
    let number = |n: XmlNode<'_, '_>, tag: &str, ctx: &str| -> Result<f64> {
        let s = text_of(n, tag).ok_or_else(|| record(format!("{ctx}: missing <{tag}>")))?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| record(format!("{ctx}: <{tag}> is not a number: `{s}`")))
    };

    let filename = text_of(root, "filename").unwrap_or("").to_string();
    let size = child(root, "size").ok_or_else(|| record("missing <size>".into()))?;
    let width = number(size, "width", "size")?;
    let height = number(size, "height", "size")?;
    let depth = if child(size, "depth").is_some() { number(size, "depth", "size")? } else { 3.0 };
    if !(width >= 1.0 && height >= 1.0) {
        return Err(record(format!("image size {width}x{height} is empty")));
    }

    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let ctx = format!("object {i}");
        let name = text_of(obj, "name").ok_or_else(|| record(format!("{ctx}: missing <name>")))?.to_string();
        let bb = child(obj, "bndbox").ok_or_else(|| record(format!("{ctx} ({name}): missing <bndbox>")))?;
        let x1 = number(bb, "xmin", &ctx)?;
        let y1 = number(bb, "ymin", &ctx)?;
        let x2 = number(bb, "xmax", &ctx)?;
        let y2 = number(bb, "ymax", &ctx)?;
        let difficult = text_of(obj, "difficult").is_some_and(|s| s == "1");
        objects.push(VocObject { name, bbox: BBox::new(x1, y1, x2, y2).clip(width, height), difficult });
    }
    Ok(Annotation { filename, width: width as u32, height: height as u32, depth: depth as u32, objects })
}

type XmlNode<'a, 'i> = roxmltree::Node<'a, 'i>;

fn child<'a, 'i>(n: XmlNode<'a, 'i>, tag: &str) -> Option<XmlNode<'a, 'i>> {
    n.children().find(|c| c.has_tag_name(tag))
}

fn text_of<'a>(n: XmlNode<'a, '_>, tag: &str) -> Option<&'a str> {
    child(n, tag).and_then(|c| c.text()).map(str::trim)
}

fn escape(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => o.push_str("&amp;"),
            '<' => o.push_str("&lt;"),
            '>' => o.push_str("&gt;"),
            '"' => o.push_str("&quot;"),
            '\'' => o.push_str("&apos;"),
            c => o.push(c),
        }
    }
    o
}

pub fn to_voc_xml(a: &Annotation) -> String {
    let mut s = String::from("<annotation>\n");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(&a.filename));
    let _ = writeln!(
        s,
        "\t<size>\n\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>{}</depth>\n\t</size>",
        a.width, a.height, a.depth
    );
    for o in &a.objects {
        let b = &o.bbox;
        let _ = writeln!(
            s,
            "\t<object>\n\t\t<name>{}</name>\n\t\t<difficult>{}</difficult>\n\t\t<bndbox>\n\t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\t\t</bndbox>\n\t</object>",
            escape(&o.name),
            o.difficult as u8,
            b.x1,
            b.y1,
            b.x2,
            b.y2
        );
    }
    s.push_str("</annotation>\n");
    s
}
