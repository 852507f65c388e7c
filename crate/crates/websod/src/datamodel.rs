//! Core geometric and dataset types: boxes, detections, the base/novel class
//! split, and ingestion of VOC-style annotations and web image manifests.
//!
//! Boxes use corner coordinates `(x1, y1, x2, y2)` with the origin at the top
//! left, `x2`/`y2` exclusive, so `width = x2 - x1`. VOC's 1-based inclusive
//! pixel indices are converted to this convention at ingestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};

/// Axis-aligned box in continuous image coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validates `x1 < x2` and `y1 < y2` (positive area).
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite())
            || x1 >= x2
            || y1 >= y2
        {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clips to `[0, w] x [0, h]`; `None` if nothing with positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        BBox::new(x1, y1, x2, y2).ok()
    }
}

/// Intersection-over-union of two valid boxes. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// A scored, class-labeled detector output. `class_id` indexes the emitting
/// detector's foreground vocabulary; background is never emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidDetection(format!(
                "score {score} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }
}

/// Disjoint partition of the class vocabulary into base and novel classes.
///
/// The vocabulary order (and therefore every `class_id`) is the order classes
/// were listed at construction; base and novel names keep that relative order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    classes: Vec<String>,
    is_novel: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ClassSplit {
    pub fn new(classes: Vec<String>, novel: &[String]) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, name) in classes.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidSplit(format!("duplicate class {name:?}")));
            }
        }
        let mut is_novel = vec![false; classes.len()];
        for name in novel {
            match index.get(name) {
                Some(&i) => is_novel[i] = true,
                None => {
                    return Err(Error::InvalidSplit(format!(
                        "novel class {name:?} not in vocabulary"
                    )))
                }
            }
        }
        Ok(ClassSplit {
            classes,
            is_novel,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, class_id: usize) -> &str {
        &self.classes[class_id]
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.is_novel[class_id]
    }

    pub fn base_classes(&self) -> Vec<String> {
        self.iter_ids(false).map(|i| self.classes[i].clone()).collect()
    }

    pub fn novel_classes(&self) -> Vec<String> {
        self.iter_ids(true).map(|i| self.classes[i].clone()).collect()
    }

    pub fn base_ids(&self) -> Vec<usize> {
        self.iter_ids(false).collect()
    }

    pub fn novel_ids(&self) -> Vec<usize> {
        self.iter_ids(true).collect()
    }

    fn iter_ids(&self, novel: bool) -> impl Iterator<Item = usize> + '_ {
        self.is_novel
            .iter()
            .enumerate()
            .filter(move |(_, &n)| n == novel)
            .map(|(i, _)| i)
    }

    /// Serializes as one `name<TAB>base|novel` line per class, vocabulary order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.classes.iter().enumerate() {
            let kind = if self.is_novel[i] { "novel" } else { "base" };
            let _ = writeln!(out, "{name}\t{kind}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        let mut novel = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, kind) = line.split_once('\t').ok_or_else(|| Error::Manifest {
                line: lineno + 1,
                detail: "expected `name<TAB>base|novel`".into(),
            })?;
            match kind {
                "base" => {}
                "novel" => novel.push(name.to_string()),
                other => {
                    return Err(Error::Manifest {
                        line: lineno + 1,
                        detail: format!("unknown split kind {other:?}"),
                    })
                }
            }
            classes.push(name.to_string());
        }
        ClassSplit::new(classes, &novel)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// A target-domain image with ground-truth boxes.
#[derive(Debug, Clone)]
pub struct TargetImageRecord {
    pub image_id: String,
    /// `(3, H, W)` tensor, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub ground_truth: Vec<(BBox, usize)>,
}

/// A web-domain image carrying a single image-level label and no boxes.
#[derive(Debug, Clone)]
pub struct WebImageRecord {
    pub image_id: String,
    pub image: Array3<f64>,
    pub image_label: usize,
}

/// Estimator-produced boxes for one web image, all relabeled with the image label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAnnotation {
    pub image_id: String,
    /// `(box, class_id, estimator_score)`; `class_id` equals the source image label.
    pub boxes: Vec<(BBox, usize, f64)>,
}

/// Parsed VOC annotation metadata (no pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct VocAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<(BBox, usize)>,
    /// Objects flagged `difficult` are dropped; the count is surfaced so
    /// callers can warn.
    pub dropped_difficult: usize,
}

fn xml_child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

/// Parses a VOC-style XML annotation against a vocabulary.
///
/// VOC `bndbox` coordinates are 1-based inclusive pixel indices; they come
/// out as 0-based exclusive-corner [`BBox`]es. `file` is used only for error
/// messages.
pub fn parse_voc_annotation(xml_text: &str, split: &ClassSplit, file: &str) -> Result<VocAnnotation> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| Error::Annotation {
        file: file.to_string(),
        detail: format!("malformed XML: {e}"),
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Annotation {
            file: file.to_string(),
            detail: format!("unexpected root element <{}>", root.tag_name().name()),
        });
    }

    let image_id = xml_child_text(root, "filename")
        .map(|f| f.trim_end_matches(".png").trim_end_matches(".jpg").to_string())
        .unwrap_or_default();
    let (mut width, mut height) = (0usize, 0usize);
    if let Some(size) = root.children().find(|c| c.has_tag_name("size")) {
        width = xml_child_text(size, "width")
            .and_then(|t| t.parse().ok())
            .unwrap_or(0);
        height = xml_child_text(size, "height")
            .and_then(|t| t.parse().ok())
            .unwrap_or(0);
    }

    let mut objects = Vec::new();
    let mut dropped_difficult = 0usize;
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = xml_child_text(obj, "name").ok_or_else(|| Error::Annotation {
            file: file.to_string(),
            detail: "object without <name>".into(),
        })?;
        let class_id = split.class_id(name).ok_or_else(|| Error::UnknownClass {
            file: file.to_string(),
            field: "object/name".into(),
            name: name.to_string(),
        })?;
        if xml_child_text(obj, "difficult") == Some("1") {
            dropped_difficult += 1;
            continue;
        }
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| Error::Annotation {
                file: file.to_string(),
                detail: format!("object {name:?} without <bndbox>"),
            })?;
        let coord = |tag: &str| -> Result<f64> {
            xml_child_text(bnd, tag)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| Error::Annotation {
                    file: file.to_string(),
                    detail: format!("object {name:?}: missing or invalid <{tag}>"),
                })
        };
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        let bbox = BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax).map_err(|_| Error::Annotation {
            file: file.to_string(),
            detail: format!("object {name:?}: degenerate bndbox ({xmin}, {ymin}, {xmax}, {ymax})"),
        })?;
        objects.push((bbox, class_id));
    }

    Ok(VocAnnotation {
        image_id,
        width,
        height,
        objects,
        dropped_difficult,
    })
}

/// Serializes annotation metadata back into VOC XML (inverse of
/// [`parse_voc_annotation`] on integer-aligned boxes).
pub fn write_voc_annotation(
    image_id: &str,
    width: usize,
    height: usize,
    objects: &[(BBox, usize)],
    split: &ClassSplit,
) -> String {
    let mut out = String::new();
    out.push_str("<annotation>\n");
    let _ = writeln!(out, "  <filename>{image_id}.png</filename>");
    let _ = writeln!(
        out,
        "  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>"
    );
    for (bbox, class_id) in objects {
        let _ = writeln!(out, "  <object>");
        let _ = writeln!(out, "    <name>{}</name>", split.name(*class_id));
        let _ = writeln!(out, "    <difficult>0</difficult>");
        let _ = writeln!(
            out,
            "    <bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox>",
            bbox.x1 + 1.0,
            bbox.y1 + 1.0,
            bbox.x2,
            bbox.y2
        );
        let _ = writeln!(out, "  </object>");
    }
    out.push_str("</annotation>\n");
    out
}

/// One web manifest entry: relative image path plus image-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct WebManifestEntry {
    /// Relative path with extension stripped; doubles as the image id.
    pub image_id: String,
    pub rel_path: String,
    pub label: usize,
}

/// Parses a web manifest: one `relative/path.png<TAB>label` line per record,
/// kept in file order.
pub fn load_web_manifest(text: &str, split: &ClassSplit) -> Result<Vec<WebManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (rel_path, label_name) = line.split_once('\t').ok_or_else(|| Error::Manifest {
            line: lineno + 1,
            detail: "expected `path<TAB>label`".into(),
        })?;
        let label = split.class_id(label_name).ok_or_else(|| Error::UnknownClass {
            file: format!("manifest line {}", lineno + 1),
            field: "label".into(),
            name: label_name.to_string(),
        })?;
        let image_id = rel_path
            .trim_end_matches(".png")
            .trim_end_matches(".jpg")
            .to_string();
        if seen.insert(image_id.clone(), lineno).is_some() {
            return Err(Error::Manifest {
                line: lineno + 1,
                detail: format!("duplicate image id {image_id:?}"),
            });
        }
        entries.push(WebManifestEntry {
            image_id,
            rel_path: rel_path.to_string(),
            label,
        });
    }
    Ok(entries)
}

/// Serializes pseudo annotations: one line per image,
/// `image_id<TAB>x1,y1,x2,y2,label,score<TAB>...`. Images with zero boxes
/// still get a line so downstream stages see them.
pub fn write_pseudo_annotations(annos: &[PseudoAnnotation], split: &ClassSplit) -> String {
    let mut out = String::new();
    for anno in annos {
        out.push_str(&anno.image_id);
        for (bbox, class_id, score) in &anno.boxes {
            let _ = write!(
                out,
                "\t{},{},{},{},{},{}",
                bbox.x1,
                bbox.y1,
                bbox.x2,
                bbox.y2,
                split.name(*class_id),
                score
            );
        }
        out.push('\n');
    }
    out
}

pub fn parse_pseudo_annotations(text: &str, split: &ClassSplit) -> Result<Vec<PseudoAnnotation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let image_id = fields.next().unwrap_or("").to_string();
        if image_id.is_empty() {
            return Err(Error::Manifest {
                line: lineno + 1,
                detail: "empty image id".into(),
            });
        }
        let mut boxes = Vec::new();
        for field in fields {
            let parts: Vec<&str> = field.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::Manifest {
                    line: lineno + 1,
                    detail: format!("expected 6 comma-separated values, got {}", parts.len()),
                });
            }
            let num = |i: usize| -> Result<f64> {
                parts[i].parse().map_err(|_| Error::Manifest {
                    line: lineno + 1,
                    detail: format!("invalid number {:?}", parts[i]),
                })
            };
            let bbox = BBox::new(num(0)?, num(1)?, num(2)?, num(3)?)?;
            let class_id = split.class_id(parts[4]).ok_or_else(|| Error::UnknownClass {
                file: format!("pseudo annotations line {}", lineno + 1),
                field: "label".into(),
                name: parts[4].to_string(),
            })?;
            boxes.push((bbox, class_id, num(5)?));
        }
        out.push(PseudoAnnotation { image_id, boxes });
    }
    Ok(out)
}

/// Loads every record of a target-domain split directory
/// (`images/*.png` + `annotations/*.xml`, paired by file stem, sorted by name).
pub fn load_target_dataset(dir: &Path, split: &ClassSplit) -> Result<Vec<TargetImageRecord>> {
    let ann_dir = dir.join("annotations");
    let img_dir = dir.join("images");
    let mut stems: Vec<String> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".xml").map(str::to_string)
        })
        .collect();
    stems.sort();

    let mut records = Vec::with_capacity(stems.len());
    for stem in stems {
        let xml_path = ann_dir.join(format!("{stem}.xml"));
        let xml = std::fs::read_to_string(&xml_path).map_err(|e| Error::io(&xml_path, e))?;
        let anno = parse_voc_annotation(&xml, split, &xml_path.to_string_lossy())?;
        let image = crate::imgio::load_image_tensor(&img_dir.join(format!("{stem}.png")))?;
        records.push(TargetImageRecord {
            image_id: stem,
            image: image,
            ground_truth: anno.objects,
        });
    }
    Ok(records)
}

/// Loads every record of a web-domain split directory (`manifest.tsv` +
/// `images/`), in manifest order.
pub fn load_web_dataset(dir: &Path, split: &ClassSplit) -> Result<Vec<WebImageRecord>> {
    let manifest_path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries = load_web_manifest(&text, split)?;
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let image = crate::imgio::load_image_tensor(&dir.join("images").join(&entry.rel_path))?;
        records.push(WebImageRecord {
            image_id: entry.image_id,
            image,
            image_label: entry.label,
        });
    }
    Ok(records)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.tsv")
}
