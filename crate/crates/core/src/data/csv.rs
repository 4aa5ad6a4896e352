//! Detection and ground-truth CSV files. Both share one schema; the
//! ground-truth form simply has no score column.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::{DetectionRecord, GroundTruth};

pub const DETECTION_HEADER: &str = "image_id,class_id,score,x_min,y_min,x_max,y_max";
pub const GT_HEADER: &str = "image_id,class_id,x_min,y_min,x_max,y_max";

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '\n', '\r']) {
        return Err(Error::Data(format!("image id {id:?} cannot be written to CSV")));
    }
    Ok(())
}

pub fn write_detection_header<W: Write>(out: &mut W) -> Result<()> {
    writeln!(out, "{DETECTION_HEADER}")?;
    Ok(())
}

/// One line per detection, floats with six decimals.
pub fn write_detection_rows<W: Write>(out: &mut W, dets: &[DetectionRecord]) -> Result<()> {
    for d in dets {
        check_id(&d.image_id)?;
        let b = &d.bbox;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            d.image_id, d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        )?;
    }
    Ok(())
}

pub fn write_detections<W: Write>(out: &mut W, dets: &[DetectionRecord]) -> Result<()> {
    write_detection_header(out)?;
    write_detection_rows(out, dets)
}

pub fn write_ground_truth<W: Write>(out: &mut W, gts: &[GroundTruth]) -> Result<()> {
    writeln!(out, "{GT_HEADER}")?;
    for g in gts {
        check_id(&g.image_id)?;
        let b = &g.bbox;
        writeln!(out, "{},{},{},{},{},{}", g.image_id, g.class_id, b.x_min, b.y_min, b.x_max, b.y_max)?;
    }
    Ok(())
}

struct Row<'a> {
    image_id: &'a str,
    class_id: usize,
    score: Option<f64>,
    bbox: BBox,
}

fn parse_rows<'a>(text: &'a str, path: &Path, header: &str, scored: bool) -> Result<Vec<Row<'a>>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::format(path, format!("expected header `{header}`"))),
    }
    let width = if scored { 7 } else { 6 };
    lines
        .map(|(n, line)| {
            let bad = |msg: String| Error::format(path, format!("line {}: {msg}", n + 1));
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != width {
                return Err(bad(format!("{} fields, expected {width}", cells.len())));
            }
            let num = |i: usize| -> Result<f64> {
                cells[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("bad number `{}`", cells[i])))
            };
            let class_id = cells[1].parse().map_err(|_| bad(format!("bad class id `{}`", cells[1])))?;
            let off = if scored { 3 } else { 2 };
            let bbox = BBox::try_new(num(off)?, num(off + 1)?, num(off + 2)?, num(off + 3)?)
                .map_err(|e| bad(e.to_string()))?;
            if cells[0].is_empty() {
                return Err(bad("empty image id".into()));
            }
            Ok(Row {
                image_id: cells[0],
                class_id,
                score: if scored { Some(num(2)?) } else { None },
                bbox,
            })
        })
        .collect()
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    Ok(parse_rows(text, path, DETECTION_HEADER, true)?
        .into_iter()
        .map(|r| DetectionRecord {
            image_id: r.image_id.to_string(),
            class_id: r.class_id,
            score: r.score.expect("scored rows"),
            bbox: r.bbox,
        })
        .collect())
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<GroundTruth>> {
    Ok(parse_rows(text, path, GT_HEADER, false)?
        .into_iter()
        .map(|r| GroundTruth {
            image_id: r.image_id.to_string(),
            class_id: r.class_id,
            bbox: r.bbox,
        })
        .collect())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_detections(&fs::read_to_string(path)?, path)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    parse_ground_truth(&fs::read_to_string(path)?, path)
}
