//! JSON Lines persistence. Both files start with a header line naming the
//! format and version; each following line is one record.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DatasetError, NamedLayout, Sample, Split};
use crate::layout::{Catalog, LayoutDoc, ObjectDoc, RoomDoc};

pub const DATASET_FORMAT: &str = "roomroam-dataset";
pub const LAYOUTS_FORMAT: &str = "roomroam-layouts";
const VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    room: RoomDoc,
    objects: Vec<ObjectDoc>,
    per_path_resets: Vec<u32>,
    mean_resets: f64,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRecord {
    id: String,
    room: RoomDoc,
    objects: Vec<ObjectDoc>,
}

fn write_header<W: Write>(out: &mut W, format: &str) -> Result<(), DatasetError> {
    writeln!(out, "{}", json!({ "format": format, "version": VERSION }))?;
    Ok(())
}

fn write_line<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *out, record).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_dataset<W: Write>(mut out: W, samples: &[Sample]) -> Result<(), DatasetError> {
    write_header(&mut out, DATASET_FORMAT)?;
    for s in samples {
        let doc = s.layout.to_doc();
        write_line(
            &mut out,
            &SampleRecord {
                id: s.id.clone(),
                room: doc.room,
                objects: doc.objects,
                per_path_resets: s.per_path_resets.clone(),
                mean_resets: s.mean_resets,
                split: s.split,
            },
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_layouts<W: Write>(mut out: W, layouts: &[NamedLayout]) -> Result<(), DatasetError> {
    write_header(&mut out, LAYOUTS_FORMAT)?;
    for l in layouts {
        let doc = l.layout.to_doc();
        write_line(
            &mut out,
            &LayoutRecord {
                id: l.id.clone(),
                room: doc.room,
                objects: doc.objects,
            },
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Non-blank lines with 1-based line numbers, header checked and skipped.
fn records<R: BufRead>(
    input: R,
    format: &str,
) -> Result<Vec<(usize, String)>, DatasetError> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let header_ok = lines
        .first()
        .and_then(|(_, l)| serde_json::from_str::<Header>(l).ok())
        .is_some_and(|h| h.format == format && h.version == VERSION);
    if !header_ok {
        return Err(DatasetError::Header {
            expected: json!({ "format": format, "version": VERSION }).to_string(),
        });
    }
    lines.remove(0);
    Ok(lines)
}

fn parse_record<T: for<'de> Deserialize<'de>>(line: usize, text: &str) -> Result<T, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        if e.inner().is_syntax() || e.inner().is_eof() {
            DatasetError::Parse {
                line,
                message: e.inner().to_string(),
            }
        } else {
            DatasetError::Schema {
                line,
                path: e.path().to_string(),
                message: e.inner().to_string(),
            }
        }
    })
}

fn resolve(
    line: usize,
    room: RoomDoc,
    objects: Vec<ObjectDoc>,
    catalog: &Catalog,
) -> Result<crate::layout::Layout, DatasetError> {
    LayoutDoc { room, objects }
        .resolve(catalog)
        .map_err(|source| DatasetError::Layout { line, source })
}

fn check_unique(seen: &mut HashSet<String>, id: &str) -> Result<(), DatasetError> {
    if !seen.insert(id.to_string()) {
        return Err(DatasetError::DuplicateId(id.to_string()));
    }
    Ok(())
}

/// Parses a dataset file, validating every layout and sample invariant.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Sample>, DatasetError> {
    let catalog = Catalog::default();
    let mut seen = HashSet::new();
    records(input, DATASET_FORMAT)?
        .into_iter()
        .map(|(line, text)| {
            let r: SampleRecord = parse_record(line, &text)?;
            check_unique(&mut seen, &r.id)?;
            let sample = Sample {
                layout: resolve(line, r.room, r.objects, &catalog)?,
                id: r.id,
                per_path_resets: r.per_path_resets,
                mean_resets: r.mean_resets,
                split: r.split,
            };
            sample.check()?;
            Ok(sample)
        })
        .collect()
}

pub fn read_layouts<R: BufRead>(input: R) -> Result<Vec<NamedLayout>, DatasetError> {
    let catalog = Catalog::default();
    let mut seen = HashSet::new();
    records(input, LAYOUTS_FORMAT)?
        .into_iter()
        .map(|(line, text)| {
            let r: LayoutRecord = parse_record(line, &text)?;
            check_unique(&mut seen, &r.id)?;
            Ok(NamedLayout {
                layout: resolve(line, r.room, r.objects, &catalog)?,
                id: r.id,
            })
        })
        .collect()
}
