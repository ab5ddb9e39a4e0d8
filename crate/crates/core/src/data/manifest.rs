//! CSV dataset manifests.
//!
//! ```text
//! # dataset: e_ophtha_EX
//! # source_size: 1440x960
//! id,image,od_mask,ex_mask,tags
//! img001,images/img001.png,od/img001.png,ex/img001.png,train;hard
//! ```
//!
//! The optional `# key: value` lines precede the header. Paths are relative
//! to the manifest's directory; mask columns may be empty but not both;
//! `tags` is a `;`-separated list.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::info;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::models::Task;
use crate::preprocess::{load_mask, load_rgb, save_mask, save_rgb, ImageRecord};

pub const HEADER: [&str; 5] = ["id", "image", "od_mask", "ex_mask", "tags"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub od_mask: Option<PathBuf>,
    pub ex_mask: Option<PathBuf>,
    pub tags: Vec<String>,
}

impl ManifestEntry {
    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Od => self.od_mask.is_some(),
            Task::Ex => self.ex_mask.is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: Option<String>,
    /// `(height, width)` declared by the `source_size` comment.
    pub source_size: Option<(usize, usize)>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct Row {
    id: String,
    image: String,
    od_mask: Option<String>,
    ex_mask: Option<String>,
    tags: Option<String>,
}

fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (w, h) = v.trim().split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut name = None;
    let mut source_size = None;
    for (i, line) in text.lines().enumerate() {
        let Some(comment) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        if let Some((k, v)) = comment.split_once(':') {
            match k.trim() {
                "dataset" => name = Some(v.trim().to_string()),
                "source_size" => {
                    source_size = Some(parse_size(v).ok_or_else(|| Error::Manifest {
                        row: i + 1,
                        msg: format!("source_size `{}` is not WIDTHxHEIGHT", v.trim()),
                    })?)
                }
                _ => {}
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Manifest {
            row: 1,
            msg: format!("header must be `{}`, got `{}`", HEADER.join(","), header.join(",")),
        });
    }
    let resolve = |p: Option<String>, row: usize| -> Result<Option<PathBuf>> {
        match p.filter(|s| !s.is_empty()) {
            None => Ok(None),
            Some(s) => {
                let full = root.join(&s);
                if !full.is_file() {
                    return Err(Error::Manifest {
                        row,
                        msg: format!("file not found: {}", full.display()),
                    });
                }
                Ok(Some(full))
            }
        }
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    let headers = reader.headers()?.clone();
    for result in reader.records() {
        let record = result.map_err(|e| Error::Manifest {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let r: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Manifest { row, msg: e.to_string() })?;
        if r.id.is_empty() {
            return Err(Error::Manifest {
                row,
                msg: "empty id".into(),
            });
        }
        if !seen.insert(r.id.clone()) {
            return Err(Error::DuplicateId(r.id));
        }
        let image = resolve(Some(r.image), row)?.ok_or_else(|| Error::Manifest {
            row,
            msg: "empty image path".into(),
        })?;
        let od_mask = resolve(r.od_mask, row)?;
        let ex_mask = resolve(r.ex_mask, row)?;
        if od_mask.is_none() && ex_mask.is_none() {
            return Err(Error::Manifest {
                row,
                msg: format!("`{}` has neither an od_mask nor an ex_mask", r.id),
            });
        }
        let tags = r
            .tags
            .unwrap_or_default()
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        entries.push(ManifestEntry {
            id: r.id,
            image,
            od_mask,
            ex_mask,
            tags,
        });
    }
    Ok(DatasetManifest {
        name,
        source_size,
        entries,
    })
}

/// Reads every image and mask named by the manifest.
pub fn load_records(manifest: &DatasetManifest) -> Result<Vec<ImageRecord>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let rgb = load_rgb(&e.image)?;
            let od = e.od_mask.as_deref().map(load_mask).transpose()?;
            let ex = e.ex_mask.as_deref().map(load_mask).transpose()?;
            ImageRecord::new(e.id.clone(), rgb, od, ex).map_err(|err| Error::Manifest {
                row: 0,
                msg: format!("{}: {err}", e.id),
            })
        })
        .collect()
}

/// Keeps records carrying every mask `tasks` need; logs each skip.
pub fn filter_for_tasks(records: Vec<ImageRecord>, tasks: &[Task]) -> Vec<ImageRecord> {
    records
        .into_iter()
        .filter(|r| {
            let missing: Vec<String> = tasks
                .iter()
                .filter(|t| r.mask(**t).is_none())
                .map(|t| t.to_string())
                .collect();
            if !missing.is_empty() {
                info!("skipping `{}`: no {} mask", r.id, missing.join("/"));
            }
            missing.is_empty()
        })
        .collect()
}

/// Writes images and masks as PNG under `dir` plus `manifest.csv`; returns the
/// manifest path. Every row gets the same `tags` value.
pub fn write_dataset(dir: &Path, name: &str, records: &[ImageRecord], tags: &str) -> Result<PathBuf> {
    for sub in ["images", "od", "ex"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut csv_text = format!("# dataset: {name}\n");
    if let Some(r) = records.first() {
        let (h, w) = r.source_size;
        csv_text.push_str(&format!("# source_size: {w}x{h}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in records {
        let image = format!("images/{}.png", r.id);
        save_rgb(&dir.join(&image), &r.rgb)?;
        let mut cols = vec![r.id.clone(), image];
        for (sub, mask) in [("od", &r.od_mask), ("ex", &r.ex_mask)] {
            match mask {
                Some(m) => {
                    let p = format!("{sub}/{}.png", r.id);
                    save_mask(&dir.join(&p), m)?;
                    cols.push(p);
                }
                None => cols.push(String::new()),
            }
        }
        cols.push(tags.to_string());
        w.write_record(&cols)?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    csv_text.push_str(&String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?);
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv_text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
