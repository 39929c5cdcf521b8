use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{remap_dense, DatasetIndex, DatasetRecord, Domain, Split};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// On-disk corpus layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Layout {
    /// A VeRi-776 split directory (`image_train`, `image_query`, `image_test`)
    /// holding `<id>_c<cam>_<time>_<n>.jpg`.
    Veri776,
    /// A VehicleID root with `image/<name>.jpg` and a list file
    /// (`<name> <id>` per line) relative to the root.
    VehicleId { list: PathBuf },
    /// Any directory tree of `<id>[_c<cam>][_anything].<ext>` files.
    Flat,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub index: DatasetIndex,
    /// Files or list lines that could not be turned into records.
    pub skipped: Vec<String>,
}

fn veri_name() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+)_c(\d+)_(\d+)_(\d+)\.(?i:jpe?g|png|bmp)$").unwrap())
}

fn flat_name() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+)(?:_c(\d+))?(?:_[^.]*)?\.(?i:jpe?g|png|bmp)$").unwrap())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_files(root: &Path, recursive: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                if recursive {
                    stack.push(path);
                }
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn split_for_dir(root: &Path) -> Split {
    match root.file_name().and_then(|n| n.to_str()) {
        Some("image_query") => Split::Query,
        Some("image_test") => Split::Gallery,
        _ => Split::Train,
    }
}

fn scan(root: &Path, layout: &Layout) -> Result<(Vec<DatasetRecord>, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    match layout {
        Layout::Veri776 | Layout::Flat => {
            let (re, recursive) = match layout {
                Layout::Veri776 => (veri_name(), false),
                _ => (flat_name(), true),
            };
            for path in list_files(root, recursive)? {
                if !is_image(&path) {
                    // list files, readmes and the like
                    skipped.push(path.display().to_string());
                    continue;
                }
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let Some(caps) = re.captures(name) else {
                    skipped.push(path.display().to_string());
                    continue;
                };
                let id = caps[1].parse::<u32>();
                let cam = caps.get(2).map(|m| m.as_str().parse::<u32>()).transpose();
                match (id, cam) {
                    (Ok(vehicle_id), Ok(cam)) => records.push(DatasetRecord {
                        image_path: path,
                        vehicle_id,
                        camera_id: cam.unwrap_or(0),
                        domain_tag: Domain::Source,
                    }),
                    _ => skipped.push(path.display().to_string()),
                }
            }
        }
        Layout::VehicleId { list } => {
            let list_path = root.join(list);
            let text = std::fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let parsed = match (parts.next(), parts.next().map(str::parse::<u32>)) {
                    (Some(name), Some(Ok(id))) => Some((name, id)),
                    _ => None,
                };
                let Some((name, vehicle_id)) = parsed else {
                    skipped.push(format!("{}:{}", list_path.display(), lineno + 1));
                    continue;
                };
                let image_path = root.join("image").join(format!("{name}.jpg"));
                if !image_path.is_file() {
                    skipped.push(image_path.display().to_string());
                    continue;
                }
                records.push(DatasetRecord {
                    image_path,
                    vehicle_id,
                    camera_id: 0,
                    domain_tag: Domain::Source,
                });
            }
        }
    }
    for s in &skipped {
        log::warn!("skipping {s}");
    }
    if !skipped.is_empty() {
        log::warn!("{}: skipped {} entries", root.display(), skipped.len());
    }
    Ok((records, skipped))
}

/// Indexes one corpus directory with identities remapped to `0..n`.
pub fn load_dataset_index(root: &Path, layout: &Layout) -> Result<LoadReport> {
    let (mut records, skipped) = scan(root, layout)?;
    remap_dense(&mut [&mut records]);
    let split = match layout {
        Layout::Veri776 => split_for_dir(root),
        _ => Split::Train,
    };
    Ok(LoadReport { index: DatasetIndex::new(split, records), skipped })
}

#[derive(Clone, Debug)]
pub struct VeriSplits {
    pub train: DatasetIndex,
    pub query: DatasetIndex,
    pub gallery: DatasetIndex,
    pub skipped: Vec<String>,
}

/// Loads the three VeRi-776 splits; query and gallery share one id namespace.
pub fn load_veri776(dataset_root: &Path) -> Result<VeriSplits> {
    let train = load_dataset_index(&dataset_root.join("image_train"), &Layout::Veri776)?;
    let (mut query, mut skipped_q) = scan(&dataset_root.join("image_query"), &Layout::Veri776)?;
    let (mut gallery, skipped_g) = scan(&dataset_root.join("image_test"), &Layout::Veri776)?;
    remap_dense(&mut [&mut query, &mut gallery]);
    let mut skipped = train.skipped;
    skipped.append(&mut skipped_q);
    skipped.extend(skipped_g);
    Ok(VeriSplits {
        train: train.index,
        query: DatasetIndex::new(Split::Query, query),
        gallery: DatasetIndex::new(Split::Gallery, gallery),
        skipped,
    })
}
