//! Dataset manifests: a small CSV (`path,eye_id,grade`) listing images, with
//! records grouped by eye. Relative image paths are resolved against the
//! manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub eye_id: String,
    pub grade: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EyeGroup {
    pub eye_id: String,
    /// Worst grade among the eye's images — labels attach to eyes, so every
    /// member trains against this grade.
    pub grade: usize,
    /// Indices into the entry list, in file order.
    pub members: Vec<usize>,
}

pub fn load_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, Vec<EyeGroup>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: String| {
        Error::Format(format!("{}:{line}: {what}", path.display()))
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "path,eye_id,grade" => {}
        Some((_, header)) => {
            return Err(bad(1, format!("expected header path,eye_id,grade, got {header:?}")))
        }
        None => return Err(bad(1, "empty manifest".into())),
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let grade: usize = fields[2]
            .parse()
            .map_err(|_| bad(i + 1, format!("grade {:?} is not an integer", fields[2])))?;
        if grade > 4 {
            return Err(bad(i + 1, format!("grade {grade} outside 0..=4")));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(bad(i + 1, format!("duplicate path {:?}", fields[0])));
        }
        let rel = Path::new(fields[0]);
        let resolved = if rel.is_absolute() { rel.to_path_buf() } else { base.join(rel) };
        entries.push(ManifestEntry {
            path: resolved,
            eye_id: fields[1].to_string(),
            grade,
        });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no images", path.display())));
    }
    let groups = group_by_eye(&entries);
    Ok((entries, groups))
}

/// Group entry indices by eye id, in order of first appearance.
pub fn group_by_eye(entries: &[ManifestEntry]) -> Vec<EyeGroup> {
    let mut groups: Vec<EyeGroup> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match groups.iter_mut().find(|g| g.eye_id == e.eye_id) {
            Some(g) => {
                g.grade = g.grade.max(e.grade);
                g.members.push(i);
            }
            None => groups.push(EyeGroup {
                eye_id: e.eye_id.clone(),
                grade: e.grade,
                members: vec![i],
            }),
        }
    }
    groups
}

/// Rows are written with the paths exactly as given (callers pass paths
/// relative to the manifest's directory).
pub fn save_manifest(path: &Path, rows: &[(String, String, usize)]) -> Result<()> {
    let mut text = String::from("path,eye_id,grade\n");
    for (p, eye, grade) in rows {
        text.push_str(&format!("{p},{eye},{grade}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
