//! `path,label` CSV manifests of PPM/PGM images.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::pnm;
use super::Dataset;
use crate::error::{Result, TensorError};

/// Optional sidecar next to the manifest listing one class name per line.
pub const CLASS_NAMES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
    /// (height, width) shared by every image.
    pub extent: (usize, usize),
}

/// Parses manifest text. Paths are relative to `root`. The class count is
/// `classes` when given, else the length of `names`, else one past the
/// largest label.
pub fn parse_manifest(
    text: &str,
    root: &Path,
    manifest: &Path,
    classes: Option<usize>,
    names: Option<Vec<String>>,
) -> Result<(Vec<(PathBuf, usize)>, Vec<String>)> {
    let bad = |m: String| TensorError::format(manifest, m);
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("path,label") => {}
        other => return Err(bad(format!("malformed header {other:?}, expected \"path,label\""))),
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, label) = line
            .rsplit_once(',')
            .ok_or_else(|| bad(format!("line {}: expected path,label", n + 2)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| bad(format!("line {}: invalid label {label:?}", n + 2)))?;
        entries.push((root.join(path.trim()), label));
    }
    let count = classes
        .or(names.as_ref().map(Vec::len))
        .unwrap_or_else(|| entries.iter().map(|e| e.1 + 1).max().unwrap_or(0));
    for (path, label) in &entries {
        if *label >= count {
            return Err(bad(format!(
                "{}: label {label} out of range for {count} classes",
                path.display()
            )));
        }
    }
    let names = match names {
        Some(n) if n.len() == count => n,
        Some(n) => {
            return Err(bad(format!(
                "{CLASS_NAMES_FILE} lists {} names for {count} classes",
                n.len()
            )))
        }
        None => (0..count).map(|c| format!("class{c}")).collect(),
    };
    Ok((entries, names))
}

/// Reads the manifest and decodes every image (in parallel, order kept).
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<(DatasetManifest, Dataset)> {
    let text = std::fs::read_to_string(path).map_err(|e| TensorError::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let names_path = root.join(CLASS_NAMES_FILE);
    let names = if names_path.exists() {
        let t = std::fs::read_to_string(&names_path).map_err(|e| TensorError::io(&names_path, e))?;
        Some(t.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect())
    } else {
        None
    };
    let (entries, class_names) = parse_manifest(&text, &root, path, classes, names)?;
    if entries.is_empty() {
        return Err(TensorError::EmptyDataset("load_dataset"));
    }
    let images = entries
        .par_iter()
        .map(|(p, _)| pnm::read(p))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (images[0].height, images[0].width);
    let mut pixels = Vec::with_capacity(images.len() * 3 * h * w);
    for (img, (p, _)) in images.iter().zip(&entries) {
        if (img.height, img.width) != (h, w) {
            return Err(TensorError::format(
                p,
                format!("extent {}x{} differs from {h}x{w}", img.height, img.width),
            ));
        }
        pixels.extend(pnm::to_chw(img));
    }
    let labels = entries.iter().map(|e| e.1).collect();
    let data = Dataset::new(pixels, labels, class_names.len(), 3, h, w)?;
    let manifest = DatasetManifest {
        root,
        entries,
        class_names,
        extent: (h, w),
    };
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_out_of_range() {
        let err = parse_manifest("path,label\na.pgm,7\n", Path::new("/d"), Path::new("/d/m.csv"), Some(5), None)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.pgm") && msg.contains("out of range"), "{msg}");
    }

    #[test]
    fn header_is_required() {
        assert!(parse_manifest("file,class\n", Path::new("."), Path::new("m.csv"), None, None).is_err());
    }

    #[test]
    fn class_count_defaults_to_max_label() {
        let (e, names) =
            parse_manifest("path,label\na,0\nb,2\n", Path::new("r"), Path::new("m"), None, None).unwrap();
        assert_eq!(e[1], (PathBuf::from("r/b"), 2));
        assert_eq!(names.len(), 3);
    }
}
