use super::record::{load_tensor, save_tensor};
use crate::augment::Dataset;
use crate::{Error, Result};
use std::path::Path;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# xsmae-tiles";

/// Write `manifest.txt` plus one tensor file per image. The header line
/// records `H W C num_classes`; every record is `file label gsd`.
pub fn write_tiles(dir: &Path, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::config("refusing to write an empty dataset"));
    }
    std::fs::create_dir_all(dir)?;
    let (h, w, c) = ds.image_shape();
    let mut manifest = format!("{HEADER} {h} {w} {c} {}\n", ds.num_classes);
    for (i, img) in ds.images.iter().enumerate() {
        let name = format!("img_{i:05}.xst");
        save_tensor(&dir.join(&name), img)?;
        manifest.push_str(&format!("{name} {} {}\n", ds.labels[i], ds.gsd[i]));
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_tiles(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix(HEADER))
        .ok_or_else(|| Error::Format("manifest header missing".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Format(format!("bad header value {v:?}")))
        })
        .collect::<Result<_>>()?;
    let [h, w, c, classes] = dims[..] else {
        return Err(Error::Format("header must list H W C num_classes".into()));
    };
    let (mut images, mut labels, mut gsd) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [file, label, g] = parts[..] else {
            return Err(Error::Format(format!(
                "manifest line {}: expected file label gsd",
                n + 2
            )));
        };
        let bad = |what: &str| Error::Format(format!("manifest line {}: bad {what}", n + 2));
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::Format(format!("manifest entry {file} has no file")));
        }
        let img = load_tensor::<f32>(&path)?;
        if img.shape() != [h, w, c] {
            return Err(Error::shape("tile", img.shape(), &[h, w, c]));
        }
        images.push(img);
        labels.push(label.parse().map_err(|_| bad("label"))?);
        gsd.push(g.parse().map_err(|_| bad("gsd"))?);
    }
    Dataset::new(images, labels, gsd, classes)
}
