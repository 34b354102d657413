use std::io::Write;
use std::path::Path;

use super::protocol::Embedder;
use crate::data::{stack_images, DatasetSplit};
use crate::error::Result;
use crate::model::flatten_features;

/// Writes the first `max_per_class` images of every class as CSV rows
/// `image_id,class,branch,e0,…`, one row per image and head. The first line
/// is a `# embedding_dim=D` comment.
pub fn export_embeddings(model: &dyn Embedder, split: &DatasetSplit, max_per_class: usize, path: &Path) -> Result<usize> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut rows = 0;
    let mut header_written = false;
    for (class, imgs) in split.classes.iter().zip(&split.images) {
        let take = &imgs[..imgs.len().min(max_per_class)];
        if take.is_empty() {
            continue;
        }
        let batch = stack_images(take.iter().map(|r| r.pixels.as_ref()))?;
        let f = model.embed(batch.view())?;
        let views = [("global", flatten_features(f.global_map.view())), ("local", flatten_features(f.local_map.view()))];
        if !header_written {
            let dim = views[0].1.ncols();
            writeln!(out, "# embedding_dim={dim}")?;
            let cols: Vec<String> = (0..dim).map(|k| format!("e{k}")).collect();
            writeln!(out, "image_id,class,branch,{}", cols.join(","))?;
            header_written = true;
        }
        for (i, rec) in take.iter().enumerate() {
            for (branch, flat) in &views {
                let values: Vec<String> = flat.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{},{},{},{}", rec.id, class, branch, values.join(","))?;
                rows += 1;
            }
        }
    }
    out.flush()?;
    Ok(rows)
}
