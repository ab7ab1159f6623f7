use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::data::Sample;
use crate::model::Translator;
use crate::numerics::Tensor;

fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes every encoder attention map of `sample` to `out`:
/// `layer{l}_head{h}_weights.csv` (one row per query) and, for sampled
/// variants, `layer{l}_head{h}_positions.csv` with the fractional frame
/// position of each weight. Returns the written paths.
pub fn dump_attention(model: &Translator, sample: &Sample, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let clip = sample.features().to_tensor();
    let enc = model.encode(&clip, &vec![true; clip.rows()])?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for map in &enc.maps {
        let stem = format!("layer{}_head{}", map.layer, map.head);
        let path = out.join(format!("{stem}_weights.csv"));
        std::fs::write(&path, matrix_csv(&map.weights))?;
        written.push(path);
        if let Some(p) = &map.positions {
            let path = out.join(format!("{stem}_positions.csv"));
            std::fs::write(&path, matrix_csv(p))?;
            written.push(path);
        }
    }
    Ok(written)
}
