//! Dataset directories of `NNN_ir.pgm`, `NNN_vi.pgm`, `NNN_mask.pgm` triples.
//! Mask gray levels are class ids.

use std::fs;
use std::path::Path;

use super::pgm::{read_gray8, read_pgm, write_gray8, write_pgm, Gray8};
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::train::SceneSample;

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_pgm(dir.join(format!("{i:03}_ir.pgm")), &s.ir)?;
        write_pgm(dir.join(format!("{i:03}_vi.pgm")), &s.vi)?;
        let mask = Gray8 { height: s.mask.height(), width: s.mask.width(), pixels: s.mask.labels().to_vec() };
        write_gray8(dir.join(format!("{i:03}_mask.pgm")), &mask)?;
    }
    Ok(())
}

/// Reads every `*_ir.pgm` in name order together with its partners.
/// Generation metadata is not stored, so `shapes` comes back empty.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix("_ir.pgm").map(str::to_owned))
        .collect();
    stems.sort();
    stems
        .iter()
        .map(|stem| {
            let ir = read_pgm(dir.join(format!("{stem}_ir.pgm")))?;
            let vi = read_pgm(dir.join(format!("{stem}_vi.pgm")))?;
            let m = read_gray8(dir.join(format!("{stem}_mask.pgm")))?;
            let mask = ClassMask::new(m.height, m.width, m.pixels)?;
            ir.expect_same_shape(&vi)?;
            if ir.shape()[2..] != [m.height, m.width] {
                return Err(Error::Format { what: "dataset", detail: format!("mask of sample {stem} has a different size") });
            }
            Ok(SceneSample { ir, vi, mask, shapes: Vec::new() })
        })
        .collect()
}
