//! Attention heatmap export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::dataset::Sample;
use super::train::TrainedModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSummary {
    pub patches: usize,
    pub attention_sum: f64,
    pub wrote_pgm: bool,
}

/// Attention weights of `sample` under the trained model.
pub fn attention_for(model: &TrainedModel, sample: &Sample) -> Result<Vec<f64>> {
    model.predict(sample)?.attention.ok_or_else(|| {
        Error::Contract(format!(
            "fusion mode {} has no attention stage",
            model.meta.spec.fusion.name()
        ))
    })
}

/// Writes `patch_index,x,y,attention` rows. Missing coordinates are left blank.
pub fn write_attention_csv(path: &Path, attention: &[f64], coords: Option<&[(i32, i32)]>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "patch_index,x,y,attention").map_err(io)?;
    for (i, a) in attention.iter().enumerate() {
        match coords {
            Some(c) => writeln!(w, "{i},{},{},{a}", c[i].0, c[i].1),
            None => writeln!(w, "{i},,,{a}"),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Grey-level image with one pixel per tile, `round(255 · a / max a)`.
pub fn render_pgm(attention: &[f64], coords: &[(i32, i32)]) -> Result<(usize, usize, Vec<u8>)> {
    if coords.is_empty() {
        return Err(Error::Data("no tiles to render".into()));
    }
    let min_x = coords.iter().map(|c| c.0).min().unwrap_or(0);
    let min_y = coords.iter().map(|c| c.1).min().unwrap_or(0);
    // Tile pitch: smallest positive gap between distinct coordinates.
    let pitch = |vals: Vec<i32>| {
        let mut v = vals;
        v.sort_unstable();
        v.dedup();
        v.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1).max(1)
    };
    let px = pitch(coords.iter().map(|c| c.0).collect());
    let py = pitch(coords.iter().map(|c| c.1).collect());
    let cells: Vec<(usize, usize)> = coords
        .iter()
        .map(|c| (((c.0 - min_x) / px) as usize, ((c.1 - min_y) / py) as usize))
        .collect();
    let width = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let height = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let max = attention.iter().copied().fold(0.0, f64::max);
    let mut pixels = vec![0u8; width * height];
    for (&(cx, cy), &a) in cells.iter().zip(attention) {
        let v = if max > 0.0 { (255.0 * a / max).round() } else { 0.0 };
        pixels[cy * width + cx] = v.clamp(0.0, 255.0) as u8;
    }
    Ok((width, height, pixels))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io)?;
    w.write_all(pixels).map_err(io)?;
    w.flush().map_err(io)
}

/// CSV at `out`, plus a PGM next to it (same stem, `.pgm`) when requested.
pub fn export_heatmap(model: &TrainedModel, sample: &Sample, out: &Path, pgm: bool) -> Result<HeatmapSummary> {
    let attention = attention_for(model, sample)?;
    let coords = sample.bag.coords.as_deref();
    write_attention_csv(out, &attention, coords)?;
    let mut wrote_pgm = false;
    if pgm {
        match coords {
            Some(c) => {
                let (w, h, px) = render_pgm(&attention, c)?;
                write_pgm(&out.with_extension("pgm"), w, h, &px)?;
                wrote_pgm = true;
            }
            None => log::warn!("slide '{}' has no tile coordinates; wrote CSV only", sample.slide_id),
        }
    }
    Ok(HeatmapSummary {
        patches: attention.len(),
        attention_sum: attention.iter().sum(),
        wrote_pgm,
    })
}
