//! Export of per-layer, per-channel activation maps as CSV grids and 8-bit
//! PGM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evade::{LayerKind, VariationalSample};
use crate::tensor::{Scalar, Tensor};
use crate::world_model::WorldModel;

/// Write the input and output maps of each layer in `layers` (every named
/// layer when empty) for one transition. For layer `L` and channel `k` the
/// files are `L/in_k.{csv,pgm}` and `L/out_k.{csv,pgm}`; weighting layers
/// also get `L/factors.csv` with the perturbed per-channel factors. Returns
/// the paths written.
pub fn dump_activations<S: Scalar>(
    model: &WorldModel<S>,
    sample: &VariationalSample<S>,
    obs_stack: &Tensor<S>,
    action: usize,
    layers: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let known = model.layer_names();
    if let Some(bad) = layers.iter().find(|l| !known.contains(l)) {
        return Err(Error::invalid(format!("unknown layer {bad}; known layers: {}", known.join(", "))));
    }
    let activations = model.layer_activations(sample, obs_stack, action)?;
    let mut written = Vec::new();
    for (name, input, output) in &activations {
        if !layers.is_empty() && !layers.contains(name) {
            continue;
        }
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir)?;
        for (prefix, t) in [("in", input), ("out", output)] {
            let [_, c, h, w] = t.shape() else {
                return Err(Error::shape("dump_activations", format!("layer {name} map {:?} is not 4-D", t.shape())));
            };
            for k in 0..*c {
                let map = &t.data()[k * h * w..(k + 1) * h * w];
                let values: Vec<f64> = map.iter().map(|v| v.as_f64()).collect();
                let csv = dir.join(format!("{prefix}_{k}.csv"));
                fs::write(&csv, csv_grid(&values, *w))?;
                let pgm = dir.join(format!("{prefix}_{k}.pgm"));
                fs::write(&pgm, pgm_image(&values, *h, *w))?;
                written.extend([csv, pgm]);
            }
        }
        if model.noisy_groups().any(|g| g.name == *name && g.kind == Some(LayerKind::Weighting)) {
            let theta = model.perturbed(name, sample)?;
            let c = theta.shape()[0];
            let mut text = String::from("channel,factor\n");
            for k in 0..c {
                text.push_str(&format!("{k},{}\n", theta.data()[k * c + k].as_f64()));
            }
            let path = dir.join("factors.csv");
            fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Comma-separated rows of `width` values each.
pub fn csv_grid(values: &[f64], width: usize) -> String {
    values.chunks(width).map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join("\n") + "\n"
}

/// Binary greyscale PGM (`P5`), min-max normalized to 0..=255. A constant
/// map is written as all zeros.
pub fn pgm_image(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }));
    out
}
