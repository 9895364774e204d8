//! Grayscale map export and origin trajectory CSVs.

use std::fmt::Write as _;
use std::path::Path;

use super::pnm::{self, Image};
use crate::error::{Result, TensorError};

/// Min-max scaling to 0..=255; a constant map becomes mid-gray 128.
pub fn scale_to_gray(values: &[f64]) -> Result<Vec<u8>> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "export_map",
            index,
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![128; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect())
}

/// Writes a row-major `height`×`width` map as a P5 image.
pub fn export_map(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(TensorError::DataLength {
            op: "export_map",
            shape: vec![height, width],
            len: values.len(),
        });
    }
    let img = Image {
        width,
        height,
        channels: 1,
        data: scale_to_gray(values)?,
    };
    pnm::write(path, &img)
}

/// `epoch,origin_index,x,y` rows, one per origin per snapshot.
pub fn trajectory_csv(snapshots: &[(usize, Vec<[f64; 2]>)]) -> String {
    let mut out = String::from("epoch,origin_index,x,y\n");
    for (epoch, origins) in snapshots {
        for (k, o) in origins.iter().enumerate() {
            writeln!(out, "{epoch},{k},{},{}", o[0], o[1]).unwrap();
        }
    }
    out
}

pub fn write_trajectory(snapshots: &[(usize, Vec<[f64; 2]>)], path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_csv(snapshots)).map_err(|e| TensorError::io(path, e))
}

/// Parses a trajectory CSV back into (epoch, index, x, y) rows.
pub fn parse_trajectory(text: &str) -> Result<Vec<(usize, usize, f64, f64)>> {
    let bad = |l: &str| TensorError::Config(format!("malformed trajectory row {l:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok((
                f[0].parse().map_err(|_| bad(l))?,
                f[1].parse().map_err(|_| bad(l))?,
                f[2].parse().map_err(|_| bad(l))?,
                f[3].parse().map_err(|_| bad(l))?,
            ))
        })
        .collect()
}
