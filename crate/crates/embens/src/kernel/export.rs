//! Kernel matrix export: long-format CSV and a binary blob with JSON header.

use super::recursion::LayerKernels;
use crate::error::Result;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const CHANNELS: [&str; 5] = [
    "sigma_same",
    "sigma_diff",
    "theta_com_same",
    "theta_com_diff",
    "theta_ind_same",
];

fn channels(k: &LayerKernels) -> [(&'static str, &Array2<f64>); 5] {
    [
        ("sigma_same", &k.sigma_same),
        ("sigma_diff", &k.sigma_diff),
        ("theta_com_same", &k.theta_com_same),
        ("theta_com_diff", &k.theta_com_diff),
        ("theta_ind_same", &k.theta_ind_same),
    ]
}

/// Write one layer's kernels as CSV rows (row, col, channel, value).
pub fn write_kernels_csv(path: &Path, kernels: &LayerKernels) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(["row", "col", "channel", "value"]).map_err(to_io)?;
    let n = kernels.n_points();
    for (name, mat) in channels(kernels) {
        for i in 0..n {
            for j in 0..n {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    name.to_string(),
                    format!("{:.17e}", mat[[i, j]]),
                ])
                .map_err(to_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelBlobHeader {
    format_version: u32,
    dtype: String,
    n_points: usize,
    /// Channel name and element offset of each n×n matrix in the blob.
    channels: Vec<(String, usize)>,
}

/// Write `{base}.json` + `{base}.bin` holding all five kernel channels.
pub fn write_kernels_blob(base: &Path, kernels: &LayerKernels) -> Result<()> {
    let n = kernels.n_points();
    let mut blob = Vec::with_capacity(5 * n * n * 8);
    let mut chans = Vec::new();
    for (idx, (name, mat)) in channels(kernels).into_iter().enumerate() {
        chans.push((name.to_string(), idx * n * n));
        for v in mat.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = KernelBlobHeader {
        format_version: 1,
        dtype: "f64le".into(),
        n_points: n,
        channels: chans,
    };
    fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    let mut f = fs::File::create(base.with_extension("bin"))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Read back a blob written by [`write_kernels_blob`].
pub fn read_kernels_blob(base: &Path) -> Result<LayerKernels> {
    let header: KernelBlobHeader =
        serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
    let blob = fs::read(base.with_extension("bin"))?;
    let n = header.n_points;
    let read_mat = |name: &str| -> Result<Array2<f64>> {
        let (_, off) = header
            .channels
            .iter()
            .find(|(c, _)| c == name)
            .ok_or_else(|| crate::error::Error::Config(format!("missing channel {name}")))?;
        let start = off * 8;
        let vals: Vec<f64> = blob[start..start + n * n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((n, n), vals)
            .map_err(|e| crate::error::Error::Config(e.to_string()))
    };
    Ok(LayerKernels {
        sigma_same: read_mat(CHANNELS[0])?,
        sigma_diff: read_mat(CHANNELS[1])?,
        theta_com_same: read_mat(CHANNELS[2])?,
        theta_com_diff: read_mat(CHANNELS[3])?,
        theta_ind_same: read_mat(CHANNELS[4])?,
    })
}

fn to_io(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Io(std::io::Error::other(e))
}
