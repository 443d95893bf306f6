//! Activation-memory accounting for whole-image and streaming execution.
//!
//! Whole-image retention: the input and every layer output stay resident until
//! the backward pass consumes them, for every image of the mini-batch.
//!
//! Streaming retention mirrors the engine's meter. Images are processed one at
//! a time, so activation memory does not grow with the batch. The peak is the
//! largest of
//! - split map + one layer input and output of the worst forward tile,
//! - split map + head activations + split-map gradient during head backprop,
//! - split-map gradient + all recomputed layer inputs of the worst backward tile.
//!
//! Parameters and one gradient buffer of the same size are added to both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::network::{LayerSpec, NetworkSpec};
use crate::planner::TilePlan;
use crate::tensor::{DType, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    WholeImage,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub name: String,
    /// Per-image shape (largest tile crop for streaming entries).
    pub dims: Dims,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub mode: ExecutionMode,
    pub batch: usize,
    pub dtype: DType,
    pub activations: Vec<ActivationEntry>,
    pub total_activation_bytes: u64,
    /// Largest set of activations resident at one time.
    pub peak_activation_bytes: u64,
    pub parameter_bytes: u64,
    pub gradient_bytes: u64,
    pub peak_bytes: u64,
}

impl MemoryEstimate {
    pub fn total_bytes(&self) -> u64 {
        self.total_activation_bytes + self.parameter_bytes + self.gradient_bytes
    }

    /// Plain-text table, one activation entry per line.
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>18} {:>16}\n", "activation", "shape", "bytes");
        for e in &self.activations {
            out.push_str(&format!("{:<24} {:>18} {:>16}\n", e.name, e.dims.to_string(), e.bytes));
        }
        out.push_str(&format!(
            "mode {:?}, batch {}, {}: activations {} (peak {}), parameters {}, gradients {}, peak {} ({})\n",
            self.mode,
            self.batch,
            self.dtype,
            self.total_activation_bytes,
            self.peak_activation_bytes,
            self.parameter_bytes,
            self.gradient_bytes,
            self.peak_bytes,
            human_bytes(self.peak_bytes)
        ));
        out
    }
}

/// Decimal units, as in "235 GB".
pub fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 5] = ["B", "kB", "MB", "GB", "TB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1000.0 && u + 1 < UNITS.len() {
        v /= 1000.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}

/// Number of trainable scalars, counted without allocating them.
pub fn parameter_count(net: &NetworkSpec, image_size: usize) -> Result<u64> {
    let dims = net.map_dims(image_size)?;
    Ok(net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match *l {
            LayerSpec::Conv(c) => (c.weight_dims().len() + c.c_out) as u64,
            LayerSpec::Dense { width } => (dims[i].c as u64 + 1) * width as u64,
            _ => 0,
        })
        .sum())
}

fn parameter_bytes(net: &NetworkSpec, image_size: usize, dtype: DType) -> Result<u64> {
    Ok(parameter_count(net, image_size)? * dtype.size_of() as u64)
}

fn layer_name(net: &NetworkSpec, i: usize) -> String {
    format!("layer{i} {}", net.layers[i].name())
}

/// Every activation retained for the backward pass of a whole-image step.
pub fn estimate_whole_image(
    net: &NetworkSpec,
    image_size: usize,
    batch: usize,
    dtype: DType,
) -> Result<MemoryEstimate> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dims = net.map_dims(image_size)?;
    let size = dtype.size_of() as u64;
    let activations: Vec<ActivationEntry> = dims
        .iter()
        .enumerate()
        .map(|(m, d)| ActivationEntry {
            name: if m == 0 {
                "input".to_string()
            } else {
                layer_name(net, m - 1)
            },
            dims: *d,
            bytes: d.len() as u64 * batch as u64 * size,
        })
        .collect();
    let total: u64 = activations.iter().map(|e| e.bytes).sum();
    let params = parameter_bytes(net, image_size, dtype)?;
    Ok(MemoryEstimate {
        mode: ExecutionMode::WholeImage,
        batch,
        dtype,
        activations,
        total_activation_bytes: total,
        peak_activation_bytes: total,
        parameter_bytes: params,
        gradient_bytes: params,
        peak_bytes: total + 2 * params,
    })
}

/// Per-tile activation bytes of the forward pass and the backward recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileFootprint {
    /// Largest input-plus-output pair held while one tile streams forward.
    pub forward: u64,
    /// All recomputed layer inputs held while one tile backpropagates.
    pub backward: u64,
}

pub fn tile_footprints(net: &NetworkSpec, plan: &TilePlan, dtype: DType) -> Result<Vec<TileFootprint>> {
    let dims = net.map_dims(plan.image_size)?;
    let size = dtype.size_of() as u64;
    let bytes = |m: usize, r: &Region| (dims[m].c * r.area()) as u64 * size;
    Ok(plan
        .tiles
        .iter()
        .map(|t| {
            let fwd: Vec<u64> = t
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| bytes(i, &l.forward_input))
                .chain(std::iter::once(bytes(plan.split_index, &t.owned_split_region)))
                .collect();
            TileFootprint {
                forward: fwd.windows(2).map(|w| w[0] + w[1]).max().unwrap_or(0),
                backward: t
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| bytes(i, &l.backward_input))
                    .sum(),
            }
        })
        .collect())
}

/// Peak memory of a streaming step under `plan`, processing images one by one.
pub fn estimate_streaming(net: &NetworkSpec, plan: &TilePlan, batch: usize, dtype: DType) -> Result<MemoryEstimate> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dims = net.map_dims(plan.image_size)?;
    if plan.split_index != net.split_index || plan.map_sizes.len() != net.split_index + 1 {
        return Err(Error::Plan("plan was built for a different network".into()));
    }
    let size = dtype.size_of() as u64;
    let depth = net.split_index;
    let tiles = tile_footprints(net, plan, dtype)?;
    let max_fwd = tiles.iter().map(|t| t.forward).max().unwrap_or(0);
    let max_bwd = tiles.iter().map(|t| t.backward).max().unwrap_or(0);
    let split = dims[depth].len() as u64 * size;
    let head: u64 = dims[depth + 1..].iter().map(|d| d.len() as u64 * size).sum();

    let mut activations = Vec::new();
    for m in 0..depth {
        let widest =
            |f: &dyn Fn(&crate::planner::Tile) -> Region| plan.tiles.iter().map(f).max_by_key(Region::area).unwrap();
        let r = widest(&|t| {
            let (a, b) = (t.layers[m].forward_input, t.layers[m].backward_input);
            if a.area() >= b.area() {
                a
            } else {
                b
            }
        });
        let d = Dims::new(1, dims[m].c, r.height(), r.width());
        activations.push(ActivationEntry {
            name: if m == 0 {
                "input tile".to_string()
            } else {
                format!("{} tile", layer_name(net, m - 1))
            },
            dims: d,
            bytes: d.len() as u64 * size,
        });
    }
    activations.push(ActivationEntry {
        name: "split map".into(),
        dims: dims[depth],
        bytes: split,
    });
    activations.push(ActivationEntry {
        name: "split map gradient".into(),
        dims: dims[depth],
        bytes: split,
    });
    for (m, d) in dims.iter().enumerate().skip(depth + 1) {
        activations.push(ActivationEntry {
            name: layer_name(net, m - 1),
            dims: *d,
            bytes: d.len() as u64 * size,
        });
    }
    let total: u64 = activations.iter().map(|e| e.bytes).sum();
    let peak_act = (split + max_fwd).max(2 * split + head).max(split + max_bwd);
    let params = parameter_bytes(net, plan.image_size, dtype)?;
    Ok(MemoryEstimate {
        mode: ExecutionMode::Streaming,
        batch,
        dtype,
        activations,
        total_activation_bytes: total,
        peak_activation_bytes: peak_act,
        parameter_bytes: params,
        gradient_bytes: params,
        peak_bytes: peak_act + 2 * params,
    })
}

/// Percentage by which the streaming peak undercuts the whole-image peak.
pub fn reduction_report(whole: &MemoryEstimate, stream: &MemoryEstimate) -> Result<f64> {
    if whole.peak_bytes == 0 {
        return Err(Error::Config("whole-image estimate has zero peak".into()));
    }
    if whole.dtype != stream.dtype || whole.batch != stream.batch {
        return Err(Error::Config("estimates differ in dtype or batch size".into()));
    }
    Ok(100.0 * (1.0 - stream.peak_bytes as f64 / whole.peak_bytes as f64))
}
