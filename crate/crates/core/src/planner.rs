//! Tile planning: per-layer overlaps, region back-projection, and plan validation.
//!
//! Maps are numbered by depth: map 0 is the image and map `i + 1` is the output
//! of streaming layer `i`, so map `L = split_index` is the split-layer map.
//!
//! For every tile the planner derives, per streaming layer `i`:
//! - `owned_output`: the tile's share of map `i + 1`. Owned regions partition
//!   every map; weight gradients of layer `i` only sum positions in this region.
//! - `forward_input`: region of map `i` read by the forward tile pass. It is the
//!   back-projection of the next layer's forward input, ending at the owned
//!   split region.
//! - `grad_output`: region of map `i + 1` whose gradient the tile reproduces
//!   exactly. It holds the owned region plus every output reached by the grad
//!   region one layer down.
//! - `backward_input`: region of map `i` recomputed during the backward pass,
//!   enough to rebuild `grad_output` activations and those of the layer above.
//!
//! All composition is per axis, so rectangles are products of 1-D intervals.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Interval, Region};
use crate::network::{LayerSpec, NetworkSpec};
use crate::nn::Footprint;

/// Halo pixels on one tile edge for the forward pass: `(k - s) + b*((z - k) mod s)`.
///
/// `k - s` is clamped at zero when the stride exceeds the kernel.
pub fn forward_overlap(k: usize, s: usize, z: usize, b: bool) -> Result<usize> {
    overlap(k, s, z, b, 1)
}

/// Halo pixels on one tile edge for the backward pass: `2(k - s) + b*((z - k) mod s)`.
pub fn backward_overlap(k: usize, s: usize, z: usize, b: bool) -> Result<usize> {
    overlap(k, s, z, b, 2)
}

fn overlap(k: usize, s: usize, z: usize, b: bool, factor: usize) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::Network(format!("invalid kernel k={k} stride s={s}")));
    }
    if z < k {
        return Err(Error::Shape(format!("image size {z} smaller than kernel {k}")));
    }
    let remainder = if b { (z - k) % s } else { 0 };
    Ok(factor * k.saturating_sub(s) + remainder)
}

/// Back-projected region plus the padding each side needs at the true map border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backprojection {
    pub region: Region,
    /// Padding pixels on `[top, left, bottom, right]`.
    pub clip: [usize; 4],
}

/// Minimal input region of `layer` whose processing yields `out`.
pub fn backproject_region(layer: &LayerSpec, out: &Region, in_map_size: usize) -> Result<Backprojection> {
    let fp = layer
        .footprint()
        .ok_or_else(|| Error::Network(format!("{} has no spatial footprint", layer.name())))?;
    let z_out = fp.out_len(in_map_size)?;
    if out.is_empty() || out.y1 > z_out || out.x1 > z_out {
        return Err(Error::Shape(format!(
            "region {out} outside the {z_out}x{z_out} output map"
        )));
    }
    let rows = fp.backproject(out.rows(), in_map_size)?;
    let cols = fp.backproject(out.cols(), in_map_size)?;
    Ok(Backprojection {
        region: Region::from_axes(rows.interval, cols.interval),
        clip: [rows.clip_before, cols.clip_before, rows.clip_after, cols.clip_after],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub const fn tiles(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Overlap values of one streaming layer, interior and right/bottom edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHalo {
    pub layer: usize,
    pub kind: String,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub forward: usize,
    pub backward: usize,
    pub forward_edge: usize,
    pub backward_edge: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayerRegions {
    pub forward_input: Region,
    pub owned_output: Region,
    pub backward_input: Region,
    pub grad_output: Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    /// Set on the last tile row (its bottom edge meets the image remainder).
    pub b_bottom: bool,
    /// Set on the last tile column.
    pub b_right: bool,
    pub input_region_forward: Region,
    pub input_region_backward: Region,
    pub owned_split_region: Region,
    pub layers: Vec<TileLayerRegions>,
}

/// Immutable tiling of one network at one image size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub schema_version: u32,
    pub image_size: usize,
    pub grid: Grid,
    pub split_index: usize,
    /// Side length of map `0..=split_index`.
    pub map_sizes: Vec<usize>,
    /// Product of strides of layers `0..m` for map `m`.
    pub stride_products: Vec<usize>,
    pub halos: Vec<LayerHalo>,
    /// Row-major.
    pub tiles: Vec<Tile>,
}

pub const PLAN_SCHEMA_VERSION: u32 = 1;

impl TilePlan {
    pub fn split_size(&self) -> usize {
        self.map_sizes[self.split_index]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn streaming_footprints(net: &NetworkSpec) -> Vec<Footprint> {
    net.streaming_layers()
        .iter()
        .map(|l| l.footprint().expect("streaming layers are spatial"))
        .collect()
}

/// Floor-equal cut points of `[0, z)` into `n` parts, remainder to the last.
fn equal_cuts(z: usize, n: usize) -> Vec<usize> {
    let base = z / n;
    (0..n).map(|i| i * base).chain(std::iter::once(z)).collect()
}

/// Maps cut points on a layer's output to its input, at each cut window's center.
fn cuts_below(fp: &Footprint, cuts_out: &[usize], z_in: usize) -> Vec<usize> {
    let last = cuts_out.len() - 1;
    cuts_out
        .iter()
        .enumerate()
        .map(|(j, &c)| match j {
            0 => 0,
            j if j == last => z_in,
            _ => {
                let centre = (c * fp.s + (fp.k - 1) / 2) as i64 - fp.p as i64;
                centre.clamp(0, z_in as i64) as usize
            }
        })
        .collect()
}

/// Per-axis intervals of one tile.
struct AxisPlan {
    /// Index `m` holds map `m` (index 0 unused).
    owned: Vec<Interval>,
    forward: Vec<Interval>,
    grad: Vec<Interval>,
    recompute: Vec<Interval>,
}

fn plan_axis(fps: &[Footprint], sizes: &[usize], cuts: &[Vec<usize>], t: usize) -> Result<AxisPlan> {
    let depth = fps.len();
    let owned: Vec<Interval> = cuts
        .iter()
        .map(|c| {
            if c.is_empty() {
                Interval::new(0, 0)
            } else {
                Interval::new(c[t], c[t + 1])
            }
        })
        .collect();

    let mut forward = vec![Interval::new(0, 0); depth + 1];
    forward[depth] = owned[depth];
    for i in (0..depth).rev() {
        forward[i] = fps[i].backproject(forward[i + 1], sizes[i])?.interval;
    }

    let mut grad = vec![Interval::new(0, 0); depth + 1];
    grad[1] = owned[1];
    for m in 2..=depth {
        grad[m] = match fps[m - 1].reach(grad[m - 1], sizes[m - 1])? {
            Some(r) => owned[m].hull(&r),
            None => owned[m],
        };
    }

    let mut recompute = vec![Interval::new(0, 0); depth];
    for i in (0..depth).rev() {
        let need = fps[i].backproject(grad[i + 1], sizes[i])?.interval;
        recompute[i] = if i + 1 < depth {
            need.hull(&fps[i].backproject(recompute[i + 1], sizes[i])?.interval)
        } else {
            need
        };
    }
    Ok(AxisPlan {
        owned,
        forward,
        grad,
        recompute,
    })
}

/// Partitions the split map into `grid` owned regions and derives every tile region.
pub fn build_tile_plan(net: &NetworkSpec, image_size: usize, grid: Grid) -> Result<TilePlan> {
    let dims = net.map_dims(image_size)?;
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::Plan("grid must have at least one row and column".into()));
    }
    let depth = net.split_index;
    let fps = streaming_footprints(net);
    let sizes: Vec<usize> = dims[..=depth].iter().map(|d| d.h).collect();
    let split = sizes[depth];
    if split < grid.rows || split < grid.cols {
        return Err(Error::Plan(format!(
            "grid {grid} is larger than the {split}x{split} split map"
        )));
    }

    let axis_cuts = |n: usize| -> Result<Vec<Vec<usize>>> {
        let mut cuts = vec![Vec::new(); depth + 1];
        cuts[depth] = equal_cuts(split, n);
        for m in (1..depth).rev() {
            let below = cuts_below(&fps[m], &cuts[m + 1], sizes[m]);
            if below.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Plan(format!(
                    "{n} tiles per axis leave an empty owned region on map {m} ({} px)",
                    sizes[m]
                )));
            }
            cuts[m] = below;
        }
        Ok(cuts)
    };
    let row_cuts = axis_cuts(grid.rows)?;
    let col_cuts = axis_cuts(grid.cols)?;
    let row_plans = (0..grid.rows)
        .map(|t| plan_axis(&fps, &sizes, &row_cuts, t))
        .collect::<Result<Vec<_>>>()?;
    let col_plans = (0..grid.cols)
        .map(|t| plan_axis(&fps, &sizes, &col_cuts, t))
        .collect::<Result<Vec<_>>>()?;

    let mut tiles = Vec::with_capacity(grid.tiles());
    for (row, rp) in row_plans.iter().enumerate() {
        for (col, cp) in col_plans.iter().enumerate() {
            let rect = |a: Interval, b: Interval| Region::from_axes(a, b);
            let layers = (0..depth)
                .map(|i| TileLayerRegions {
                    forward_input: rect(rp.forward[i], cp.forward[i]),
                    owned_output: rect(rp.owned[i + 1], cp.owned[i + 1]),
                    backward_input: rect(rp.recompute[i], cp.recompute[i]),
                    grad_output: rect(rp.grad[i + 1], cp.grad[i + 1]),
                })
                .collect();
            tiles.push(Tile {
                row,
                col,
                b_bottom: row + 1 == grid.rows,
                b_right: col + 1 == grid.cols,
                input_region_forward: rect(rp.forward[0], cp.forward[0]),
                input_region_backward: rect(rp.recompute[0], cp.recompute[0]),
                owned_split_region: rect(rp.owned[depth], cp.owned[depth]),
                layers,
            });
        }
    }

    let mut stride_products = vec![1];
    for fp in &fps {
        stride_products.push(stride_products.last().unwrap() * fp.s);
    }
    let halos = net
        .streaming_layers()
        .iter()
        .zip(&fps)
        .enumerate()
        .map(|(i, (layer, fp))| {
            let z = sizes[i];
            Ok(LayerHalo {
                layer: i,
                kind: layer.name().to_string(),
                k: fp.k,
                s: fp.s,
                p: fp.p,
                input_size: z,
                output_size: sizes[i + 1],
                forward: forward_overlap(fp.k, fp.s, z + 2 * fp.p, false)?,
                backward: backward_overlap(fp.k, fp.s, z + 2 * fp.p, false)?,
                forward_edge: forward_overlap(fp.k, fp.s, z + 2 * fp.p, true)?,
                backward_edge: backward_overlap(fp.k, fp.s, z + 2 * fp.p, true)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TilePlan {
        schema_version: PLAN_SCHEMA_VERSION,
        image_size,
        grid,
        split_index: depth,
        map_sizes: sizes,
        stride_products,
        halos,
        tiles,
    })
}

/// Plan property checked by [`validate_tile_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Structure,
    Bounds,
    Partition,
    Alignment,
    Sufficiency,
    EdgeFlags,
    BackwardSuperset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub predicate: Predicate,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// First violated predicate, if any.
    pub violation: Option<Violation>,
}

impl ValidationReport {
    pub fn into_result(self) -> Result<()> {
        match self.violation {
            None => Ok(()),
            Some(v) => Err(Error::Plan(format!("{:?}: {}", v.predicate, v.detail))),
        }
    }
}

fn fail(predicate: Predicate, detail: String) -> std::result::Result<(), Violation> {
    Err(Violation { predicate, detail })
}

/// Whether `start` lands on the sampling lattice of the outputs beginning at `out_start`.
fn on_lattice(fp: &Footprint, start: usize, out_start: usize) -> bool {
    let need = (out_start * fp.s) as i64 - fp.p as i64;
    start as i64 == need.max(0)
}

/// Checks plan invariants in a fixed order and reports the first failure.
pub fn validate_tile_plan(plan: &TilePlan, net: &NetworkSpec) -> ValidationReport {
    match check_plan(plan, net) {
        Ok(()) => ValidationReport {
            passed: true,
            violation: None,
        },
        Err(v) => ValidationReport {
            passed: false,
            violation: Some(v),
        },
    }
}

fn check_plan(plan: &TilePlan, net: &NetworkSpec) -> std::result::Result<(), Violation> {
    use Predicate::*;
    let depth = net.split_index;
    let dims = match net.map_dims(plan.image_size) {
        Ok(d) => d,
        Err(e) => return fail(Structure, e.to_string()),
    };
    let sizes: Vec<usize> = dims[..=depth].iter().map(|d| d.h).collect();
    if plan.split_index != depth || plan.map_sizes != sizes {
        return fail(Structure, "split index or map sizes differ from the network".into());
    }
    if plan.grid.tiles() == 0 || plan.tiles.len() != plan.grid.tiles() {
        return fail(Structure, format!("{} tiles for grid {}", plan.tiles.len(), plan.grid));
    }
    for (t, tile) in plan.tiles.iter().enumerate() {
        if tile.layers.len() != depth || (tile.row, tile.col) != (t / plan.grid.cols, t % plan.grid.cols) {
            return fail(Structure, format!("tile {t} is malformed or out of row-major order"));
        }
    }
    let fps = streaming_footprints(net);

    for (t, tile) in plan.tiles.iter().enumerate() {
        let mut regions = vec![
            (0, tile.input_region_forward),
            (0, tile.input_region_backward),
            (depth, tile.owned_split_region),
        ];
        for (i, lr) in tile.layers.iter().enumerate() {
            regions.extend([
                (i, lr.forward_input),
                (i, lr.backward_input),
                (i + 1, lr.owned_output),
                (i + 1, lr.grad_output),
            ]);
        }
        for (m, r) in regions {
            if r.is_empty() || r.y1 > sizes[m] || r.x1 > sizes[m] {
                return fail(
                    Bounds,
                    format!("tile {t}: region {r} outside map {m} ({} px)", sizes[m]),
                );
            }
        }
    }

    for m in 1..=depth {
        let owned: Vec<Region> = plan.tiles.iter().map(|t| t.layers[m - 1].owned_output).collect();
        let area: usize = owned.iter().map(Region::area).sum();
        if area != sizes[m] * sizes[m] {
            return fail(
                Partition,
                format!(
                    "owned regions of map {m} cover {area} of {} pixels",
                    sizes[m] * sizes[m]
                ),
            );
        }
        for a in 0..owned.len() {
            for b in a + 1..owned.len() {
                if !owned[a].intersect(&owned[b]).is_empty() {
                    return fail(
                        Partition,
                        format!("owned regions of tiles {a} and {b} overlap on map {m}"),
                    );
                }
            }
        }
    }
    for (t, tile) in plan.tiles.iter().enumerate() {
        if tile.owned_split_region != tile.layers[depth - 1].owned_output {
            return fail(
                Partition,
                format!("tile {t}: owned split region disagrees with layer table"),
            );
        }
    }

    for (t, tile) in plan.tiles.iter().enumerate() {
        for (i, fp) in fps.iter().enumerate() {
            let lr = &tile.layers[i];
            let next_fwd = tile
                .layers
                .get(i + 1)
                .map_or(tile.owned_split_region, |n| n.forward_input);
            let fwd = lr.forward_input;
            let aligned = on_lattice(fp, fwd.y0, next_fwd.y0) && on_lattice(fp, fwd.x0, next_fwd.x0);
            let bwd = lr.backward_input;
            let bwd_aligned = [bwd.y0, bwd.x0].iter().all(|&st| st == 0 || (st + fp.p) % fp.s == 0);
            if !aligned || !bwd_aligned {
                return fail(
                    Alignment,
                    format!(
                        "tile {t}, layer {i}: start ({}, {}) is off the stride-{} sampling lattice",
                        fwd.y0, fwd.x0, fp.s
                    ),
                );
            }
        }
    }

    for (t, tile) in plan.tiles.iter().enumerate() {
        if tile.input_region_forward != tile.layers[0].forward_input
            || tile.input_region_backward != tile.layers[0].backward_input
        {
            return fail(
                Sufficiency,
                format!("tile {t}: image regions disagree with layer table"),
            );
        }
        for (i, fp) in fps.iter().enumerate() {
            let lr = &tile.layers[i];
            let z = sizes[i];
            let covers = |have: Region, want: Region| -> bool {
                let (Ok(r), Ok(c)) = (fp.backproject(want.rows(), z), fp.backproject(want.cols(), z)) else {
                    return false;
                };
                have.contains(&Region::from_axes(r.interval, c.interval))
            };
            let next_fwd = tile
                .layers
                .get(i + 1)
                .map_or(tile.owned_split_region, |n| n.forward_input);
            let produced = match (
                fp.forward_span(lr.forward_input.rows(), z),
                fp.forward_span(lr.forward_input.cols(), z),
            ) {
                (Ok(Some(r)), Ok(Some(c))) => Region::from_axes(r, c),
                _ => {
                    return fail(
                        Sufficiency,
                        format!("tile {t}, layer {i}: forward input produces nothing"),
                    )
                }
            };
            if !produced.contains(&next_fwd) {
                return fail(
                    Sufficiency,
                    format!(
                        "tile {t}, layer {i}: forward input {} yields {produced}, which misses {next_fwd}",
                        lr.forward_input
                    ),
                );
            }
            if !lr.grad_output.contains(&lr.owned_output) || !covers(lr.backward_input, lr.grad_output) {
                return fail(Sufficiency, format!("tile {t}, layer {i}: backward regions too small"));
            }
            if let Some(up) = tile.layers.get(i + 1) {
                if !covers(lr.backward_input, up.backward_input) {
                    return fail(
                        Sufficiency,
                        format!("tile {t}, layer {i}: cannot recompute layer {} input", i + 1),
                    );
                }
            }
            if i > 0 {
                let below = tile.layers[i - 1].grad_output;
                let reach = (fp.reach(below.rows(), z), fp.reach(below.cols(), z));
                if let (Ok(Some(r)), Ok(Some(c))) = reach {
                    if !lr.grad_output.contains(&Region::from_axes(r, c)) {
                        return fail(
                            Sufficiency,
                            format!("tile {t}, layer {i}: gradient region misses contributors"),
                        );
                    }
                }
            }
        }
    }

    for (t, tile) in plan.tiles.iter().enumerate() {
        if tile.b_bottom != (tile.row + 1 == plan.grid.rows) || tile.b_right != (tile.col + 1 == plan.grid.cols) {
            return fail(
                EdgeFlags,
                format!("tile {t}: b flags must mark exactly the bottom row and right column"),
            );
        }
    }

    for (t, tile) in plan.tiles.iter().enumerate() {
        if tile.layers.iter().any(|l| !l.backward_input.contains(&l.forward_input)) {
            return fail(
                BackwardSuperset,
                format!("tile {t}: backward region does not contain forward region"),
            );
        }
    }
    Ok(())
}
