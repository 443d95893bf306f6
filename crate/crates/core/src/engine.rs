//! Streaming execution: tile passes into the split map, head, and tile-wise backprop.
//!
//! Tiles run sequentially in row-major order. Only the split map and the head
//! activations survive between the forward and backward passes; each tile's
//! streaming activations are recomputed from the image during the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::network::{
    head_backward, head_forward, local_crop, spatial_forward_window, LayerParams, LayerSpec, NetParams, NetworkSpec,
    Trace,
};
use crate::nn::conv::{conv2d_backward_window, ConvGrads};
use crate::nn::pool::maxpool2d_forward_window;
use crate::nn::{bce_with_logits, maxpool2d_backward, relu_backward, MapWindow};
use crate::planner::{validate_tile_plan, Tile, TilePlan};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Counts bytes of live activation tensors and remembers the high-water mark.
///
/// Only activations (and the split-map gradient) are tracked. The full input
/// image, parameters, gradients of parameters and scratch buffers are not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    live: usize,
    peak: usize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: usize) {
        assert!(bytes <= self.live, "freeing {bytes} bytes with {} live", self.live);
        self.live -= bytes;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Summed parameter gradients and the number of images they cover.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: NetParams<T>,
    pub images: usize,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros(net: &NetworkSpec, image_size: usize) -> Result<Self> {
        Ok(ParamGrads {
            grads: NetParams::zeros(net, image_size)?,
            images: 0,
        })
    }

    /// Wraps per-layer gradients from a whole-network backward pass.
    pub fn from_layers(layers: Vec<LayerParams<T>>) -> Self {
        ParamGrads {
            grads: NetParams { layers },
            images: 1,
        }
    }

    fn add_layer(&mut self, i: usize, g: &LayerParams<T>) -> Result<()> {
        add_layer_params(&mut self.grads.layers[i], g)
            .map_err(|_| Error::Shape(format!("gradient of layer {i} does not match its parameters")))
    }
}

fn add_slices<T: Scalar>(dst: &mut [T], src: &[T]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape("length mismatch".into()));
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
    Ok(())
}

fn add_layer_params<T: Scalar>(dst: &mut LayerParams<T>, src: &LayerParams<T>) -> Result<()> {
    match (dst, src) {
        (_, LayerParams::None) => Ok(()),
        (LayerParams::Conv(d), LayerParams::Conv(s)) => {
            add_slices(d.weight.data_mut(), s.weight.data())?;
            add_slices(&mut d.bias, &s.bias)
        }
        (LayerParams::Dense(d), LayerParams::Dense(s)) => {
            add_slices(d.weight.data_mut(), s.weight.data())?;
            add_slices(&mut d.bias, &s.bias)
        }
        _ => Err(Error::Shape("layer kinds differ".into())),
    }
}

/// Sums per-image gradients in list order, then divides by the batch size.
pub fn accumulate_minibatch<T: Scalar>(per_image: &[ParamGrads<T>]) -> Result<ParamGrads<T>> {
    let (first, rest) = per_image
        .split_first()
        .ok_or_else(|| Error::Shape("empty mini-batch".into()))?;
    let mut total = first.clone();
    for g in rest {
        total.grads.add_assign(&g.grads)?;
        total.images += g.images;
    }
    let count = T::of(per_image.len() as f64);
    for s in total.grads.slices_mut() {
        for v in s {
            *v = *v / count;
        }
    }
    Ok(total)
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut NetParams<T>, grads: &ParamGrads<T>, lr: T) -> Result<()> {
    if !(lr.as_f64() >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be non-negative, got {}",
            lr.as_f64()
        )));
    }
    if !params.same_shape(&grads.grads) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    let src: Vec<Vec<T>> = grads.grads.slices().iter().map(|s| s.data.to_vec()).collect();
    for (p, g) in params.slices_mut().into_iter().zip(src) {
        for (p, g) in p.iter_mut().zip(g) {
            *p = *p - lr * g;
        }
    }
    Ok(())
}

/// Counters of one streaming forward/backward step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamingRunRecord {
    pub loss: f64,
    pub logit: f64,
    /// Largest activation footprint of a single tile, forward or recomputation.
    pub peak_tile_activation_bytes: usize,
    pub reconstructed_map_bytes: usize,
    /// High-water mark of all tracked activations over the step.
    pub peak_bytes: usize,
    pub tiles_forward: usize,
    pub tiles_backward: usize,
}

/// State kept between the streaming forward and backward passes.
#[derive(Debug, Clone)]
pub struct ForwardState<T> {
    /// Head activations; `head.acts[0]` is the reconstructed split map.
    pub head: Trace<T>,
    pub tile_peak_bytes: usize,
    pub tiles: usize,
}

impl<T: Scalar> ForwardState<T> {
    pub fn split_map(&self) -> &Tensor4<T> {
        &self.head.acts[0]
    }

    pub fn logit(&self) -> T {
        self.head.output().data()[0]
    }

    fn head_bytes(&self) -> usize {
        self.head.acts[1..].iter().map(Tensor4::nbytes).sum()
    }
}

fn check_inputs<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    plan: &TilePlan,
) -> Result<()> {
    let d = image.dims();
    if d != Dims::new(1, net.input_channels, plan.image_size, plan.image_size) {
        return Err(Error::Shape(format!(
            "image {d} does not match the plan's 1x{}x{s}x{s}",
            net.input_channels,
            s = plan.image_size
        )));
    }
    params.check(net)?;
    validate_tile_plan(plan, net).into_result()
}

fn crop_region<T: Scalar>(t: &Tensor4<T>, r: &Region) -> Result<Tensor4<T>> {
    t.crop(r.y0, r.x0, r.height(), r.width())
}

/// Runs every tile through the streaming section, stitches the split map and
/// runs the head on it.
pub fn streaming_forward<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    plan: &TilePlan,
    meter: &mut MemoryMeter,
) -> Result<ForwardState<T>> {
    check_inputs(net, params, image, plan)?;
    let depth = net.split_index;
    let layers = net.streaming_layers();
    let mut split_map = Tensor4::zeros(net.split_dims(plan.image_size)?);
    meter.alloc(split_map.nbytes());
    let base = meter.live();
    let mut tile_peak = 0;

    for tile in &plan.tiles {
        let mut region = tile.input_region_forward;
        let mut x = crop_region(image, &region)?;
        meter.alloc(x.nbytes());
        for i in 0..depth {
            let out = tile
                .layers
                .get(i + 1)
                .map_or(tile.owned_split_region, |l| l.forward_input);
            let at = MapWindow::new(region, plan.map_sizes[i], plan.map_sizes[i])?;
            let (y, _) = spatial_forward_window(&layers[i], &params.layers[i], &x, &at, &out)?;
            y.ensure_finite(&format!("tile ({}, {}) output of layer {i}", tile.row, tile.col))?;
            meter.alloc(y.nbytes());
            tile_peak = tile_peak.max(meter.live() - base);
            meter.free(x.nbytes());
            x = y;
            region = out;
        }
        split_map.paste(&x, region.y0, region.x0)?;
        meter.free(x.nbytes());
    }

    let head = head_forward(net, params, &split_map)?;
    drop(split_map);
    let state = ForwardState {
        head,
        tile_peak_bytes: tile_peak,
        tiles: plan.tiles.len(),
    };
    meter.alloc(state.head_bytes());
    Ok(state)
}

/// Backpropagates from the logit gradient, recomputing each tile's activations.
///
/// Conv parameter gradients of each tile only sum output positions the tile
/// owns, so every whole-image output position is counted exactly once.
pub fn streaming_backward<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    plan: &TilePlan,
    state: ForwardState<T>,
    dloss_dlogit: T,
    meter: &mut MemoryMeter,
) -> Result<(ParamGrads<T>, usize)> {
    check_inputs(net, params, image, plan)?;
    let depth = net.split_index;
    if state.split_map().dims() != net.split_dims(plan.image_size)? {
        return Err(Error::Shape("forward state does not belong to this plan".into()));
    }
    let mut grads = ParamGrads::zeros(net, plan.image_size)?;
    grads.images = 1;

    let (grad_split, head_grads) = head_backward(net, params, &state.head, &[dloss_dlogit])?;
    meter.alloc(grad_split.nbytes());
    for (j, g) in head_grads.iter().enumerate() {
        grads.add_layer(depth + j, g)?;
    }
    meter.free(state.head_bytes() + state.split_map().nbytes());
    drop(state);

    let base = meter.live();
    let mut tile_peak = 0;
    // conv gradients are summed over tiles in f64 and rounded once
    let mut conv_sums: Vec<Option<ConvGrads>> = vec![None; depth];
    for tile in &plan.tiles {
        let recomputed = recompute_tile(net, params, image, plan, tile, meter)?;
        tile_peak = tile_peak.max(meter.live() - base);
        backprop_tile(net, params, plan, tile, &recomputed, &grad_split, &mut conv_sums)?;
        meter.free(recomputed.iter().map(Tensor4::nbytes).sum());
    }
    for (i, sum) in conv_sums.into_iter().enumerate() {
        if let Some(sum) = sum {
            grads.add_layer(i, &LayerParams::Conv(sum.cast()))?;
        }
    }
    meter.free(grad_split.nbytes());
    Ok((grads, tile_peak))
}

/// Partial forward pass over the tile's backward regions, keeping every layer input.
fn recompute_tile<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    plan: &TilePlan,
    tile: &Tile,
    meter: &mut MemoryMeter,
) -> Result<Vec<Tensor4<T>>> {
    let layers = net.streaming_layers();
    let mut xs = vec![crop_region(image, &tile.input_region_backward)?];
    meter.alloc(xs[0].nbytes());
    for i in 0..net.split_index - 1 {
        let at = MapWindow::new(tile.layers[i].backward_input, plan.map_sizes[i], plan.map_sizes[i])?;
        let out = tile.layers[i + 1].backward_input;
        let (y, _) = spatial_forward_window(&layers[i], &params.layers[i], &xs[i], &at, &out)?;
        meter.alloc(y.nbytes());
        xs.push(y);
    }
    Ok(xs)
}

/// Copies the part of `src` (covering `have`) that lies in `want`, zero elsewhere.
fn extract_zero_filled<T: Scalar>(src: &Tensor4<T>, have: &Region, want: &Region) -> Result<Tensor4<T>> {
    let d = src.dims();
    let mut out = Tensor4::zeros(Dims::new(d.n, d.c, want.height(), want.width()));
    let common = have.intersect(want);
    if !common.is_empty() {
        let part = local_crop(src, have, &common)?;
        out.paste(&part, common.y0 - want.y0, common.x0 - want.x0)?;
    }
    Ok(out)
}

fn backprop_tile<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    plan: &TilePlan,
    tile: &Tile,
    xs: &[Tensor4<T>],
    grad_split: &Tensor4<T>,
    conv_sums: &mut [Option<ConvGrads>],
) -> Result<()> {
    let layers = net.streaming_layers();
    let top = tile.layers.last().expect("non-empty streaming section").grad_output;
    let mut g = crop_region(grad_split, &top)?;
    for i in (0..net.split_index).rev() {
        let lr = &tile.layers[i];
        let x = &xs[i];
        let at = MapWindow::new(lr.backward_input, plan.map_sizes[i], plan.map_sizes[i])?;
        let want_in = i > 0;
        let (gin, gin_region) = match &layers[i] {
            LayerSpec::Conv(c) => {
                let cp = match &params.layers[i] {
                    LayerParams::Conv(cp) => cp,
                    _ => return Err(Error::Shape(format!("layer {i} is missing conv parameters"))),
                };
                let (gi, gp) =
                    conv2d_backward_window(x, &at, c, cp, &lr.grad_output, &g, Some(&lr.owned_output), want_in)?;
                match &mut conv_sums[i] {
                    Some(sum) => {
                        add_slices(sum.weight.data_mut(), gp.weight.data())?;
                        add_slices(&mut sum.bias, &gp.bias)?;
                    }
                    slot => *slot = Some(gp),
                }
                (gi, lr.backward_input)
            }
            LayerSpec::MaxPool { k, s } => {
                if !want_in {
                    (None, lr.backward_input)
                } else {
                    let (_, am) = maxpool2d_forward_window(x, &at, *k, *s, &lr.grad_output)?;
                    (Some(maxpool2d_backward(&am, &g)?), lr.backward_input)
                }
            }
            LayerSpec::Relu => {
                let xe = local_crop(x, &lr.backward_input, &lr.grad_output)?;
                (Some(relu_backward(&xe, &g)?), lr.grad_output)
            }
            other => {
                return Err(Error::Network(format!("{} in the streaming section", other.name())));
            }
        };
        match gin {
            Some(gi) if want_in => {
                g = extract_zero_filled(&gi, &gin_region, &tile.layers[i - 1].grad_output)?;
            }
            _ => break,
        }
    }
    Ok(())
}

/// One image through streaming forward, BCE loss and streaming backward.
pub fn streaming_step<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    label: u8,
    plan: &TilePlan,
) -> Result<(ParamGrads<T>, StreamingRunRecord)> {
    let mut meter = MemoryMeter::new();
    let state = streaming_forward(net, params, image, plan, &mut meter)?;
    let logit = state.logit();
    let (loss, dlogit) = bce_with_logits(logit, label);
    if !loss.as_f64().is_finite() {
        return Err(Error::NonFinite(format!("loss {}", loss.as_f64())));
    }
    let split_bytes = state.split_map().nbytes();
    let fwd_peak = state.tile_peak_bytes;
    let tiles_forward = state.tiles;
    let (grads, bwd_peak) = streaming_backward(net, params, image, plan, state, dlogit, &mut meter)?;
    debug_assert_eq!(meter.live(), 0);
    Ok((
        grads,
        StreamingRunRecord {
            loss: loss.as_f64(),
            logit: logit.as_f64(),
            peak_tile_activation_bytes: fwd_peak.max(bwd_peak),
            reconstructed_map_bytes: split_bytes,
            peak_bytes: meter.peak(),
            tiles_forward,
            tiles_backward: plan.tiles.len(),
        },
    ))
}
