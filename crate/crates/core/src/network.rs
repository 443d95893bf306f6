//! Layer descriptions, parameters, and the whole-map sequential executor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::nn::conv::{conv2d_backward_window, conv2d_forward_window};
use crate::nn::pool::maxpool2d_forward_window;
use crate::nn::{
    dense_backward, dense_forward, flatten, maxpool2d_backward, relu_backward, relu_forward, ArgMax, ConvParams,
    ConvSpec, DenseParams, Footprint, MapWindow,
};
use crate::tensor::{Dims, Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool { k: usize, s: usize },
    Relu,
    Flatten,
    Dense { width: usize },
}

impl LayerSpec {
    /// Window geometry for spatial layers; `None` for flatten and dense.
    pub fn footprint(&self) -> Option<Footprint> {
        match *self {
            LayerSpec::Conv(c) => Some(c.footprint()),
            LayerSpec::MaxPool { k, s } => Some(Footprint { k, s, p: 0 }),
            LayerSpec::Relu => Some(Footprint::IDENTITY),
            LayerSpec::Flatten | LayerSpec::Dense { .. } => None,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.footprint().is_some()
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Ordered layers; `[0, split_index)` run tile by tile, the rest run once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
}

impl NetworkSpec {
    pub fn streaming_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split_index]
    }

    pub fn head_layers(&self) -> &[LayerSpec] {
        &self.layers[self.split_index..]
    }

    /// Dims (batch 1) of every map: index 0 is the image, `i + 1` the output of layer `i`.
    pub fn map_dims(&self, image_size: usize) -> Result<Vec<Dims>> {
        if self.input_channels == 0 {
            return Err(Error::Network("input_channels must be positive".into()));
        }
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(Error::Network(format!(
                "split_index {} must lie in [1, {})",
                self.split_index,
                self.layers.len()
            )));
        }
        let mut dims = vec![Dims::new(1, self.input_channels, image_size, image_size)];
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let d = *dims.last().unwrap();
            if i < self.split_index
                && !matches!(layer, LayerSpec::Conv(_) | LayerSpec::MaxPool { .. } | LayerSpec::Relu)
            {
                return Err(Error::Network(format!(
                    "layer {i} ({}) cannot run inside the streaming section",
                    layer.name()
                )));
            }
            let next = match *layer {
                LayerSpec::Conv(c) => {
                    c.validate()?;
                    if flat {
                        return Err(Error::Network(format!("conv at layer {i} after flatten")));
                    }
                    if c.c_in != d.c {
                        return Err(Error::Network(format!(
                            "conv at layer {i} expects {} channels, map has {}",
                            c.c_in, d.c
                        )));
                    }
                    let fp = c.footprint();
                    Dims::new(1, c.c_out, fp.out_len(d.h)?, fp.out_len(d.w)?)
                }
                LayerSpec::MaxPool { k, s } => {
                    let fp = Footprint::new(k, s, 0)?;
                    if flat {
                        return Err(Error::Network(format!("maxpool at layer {i} after flatten")));
                    }
                    Dims::new(1, d.c, fp.out_len(d.h)?, fp.out_len(d.w)?)
                }
                LayerSpec::Relu => d,
                LayerSpec::Flatten => {
                    flat = true;
                    Dims::new(1, d.c * d.h * d.w, 1, 1)
                }
                LayerSpec::Dense { width } => {
                    if !flat {
                        return Err(Error::Network(format!("dense at layer {i} must follow a flatten")));
                    }
                    if width == 0 {
                        return Err(Error::Network("dense width must be positive".into()));
                    }
                    Dims::new(1, width, 1, 1)
                }
            };
            if next.is_empty() {
                return Err(Error::Network(format!("layer {i} produces an empty map")));
            }
            dims.push(next);
        }
        if *dims.last().unwrap() != Dims::new(1, 1, 1, 1) {
            return Err(Error::Network(
                "network must end in a single logit (dense width 1)".into(),
            ));
        }
        Ok(dims)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        self.map_dims(image_size).map(|_| ())
    }

    /// Dims of the reconstructed split-layer map.
    pub fn split_dims(&self, image_size: usize) -> Result<Dims> {
        Ok(self.map_dims(image_size)?[self.split_index])
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    None,
    Conv(ConvParams<T>),
    Dense(DenseParams<T>),
}

/// Named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamSlice<'a, T> {
    pub name: String,
    pub dims: Dims,
    pub data: &'a [T],
}

/// Parameters of every layer, indexed like `NetworkSpec::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> NetParams<T> {
    pub fn zeros(net: &NetworkSpec, image_size: usize) -> Result<Self> {
        let dims = net.map_dims(image_size)?;
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match *l {
                LayerSpec::Conv(c) => LayerParams::Conv(ConvParams::zeros(&c)),
                LayerSpec::Dense { width } => LayerParams::Dense(DenseParams::zeros(dims[i].c, width)),
                _ => LayerParams::None,
            })
            .collect();
        Ok(NetParams { layers })
    }

    /// He-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`) and zero biases,
    /// drawn in `f64` from ChaCha8 seeded with `seed`, layer by layer.
    pub fn init(net: &NetworkSpec, image_size: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(net, image_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lp in &mut params.layers {
            let weight = match lp {
                LayerParams::Conv(c) => &mut c.weight,
                LayerParams::Dense(d) => &mut d.weight,
                LayerParams::None => continue,
            };
            let wd = weight.dims();
            let fan_in = (wd.c * wd.h * wd.w) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in weight.data_mut() {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(params)
    }

    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (l, p)) in net.layers.iter().zip(&self.layers).enumerate() {
            let ok = match (l, p) {
                (LayerSpec::Conv(c), LayerParams::Conv(cp)) => cp.check(c).is_ok(),
                (LayerSpec::Dense { width }, LayerParams::Dense(dp)) => dp.outputs() == *width,
                (LayerSpec::Conv(_) | LayerSpec::Dense { .. }, _) => false,
                (_, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("parameters of layer {i} do not fit")));
            }
        }
        Ok(())
    }

    pub fn slices(&self) -> Vec<ParamSlice<'_, T>> {
        let mut out = Vec::new();
        for (i, lp) in self.layers.iter().enumerate() {
            let (w, b) = match lp {
                LayerParams::Conv(c) => (&c.weight, &c.bias),
                LayerParams::Dense(d) => (&d.weight, &d.bias),
                LayerParams::None => continue,
            };
            out.push(ParamSlice {
                name: format!("layer{i}.weight"),
                dims: w.dims(),
                data: w.data(),
            });
            out.push(ParamSlice {
                name: format!("layer{i}.bias"),
                dims: Dims::new(b.len(), 1, 1, 1),
                data: b,
            });
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for lp in &mut self.layers {
            let (w, b) = match lp {
                LayerParams::Conv(c) => (&mut c.weight, &mut c.bias),
                LayerParams::Dense(d) => (&mut d.weight, &mut d.bias),
                LayerParams::None => continue,
            };
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.data.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.slices(), other.slices());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.dims == y.dims)
    }

    /// `self += other`, element by element in slice order.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("parameter sets differ in shape".into()));
        }
        let src: Vec<Vec<T>> = other.slices().iter().map(|s| s.data.to_vec()).collect();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, a: T) {
        for s in self.slices_mut() {
            for v in s {
                *v = *v * a;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv(c) => LayerParams::Conv(c.cast()),
                LayerParams::Dense(d) => LayerParams::Dense(DenseParams {
                    weight: d.weight.cast(),
                    bias: d.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
                }),
            })
            .collect();
        NetParams { layers }
    }
}

/// Input gradient (when requested) and per-layer parameter gradients.
pub type InputAndParamGrads<T> = (Option<Tensor4<T>>, Vec<LayerParams<T>>);

/// Activations retained by a whole-map forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor4<T>>,
    pub argmax: Vec<Option<ArgMax>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.acts.last().expect("input is always present")
    }

    pub fn activation_bytes(&self) -> usize {
        self.acts.iter().map(Tensor4::nbytes).sum()
    }
}

fn conv_params<T>(p: &LayerParams<T>, i: usize) -> Result<&ConvParams<T>> {
    match p {
        LayerParams::Conv(c) => Ok(c),
        _ => Err(Error::Shape(format!("layer {i} is missing conv parameters"))),
    }
}

fn dense_params<T>(p: &LayerParams<T>, i: usize) -> Result<&DenseParams<T>> {
    match p {
        LayerParams::Dense(d) => Ok(d),
        _ => Err(Error::Shape(format!("layer {i} is missing dense parameters"))),
    }
}

/// Runs a spatial layer on a window, producing output region `out`.
pub fn spatial_forward_window<T: Scalar>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor4<T>,
    at: &MapWindow,
    out: &Region,
) -> Result<(Tensor4<T>, Option<ArgMax>)> {
    match layer {
        LayerSpec::Conv(c) => Ok((conv2d_forward_window(input, at, c, conv_params(params, 0)?, out)?, None)),
        LayerSpec::MaxPool { k, s } => {
            let (y, am) = maxpool2d_forward_window(input, at, *k, *s, out)?;
            Ok((y, Some(am)))
        }
        LayerSpec::Relu => {
            let local = local_crop(input, &at.region, out)?;
            Ok((relu_forward(&local), None))
        }
        other => Err(Error::Network(format!("{} is not a spatial layer", other.name()))),
    }
}

/// Crops `want` (map coordinates) out of a tensor covering `have`.
pub(crate) fn local_crop<T: Scalar>(t: &Tensor4<T>, have: &Region, want: &Region) -> Result<Tensor4<T>> {
    if !have.contains(want) {
        return Err(Error::Shape(format!("{want} is not inside {have}")));
    }
    if have == want {
        return Ok(t.clone());
    }
    t.crop(want.y0 - have.y0, want.x0 - have.x0, want.height(), want.width())
}

/// Forward through `layers` on whole maps, keeping every activation.
pub fn forward_layers<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: Tensor4<T>,
) -> Result<Trace<T>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut argmax = Vec::with_capacity(layers.len());
    acts.push(input);
    for (i, (layer, p)) in layers.iter().zip(params).enumerate() {
        let x = acts.last().unwrap();
        let (y, am) = match layer {
            LayerSpec::Flatten => (flatten(x.clone()), None),
            LayerSpec::Dense { .. } => (dense_forward(x, dense_params(p, i)?)?, None),
            spatial => {
                let d = x.dims();
                let fp = spatial.footprint().expect("spatial");
                let out = Region::full(fp.out_len(d.h)?, fp.out_len(d.w)?);
                spatial_forward_window(spatial, p, x, &MapWindow::full(d.h, d.w), &out)?
            }
        };
        y.ensure_finite(&format!("output of layer {i}"))?;
        acts.push(y);
        argmax.push(am);
    }
    Ok(Trace { acts, argmax })
}

/// Backward through `layers` given the upstream gradient of the last output.
///
/// Returns the gradient w.r.t. the trace input (when requested) and per-layer
/// parameter gradients.
pub fn backward_layers<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    trace: &Trace<T>,
    grad_out: Tensor4<T>,
    want_input_grad: bool,
) -> Result<InputAndParamGrads<T>> {
    if trace.acts.len() != layers.len() + 1 || grad_out.dims() != trace.output().dims() {
        return Err(Error::Shape("trace does not match layers or gradient".into()));
    }
    let mut grads: Vec<LayerParams<T>> = vec![LayerParams::None; layers.len()];
    let mut g = grad_out;
    for i in (0..layers.len()).rev() {
        let x = &trace.acts[i];
        let need_in = i > 0 || want_input_grad;
        let next = match &layers[i] {
            LayerSpec::Conv(c) => {
                let d = x.dims();
                let out_d = trace.acts[i + 1].dims();
                let (gi, gp) = conv2d_backward_window(
                    x,
                    &MapWindow::full(d.h, d.w),
                    c,
                    conv_params(&params[i], i)?,
                    &Region::full(out_d.h, out_d.w),
                    &g,
                    None,
                    need_in,
                )?;
                grads[i] = LayerParams::Conv(gp.cast());
                gi
            }
            LayerSpec::MaxPool { .. } => {
                let am = trace.argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("missing argmax of layer {i}")))?;
                Some(maxpool2d_backward(am, &g)?)
            }
            LayerSpec::Relu => Some(relu_backward(x, &g)?),
            LayerSpec::Flatten => Some(g.clone().reshape(x.dims())?),
            LayerSpec::Dense { .. } => {
                let (gi, gp) = dense_backward(x, dense_params(&params[i], i)?, &g)?;
                grads[i] = LayerParams::Dense(gp);
                Some(gi)
            }
        };
        match next {
            Some(n) => g = n,
            None => return Ok((None, grads)),
        }
    }
    Ok((Some(g), grads))
}

/// Forward pass of the head on a (reconstructed) split map.
pub fn head_forward<T: Scalar>(net: &NetworkSpec, params: &NetParams<T>, features: &Tensor4<T>) -> Result<Trace<T>> {
    let split = net.split_index;
    let trace = forward_layers(net.head_layers(), &params.layers[split..], features.clone())?;
    if trace.output().dims().c != 1 {
        return Err(Error::Shape("head must produce one logit per image".into()));
    }
    Ok(trace)
}

/// Backward pass of the head: gradient w.r.t. the split map and head parameter grads.
pub fn head_backward<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    trace: &Trace<T>,
    dloss_dlogit: &[T],
) -> Result<(Tensor4<T>, Vec<LayerParams<T>>)> {
    let out_dims = trace.output().dims();
    let g = Tensor4::from_vec(out_dims, dloss_dlogit.to_vec())?;
    let split = net.split_index;
    let (gi, grads) = backward_layers(net.head_layers(), &params.layers[split..], trace, g, true)?;
    Ok((gi.expect("requested"), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bce_with_logits;

    fn tiny_head_net() -> NetworkSpec {
        NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(3, 1, 0, 1, 2).unwrap()),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { width: 1 },
            ],
            split_index: 1,
        }
    }

    #[test]
    fn shape_inference_and_structure_errors() {
        let net = tiny_head_net();
        let dims = net.map_dims(6).unwrap();
        assert_eq!(dims[1], Dims::new(1, 2, 4, 4));
        assert_eq!(dims[2], Dims::new(1, 32, 1, 1));
        let mut bad = net.clone();
        bad.split_index = 2;
        assert!(matches!(bad.validate(6), Err(Error::Network(_))));
        let mut bad = net.clone();
        bad.layers.swap(1, 2);
        assert!(bad.validate(6).is_err());
        let mut bad = net.clone();
        bad.layers.pop();
        assert!(bad.validate(6).is_err());
        assert!(net.validate(2).is_err());
    }

    #[test]
    fn json_layer_format() {
        let l: LayerSpec = serde_json::from_str(r#"{"kind":"maxpool","k":2,"s":2}"#).unwrap();
        assert_eq!(l, LayerSpec::MaxPool { k: 2, s: 2 });
        let c: LayerSpec = serde_json::from_str(r#"{"kind":"conv","k":3,"s":1,"c_in":1,"c_out":4}"#).unwrap();
        assert_eq!(c, LayerSpec::Conv(ConvSpec::new(3, 1, 0, 1, 4).unwrap()));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let net = tiny_head_net();
        let a = NetParams::<f64>::init(&net, 6, 5).unwrap();
        let b = NetParams::<f64>::init(&net, 6, 5).unwrap();
        let c = NetParams::<f64>::init(&net, 6, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check(&net).unwrap();
    }

    #[test]
    fn zero_weight_head_outputs_bias() {
        let net = tiny_head_net();
        let mut p = NetParams::<f64>::zeros(&net, 6).unwrap();
        if let LayerParams::Dense(d) = &mut p.layers[4] {
            d.bias[0] = -0.25;
        }
        let features = Tensor4::filled(Dims::new(1, 2, 4, 4), 1.0);
        let trace = head_forward(&net, &p, &features).unwrap();
        assert_eq!(trace.output().data(), &[-0.25]);
    }

    // Two dense layers with relu: analytic feature and parameter gradients
    // against central differences of the loss.
    #[test]
    fn head_gradients_match_finite_differences() {
        let net = tiny_head_net();
        let params = NetParams::<f64>::init(&net, 6, 9).unwrap();
        let features = Tensor4::from_fn(Dims::new(1, 2, 4, 4), |_, c, y, x| {
            ((c * 16 + y * 4 + x) as f64 * 0.37).sin()
        });
        let loss = |p: &NetParams<f64>, f: &Tensor4<f64>| {
            let t = head_forward(&net, p, f).unwrap();
            bce_with_logits(t.output().data()[0], 1).0
        };
        let trace = head_forward(&net, &params, &features).unwrap();
        let (_, dl) = bce_with_logits(trace.output().data()[0], 1);
        let (gf, gp) = head_backward(&net, &params, &trace, &[dl]).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for i in 0..features.len() {
            let mut fp = features.clone();
            fp.data_mut()[i] += h;
            let mut fm = features.clone();
            fm.data_mut()[i] -= h;
            let fd = (loss(&params, &fp) - loss(&params, &fm)) / (2.0 * h);
            assert!(rel(fd, gf.data()[i]) <= 1e-6, "feature {i}: {fd} vs {}", gf.data()[i]);
        }
        let mut full = NetParams::<f64>::zeros(&net, 6).unwrap();
        for (dst, src) in full.layers[1..].iter_mut().zip(gp) {
            *dst = src;
        }
        let analytic: Vec<f64> = full.slices().iter().flat_map(|s| s.data.to_vec()).collect();
        let n = params.num_scalars();
        for j in 0..n {
            let nudged = |d: f64| {
                let mut p = params.clone();
                if let Some(v) = p.slices_mut().into_iter().flatten().nth(j) {
                    *v += d;
                }
                p
            };
            let (pp, pm) = (nudged(h), nudged(-h));
            let fd = (loss(&pp, &features) - loss(&pm, &features)) / (2.0 * h);
            // conv slots sit in the streaming section and get no head gradient
            if j < 20 {
                continue;
            }
            assert!(rel(fd, analytic[j]) <= 1e-6, "param {j}: {fd} vs {}", analytic[j]);
        }
    }
}
