use serde::{Deserialize, Serialize};

use super::{check_out_region, Footprint, MapWindow};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Square convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub s: usize,
    #[serde(default)]
    pub p: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn new(k: usize, s: usize, p: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let spec = ConvSpec { k, s, p, c_in, c_out };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        Footprint::new(self.k, self.s, self.p)?;
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Network("conv channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn footprint(&self) -> Footprint {
        Footprint {
            k: self.k,
            s: self.s,
            p: self.p,
        }
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.c_out, self.c_in, self.k, self.k)
    }
}

/// Conv weights `(c_out, c_in, k, k)` and per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients: the parameter layout, accumulated in f64 whatever
/// the working precision.
pub type ConvGrads = ConvParams<f64>;

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        ConvParams {
            weight: Tensor4::zeros(spec.weight_dims()),
            bias: vec![T::zero(); spec.c_out],
        }
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weight.dims() != spec.weight_dims() || self.bias.len() != spec.c_out {
            return Err(Error::Shape(format!(
                "conv params {} / bias {} do not fit {spec:?}",
                self.weight.dims(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

fn check_input<T: Scalar>(input: &Tensor4<T>, spec: &ConvSpec, at: &MapWindow) -> Result<()> {
    spec.validate()?;
    let d = input.dims();
    if d.c != spec.c_in {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            spec.c_in, d.c
        )));
    }
    at.check_tensor(d.h, d.w)
}

/// Output map size for a conv applied to an `h x w` map.
pub fn conv_out_hw(spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize)> {
    let fp = spec.footprint();
    Ok((fp.out_len(h)?, fp.out_len(w)?))
}

/// Computes `out` (in output-map coordinates) from an input window.
pub fn conv2d_forward_window<T: Scalar>(
    input: &Tensor4<T>,
    at: &MapWindow,
    spec: &ConvSpec,
    params: &ConvParams<T>,
    out: &Region,
) -> Result<Tensor4<T>> {
    check_input(input, spec, at)?;
    params.check(spec)?;
    let (out_h, out_w) = conv_out_hw(spec, at.map_h, at.map_w)?;
    check_out_region(out, out_h, out_w)?;
    let fp = spec.footprint();
    at.check_covers(&fp, out)?;

    let d = input.dims();
    let (k, s, p) = (spec.k as i64, spec.s as i64, spec.p as i64);
    let (map_h, map_w) = (at.map_h as i64, at.map_w as i64);
    let (ry, rx) = (at.region.y0 as i64, at.region.x0 as i64);
    let x = input.data();
    let w = params.weight.data();
    let mut result = Tensor4::zeros(Dims::new(d.n, spec.c_out, out.height(), out.width()));
    let res = result.data_mut();
    let mut idx = 0;
    for n in 0..d.n {
        for co in 0..spec.c_out {
            let bias = params.bias[co];
            for oy in out.y0..out.y1 {
                let iy0 = oy as i64 * s - p;
                for ox in out.x0..out.x1 {
                    let ix0 = ox as i64 * s - p;
                    let mut acc = T::zero();
                    for ci in 0..spec.c_in {
                        let wbase = (co * spec.c_in + ci) * spec.k * spec.k;
                        let xbase = (n * d.c + ci) * d.h;
                        for ky in 0..k {
                            let iy = iy0 + ky;
                            if iy < 0 || iy >= map_h {
                                continue;
                            }
                            let xrow = (xbase + (iy - ry) as usize) * d.w;
                            let wrow = wbase + ky as usize * spec.k;
                            for kx in 0..k {
                                let ix = ix0 + kx;
                                if ix < 0 || ix >= map_w {
                                    continue;
                                }
                                acc = acc + w[wrow + kx as usize] * x[xrow + (ix - rx) as usize];
                            }
                        }
                    }
                    res[idx] = acc + bias;
                    idx += 1;
                }
            }
        }
    }
    Ok(result)
}

/// Whole-map convolution.
pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    let d = input.dims();
    let (out_h, out_w) = conv_out_hw(spec, d.h, d.w)?;
    conv2d_forward_window(
        input,
        &MapWindow::full(d.h, d.w),
        spec,
        params,
        &Region::full(out_h, out_w),
    )
}

/// Backward pass over output region `out`.
///
/// Parameter gradients only sum output positions inside `owned` (all of `out`
/// when `None`) and are accumulated in f64. The input gradient, when requested, covers the input window
/// and holds contributions from every position of `out`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_window<T: Scalar>(
    input: &Tensor4<T>,
    at: &MapWindow,
    spec: &ConvSpec,
    params: &ConvParams<T>,
    out: &Region,
    grad_out: &Tensor4<T>,
    owned: Option<&Region>,
    want_grad_in: bool,
) -> Result<(Option<Tensor4<T>>, ConvGrads)> {
    check_input(input, spec, at)?;
    params.check(spec)?;
    let (out_h, out_w) = conv_out_hw(spec, at.map_h, at.map_w)?;
    check_out_region(out, out_h, out_w)?;
    let d = input.dims();
    let gd = grad_out.dims();
    if gd != Dims::new(d.n, spec.c_out, out.height(), out.width()) {
        return Err(Error::Shape(format!(
            "conv grad_out {gd} does not match output region {out} with {} channels",
            spec.c_out
        )));
    }
    let fp = spec.footprint();
    at.check_covers(&fp, out)?;

    let (k, s, p) = (spec.k as i64, spec.s as i64, spec.p as i64);
    let (map_h, map_w) = (at.map_h as i64, at.map_w as i64);
    let (ry, rx) = (at.region.y0 as i64, at.region.x0 as i64);
    let x = input.data();
    let w = params.weight.data();
    let g = grad_out.data();
    let mut grads = ConvGrads::zeros(spec);
    let mut grad_in = want_grad_in.then(|| Tensor4::<T>::zeros(d));
    let kk = spec.k * spec.k;
    let plane = out.height() * out.width();

    for n in 0..d.n {
        for oy in out.y0..out.y1 {
            let iy0 = oy as i64 * s - p;
            for ox in out.x0..out.x1 {
                let ix0 = ox as i64 * s - p;
                let counted = owned.is_none_or(|o| o.contains_point(oy, ox));
                let local = (oy - out.y0) * out.width() + (ox - out.x0);
                for co in 0..spec.c_out {
                    let gv = g[(n * spec.c_out + co) * plane + local];
                    if counted {
                        grads.bias[co] += gv.as_f64();
                    }
                    for ci in 0..spec.c_in {
                        let wbase = (co * spec.c_in + ci) * kk;
                        let xbase = (n * d.c + ci) * d.h;
                        for ky in 0..k {
                            let iy = iy0 + ky;
                            if iy < 0 || iy >= map_h {
                                continue;
                            }
                            let xrow = (xbase + (iy - ry) as usize) * d.w;
                            let wrow = wbase + ky as usize * spec.k;
                            for kx in 0..k {
                                let ix = ix0 + kx;
                                if ix < 0 || ix >= map_w {
                                    continue;
                                }
                                let xi = xrow + (ix - rx) as usize;
                                let wi = wrow + kx as usize;
                                if counted {
                                    let gw = grads.weight.data_mut();
                                    gw[wi] += gv.as_f64() * x[xi].as_f64();
                                }
                                if let Some(gi) = grad_in.as_mut() {
                                    let gi = gi.data_mut();
                                    gi[xi] = gi[xi] + gv * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grads))
}

/// Whole-map conv backward: `(grad_in, grads)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    spec: &ConvSpec,
    params: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, ConvGrads)> {
    let d = input.dims();
    let (out_h, out_w) = conv_out_hw(spec, d.h, d.w)?;
    let (gi, gp) = conv2d_backward_window(
        input,
        &MapWindow::full(d.h, d.w),
        spec,
        params,
        &Region::full(out_h, out_w),
        grad_out,
        None,
        true,
    )?;
    Ok((gi.expect("requested"), gp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones_params(spec: &ConvSpec) -> ConvParams<f64> {
        ConvParams {
            weight: Tensor4::filled(spec.weight_dims(), 1.0),
            bias: vec![0.0; spec.c_out],
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn nine_ones() {
        let spec = ConvSpec::new(3, 1, 0, 1, 1).unwrap();
        let x = Tensor4::filled(Dims::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &spec, &ones_params(&spec)).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_forward_and_backward() {
        let spec = ConvSpec::new(1, 1, 0, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, Dims::new(1, 1, 4, 5));
        let params = ones_params(&spec);
        assert_eq!(conv2d_forward(&x, &spec, &params).unwrap(), x);
        let g = random_tensor(&mut rng, x.dims());
        let (gi, _) = conv2d_backward(&x, &spec, &params, &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn strided_block_sums() {
        let spec = ConvSpec::new(2, 2, 0, 1, 1).unwrap();
        let x = Tensor4::from_vec(Dims::new(1, 1, 4, 4), (1..=16).map(f64::from).collect()).unwrap();
        let y = conv2d_forward(&x, &spec, &ones_params(&spec)).unwrap();
        assert_eq!(y.data(), &[14.0, 22.0, 46.0, 54.0]);
    }

    #[test]
    fn single_position_unit_gradient() {
        let spec = ConvSpec::new(3, 1, 0, 1, 1).unwrap();
        let x = Tensor4::filled(Dims::new(1, 1, 3, 3), 1.0);
        let g = Tensor4::filled(Dims::new(1, 1, 1, 1), 1.0);
        let (_, gp) = conv2d_backward(&x, &spec, &ones_params(&spec), &g).unwrap();
        assert!(gp.weight.data().iter().all(|&v| v == 1.0));
        assert_eq!(gp.bias, vec![1.0]);
    }

    #[test]
    fn errors_on_bad_shapes() {
        let spec = ConvSpec::new(3, 1, 0, 2, 1).unwrap();
        let p = ConvParams::<f64>::zeros(&spec);
        let x = Tensor4::zeros(Dims::new(1, 1, 5, 5));
        assert!(matches!(conv2d_forward(&x, &spec, &p), Err(Error::Shape(_))));
        let x = Tensor4::zeros(Dims::new(1, 2, 2, 2));
        assert!(matches!(conv2d_forward(&x, &spec, &p), Err(Error::Shape(_))));
        let x = Tensor4::zeros(Dims::new(1, 2, 5, 5));
        let g = Tensor4::zeros(Dims::new(1, 1, 2, 2));
        assert!(conv2d_backward(&x, &spec, &p, &g).is_err());
        assert!(ConvSpec::new(3, 1, 3, 1, 1).is_err());
    }

    #[test]
    fn crop_gives_bit_identical_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::new(3, 2, 1, 2, 3).unwrap();
        let x = random_tensor(&mut rng, Dims::new(1, 2, 11, 11));
        let params = ConvParams {
            weight: random_tensor(&mut rng, spec.weight_dims()),
            bias: vec![0.1, -0.2, 0.3],
        };
        let whole = conv2d_forward(&x, &spec, &params).unwrap();
        // outputs [2,5) x [0,3) read input rows [3,10) cols [0,6)
        let region = Region::new(3, 0, 10, 6);
        let crop = x.crop(3, 0, 7, 6).unwrap();
        let at = MapWindow::new(region, 11, 11).unwrap();
        let out = Region::new(2, 0, 5, 3);
        let part = conv2d_forward_window(&crop, &at, &spec, &params, &out).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    assert_eq!(part.at(0, c, y, xx).to_bits(), whole.at(0, c, y + 2, xx).to_bits());
                }
            }
        }
        let too_small = MapWindow::new(Region::new(4, 0, 10, 6), 11, 11).unwrap();
        let crop = x.crop(4, 0, 6, 6).unwrap();
        assert!(conv2d_forward_window(&crop, &too_small, &spec, &params, &out).is_err());
    }

    #[test]
    fn linearity_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(3, 1, 1, 2, 2).unwrap();
        let x = random_tensor(&mut rng, Dims::new(1, 2, 6, 6));
        let params = ConvParams {
            weight: random_tensor(&mut rng, spec.weight_dims()),
            bias: vec![0.0; 2],
        };
        // power-of-two scaling commutes with every rounding step
        let lhs = conv2d_forward(&x.scale(2.0), &spec, &params).unwrap();
        let rhs = conv2d_forward(&x, &spec, &params).unwrap().scale(2.0);
        assert_eq!(lhs, rhs);
        let lhs = conv2d_forward(&x.scale(2.5), &spec, &params).unwrap();
        let rhs = conv2d_forward(&x, &spec, &params).unwrap().scale(2.5);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            // 18 products of magnitude < 2.5 each
            assert!((l - r).abs() <= 18.0 * 2.5 * f64::EPSILON, "{l} vs {r}");
        }
    }
}
