use super::{check_out_region, Footprint, MapWindow};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::tensor::{Dims, Scalar, Tensor4};

/// Selected input positions of a max-pool forward call.
///
/// `indices[i]` is the flat `(n, c, h, w)` index into the pooled input tensor
/// of the maximum chosen for output element `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgMax {
    pub input_dims: Dims,
    pub output_dims: Dims,
    pub indices: Vec<usize>,
}

/// Max-pools output region `out` from an input window.
///
/// Ties go to the first maximum in row-major scan order of the window.
pub fn maxpool2d_forward_window<T: Scalar>(
    input: &Tensor4<T>,
    at: &MapWindow,
    k: usize,
    s: usize,
    out: &Region,
) -> Result<(Tensor4<T>, ArgMax)> {
    let fp = Footprint::new(k, s, 0)?;
    let d = input.dims();
    at.check_tensor(d.h, d.w)?;
    let (out_h, out_w) = (fp.out_len(at.map_h)?, fp.out_len(at.map_w)?);
    check_out_region(out, out_h, out_w)?;
    at.check_covers(&fp, out)?;

    let out_dims = Dims::new(d.n, d.c, out.height(), out.width());
    let mut result = Tensor4::zeros(out_dims);
    let mut indices = Vec::with_capacity(out_dims.len());
    let x = input.data();
    let res = result.data_mut();
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in out.y0..out.y1 {
                let ly = oy * s - at.region.y0;
                for ox in out.x0..out.x1 {
                    let lx = ox * s - at.region.x0;
                    let mut best = input.index(n, c, ly, lx);
                    for ky in 0..k {
                        let row = input.index(n, c, ly + ky, lx);
                        for kx in 0..k {
                            if x[row + kx] > x[best] {
                                best = row + kx;
                            }
                        }
                    }
                    res[indices.len()] = x[best];
                    indices.push(best);
                }
            }
        }
    }
    Ok((
        result,
        ArgMax {
            input_dims: d,
            output_dims: out_dims,
            indices,
        },
    ))
}

/// Whole-map max pooling with no padding.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor4<T>, k: usize, s: usize) -> Result<(Tensor4<T>, ArgMax)> {
    let d = input.dims();
    let fp = Footprint::new(k, s, 0)?;
    if d.h < k || d.w < k {
        return Err(Error::Shape(format!(
            "pool window {k} larger than {}x{} input",
            d.h, d.w
        )));
    }
    let out = Region::full(fp.out_len(d.h)?, fp.out_len(d.w)?);
    maxpool2d_forward_window(input, &MapWindow::full(d.h, d.w), k, s, &out)
}

/// Routes each upstream gradient to its selected input, summing collisions.
pub fn maxpool2d_backward<T: Scalar>(argmax: &ArgMax, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_out.dims() != argmax.output_dims || argmax.indices.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "argmax recorded for output {}, got gradient {}",
            argmax.output_dims,
            grad_out.dims()
        )));
    }
    let mut grad_in = Tensor4::zeros(argmax.input_dims);
    let gi = grad_in.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(grad_out.data()) {
        let slot = gi
            .get_mut(idx)
            .ok_or_else(|| Error::Shape(format!("argmax index {idx} out of range")))?;
        *slot = *slot + g;
    }
    Ok(grad_in)
}
