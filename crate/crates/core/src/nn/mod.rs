//! Forward and backward kernels for every layer kind.
//!
//! Spatial kernels are written against a [`MapWindow`]: the input tensor may be
//! a crop of a larger map, and the kernel is asked for an explicit output
//! region. Zero padding is applied only where a window crosses the true map
//! border, never at the crop edge. The whole-image entry points are the same
//! kernels called with a window covering the full map, so a pixel computed from
//! a crop and from the whole map goes through identical arithmetic.
//!
//! Accumulation order, shared by every executor:
//! - conv output: `acc = 0`, then `acc += w * x` over input channel, kernel
//!   row, kernel column (outermost first), then `acc + bias`. Padding taps are
//!   skipped.
//! - conv weight/bias gradients: summed over batch, output row, output column.
//! - conv input gradient: scattered in (batch, output row, output column,
//!   output channel, kernel row, kernel column) order.
//! - dense output: `acc = 0`, `acc += w * x` over inputs, then `acc + bias`.

pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;
pub mod relu;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams, ConvSpec};
pub use dense::{dense_backward, dense_forward, flatten, DenseParams};
pub use loss::bce_with_logits;
pub use pool::{maxpool2d_backward, maxpool2d_forward, ArgMax};
pub use relu::{relu_backward, relu_forward};

use crate::error::{Error, Result};
use crate::geometry::{Interval, Region};

/// Sliding-window geometry of a spatial layer along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Footprint {
    pub const IDENTITY: Footprint = Footprint { k: 1, s: 1, p: 0 };

    pub fn new(k: usize, s: usize, p: usize) -> Result<Self> {
        if k == 0 || s == 0 || p >= k {
            return Err(Error::Network(format!(
                "invalid window k={k} s={s} p={p} (need k>=1, s>=1, p<k)"
            )));
        }
        Ok(Footprint { k, s, p })
    }

    /// `floor((z + 2p - k) / s) + 1`.
    pub fn out_len(&self, z: usize) -> Result<usize> {
        let padded = z + 2 * self.p;
        if padded < self.k {
            return Err(Error::Shape(format!(
                "kernel {} larger than padded input {padded}",
                self.k
            )));
        }
        Ok((padded - self.k) / self.s + 1)
    }

    /// Unclipped input span `[o0*s - p, (o1-1)*s - p + k)` read by outputs `[o0, o1)`.
    pub fn raw_input_span(&self, out: Interval) -> (i64, i64) {
        let start = (out.start * self.s) as i64 - self.p as i64;
        let end = ((out.end - 1) * self.s + self.k) as i64 - self.p as i64;
        (start, end)
    }

    /// Minimal input interval for outputs `out`, clipped to `[0, z_in)`.
    pub fn backproject(&self, out: Interval, z_in: usize) -> Result<Clipped> {
        if out.is_empty() {
            return Err(Error::Plan("cannot back-project an empty interval".into()));
        }
        let (start, end) = self.raw_input_span(out);
        let lo = start.clamp(0, z_in as i64) as usize;
        let hi = end.clamp(0, z_in as i64) as usize;
        if hi <= lo {
            return Err(Error::Plan(format!(
                "outputs {}..{} read no pixels of a {z_in}-pixel map",
                out.start, out.end
            )));
        }
        Ok(Clipped {
            interval: Interval::new(lo, hi),
            clip_before: (lo as i64 - start) as usize,
            clip_after: (end - hi as i64).max(0) as usize,
        })
    }

    /// Outputs whose windows touch at least one pixel of `inp`, or `None`.
    pub fn reach(&self, inp: Interval, z_in: usize) -> Result<Option<Interval>> {
        let z_out = self.out_len(z_in)?;
        if inp.is_empty() {
            return Ok(None);
        }
        // o*s - p < inp.end  and  o*s - p + k > inp.start
        let lo_num = inp.start as i64 + self.p as i64 - self.k as i64;
        let lo = if lo_num < 0 { 0 } else { lo_num / self.s as i64 + 1 };
        let hi = (inp.end as i64 + self.p as i64 + self.s as i64 - 1) / self.s as i64;
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(z_out);
        Ok((lo < hi).then(|| Interval::new(lo, hi)))
    }

    /// Largest output interval computable from input `inp` (padding only at map borders).
    pub fn forward_span(&self, inp: Interval, z_in: usize) -> Result<Option<Interval>> {
        let z_out = self.out_len(z_in)?;
        let lo = if inp.start == 0 {
            0
        } else {
            (inp.start + self.p).div_ceil(self.s)
        };
        let hi = if inp.end >= z_in {
            z_out
        } else if inp.end + self.p < self.k {
            0
        } else {
            ((inp.end + self.p - self.k) / self.s + 1).min(z_out)
        };
        Ok((lo < hi).then(|| Interval::new(lo, hi)))
    }
}

/// Result of clipping a back-projected interval to its map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clipped {
    pub interval: Interval,
    /// Padding pixels the window needs before the map start.
    pub clip_before: usize,
    /// Padding pixels the window needs past the map end.
    pub clip_after: usize,
}

/// Where a (possibly cropped) tensor sits inside its full spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapWindow {
    pub region: Region,
    pub map_h: usize,
    pub map_w: usize,
}

impl MapWindow {
    pub const fn full(h: usize, w: usize) -> Self {
        MapWindow {
            region: Region::full(h, w),
            map_h: h,
            map_w: w,
        }
    }

    pub fn new(region: Region, map_h: usize, map_w: usize) -> Result<Self> {
        if region.is_empty() || region.y1 > map_h || region.x1 > map_w {
            return Err(Error::Shape(format!(
                "window {region} not inside a {map_h}x{map_w} map"
            )));
        }
        Ok(MapWindow { region, map_h, map_w })
    }

    pub(crate) fn check_tensor(&self, h: usize, w: usize) -> Result<()> {
        if h != self.region.height() || w != self.region.width() {
            return Err(Error::Shape(format!(
                "tensor spatial {h}x{w} does not match window {}",
                self.region
            )));
        }
        Ok(())
    }

    /// Errors unless every unpadded pixel read by `out` lies inside this window.
    pub(crate) fn check_covers(&self, fp: &Footprint, out: &Region) -> Result<()> {
        let need_r = fp.backproject(out.rows(), self.map_h)?;
        let need_c = fp.backproject(out.cols(), self.map_w)?;
        let need = Region::from_axes(need_r.interval, need_c.interval);
        if !self.region.contains(&need) {
            return Err(Error::Shape(format!(
                "output region {out} needs input {need}, window holds {}",
                self.region
            )));
        }
        Ok(())
    }
}

/// Checks `out` lies inside the `out_h x out_w` output map.
pub(crate) fn check_out_region(out: &Region, out_h: usize, out_w: usize) -> Result<()> {
    if out.is_empty() || out.y1 > out_h || out.x1 > out_w {
        return Err(Error::Shape(format!(
            "output region {out} outside {out_h}x{out_w} output map"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn backproject_examples() {
        let fp = Footprint::new(3, 1, 0).unwrap();
        let c = fp.backproject(Interval::new(0, 3), 10).unwrap();
        assert_eq!(c.interval, Interval::new(0, 5));
        let pool = Footprint::new(2, 2, 0).unwrap();
        let c = pool.backproject(Interval::new(1, 3), 8).unwrap();
        assert_eq!(c.interval, Interval::new(2, 6));
        let padded = Footprint::new(3, 1, 1).unwrap();
        let c = padded.backproject(Interval::new(0, 2), 8).unwrap();
        assert_eq!(c.interval, Interval::new(0, 3));
        assert_eq!(c.clip_before, 1);
    }

    proptest! {
        #[test]
        fn shape_law(z in 1usize..80, k in 1usize..8, s in 1usize..5, p in 0usize..7) {
            prop_assume!(p < k && z + 2 * p >= k);
            let fp = Footprint::new(k, s, p).unwrap();
            let n = fp.out_len(z).unwrap();
            // brute force: count window origins inside the padded map
            let count = (0..).map(|o| o * s).take_while(|&st| st + k <= z + 2 * p).count();
            prop_assert_eq!(n, count);
        }

        #[test]
        fn reach_matches_brute_force(z in 4usize..40, k in 1usize..6, s in 1usize..4, p in 0usize..5,
                                     a in 0usize..40, len in 1usize..10) {
            prop_assume!(p < k && z + 2 * p >= k && a < z);
            let fp = Footprint::new(k, s, p).unwrap();
            let inp = Interval::new(a, (a + len).min(z));
            let z_out = fp.out_len(z).unwrap();
            let touching: Vec<usize> = (0..z_out)
                .filter(|&o| {
                    let st = (o * s) as i64 - p as i64;
                    st < inp.end as i64 && st + k as i64 > inp.start as i64
                })
                .collect();
            let got = fp.reach(inp, z).unwrap();
            match got {
                None => prop_assert!(touching.is_empty()),
                Some(r) => prop_assert_eq!((r.start..r.end).collect::<Vec<_>>(), touching),
            }
        }

        #[test]
        fn forward_span_inverts_backproject(z in 4usize..40, k in 1usize..6, s in 1usize..4,
                                            p in 0usize..5, a in 0usize..40, len in 1usize..10) {
            prop_assume!(p < k && z + 2 * p >= k);
            let fp = Footprint::new(k, s, p).unwrap();
            let z_out = fp.out_len(z).unwrap();
            prop_assume!(a < z_out);
            let out = Interval::new(a, (a + len).min(z_out));
            let inp = fp.backproject(out, z).unwrap().interval;
            let span = fp.forward_span(inp, z).unwrap().unwrap();
            prop_assert!(span.contains(&out));
        }
    }
}
