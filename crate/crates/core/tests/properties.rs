use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamsgd::equivalence::{
    baseline_forward_backward, compare_grads, compare_runs, streaming_forward_backward, Tolerances,
};
use streamsgd::nn::conv::conv2d_forward_window;
use streamsgd::nn::{conv2d_forward, ConvParams, ConvSpec, MapWindow};
use streamsgd::planner::{backward_overlap, forward_overlap};
use streamsgd::reference;
use streamsgd::{
    build_tile_plan, estimate_streaming, estimate_whole_image, DType, Dims, Grid, LayerSpec, NetParams, NetworkSpec,
    Region, Tensor4,
};

fn random_tensor(seed: u64, dims: Dims) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn arb_layer() -> impl Strategy<Value = (u8, usize, usize, bool, usize)> {
    (
        0u8..4,
        prop::sample::select(vec![1usize, 2, 3, 5]),
        1usize..3,
        any::<bool>(),
        1usize..4,
    )
}

fn build_net(c0: usize, raw: &[(u8, usize, usize, bool, usize)]) -> NetworkSpec {
    let mut c = c0;
    let mut layers = Vec::new();
    for &(kind, k, s, pad, c_out) in raw {
        match kind {
            0 | 1 => {
                let p = if pad { (k - 1) / 2 } else { 0 };
                layers.push(LayerSpec::Conv(ConvSpec::new(k, s, p, c, c_out).unwrap()));
                c = c_out;
            }
            2 => layers.push(LayerSpec::MaxPool { k: 2, s: 2 }),
            _ => layers.push(LayerSpec::Relu),
        }
    }
    let split_index = layers.len();
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { width: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { width: 1 },
    ]);
    NetworkSpec {
        input_channels: c0,
        layers,
        split_index,
    }
}

proptest! {
    #[test]
    fn halos_grow_with_kernel_and_shrink_with_stride(k in 1usize..8, s in 1usize..5, extra in 0usize..40) {
        let z = k + 1 + extra;
        for f in [forward_overlap, backward_overlap] {
            prop_assert!(f(k + 1, s, z, false).unwrap() >= f(k, s, z, false).unwrap());
            if s > 1 {
                prop_assert!(f(k, s - 1, z, false).unwrap() >= f(k, s, z, false).unwrap());
            }
        }
    }

    #[test]
    fn forward_halo_never_exceeds_backward(k in 1usize..8, s in 1usize..5, extra in 0usize..40, b: bool) {
        prop_assume!(k >= s);
        let z = k + extra;
        prop_assert!(forward_overlap(k, s, z, b).unwrap() <= backward_overlap(k, s, z, b).unwrap());
    }

    #[test]
    fn any_pixel_from_a_covering_crop_is_bit_identical(
        k in 1usize..6, s in 1usize..4, pad: bool, z in 8usize..24,
        oy_frac in 0.0f64..1.0, ox_frac in 0.0f64..1.0,
        margins in (0usize..3, 0usize..3, 0usize..3, 0usize..3),
        seed: u64,
    ) {
        let p = if pad { (k - 1) / 2 } else { 0 };
        prop_assume!(z + 2 * p >= k);
        let spec = ConvSpec::new(k, s, p, 2, 2).unwrap();
        let x = random_tensor(seed, Dims::new(1, 2, z, z));
        let params = ConvParams {
            weight: random_tensor(seed ^ 1, spec.weight_dims()),
            bias: vec![0.25, -0.5],
        };
        let whole = conv2d_forward(&x, &spec, &params).unwrap();
        let out_len = whole.dims().h;
        let oy = ((oy_frac * out_len as f64) as usize).min(out_len - 1);
        let ox = ((ox_frac * out_len as f64) as usize).min(out_len - 1);
        // receptive field, clipped to the map, widened by random margins
        let lo = |o: usize, m: usize| (o * s).saturating_sub(p).saturating_sub(m);
        let hi = |o: usize, m: usize| (o * s + k - p + m).min(z);
        let region = Region::new(lo(oy, margins.0), lo(ox, margins.1), hi(oy, margins.2), hi(ox, margins.3));
        let crop = x.crop(region.y0, region.x0, region.height(), region.width()).unwrap();
        let at = MapWindow::new(region, z, z).unwrap();
        let part = conv2d_forward_window(&crop, &at, &spec, &params, &Region::new(oy, ox, oy + 1, ox + 1)).unwrap();
        for c in 0..2 {
            prop_assert_eq!(part.at(0, c, 0, 0).to_bits(), whole.at(0, c, oy, ox).to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streaming_matches_whole_image(
        c0 in 1usize..3,
        raw in prop::collection::vec(arb_layer(), 1..5),
        size in 16usize..48,
        grid in prop::sample::select(vec![(1usize, 1usize), (2, 2), (2, 4), (4, 4), (3, 2)]),
        seed: u64,
    ) {
        let net = build_net(c0, &raw);
        prop_assume!(net.validate(size).is_ok());
        let Ok(plan) = build_tile_plan(&net, size, Grid::new(grid.0, grid.1)) else { return Ok(()) };
        let params = NetParams::<f64>::init(&net, size, seed).unwrap();
        let image = random_tensor(seed ^ 2, Dims::new(1, c0, size, size));
        let label = (seed % 2) as u8;

        let base = baseline_forward_backward(&net, &params, &image, label).unwrap();
        let stream = streaming_forward_backward(&net, &params, &image, label, &plan).unwrap();
        prop_assert_eq!(base.split_map.data(), stream.split_map.data());
        prop_assert_eq!(base.loss.to_bits(), stream.loss.to_bits());
        for q in compare_grads(&base.grads.grads, &stream.grads.grads, 1e-11).unwrap() {
            prop_assert!(q.pass, "{} rel {}", q.name, q.max_rel);
        }

        let (p32, i32) = (params.cast::<f32>(), image.cast::<f32>());
        let base = baseline_forward_backward(&net, &p32, &i32, label).unwrap();
        let stream = streaming_forward_backward(&net, &p32, &i32, label, &plan).unwrap();
        prop_assert_eq!(base.split_map.data(), stream.split_map.data());
        prop_assert_eq!(base.loss.to_bits(), stream.loss.to_bits());
        for q in compare_grads(&base.grads.grads, &stream.grads.grads, 1e-5).unwrap() {
            prop_assert!(q.pass, "{} rel {}", q.name, q.max_rel);
        }
    }

    #[test]
    fn compare_runs_is_symmetric(seed: u64, scale in 1e-12f64..1e-2) {
        let net = reference::global_task(1);
        let params = NetParams::<f64>::init(&net, 32, seed).unwrap();
        let image = random_tensor(seed, Dims::new(1, 1, 32, 32));
        let a = baseline_forward_backward(&net, &params, &image, 1).unwrap();
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        b.loss += scale * rng.gen_range(-1.0..1.0);
        for v in b.split_map.data_mut() {
            *v *= 1.0 + scale * rng.gen_range(-1.0..1.0);
        }
        for s in b.grads.grads.slices_mut() {
            for v in s.iter_mut() {
                *v *= 1.0 + scale * rng.gen_range(-1.0..1.0);
            }
        }
        let tol = Tolerances::uniform(1e-6);
        let ab = compare_runs(&a, &b, &tol).unwrap();
        let ba = compare_runs(&b, &a, &tol).unwrap();
        prop_assert_eq!(ab.pass, ba.pass);
        for (x, y) in ab.quantities.iter().zip(&ba.quantities) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(x.max_abs, y.max_abs);
            prop_assert_eq!(x.max_rel, y.max_rel);
        }
        let aa = compare_runs(&a, &a, &Tolerances::uniform(0.0)).unwrap();
        prop_assert!(aa.pass);
        prop_assert!(aa.quantities.iter().all(|q| q.max_abs == 0.0 && q.max_rel == 0.0));
    }
}

#[test]
fn streaming_peak_below_whole_image_on_reference_configs() {
    let configs = [
        (reference::vgg13_desk(1), reference::VGG13_DESK_IMAGE),
        (reference::vgg13_desk(1), reference::VGG13_FOUR_TILE_IMAGE),
        (reference::global_task(1), reference::GLOBAL_TASK_IMAGE),
        (reference::vgg13_64mp(), reference::VGG13_64MP_IMAGE),
    ];
    for (net, size) in configs {
        let mut last = u64::MAX;
        for grid in [Grid::new(2, 2), Grid::new(4, 4)] {
            let plan = build_tile_plan(&net, size, grid).unwrap();
            for dtype in [DType::Single, DType::Double] {
                let whole = estimate_whole_image(&net, size, 1, dtype).unwrap();
                let stream = estimate_streaming(&net, &plan, 1, dtype).unwrap();
                assert!(
                    stream.peak_activation_bytes <= whole.peak_activation_bytes,
                    "{size}px {grid}"
                );
            }
            let peak = estimate_streaming(&net, &plan, 1, DType::Single)
                .unwrap()
                .peak_activation_bytes;
            assert!(peak < last, "{size}px: finer grid {grid} did not lower the peak");
            last = peak;
        }
    }
}

#[test]
fn whole_image_activations_are_linear_in_batch() {
    let net = reference::vgg13_desk(1);
    let one = estimate_whole_image(&net, 130, 1, DType::Single).unwrap();
    for batch in [2, 3, 8] {
        let many = estimate_whole_image(&net, 130, batch, DType::Single).unwrap();
        assert_eq!(many.total_activation_bytes, batch as u64 * one.total_activation_bytes);
        assert_eq!(many.peak_activation_bytes, batch as u64 * one.peak_activation_bytes);
    }
}
