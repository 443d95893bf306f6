//! Whole-image baseline, run comparison, lockstep training and gradient checks.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{accumulate_minibatch, sgd_step, streaming_backward, streaming_forward, MemoryMeter, ParamGrads};
use crate::error::{Error, Result};
use crate::network::{backward_layers, forward_layers, LayerSpec, NetParams, NetworkSpec, Trace};
use crate::nn::bce_with_logits;
use crate::planner::TilePlan;
use crate::tensor::{DType, Dims, Scalar, Tensor4};

/// Everything one executor produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput<T> {
    pub loss: T,
    pub logit: T,
    pub split_map: Tensor4<T>,
    pub grads: ParamGrads<T>,
    /// Peak tracked activation bytes of the run.
    pub peak_bytes: usize,
}

/// Conventional forward and backward pass over the whole image.
pub fn baseline_forward_backward<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    label: u8,
) -> Result<RunOutput<T>> {
    params.check(net)?;
    let d = image.dims();
    if d.n != 1 || d.c != net.input_channels || d.h != d.w {
        return Err(Error::Shape(format!(
            "expected one square {}-channel image, got {d}",
            net.input_channels
        )));
    }
    net.validate(d.h)?;
    let trace = forward_layers(&net.layers, &params.layers, image.clone())?;
    let logit = trace.output().data()[0];
    let (loss, dlogit) = bce_with_logits(logit, label);
    if !loss.as_f64().is_finite() {
        return Err(Error::NonFinite(format!("baseline loss {}", loss.as_f64())));
    }
    let g = Tensor4::filled(Dims::new(1, 1, 1, 1), dlogit);
    let (_, layers) = backward_layers(&net.layers, &params.layers, &trace, g, false)?;
    Ok(RunOutput {
        loss,
        logit,
        split_map: trace.acts[net.split_index].clone(),
        grads: ParamGrads::from_layers(layers),
        peak_bytes: trace.activation_bytes(),
    })
}

/// Streaming counterpart of [`baseline_forward_backward`].
pub fn streaming_forward_backward<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    image: &Tensor4<T>,
    label: u8,
    plan: &TilePlan,
) -> Result<RunOutput<T>> {
    let mut meter = MemoryMeter::new();
    let state = streaming_forward(net, params, image, plan, &mut meter)?;
    let split_map = state.split_map().clone();
    let logit = state.logit();
    let (loss, dlogit) = bce_with_logits(logit, label);
    if !loss.as_f64().is_finite() {
        return Err(Error::NonFinite(format!("streaming loss {}", loss.as_f64())));
    }
    let (grads, _) = streaming_backward(net, params, image, plan, state, dlogit, &mut meter)?;
    Ok(RunOutput {
        loss,
        logit,
        split_map,
        grads,
        peak_bytes: meter.peak(),
    })
}

/// `|a - b| / max(|a|, |b|, 1e-30)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Absolute bound on the loss and logit differences.
    pub loss: f64,
    /// Elementwise relative bound on the split map.
    pub split_map: f64,
    /// Elementwise relative bound on every gradient tensor.
    pub grads: f64,
}

impl Tolerances {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::Double => Tolerances {
                loss: 1e-10,
                split_map: 1e-10,
                grads: 1e-9,
            },
            DType::Single => Tolerances {
                loss: 1e-4,
                split_map: 1e-4,
                grads: 1e-4,
            },
        }
    }

    pub fn uniform(tol: f64) -> Self {
        Tolerances {
            loss: tol,
            split_map: tol,
            grads: tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityDiff {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub mean_abs: f64,
    pub metric: Metric,
    pub tol: f64,
    pub pass: bool,
}

impl QuantityDiff {
    fn new(name: &str, a: &[f64], b: &[f64], metric: Metric, tol: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{name}: {} vs {} elements", a.len(), b.len())));
        }
        let (mut max_abs, mut max_rel, mut sum_abs) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(rel_diff(x, y));
            sum_abs += d;
        }
        let mean_abs = if a.is_empty() { 0.0 } else { sum_abs / a.len() as f64 };
        let measured = match metric {
            Metric::Absolute => max_abs,
            Metric::Relative => max_rel,
        };
        Ok(QuantityDiff {
            name: name.to_string(),
            max_abs,
            max_rel,
            mean_abs,
            metric,
            tol,
            pass: measured <= tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub quantities: Vec<QuantityDiff>,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn first_failure(&self) -> Option<&QuantityDiff> {
        self.quantities.iter().find(|q| !q.pass)
    }

    pub fn get(&self, name: &str) -> Option<&QuantityDiff> {
        self.quantities.iter().find(|q| q.name == name)
    }

    /// Largest elementwise relative difference over the gradient tensors.
    pub fn max_grad_rel(&self) -> f64 {
        self.quantities
            .iter()
            .filter(|q| q.name.starts_with("grad "))
            .map(|q| q.max_rel)
            .fold(0.0, f64::max)
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Compares the gradients of two parameter sets tensor by tensor.
pub fn compare_grads<T: Scalar>(a: &NetParams<T>, b: &NetParams<T>, tol: f64) -> Result<Vec<QuantityDiff>> {
    if !a.same_shape(b) {
        return Err(Error::Shape("gradient sets differ in shape".into()));
    }
    a.slices()
        .iter()
        .zip(b.slices())
        .map(|(x, y)| {
            QuantityDiff::new(
                &format!("grad {}", x.name),
                &to_f64(x.data),
                &to_f64(y.data),
                Metric::Relative,
                tol,
            )
        })
        .collect()
}

/// Element-by-element comparison of two runs on the same image.
pub fn compare_runs<T: Scalar>(a: &RunOutput<T>, b: &RunOutput<T>, tol: &Tolerances) -> Result<EquivalenceReport> {
    if a.split_map.dims() != b.split_map.dims() {
        return Err(Error::Shape(format!(
            "split maps {} vs {}",
            a.split_map.dims(),
            b.split_map.dims()
        )));
    }
    let mut quantities = vec![
        QuantityDiff::new(
            "loss",
            &[a.loss.as_f64()],
            &[b.loss.as_f64()],
            Metric::Absolute,
            tol.loss,
        )?,
        QuantityDiff::new(
            "logit",
            &[a.logit.as_f64()],
            &[b.logit.as_f64()],
            Metric::Absolute,
            tol.loss,
        )?,
        QuantityDiff::new(
            "split_map",
            &to_f64(a.split_map.data()),
            &to_f64(b.split_map.data()),
            Metric::Relative,
            tol.split_map,
        )?,
    ];
    quantities.extend(compare_grads(&a.grads.grads, &b.grads.grads, tol.grads)?);
    let pass = quantities.iter().all(|q| q.pass);
    Ok(EquivalenceReport { quantities, pass })
}

/// One row of the paired-metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockstepRow {
    pub step: usize,
    pub loss_sgd: f64,
    pub loss_ssgd: f64,
    pub abs_diff: f64,
    pub max_grad_rel_diff: f64,
}

#[derive(Debug, Clone)]
pub struct LockstepResult<T> {
    pub rows: Vec<LockstepRow>,
    pub params_sgd: NetParams<T>,
    pub params_ssgd: NetParams<T>,
    /// Largest elementwise relative difference between the final parameters.
    pub final_param_rel_diff: f64,
}

impl<T> LockstepResult<T> {
    pub fn mean_abs_loss_diff(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.abs_diff).sum::<f64>() / self.rows.len() as f64
    }

    pub fn max_abs_loss_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.abs_diff).fold(0.0, f64::max)
    }
}

/// Training settings shared by both lockstep arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockstepSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Run the two arms on separate threads.
    pub parallel: bool,
}

/// Mean loss and averaged gradients of one mini-batch.
type StepResult<T> = (f64, ParamGrads<T>);

fn batch_step<T: Scalar>(
    images: &[(&Tensor4<T>, u8)],
    mut run: impl FnMut(&Tensor4<T>, u8) -> Result<RunOutput<T>>,
) -> Result<StepResult<T>> {
    let mut losses = 0.0;
    let mut grads = Vec::with_capacity(images.len());
    for &(img, label) in images {
        let out = run(img, label)?;
        losses += out.loss.as_f64();
        grads.push(out.grads);
    }
    Ok((losses / images.len() as f64, accumulate_minibatch(&grads)?))
}

/// Trains whole-image and streaming arms from the same parameters on the same
/// image order, recording paired per-step losses.
///
/// Images are visited cyclically. Every step reruns the baseline on its first
/// image and fails if the rerun is not bit-identical.
pub fn lockstep_train<T: Scalar>(
    net: &NetworkSpec,
    params0: &NetParams<T>,
    dataset: &[(Tensor4<T>, u8)],
    plan: &TilePlan,
    settings: &LockstepSettings,
) -> Result<LockstepResult<T>> {
    if settings.steps > 0 && (dataset.is_empty() || settings.batch == 0) {
        return Err(Error::Config(
            "lockstep training needs data and a positive batch size".into(),
        ));
    }
    let lr = T::of(settings.lr);
    let mut p_sgd = params0.clone();
    let mut p_ssgd = params0.clone();
    let mut rows = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let images: Vec<(&Tensor4<T>, u8)> = (0..settings.batch)
            .map(|j| {
                let (img, label) = &dataset[(step * settings.batch + j) % dataset.len()];
                (img, *label)
            })
            .collect();
        let sgd_arm = || batch_step(&images, |img, y| baseline_forward_backward(net, &p_sgd, img, y));
        let ssgd_arm = || batch_step(&images, |img, y| streaming_forward_backward(net, &p_ssgd, img, y, plan));
        let (sgd, ssgd) = if settings.parallel {
            std::thread::scope(|s| {
                let h = s.spawn(ssgd_arm);
                let sgd = sgd_arm();
                (sgd, h.join().expect("streaming arm panicked"))
            })
        } else {
            (sgd_arm(), ssgd_arm())
        };
        let ((loss_sgd, g_sgd), (loss_ssgd, g_ssgd)) = (sgd?, ssgd?);

        let (img, label) = images[0];
        let first = baseline_forward_backward(net, &p_sgd, img, label)?;
        let again = baseline_forward_backward(net, &p_sgd, img, label)?;
        if first != again {
            return Err(Error::Nondeterminism(format!("baseline rerun differs at step {step}")));
        }

        let max_grad_rel_diff = compare_grads(&g_sgd.grads, &g_ssgd.grads, f64::INFINITY)?
            .iter()
            .map(|q| q.max_rel)
            .fold(0.0, f64::max);
        sgd_step(&mut p_sgd, &g_sgd, lr)?;
        sgd_step(&mut p_ssgd, &g_ssgd, lr)?;
        rows.push(LockstepRow {
            step,
            loss_sgd,
            loss_ssgd,
            abs_diff: (loss_sgd - loss_ssgd).abs(),
            max_grad_rel_diff,
        });
    }
    let final_param_rel_diff = p_sgd
        .slices()
        .iter()
        .zip(p_ssgd.slices())
        .flat_map(|(a, b)| {
            a.data
                .iter()
                .zip(b.data)
                .map(|(x, y)| rel_diff(x.as_f64(), y.as_f64()))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    Ok(LockstepResult {
        rows,
        params_sgd: p_sgd,
        params_ssgd: p_ssgd,
        final_param_rel_diff,
    })
}

/// Writes `step,loss_sgd,loss_ssgd,abs_diff,max_grad_rel_diff`.
pub fn write_lockstep_csv<W: Write>(rows: &[LockstepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    /// Coordinates left unscored because their stencil crosses a kink.
    pub skipped_nonsmooth: usize,
}

/// Denominator floor of the finite-difference relative error.
pub const FD_REL_FLOOR: f64 = 1e-7;

/// Central-difference check of `analytic` against the loss of one executor:
/// the tiled forward pass when `plan` is given, the whole-image pass otherwise.
///
/// Samples up to `per_tensor` coordinates of every parameter tensor (all of
/// them for smaller tensors). The relative error uses
/// `max(|fd|, |analytic|, FD_REL_FLOOR)` as denominator.
///
/// Central differences only estimate the derivative where the loss is smooth
/// over `[p - eps, p + eps]`. Coordinates whose two evaluations see different
/// ReLU signs or max-pool winners are counted in `skipped_nonsmooth` instead
/// of being scored.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    net: &NetworkSpec,
    params: &NetParams<f64>,
    image: &Tensor4<f64>,
    label: u8,
    plan: Option<&TilePlan>,
    eps: f64,
    analytic: &NetParams<f64>,
    per_tensor: usize,
    seed: u64,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    if !params.same_shape(analytic) {
        return Err(Error::Shape("analytic gradients do not match parameters".into()));
    }
    let loss_at = |p: &NetParams<f64>| -> Result<(f64, Vec<usize>)> {
        let trace = forward_layers(&net.layers, &p.layers, image.clone())?;
        let logit = match plan {
            Some(plan) => streaming_forward(net, p, image, plan, &mut MemoryMeter::new())?.logit(),
            None => trace.output().data()[0],
        };
        let (loss, _) = bce_with_logits(logit, label);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} during finite differences")));
        }
        Ok((loss, activation_pattern(net, &trace)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.slices().iter().map(|s| s.name.clone()).collect();
    let grads: Vec<Vec<f64>> = analytic.slices().iter().map(|s| s.data.to_vec()).collect();
    let mut probe = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coords_checked: 0,
        skipped_nonsmooth: 0,
    };
    for (t, name) in names.iter().enumerate() {
        let len = grads[t].len();
        let coords = if len <= per_tensor {
            (0..len).collect::<Vec<_>>()
        } else {
            let mut c = sample(&mut rng, len, per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = probe.slices_mut()[t][j];
            probe.slices_mut()[t][j] = orig + eps;
            let (up, up_pattern) = loss_at(&probe)?;
            probe.slices_mut()[t][j] = orig - eps;
            let (down, down_pattern) = loss_at(&probe)?;
            probe.slices_mut()[t][j] = orig;
            if up_pattern != down_pattern {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * eps);
            let an = grads[t][j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_REL_FLOOR);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = name.clone();
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// ReLU input signs and max-pool winners, in layer order.
fn activation_pattern<T: Scalar>(net: &NetworkSpec, trace: &Trace<T>) -> Vec<usize> {
    let mut pattern = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Relu => pattern.extend(trace.acts[i].data().iter().map(|v| usize::from(v.as_f64() > 0.0))),
            LayerSpec::MaxPool { .. } => {
                if let Some(am) = &trace.argmax[i] {
                    pattern.extend_from_slice(&am.indices);
                }
            }
            _ => {}
        }
    }
    pattern
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::nn::ConvSpec;
    use crate::planner::{build_tile_plan, Grid};
    use rand::Rng;

    fn net() -> NetworkSpec {
        NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(3, 1, 0, 1, 3).unwrap()),
                LayerSpec::Relu,
                LayerSpec::Conv(ConvSpec::new(3, 2, 0, 3, 2).unwrap()),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { width: 1 },
            ],
            split_index: 3,
        }
    }

    fn image(seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Dims::new(1, 1, 20, 20), |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_bias_loss() {
        let net = net();
        let mut params = NetParams::<f64>::zeros(&net, 20).unwrap();
        if let LayerParams::Dense(d) = &mut params.layers[6] {
            d.bias[0] = 0.7;
        }
        let out = baseline_forward_backward(&net, &params, &image(1), 1).unwrap();
        assert_eq!(out.loss, bce_with_logits(0.7, 1).0);
    }

    #[test]
    fn identical_runs_compare_clean_and_symmetric() {
        let net = net();
        let params = NetParams::init(&net, 20, 2).unwrap();
        let a = baseline_forward_backward(&net, &params, &image(3), 0).unwrap();
        let r = compare_runs(&a, &a, &Tolerances::uniform(0.0)).unwrap();
        assert!(r.pass);
        assert!(r.quantities.iter().all(|q| q.max_abs == 0.0 && q.max_rel == 0.0));

        let plan = build_tile_plan(&net, 20, Grid::new(2, 2)).unwrap();
        let b = streaming_forward_backward(&net, &params, &image(3), 0, &plan).unwrap();
        let ab = compare_runs(&a, &b, &Tolerances::for_dtype(DType::Double)).unwrap();
        let ba = compare_runs(&b, &a, &Tolerances::for_dtype(DType::Double)).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.pass);
        assert_eq!(ab.get("split_map").unwrap().max_abs, 0.0);
    }

    #[test]
    fn perturbed_gradient_is_named() {
        let net = net();
        let params = NetParams::init(&net, 20, 2).unwrap();
        let a = baseline_forward_backward(&net, &params, &image(3), 0).unwrap();
        let mut b = a.clone();
        b.grads.grads.slices_mut()[2][0] += 1e-2;
        let r = compare_runs(&a, &b, &Tolerances::for_dtype(DType::Double)).unwrap();
        assert!(!r.pass);
        assert_eq!(r.first_failure().unwrap().name, "grad layer2.weight");
    }

    #[test]
    fn lockstep_zero_steps_and_short_run() {
        let net = net();
        let params = NetParams::init(&net, 20, 4).unwrap();
        let plan = build_tile_plan(&net, 20, Grid::new(2, 2)).unwrap();
        let data: Vec<(Tensor4<f64>, u8)> = (0..4).map(|i| (image(10 + i), (i % 2) as u8)).collect();
        let mut settings = LockstepSettings {
            steps: 0,
            batch: 2,
            lr: 0.05,
            parallel: false,
        };
        let r = lockstep_train(&net, &params, &data, &plan, &settings).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.final_param_rel_diff, 0.0);

        settings.steps = 5;
        let serial = lockstep_train(&net, &params, &data, &plan, &settings).unwrap();
        assert!(serial.max_abs_loss_diff() <= 1e-10);
        settings.parallel = true;
        let parallel = lockstep_train(&net, &params, &data, &plan, &settings).unwrap();
        assert_eq!(serial.rows, parallel.rows);

        let mut buf = Vec::new();
        write_lockstep_csv(&serial.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss_sgd,loss_ssgd,abs_diff,max_grad_rel_diff\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn finite_differences_agree_with_backprop() {
        let net = net();
        let params = NetParams::init(&net, 20, 6).unwrap();
        let img = image(7);
        let base = baseline_forward_backward(&net, &params, &img, 1).unwrap();
        let fd = finite_difference_check(&net, &params, &img, 1, None, 1e-5, &base.grads.grads, 200, 1).unwrap();
        assert!(fd.max_rel_err <= 1e-5, "{fd:?}");
        assert!(fd.coords_checked > 100);
        let plan = build_tile_plan(&net, 20, Grid::new(2, 2)).unwrap();
        let stream = streaming_forward_backward(&net, &params, &img, 1, &plan).unwrap();
        let fd =
            finite_difference_check(&net, &params, &img, 1, Some(&plan), 1e-5, &stream.grads.grads, 200, 1).unwrap();
        assert!(fd.max_rel_err <= 1e-5, "{fd:?}");
        assert!(finite_difference_check(&net, &params, &img, 1, None, 0.0, &base.grads.grads, 10, 1).is_err());
    }

    #[test]
    fn stencils_across_a_relu_kink_are_skipped() {
        let net = NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(1, 1, 0, 1, 1).unwrap()),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 1 },
            ],
            split_index: 2,
        };
        let mut params = NetParams::init(&net, 4, 2).unwrap();
        if let LayerParams::Conv(c) = &mut params.layers[0] {
            c.weight.data_mut()[0] = 1.0;
            c.bias[0] = 0.0;
        }
        // one pre-activation sits 1e-6 above zero
        let img = Tensor4::from_fn(Dims::new(1, 1, 4, 4), |_, _, y, x| if y + x == 0 { 1e-6 } else { 0.5 });
        let base = baseline_forward_backward(&net, &params, &img, 1).unwrap();
        let fd = finite_difference_check(&net, &params, &img, 1, None, 1e-5, &base.grads.grads, 200, 1).unwrap();
        // only the bias moves that pre-activation by more than 1e-6
        assert_eq!(fd.skipped_nonsmooth, 1, "{fd:?}");
        assert!(fd.max_rel_err <= 1e-5, "{fd:?}");
    }

    #[test]
    fn truncation_error_scales_with_eps_squared() {
        let net = NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(3, 1, 0, 1, 2).unwrap()),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 1 },
            ],
            split_index: 1,
        };
        let params = NetParams::init(&net, 8, 3).unwrap();
        let img = image(4).crop(0, 0, 8, 8).unwrap();
        let base = baseline_forward_backward(&net, &params, &img, 1).unwrap();
        let err = |eps| {
            finite_difference_check(&net, &params, &img, 1, None, eps, &base.grads.grads, 200, 1)
                .unwrap()
                .max_rel_err
        };
        let ratio = err(1e-2) / err(1e-3);
        assert!((30.0..300.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn linear_model_is_nearly_exact() {
        // dense-only head on a 1x1 conv: the logit is linear in each parameter
        let net = NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(1, 1, 0, 1, 1).unwrap()),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 1 },
            ],
            split_index: 1,
        };
        let params = NetParams::init(&net, 4, 1).unwrap();
        let img = Tensor4::from_fn(Dims::new(1, 1, 4, 4), |_, _, y, x| (y as f64 - x as f64) / 8.0);
        let base = baseline_forward_backward(&net, &params, &img, 0).unwrap();
        let fd = finite_difference_check(&net, &params, &img, 0, None, 1e-5, &base.grads.grads, 200, 1).unwrap();
        assert!(fd.max_rel_err <= 1e-8, "{fd:?}");
    }
}
