//! Finite-difference checks of every backward pass. Each check handles one
//! seed and returns `(name, worst relative error, tolerance)` triples.

use super::*;
use derain_core::filtering::{
    fuse_scales, fuse_scales_backward, normalize_kernels, normalize_kernels_backward,
    pixel_wise_dilated_filter, pixel_wise_dilated_filter_backward,
};
use derain_core::kpn::{derain, derain_taped, kpn_backward, KpnConfig, KpnParams};
use derain_core::loss::{
    combined_loss, combined_loss_backward, l1_loss, l1_loss_backward, ssim, ssim_backward,
    LossConfig, SsimConfig,
};
use derain_core::tensor::{
    avgpool2x2_backward, avgpool2x2_forward, concat_channels_backward, concat_channels_forward,
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, upsample_nearest2x_backward,
    upsample_nearest2x_forward,
};
use derain_core::{ConvLayerParams, DilationFactors, KernelField, Tensor};
use rand::Rng;

pub const SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
const COORDS: usize = 40;

pub type Outcome = Vec<(&'static str, f64, f64)>;
pub type Check = fn(u64) -> Outcome;

/// Every check, in report order.
pub const CHECKS: [(&str, Check); 8] = [
    ("conv", conv),
    ("relu", relu),
    ("pool/upsample/concat", resampling),
    ("dilated filter", dilated_filter),
    ("fusion/softmax", fusion_and_softmax),
    ("ssim/l1/combined", losses),
    ("network adjoint", network_adjoint),
    ("loss through network", loss_through_network),
];

pub fn conv(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let (stride, pad, k) =
        [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (1, 2, 5)][seed as usize % 5];
    let (ci, co) = (size(&mut r, 1, 3), size(&mut r, 1, 3));
    let (h, w) = (size(&mut r, 5, 8), size(&mut r, 5, 8));
    let x = uniform(&[2, ci, h, w], -1.0, 1.0, &mut r);
    let weight = uniform(&[co, ci, k, k], -1.0, 1.0, &mut r);
    let bias = uniform(&[co], -1.0, 1.0, &mut r);
    let layer =
        |w: &Tensor, b: &Tensor| ConvLayerParams::new(w.clone(), b.clone(), stride, pad).unwrap();
    let p = layer(&weight, &bias);
    let y = conv2d_forward(&x, &p).unwrap();
    let probe = uniform(y.shape(), -1.0, 1.0, &mut r);
    let (dx, grads) = conv2d_backward(&x, &p, &probe).unwrap();

    let fx = |t: &Tensor| dot(&conv2d_forward(t, &p).unwrap(), &probe);
    let fw = |t: &Tensor| dot(&conv2d_forward(&x, &layer(t, &bias)).unwrap(), &probe);
    let fb = |t: &Tensor| dot(&conv2d_forward(&x, &layer(&weight, t)).unwrap(), &probe);
    errs.push((
        "conv dx",
        max_grad_err(&x, &dx, &fx, COORDS, &mut r),
        OP_TOL,
    ));
    errs.push((
        "conv dW",
        max_grad_err(&weight, &grads.weight, &fw, COORDS, &mut r),
        OP_TOL,
    ));
    errs.push((
        "conv db",
        max_grad_err(&bias, &grads.bias, &fb, COORDS, &mut r),
        OP_TOL,
    ));
    errs
}

pub fn relu(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let probe = uniform(x.shape(), -1.0, 1.0, &mut r);
    let g = relu_backward(&x, &probe).unwrap();
    let f = |t: &Tensor| dot(&relu_forward(t), &probe);
    errs.push(("relu", max_grad_err(&x, &g, &f, COORDS, &mut r), OP_TOL));
    errs
}

pub fn resampling(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let c = size(&mut r, 1, 3);
    let (h, w) = (2 * size(&mut r, 1, 4), 2 * size(&mut r, 1, 4));
    let x = uniform(&[2, c, h, w], -1.0, 1.0, &mut r);

    let pooled = avgpool2x2_forward(&x).unwrap();
    let probe = uniform(pooled.shape(), -1.0, 1.0, &mut r);
    let g = avgpool2x2_backward(&probe, x.shape()).unwrap();
    let f = |t: &Tensor| dot(&avgpool2x2_forward(t).unwrap(), &probe);
    errs.push(("avgpool", max_grad_err(&x, &g, &f, COORDS, &mut r), OP_TOL));

    let up = upsample_nearest2x_forward(&x).unwrap();
    let probe = uniform(up.shape(), -1.0, 1.0, &mut r);
    let g = upsample_nearest2x_backward(&probe).unwrap();
    let f = |t: &Tensor| dot(&upsample_nearest2x_forward(t).unwrap(), &probe);
    errs.push(("upsample", max_grad_err(&x, &g, &f, COORDS, &mut r), OP_TOL));

    let other = uniform(&[2, 2, h, w], -1.0, 1.0, &mut r);
    let cat = concat_channels_forward(&[&x, &other]).unwrap();
    let probe = uniform(cat.shape(), -1.0, 1.0, &mut r);
    let g = concat_channels_backward(&probe, &[c, 2]).unwrap();
    let f = |t: &Tensor| dot(&concat_channels_forward(&[t, &other]).unwrap(), &probe);
    errs.push((
        "concat",
        max_grad_err(&x, &g[0], &f, COORDS, &mut r),
        OP_TOL,
    ));
    errs
}

pub fn dilated_filter(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let width = [3, 5][seed as usize % 2];
    let dilation = 1 + seed as usize % 4;
    let (h, w) = (size(&mut r, 4, 8), size(&mut r, 4, 8));
    let c = size(&mut r, 1, 3);
    let x = uniform(&[2, c, h, w], -1.0, 1.0, &mut r);
    let kernels = random_kernels(2, width, h, w, &mut r);
    let probe = uniform(x.shape(), -1.0, 1.0, &mut r);
    let (gx, gk) = pixel_wise_dilated_filter_backward(&x, &kernels, dilation, &probe).unwrap();

    let fx = |t: &Tensor| {
        dot(
            &pixel_wise_dilated_filter(t, &kernels, dilation).unwrap(),
            &probe,
        )
    };
    let fk = |t: &Tensor| {
        let k = KernelField::new(t.clone(), width).unwrap();
        dot(
            &pixel_wise_dilated_filter(&x, &k, dilation).unwrap(),
            &probe,
        )
    };
    errs.push((
        "filter image",
        max_grad_err(&x, &gx, &fx, COORDS, &mut r),
        OP_TOL,
    ));
    errs.push((
        "filter kernels",
        max_grad_err(kernels.tensor(), &gk, &fk, COORDS, &mut r),
        OP_TOL,
    ));
    errs
}

pub fn fusion_and_softmax(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let scales: Vec<Tensor> = (0..4)
        .map(|_| uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut r))
        .collect();
    let params = ConvLayerParams::new(
        uniform(&[3, 12, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[3], -0.5, 0.5, &mut r),
        1,
        1,
    )
    .unwrap();
    let out = fuse_scales(&scales, &params).unwrap();
    let probe = uniform(out.shape(), -1.0, 1.0, &mut r);
    let (gs, _) = fuse_scales_backward(&scales, &params, &probe).unwrap();
    let which = seed as usize % 4;
    let f = |t: &Tensor| {
        let mut s = scales.clone();
        s[which] = t.clone();
        dot(&fuse_scales(&s, &params).unwrap(), &probe)
    };
    errs.push((
        "fusion",
        max_grad_err(&scales[which], &gs[which], &f, COORDS, &mut r),
        OP_TOL,
    ));

    let logits = uniform(&[1, 9, 5, 5], -2.0, 2.0, &mut r);
    let probe = uniform(logits.shape(), -1.0, 1.0, &mut r);
    let normalized = normalize_kernels(&logits, 3).unwrap();
    let g = normalize_kernels_backward(&normalized, &probe).unwrap();
    let f = |t: &Tensor| dot(normalize_kernels(t, 3).unwrap().tensor(), &probe);
    errs.push((
        "softmax",
        max_grad_err(&logits, &g, &f, COORDS, &mut r),
        OP_TOL,
    ));
    errs
}

pub fn losses(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let config = SsimConfig::default();
    let mut r = rng(seed);
    let shape = [
        1,
        size(&mut r, 1, 2),
        size(&mut r, 11, 14),
        size(&mut r, 11, 14),
    ];
    let target = uniform(&shape, 0.0, 1.0, &mut r);
    // keep |pred - target| >= 1e-3 so L1 stays off its kink
    let pred = Tensor::from_fn(&shape, |i| {
        let d = r.random_range(1e-3..0.2);
        target.data()[i] + if r.random_bool(0.5) { d } else { -d }
    });

    let g = ssim_backward(&pred, &target, &config).unwrap();
    let f = |t: &Tensor| ssim(t, &target, &config).unwrap();
    errs.push(("ssim", max_grad_err(&pred, &g, &f, COORDS, &mut r), OP_TOL));

    let g = l1_loss_backward(&pred, &target).unwrap();
    let f = |t: &Tensor| l1_loss(t, &target).unwrap();
    errs.push(("l1", max_grad_err(&pred, &g, &f, COORDS, &mut r), OP_TOL));

    let loss = LossConfig::default();
    let g = combined_loss_backward(&pred, &target, &loss).unwrap();
    let f = |t: &Tensor| combined_loss(t, &target, &loss).unwrap().total;
    errs.push((
        "combined",
        max_grad_err(&pred, &g, &f, COORDS, &mut r),
        OP_TOL,
    ));
    errs
}

fn small_network(seed: u64, normalize: bool) -> KpnParams {
    let config = KpnConfig {
        levels: 2,
        base_channels: 4,
        kernel_width: 3,
        dilations: DilationFactors::new(vec![1, 2]).unwrap(),
        input_channels: 3,
        normalize_kernels: normalize,
    };
    let mut params = KpnParams::init(&config, seed).unwrap();
    // move away from the near-identity start so every layer carries gradient
    let mut r = rng(seed ^ 0x5eed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    params
}

/// Max relative error over `count` random parameter entries of `f(params)`.
/// Entries where `params +- FD_STEP` puts some ReLU on a different linear piece
/// (the central difference would straddle a kink) are redrawn; their number is
/// returned alongside.
fn param_grad_err(
    params: &KpnParams,
    image: &Tensor,
    analytic: &[Tensor],
    f: &dyn Fn(&KpnParams) -> f64,
    count: usize,
    r: &mut derain_core::PinnedRng,
) -> (f64, usize) {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let f0 = f(params);
    let pattern = |p: &KpnParams| derain_taped(p, image).unwrap().1.kpn().relu_pattern();
    let base = pattern(params);
    let (mut worst, mut skipped, mut checked) = (0.0f64, 0, 0);
    while checked < count {
        assert!(skipped < 20 * count, "almost every entry straddles a kink");
        let ti = loop {
            let i = r.random_range(0..sizes.len());
            if sizes[i] > 0 {
                break i;
            }
        };
        let j = r.random_range(0..sizes[ti]);
        let shifted = |delta: f64| {
            let mut p = params.clone();
            p.tensors_mut()[ti].data_mut()[j] += delta;
            p
        };
        let (plus, minus) = (shifted(FD_STEP), shifted(-FD_STEP));
        if pattern(&plus) != base || pattern(&minus) != base {
            skipped += 1;
            continue;
        }
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[ti].data()[j], numeric, f0));
        checked += 1;
    }
    (worst, skipped)
}

pub fn network_adjoint(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let mut r = rng(seed);
    let params = small_network(seed, seed % 2 == 1);
    let x = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let probe = uniform(x.shape(), -1.0, 1.0, &mut r);
    let grads = kpn_backward(&params, &x, &probe).unwrap();
    let f = |p: &KpnParams| dot(&derain(p, &x).unwrap(), &probe);
    let count = params.param_count() / 100 + 1;
    let (err, _) = param_grad_err(&params, &x, &grads.tensors, &f, count, &mut r);
    errs.push(("network adjoint", err, OP_TOL));
    errs
}

pub fn loss_through_network(seed: u64) -> Outcome {
    let mut errs = Vec::new();
    let loss = LossConfig::default();
    let mut r = rng(seed);
    let params = small_network(seed, false);
    let x = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let out = derain(&params, &x).unwrap();
    // targets at least 1e-3 from the output keep the L1 term off its kink
    let target = Tensor::from_fn(out.shape(), |i| {
        let d = r.random_range(1e-3..0.3);
        out.data()[i] + if r.random_bool(0.5) { d } else { -d }
    });
    let g_out = combined_loss_backward(&out, &target, &loss).unwrap();
    let grads = kpn_backward(&params, &x, &g_out).unwrap();
    let f = |p: &KpnParams| {
        combined_loss(&derain(p, &x).unwrap(), &target, &loss)
            .unwrap()
            .total
    };
    let (err, _) = param_grad_err(&params, &x, &grads.tensors, &f, 50, &mut r);
    errs.push(("loss through network", err, NETWORK_TOL));
    errs
}
