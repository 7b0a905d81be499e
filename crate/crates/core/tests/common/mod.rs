//! Independent reference implementations shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use hfres::autodiff::{finite_difference_gradient, Tape, Var};
use hfres::layers::Conv2dSpec;
use hfres::net::{wrap_multiscale, BaseNetworkSpec, LayerSpec, MsNetwork, Parameterized, Session};
use hfres::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_RTOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn uniform_f32(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero gradients from
/// turning round-off into large relative errors.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

pub fn max_rel_err(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), n.shape());
    a.data()
        .iter()
        .zip(n.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn assert_close(a: &[f32], b: &[f32], rtol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let (x, y) = (x as f64, y as f64);
        let tol = rtol * x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> hfres::Result<Var>;

/// Checks backward against central differences for every input of `build`,
/// using the scalar `sum(out * r)` with a fixed random `r`.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).unwrap().shape().to_vec()
    };
    let r = uniform(&probe, &mut rng(seed ^ 0xabc));
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = build(tape, vars).unwrap();
        let rv = tape.constant(r.clone());
        let p = tape.mul(out, rv).unwrap();
        tape.sum(p).unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient").clone();
        let numeric = finite_difference_gradient(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.param(if j == i { x.clone() } else { t.clone() }))
                    .collect();
                let l = loss(&mut tape, &vars);
                tape.value(l)?.item()
            },
            input,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Values bounded away from zero so ReLU kinks stay out of the step.
fn off_kink(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Worst relative error per layer operation for one seed.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut g = rng(seed);
    let mut out = Vec::new();
    let mut run = |name, inputs: Vec<Tensor<f64>>, build: Box<Build>| {
        out.push((name, check_op(&inputs, &*build, seed)));
    };

    let spec = Conv2dSpec::new(3, 4, 3, 2, 1, 1).unwrap();
    run(
        "conv2d",
        vec![uniform(&[2, 3, 6, 5], &mut g), uniform(&[4, 3, 3, 3], &mut g), uniform(&[4], &mut g)],
        Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
    );
    let spec = Conv2dSpec::new(4, 6, 3, 1, 1, 2).unwrap();
    run(
        "conv2d grouped",
        vec![uniform(&[2, 4, 5, 5], &mut g), uniform(&[6, 2, 3, 3], &mut g)],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    let spec = Conv2dSpec::new(3, 3, 3, 2, 1, 3).unwrap();
    run(
        "conv2d depthwise",
        vec![uniform(&[2, 3, 7, 7], &mut g), uniform(&[3, 1, 3, 3], &mut g)],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    let spec = Conv2dSpec::new(3, 5, 1, 1, 0, 1).unwrap();
    run(
        "conv2d pointwise",
        vec![uniform(&[1, 3, 4, 4], &mut g), uniform(&[5, 3, 1, 1], &mut g)],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    run(
        "batchnorm train",
        vec![uniform(&[3, 2, 3, 3], &mut g), uniform(&[2], &mut g), uniform(&[2], &mut g)],
        Box::new(|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)),
    );
    let (rm, rv) = (uniform(&[2], &mut g), uniform(&[2], &mut g).map(|v| v.abs() + 0.5));
    run(
        "batchnorm infer",
        vec![uniform(&[2, 2, 3, 3], &mut g), uniform(&[2], &mut g), uniform(&[2], &mut g)],
        Box::new(move |t, v| t.batchnorm_infer(v[0], v[1], v[2], &rm, &rv, 1e-5)),
    );
    run(
        "linear",
        vec![uniform(&[3, 4], &mut g), uniform(&[5, 4], &mut g), uniform(&[5], &mut g)],
        Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
    );
    run(
        "relu",
        vec![off_kink(&[2, 3, 4, 4], &mut g)],
        Box::new(|t, v| t.relu(v[0])),
    );
    run(
        "global avg pool",
        vec![uniform(&[2, 3, 4, 5], &mut g)],
        Box::new(|t, v| t.global_avg_pool(v[0])),
    );
    run(
        "nearest upsample",
        vec![uniform(&[2, 2, 3, 3], &mut g)],
        Box::new(|t, v| t.upsample2x(v[0])),
    );
    run(
        "avg pool 2x2",
        vec![uniform(&[2, 2, 4, 6], &mut g)],
        Box::new(|t, v| t.avg_pool2x(v[0])),
    );
    run(
        "align crop",
        vec![uniform(&[1, 2, 5, 5], &mut g)],
        Box::new(|t, v| t.align(v[0], 4, 4)),
    );
    run(
        "align pad",
        vec![uniform(&[1, 2, 4, 4], &mut g)],
        Box::new(|t, v| t.align(v[0], 5, 6)),
    );
    let labels: Vec<usize> = (0..4).map(|_| g.random_range(0..5)).collect();
    run(
        "softmax cross-entropy",
        vec![uniform(&[4, 5], &mut g).scale(3.0)],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
    );
    run(
        "add/sub/mul/scale",
        vec![uniform(&[2, 3], &mut g), uniform(&[2, 3], &mut g)],
        Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            let c = t.mul(a, b)?;
            t.scale(c, 0.7)
        }),
    );
    out
}

/// Small residual two-scale network on 2-class 8x8 inputs (low branch 4x4).
pub fn tiny_msnet(seed: u64) -> MsNetwork<f64> {
    let spec = BaseNetworkSpec::mini_resnet(2, 2, 0.125);
    wrap_multiscale(&spec, 4, true, seed).unwrap()
}

fn joint_loss(ms: &MsNetwork<f64>, xl: &Tensor<f64>, xh: &Tensor<f64>, labels: &[usize]) -> (f64, Session<f64>, Var) {
    let mut sess = Session::training();
    let a = sess.tape.constant(xl.clone());
    let b = sess.tape.constant(xh.clone());
    let out = ms.record_joint(&mut sess, a, b).unwrap();
    let l = sess.tape.softmax_cross_entropy(out.logits_low, labels).unwrap();
    let h = sess.tape.softmax_cross_entropy(out.logits_high, labels).unwrap();
    let loss = sess.tape.add(l, h).unwrap();
    (sess.tape.value(loss).unwrap().item().unwrap(), sess, loss)
}

pub struct NetGradCheck {
    pub worst: f64,
    pub at: String,
    pub probes: usize,
    /// Coordinates where a ReLU kink lies inside the difference stencil:
    /// the central difference at `h` and `h/10` disagree, so the function is
    /// not differentiable there and the oracle does not apply.
    pub kinks: usize,
}

/// Worst relative error of the joint two-head cross-entropy gradient over
/// every parameter tensor of the two-scale network, probing up to
/// `per_tensor` random coordinates of each tensor.
pub fn msnet_gradient_error(seed: u64, per_tensor: usize) -> NetGradCheck {
    let mut ms = tiny_msnet(seed);
    let mut g = rng(seed ^ 0x5151);
    let xh = uniform(&[4, 2, 8, 8], &mut g);
    let xl = hfres::layers::avg_pool2x(&xh).unwrap();
    let labels = [0, 1, 1, 0];
    let (_, sess, loss) = joint_loss(&ms, &xl, &xh, &labels);
    let mut grads = sess.tape.backward(loss).unwrap();
    let mut report = NetGradCheck {
        worst: 0.0,
        at: String::new(),
        probes: 0,
        kinks: 0,
    };
    for (name, &v) in sess.bindings() {
        let analytic = grads.take(v).expect("every bound parameter gets a gradient");
        let n = analytic.len();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| g.random_range(0..n)).collect()
        };
        for i in idx {
            let orig = ms.param(name).unwrap().data()[i];
            let mut eval = |x: f64| {
                ms.param_mut(name).unwrap().data_mut()[i] = x;
                joint_loss(&ms, &xl, &xh, &labels).0
            };
            let mut central = |h: f64| (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            let numeric = central(FD_STEP);
            let e = rel_err(analytic.data()[i], numeric);
            if e >= GRAD_RTOL && rel_err(central(FD_STEP / 10.0), numeric) >= GRAD_RTOL {
                report.kinks += 1;
            } else if e > report.worst {
                report.worst = e;
                report.at = format!("{name}[{i}]");
            }
            eval(orig);
            report.probes += 1;
        }
    }
    report
}

/// Seven nested loops, straight from the definition.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, s: &Conv2dSpec) -> (Tensor<f64>, u64) {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let oh = (h + 2 * s.padding - s.kernel) / s.stride + 1;
    let ow = (wd + 2 * s.padding - s.kernel) / s.stride + 1;
    let cpg_in = cin / s.groups;
    let cpg_out = s.out_channels / s.groups;
    let mut out = vec![0.0; n * s.out_channels * oh * ow];
    let mut macs = 0u64;
    for b in 0..n {
        for oc in 0..s.out_channels {
            let grp = oc / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cpg_in {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                macs += 1;
                                let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let c = grp * cpg_in + ic;
                                let xv = x.data()[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cpg_in + ic) * s.kernel + ky) * s.kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * s.out_channels + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (Tensor::new(vec![n, s.out_channels, oh, ow], out).unwrap(), macs / n as u64)
}

/// Per-image MACs of one branch at `res`, counted by running the naive
/// convolution over every conv the spec implies, plus the classifier.
/// Also returns the stage-end spatial sizes.
pub fn instrumented_branch_macs(spec: &BaseNetworkSpec, res: usize) -> (u64, Vec<usize>) {
    let mut c = spec.in_channels;
    let mut size = res;
    let mut total = 0u64;
    let mut sizes = Vec::new();
    let conv = |cin: usize, cout: usize, k: usize, s: usize, g: usize, size: usize| {
        let spec = Conv2dSpec::new(cin, cout, k, s, k / 2, g).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, cin, size, size]);
        let w = Tensor::<f64>::zeros(spec.weight_shape().to_vec());
        let (y, macs) = naive_conv(&x, &w, None, &spec);
        (macs, y.shape()[2])
    };
    for stage in spec.scaled_stages() {
        for layer in &stage.layers {
            match *layer {
                LayerSpec::Conv { out_channels, kernel, stride, depthwise } => {
                    let g = if depthwise { c } else { 1 };
                    let (m, s) = conv(c, out_channels, kernel, stride, g, size);
                    total += m;
                    size = s;
                    c = out_channels;
                }
                LayerSpec::BasicBlock { out_channels, stride } => {
                    let (m1, s1) = conv(c, out_channels, 3, stride, 1, size);
                    let (m2, _) = conv(out_channels, out_channels, 3, 1, 1, s1);
                    total += m1 + m2;
                    if stride != 1 || c != out_channels {
                        total += conv(c, out_channels, 1, stride, 1, size).0;
                    }
                    size = s1;
                    c = out_channels;
                }
                LayerSpec::DepthwiseSeparable { out_channels, stride } => {
                    let (m1, s1) = conv(c, c, 3, stride, c, size);
                    let (m2, _) = conv(c, out_channels, 1, 1, 1, s1);
                    total += m1 + m2;
                    size = s1;
                    c = out_channels;
                }
            }
        }
        sizes.push(size);
    }
    (total + (c * spec.num_classes) as u64, sizes)
}

/// A random, structurally valid small base spec.
pub fn random_spec(rng: &mut impl Rng) -> BaseNetworkSpec {
    let in_ch = [1, 3][rng.random_range(0..2)];
    let classes = rng.random_range(2..6);
    let alpha = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
    match rng.random_range(0..3) {
        0 => BaseNetworkSpec::mini_resnet(in_ch, classes, alpha),
        1 => {
            let widths: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(2..9)).collect();
            BaseNetworkSpec::plain(in_ch, &widths, classes, alpha)
        }
        _ => BaseNetworkSpec::mobilenet_with_widths(
            "mobile",
            [rng.random_range(4..9), rng.random_range(4..13), rng.random_range(8..17)],
            in_ch,
            classes,
            alpha,
        ),
    }
}

/// O(N^2 M^2) summation of the 2D DFT.
pub fn direct_dft2d(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    acc += x[m * w + n] * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Worst relative error of `dft2d` against the direct sum over random maps of
/// several sizes, including non-powers of two.
pub fn dft_oracle_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for &(h, w) in &[(8, 8), (4, 16), (6, 10), (7, 5), (1, 8), (16, 16)] {
        let x: Vec<f64> = (0..h * w).map(|_| g.random_range(-1.0..1.0)).collect();
        let fast = hfres::freq::dft2d(&x, h, w).unwrap();
        let slow = direct_dft2d(&x, h, w);
        let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).norm() / scale);
        }
    }
    worst
}

/// Worst relative Parseval mismatch `|Σ|X|² - HW Σx²| / (HW Σx²)` and
/// band-split mismatch over random feature maps.
pub fn parseval_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for &(c, h, w) in &[(1, 8, 8), (3, 6, 10), (4, 16, 16), (2, 5, 7)] {
        let t = uniform(&[c, h, w], &mut g);
        for ch in 0..c {
            let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
            let spatial: f64 = plane.iter().map(|v| v * v).sum();
            let spectral: f64 = hfres::freq::dft2d(plane, h, w).unwrap().iter().map(|z| z.norm_sqr()).sum();
            let expected = (h * w) as f64 * spatial;
            worst = worst.max((spectral - expected).abs() / expected);
        }
        let s = hfres::freq::summarize_spectrum(&t, 0.5).unwrap();
        let expected = (h * w) as f64 * s.spatial_energy;
        worst = worst.max((s.total_energy() - expected).abs() / expected);
    }
    worst
}

/// A random valid convolution and input size.
pub fn random_conv(rng: &mut impl Rng) -> (Conv2dSpec, usize, usize, usize) {
    let groups = [1, 1, 2, 3][rng.random_range(0..4)];
    let cin = groups * rng.random_range(1..4);
    let cout = if rng.random_bool(0.3) { cin } else { groups * rng.random_range(1..4) };
    let groups = if cout == cin && rng.random_bool(0.3) { cin } else { groups };
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..=kernel / 2);
    let h = rng.random_range(kernel..kernel + 6);
    let w = rng.random_range(kernel..kernel + 6);
    let n = rng.random_range(1..3);
    (Conv2dSpec::new(cin, cout, kernel, stride, padding, groups).unwrap(), n, h, w)
}

/// Worst relative error of both convolution algorithms against the naive
/// loops over `configs` random configurations, in f32 (inputs cast from the
/// f64 oracle's).
pub fn conv_oracle_error(seed: u64, configs: usize) -> f64 {
    use hfres::layers::{conv2d_with, ConvAlgo};
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (spec, n, h, w) = random_conv(&mut g);
        let x = uniform(&[n, spec.in_channels, h, w], &mut g);
        let wt = uniform(&spec.weight_shape(), &mut g);
        let b = uniform(&[spec.out_channels], &mut g);
        let (expected, _) = naive_conv(&x, &wt, Some(&b), &spec);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col, ConvAlgo::Auto] {
            let got = conv2d_with(&x.cast::<f32>(), &wt.cast::<f32>(), Some(&b.cast::<f32>()), &spec, algo).unwrap();
            assert_eq!(got.shape(), expected.shape());
            for (&a, &e) in got.data().iter().zip(expected.data()) {
                worst = worst.max((a as f64 - e).abs() / e.abs().max(1.0));
            }
        }
    }
    worst
}

/// Number of random networks whose static branch costs differ from the
/// instrumented counter, out of `configs`.
pub fn flops_oracle_mismatches(seed: u64, configs: usize) -> Vec<String> {
    let mut g = rng(seed);
    let mut bad = Vec::new();
    let mut tried = 0;
    while tried < configs {
        let spec = random_spec(&mut g);
        let low = [4, 6, 8, 12][g.random_range(0..4)];
        let Ok(ms) = wrap_multiscale::<f32>(&spec, low, g.random_bool(0.5), g.random()) else {
            continue;
        };
        tried += 1;
        let costs = hfres::flops::count_static(&ms, low, 2 * low).unwrap();
        let (fl, low_sizes) = instrumented_branch_macs(&spec, low);
        let (fh, high_sizes) = instrumented_branch_macs(&spec, 2 * low);
        // stage-end sizes from an actual forward pass
        let x = Tensor::zeros(vec![1, spec.in_channels, low, low]);
        let (_, feats) = ms.forward_low(&x).unwrap();
        let run_sizes: Vec<usize> = feats.iter().map(|f| f.shape()[2]).collect();
        if costs.f_low != fl || costs.f_high != fh || run_sizes != low_sizes || costs.fusion != 0 {
            bad.push(format!(
                "{} alpha {} at {low}/{}: static {}/{} counted {fl}/{fh}, sizes {run_sizes:?} vs {low_sizes:?} (high {high_sizes:?})",
                spec.name, spec.alpha, 2 * low, costs.f_low, costs.f_high
            ));
        }
    }
    bad
}

/// Worst relative difference between the reuse path (`forward_low`, then
/// `forward_high_given_low`) and the monolithic joint forward over `n`
/// random inputs, in batches of `batch`.
pub fn reuse_error(ms: &MsNetwork, n: usize, batch: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let c = ms.spec().in_channels;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n {
        let b = batch.min(n - done);
        let xh = uniform_f32(&[b, c, ms.high_res(), ms.high_res()], &mut g);
        let xl = hfres::layers::avg_pool2x(&xh).unwrap();
        let (jl, jh) = ms.forward_joint(&xl, &xh).unwrap();
        let (rl, feats) = ms.forward_low(&xl).unwrap();
        let rh = ms.forward_high_given_low(&xh, &feats).unwrap();
        for (a, b) in jl.data().iter().zip(rl.data()).chain(jh.data().iter().zip(rh.data())) {
            let (a, b) = (*a as f64, *b as f64);
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
        done += b;
    }
    worst
}

pub fn grating_sets(train: usize, eval: usize, res: usize, seed: u64) -> (std::sync::Arc<hfres::data::Dataset>, hfres::data::Dataset) {
    use hfres::data::{synthetic_gratings, Split};
    (
        std::sync::Arc::new(synthetic_gratings(train, res, seed, Split::Train)),
        synthetic_gratings(eval, res, seed ^ 0x5eed, Split::Eval),
    )
}

pub fn quick_config(epochs: usize) -> hfres::train::TrainConfig {
    hfres::train::TrainConfig {
        epochs,
        base_lr: 0.05,
        lr_decay_epochs: vec![2],
        batch_size: 32,
        ..Default::default()
    }
}

pub struct ResumeOutcome {
    pub full: Vec<hfres::train::EpochLog>,
    pub resumed: Vec<hfres::train::EpochLog>,
    pub params_identical: bool,
}

/// Trains `epochs` epochs straight through, and again with a checkpoint
/// written to `dir` after `split_at` epochs and reloaded into a fresh model.
pub fn resume_run(dir: &std::path::Path, epochs: usize, split_at: usize) -> ResumeOutcome {
    use hfres::data::NormStats;
    use hfres::train::{capture, restore, train_epochs, Checkpoint, RunOptions, TrainState};
    let (train, eval) = grating_sets(192, 96, 16, 1);
    let cfg = quick_config(epochs);
    let norm = NormStats::compute(&train.images).unwrap();
    let spec = BaseNetworkSpec::mini_resnet(3, 10, 0.25);
    let fresh = || -> MsNetwork { wrap_multiscale(&spec, 8, true, 5).unwrap() };
    let opts = RunOptions::default();

    let mut a = fresh();
    let mut sa = TrainState::new(5);
    let full = train_epochs(&mut a, &mut sa, &cfg, &train, &eval, &norm, epochs, &opts, |_, _, _| Ok(())).unwrap();

    let mut b = fresh();
    let mut sb = TrainState::new(5);
    let mut resumed =
        train_epochs(&mut b, &mut sb, &cfg, &train, &eval, &norm, split_at, &opts, |_, _, _| Ok(())).unwrap();
    let path = dir.join("resume.mshf");
    capture(&b, &sb, &norm).unwrap().save(&path).unwrap();
    drop(b);
    let mut c = fresh();
    let (mut sc, norm_c) = restore(&mut c, &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.extend(
        train_epochs(&mut c, &mut sc, &cfg, &train, &eval, &norm_c, epochs, &opts, |_, _, _| Ok(())).unwrap(),
    );
    let params_identical = a.param_names().iter().all(|n| a.param(n).unwrap().data() == c.param(n).unwrap().data());
    ResumeOutcome {
        full,
        resumed,
        params_identical,
    }
}

/// Final train loss of two identical single-threaded runs.
pub fn determinism_run() -> (f64, f64) {
    let run = || {
        let (train, eval) = grating_sets(128, 64, 16, 2);
        let norm = hfres::data::NormStats::compute(&train.images).unwrap();
        let mut ms: MsNetwork = wrap_multiscale(&BaseNetworkSpec::mini_resnet(3, 10, 0.25), 8, true, 9).unwrap();
        let log = hfres::train::train(&mut ms, &train, &eval, &norm, &quick_config(2), 9).unwrap();
        log.last().unwrap().train_loss
    };
    (run(), run())
}

pub fn region_fixture() -> Vec<hfres::calibration::CalibrationResult> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/region_fixture.csv");
    hfres::calibration::read_records(std::fs::File::open(path).unwrap()).unwrap()
}

/// Exact endpoint identities of the threshold sweep on a model's evaluation
/// records; returns a description of every violated identity.
pub fn calibration_identities(ms: &MsNetwork, eval: &hfres::data::Dataset, norm: &hfres::data::NormStats) -> Vec<String> {
    use hfres::calibration::{default_grid, predict_with_threshold, region_decomposition, sweep, Threshold};
    let mut bad = Vec::new();
    let ev = hfres::train::evaluate(ms, eval, norm, 64, 1).unwrap();
    let acc_low = ev.acc_low.unwrap();
    let costs = hfres::flops::count_static(ms, ms.low_res(), ms.high_res()).unwrap();
    let points = sweep(&ev.records, &costs, &default_grid()).unwrap();
    let (first, last) = (points.first().unwrap(), points.last().unwrap());
    let mut check = |ok: bool, what: String| {
        if !ok {
            bad.push(what);
        }
    };
    check(points.len() == 102, format!("{} sweep points", points.len()));
    check(first.accuracy == acc_low, format!("t=0 accuracy {} vs acc_L {acc_low}", first.accuracy));
    check(last.accuracy == ev.acc_high, format!("always_high accuracy {} vs acc_H {}", last.accuracy, ev.acc_high));
    check(first.avg_cost == costs.f_low as f64, format!("t=0 cost {} vs F_L {}", first.avg_cost, costs.f_low));
    check(
        last.avg_cost == (costs.f_low + costs.f_high) as f64,
        format!("always_high cost {} vs F_L+F_H {}", last.avg_cost, costs.f_low + costs.f_high),
    );
    let r = region_decomposition(&ev.records).unwrap();
    let k = r.counts.unwrap();
    check(
        k.both + k.low_only + k.high_only + k.neither == ev.records.len(),
        format!("region counts {k:?}"),
    );
    check((r.a + r.b + r.c + r.d - 1.0).abs() < 1e-12, format!("regions sum {}", r.a + r.b + r.c + r.d));
    let batch = hfres::data::eval_batch(eval, 0..eval.len(), Some(norm)).unwrap();
    let mut scores: Vec<f64> = ev.records.iter().map(|r| r.score_low).collect();
    scores.sort_by(f64::total_cmp);
    let picks = [
        Threshold::Value(0.0),
        Threshold::Value(scores[scores.len() / 4]),
        Threshold::Value(scores[scores.len() / 2]),
        Threshold::Value(0.9),
        Threshold::AlwaysHigh,
    ];
    for t in picks {
        let preds = predict_with_threshold(ms, &batch.x_high, t).unwrap();
        let correct = preds.iter().zip(&batch.labels).filter(|(p, &y)| p.class == y).count();
        let acc = correct as f64 / preds.len() as f64;
        let point = &sweep(&ev.records, &costs, &[t]).unwrap()[0];
        check(point.accuracy == acc, format!("t={t}: predict {acc} vs sweep {}", point.accuracy));
        let exits = preds.iter().filter(|p| !p.used_high).count();
        check(exits == point.n_exit, format!("t={t}: {exits} exits vs sweep {}", point.n_exit));
    }
    bad
}
