mod common;

use common::*;
use hkp_core::tensor::*;
use proptest::prelude::*;
use rand::Rng;

const PADDINGS: [Padding; 2] = [Padding::Same, Padding::Valid];

#[test]
fn conv_matches_direct_definition() {
    let mut r = rng(1);
    for k in [1, 2, 3, 4] {
        for s in [1, 2] {
            for padding in PADDINGS {
                for _ in 0..6 {
                    let (h, w) = (r.gen_range(k..8), r.gen_range(k..8));
                    let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
                    let n = r.gen_range(1..3);
                    let x = rand_tensor(&mut r, Shape::new(n, h, w, cin));
                    let kernel = rand_vec(&mut r, k * k * cin * cout);
                    let bias = rand_vec(&mut r, cout);
                    let p = ConvParams::new(KernelShape::new(k, k, cin, cout), kernel.clone(), bias.clone(), s, padding)
                        .unwrap();
                    let got = conv2d(&x, &p, Exec::Serial).unwrap();
                    let want = naive_conv(&x, &kernel, &bias, (k, k, cout), s, padding);
                    assert_eq!(got.shape(), want.shape(), "k{k} s{s} {padding:?} {h}x{w}");
                    assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
                    let par = conv2d(&x, &p, Exec::Parallel).unwrap();
                    assert_eq!(par, got);
                }
            }
        }
    }
}

#[test]
fn depthwise_matches_direct_definition() {
    let mut r = rng(2);
    for k in [1, 3, 5] {
        for s in [1, 2] {
            for padding in PADDINGS {
                for _ in 0..6 {
                    let (h, w, c) = (r.gen_range(k..9), r.gen_range(k..9), r.gen_range(1..6));
                    let x = rand_tensor(&mut r, Shape::new(1, h, w, c));
                    let kernel = rand_vec(&mut r, k * k * c);
                    let bias = rand_vec(&mut r, c);
                    let p = DepthwiseParams::new((k, k, c), kernel.clone(), bias.clone(), s, padding).unwrap();
                    let got = depthwise_conv2d(&x, &p, Exec::Serial).unwrap();
                    let want = naive_depthwise(&x, &kernel, &bias, (k, k), s, padding);
                    assert_eq!(got.shape(), want.shape());
                    assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
                    assert_eq!(depthwise_conv2d(&x, &p, Exec::Parallel).unwrap(), got);
                }
            }
        }
    }
}

#[test]
fn transposed_matches_scatter_form() {
    let mut r = rng(3);
    for (k, s) in [(2, 2), (4, 2), (3, 1), (3, 2), (6, 3)] {
        for padding in PADDINGS {
            for _ in 0..6 {
                let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
                let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
                let y = rand_tensor(&mut r, Shape::new(1, h, w, cin));
                let kernel = rand_vec(&mut r, k * k * cin * cout);
                let bias = rand_vec(&mut r, cout);
                let p = ConvParams::new(KernelShape::new(k, k, cin, cout), kernel.clone(), bias.clone(), s, padding)
                    .unwrap();
                let (out, pad) = match padding {
                    Padding::Same => ((h * s, w * s), ((k - s) / 2, (k - s) / 2)),
                    Padding::Valid => (((h - 1) * s + k, (w - 1) * s + k), (0, 0)),
                };
                let got = transposed_conv2d(&y, &p, Exec::Serial).unwrap();
                let want = naive_transposed(&y, &kernel, &bias, (k, k, cout), s, out, pad);
                assert_eq!(got.shape(), want.shape());
                assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
                assert_eq!(transposed_conv2d(&y, &p, Exec::Parallel).unwrap(), got);
            }
        }
    }
}

/// `<conv(x), y> == <x, conv^T(y)>` with one shared zero-bias kernel.
fn adjoint_gap(r: &mut impl Rng, k: usize, s: usize, cin: usize, cout: usize) -> f64 {
    let x = rand_tensor(r, Shape::new(1, 4, 4, cin));
    let kernel = rand_vec(r, k * k * cin * cout);
    let fwd = ConvParams::new(KernelShape::new(k, k, cin, cout), kernel.clone(), vec![0.0; cout], s, Padding::Same)
        .unwrap();
    let cx = conv2d(&x, &fwd, Exec::Serial).unwrap();
    let y = rand_tensor(r, cx.shape());
    let adj = ConvParams::new(KernelShape::new(k, k, cout, cin), kernel, vec![0.0; cin], s, Padding::Same).unwrap();
    let ty = transposed_conv2d(&y, &adj, Exec::Serial).unwrap();
    assert_eq!(ty.shape(), x.shape());
    (inner(cx.data(), y.data()) - inner(x.data(), ty.data())).abs()
}

#[test]
fn conv_transposed_adjoint_on_4x4() {
    let mut r = rng(4);
    for (k, s) in [(4, 2), (2, 2), (3, 1), (1, 1)] {
        for _ in 0..25 {
            let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
            assert!(adjoint_gap(&mut r, k, s, cin, cout) < 1e-5, "k{k} s{s}");
        }
    }
}

fn random_bn(r: &mut impl Rng, c: usize) -> BatchNormParams {
    BatchNormParams::new(
        (0..c).map(|_| r.gen_range(0.5..1.5)).collect(),
        rand_vec(r, c),
        rand_vec(r, c),
        (0..c).map(|_| r.gen_range(0.5..1.5)).collect(),
        1e-3,
    )
    .unwrap()
}

fn bn_ref(x: &Tensor, bn: &BatchNormParams) -> Tensor {
    naive_batch_norm(x, &bn.gamma, &bn.beta, &bn.mean, &bn.variance, bn.epsilon)
}

#[test]
fn folding_preserves_outputs() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (cin, cout) = (r.gen_range(1..6), r.gen_range(1..6));
        let x = rand_tensor(&mut r, Shape::new(1, 3, 3, cin));
        let bn = random_bn(&mut r, cout);

        let p = ConvParams::new(KernelShape::new(3, 3, cin, cout), rand_vec(&mut r, 9 * cin * cout), rand_vec(&mut r, cout), 1, Padding::Same)
            .unwrap();
        let unfolded = bn_ref(&conv2d(&x, &p, Exec::Serial).unwrap(), &bn);
        let folded = conv2d(&x, &fold_batchnorm(&p, &bn).unwrap(), Exec::Serial).unwrap();
        assert!(max_abs_diff(folded.data(), unfolded.data()) < 1e-6);

        let bn_in = random_bn(&mut r, cin);
        let d = DepthwiseParams::new((3, 3, cin), rand_vec(&mut r, 9 * cin), rand_vec(&mut r, cin), 1, Padding::Same)
            .unwrap();
        let unfolded = bn_ref(&depthwise_conv2d(&x, &d, Exec::Serial).unwrap(), &bn_in);
        let folded = depthwise_conv2d(&x, &fold_batchnorm_depthwise(&d, &bn_in).unwrap(), Exec::Serial).unwrap();
        assert!(max_abs_diff(folded.data(), unfolded.data()) < 1e-6);

        let t = ConvParams::new(KernelShape::new(4, 4, cin, cout), rand_vec(&mut r, 16 * cin * cout), rand_vec(&mut r, cout), 2, Padding::Same)
            .unwrap();
        let unfolded = bn_ref(&transposed_conv2d(&x, &t, Exec::Serial).unwrap(), &bn);
        let folded = transposed_conv2d(&x, &fold_batchnorm_transposed(&t, &bn).unwrap(), Exec::Serial).unwrap();
        assert!(max_abs_diff(folded.data(), unfolded.data()) < 1e-6);
    }
}

#[test]
fn library_batch_norm_matches_reference() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, Shape::new(2, 3, 4, 5));
    let bn = random_bn(&mut r, 5);
    let got = batch_norm(&x, &bn).unwrap();
    assert!(max_abs_diff(got.data(), bn_ref(&x, &bn).data()) < 1e-6);
}

#[test]
fn depthwise_channels_are_independent() {
    let mut r = rng(7);
    let c = 4;
    let x = rand_tensor(&mut r, Shape::new(1, 6, 6, c));
    let p = DepthwiseParams::new((3, 3, c), rand_vec(&mut r, 9 * c), rand_vec(&mut r, c), 2, Padding::Same).unwrap();
    let base = depthwise_conv2d(&x, &p, Exec::Serial).unwrap();
    for changed in 0..c {
        let mut x2 = x.clone();
        for y in 0..6 {
            for xx in 0..6 {
                x2.set(0, y, xx, changed, r.gen_range(-5.0..5.0));
            }
        }
        let out = depthwise_conv2d(&x2, &p, Exec::Serial).unwrap();
        let s = out.shape();
        for y in 0..s.height {
            for xx in 0..s.width {
                for k in (0..c).filter(|&k| k != changed) {
                    assert_eq!(out.get(0, y, xx, k), base.get(0, y, xx, k));
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(scores in prop::collection::vec(-50.0f32..50.0, 1..200)) {
        let n = scores.len();
        let p = spatial_softmax(&scores, 1, n).unwrap();
        let sum: f64 = p.data.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_is_shift_invariant(
        ticks in prop::collection::vec(-4096i32..4096, 1..100),
        shift in -64i32..64,
    ) {
        // Multiples of 1/64 keep `score + shift` exact in f32.
        let a: Vec<f32> = ticks.iter().map(|&t| t as f32 / 64.0).collect();
        let b: Vec<f32> = a.iter().map(|&v| v + shift as f32).collect();
        let (pa, pb) = (spatial_softmax(&a, 1, a.len()).unwrap(), spatial_softmax(&b, 1, b.len()).unwrap());
        for (x, y) in pa.data.iter().zip(&pb.data) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn relu6_clamps(v in -100.0f32..100.0) {
        let y = relu6_scalar(v);
        prop_assert!((0.0..=6.0).contains(&y));
        if (0.0..=6.0).contains(&v) {
            prop_assert_eq!(y, v);
        }
    }
}
