//! Acceptance suite: one line per criterion, run sequentially so that the
//! timing checks are not disturbed by other tests in this binary.

mod common;

use std::time::{Duration, Instant};

use common::*;
use hkp_core::heatmap::*;
use hkp_core::metrics::*;
use hkp_core::netgraph::*;
use hkp_core::tensor::*;
use hkp_core::weights::*;
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn architecture_trace() -> Check {
    let net = build_network(&NetworkConfig::default()).map_err(|e| e.to_string())?;
    let enc = net.encoder_output;
    ensure((enc.h, enc.w, enc.c) == (14, 14, 320), || format!("encoder {enc:?}"))?;
    ensure(net.output_grid == (28, 28), || format!("output grid {:?}", net.output_grid))?;
    let dw14 = net.layers().find(|l| l.name == "block14.dw").ok_or("block14.dw missing")?;
    ensure(matches!(&dw14.op, LayerOp::Depthwise(p) if p.stride == 1), || "block14 still strided".into())?;
    let head = net.layers().last().ok_or("empty network")?;
    ensure(head.output.c == 22, || format!("{} output channels", head.output.c))?;
    let small = build_network(&NetworkConfig::with_input_size(112)).map_err(|e| e.to_string())?;
    ensure(small.output_grid == (14, 14), || format!("112 grid {:?}", small.output_grid))?;
    Ok("224 -> encoder 14x14x320, output 28x28x22; 112 -> 14x14x22".into())
}

fn heatmap_codec() -> Check {
    let s = DEFAULT_SIGMA;
    let p = make_keypoint_heatmap((10.0, 12.0), (28, 28), s);
    ensure(p.at(12, 10) == 1.0, || format!("peak {}", p.at(12, 10)))?;
    let q = make_keypoint_heatmap((10.0 - s, 10.0 - s), (28, 28), s);
    let dev = (q.at(10, 10) - (-1f64).exp()).abs();
    ensure(dev <= 1e-9, || format!("value at sigma*sqrt(2) off by {dev:e}"))?;
    let mut r = rng(100);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let planes: Vec<Plane> = (0..NUM_KEYPOINTS)
            .map(|_| make_keypoint_heatmap((r.gen_range(-3.0..31.0), r.gen_range(-3.0..31.0)), (28, 28), s))
            .collect();
        let bg = make_background_heatmap(&planes).map_err(|e| e.to_string())?;
        for i in 0..28 * 28 {
            let m = planes.iter().map(|p| p.data[i]).fold(f64::MIN, f64::max);
            worst = worst.max((bg.data[i] + m - 1.0).abs());
        }
    }
    ensure(worst <= 1e-15, || format!("background identity off by {worst:e}"))?;
    Ok(format!("peak 1.0, e^-1 within {dev:.1e}, background identity max {worst:.1e} over 1000 sets"))
}

fn decode_oracle() -> Check {
    let mut r = rng(101);
    let params = DecodeParams {
        confidence_threshold: 0.0,
        ..DecodeParams::for_grid(28, 28)
    };
    let mut agree = 0;
    for _ in 0..1000 {
        let t = Tensor::new(Shape::new(1, 28, 28, NUM_PLANES), rand_vec(&mut r, 28 * 28 * NUM_PLANES)).unwrap();
        let hm = Heatmaps::from_tensor(&t).map_err(|e| e.to_string())?;
        let kps = decode_keypoints(&hm, &params).map_err(|e| e.to_string())?;
        if kps.points.iter().all(|k| {
            let (row, col) = naive_argmax(hm.plane(k.index), 28);
            (k.y, k.x) == (row as f64, col as f64)
        }) {
            agree += 1;
        }
    }
    ensure(agree == 1000, || format!("argmax agreement {agree}/1000"))?;

    let (hm, anchors) = fallback_fixture();
    let kps = decode_keypoints(&hm, &DecodeParams::for_grid(28, 28)).map_err(|e| e.to_string())?;
    let k9 = kps.get(9).ok_or("keypoint 9 missing")?;
    let candidates = [(7.0, 8.0), (22.0, 20.0)];
    let expected = candidates
        .iter()
        .copied()
        .min_by(|a, b| mean_anchor_distance(&anchors, *a).total_cmp(&mean_anchor_distance(&anchors, *b)))
        .unwrap();
    ensure(k9.source == Source::Fallback && (k9.x, k9.y) == expected, || {
        format!("fallback chose ({}, {}) via {:?}, expected {expected:?}", k9.x, k9.y, k9.source)
    })?;
    Ok(format!("tau=0 argmax 1000/1000; fallback picked {expected:?}"))
}

fn metrics_oracle() -> Check {
    let mut r = rng(102);
    let thresholds = Protocol::Px30.thresholds();
    let mut worst_auc = 0f64;
    for _ in 0..100 {
        let gt: Vec<(f64, f64, bool)> = (0..21)
            .map(|_| (r.gen_range(0.0..200.0), r.gen_range(0.0..200.0), r.gen_bool(0.85)))
            .collect();
        let pred: Vec<(f64, f64, bool)> = gt
            .iter()
            .map(|&(x, y, _)| (x + r.gen_range(-25.0..25.0), y + r.gen_range(-25.0..25.0), true))
            .collect();
        let (p, g) = (
            keypoints_from_coords(&pred, Frame::Image),
            keypoints_from_coords(&gt, Frame::Image),
        );
        let report = epe(&p, &g).map_err(|e| e.to_string())?;
        for (i, (&(px, py, _), &(gx, gy, gv))) in pred.iter().zip(&gt).enumerate() {
            let want = gv.then(|| ((px - gx) * (px - gx) + (py - gy) * (py - gy)).sqrt());
            ensure(report.errors[i] == want, || format!("EPE mismatch at keypoint {i}"))?;
        }
        let samples = report.samples(1.0);
        let curve = pck_curve(&samples, &thresholds).map_err(|e| e.to_string())?;
        ensure(curve.values == naive_pck(&samples, &thresholds), || "PCK mismatch".into())?;
        let a = auc(&curve).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((a - naive_auc(&thresholds, &curve.values)).abs());
    }
    ensure(worst_auc <= 1e-12, || format!("AUC off by {worst_auc:e}"))?;

    for i in 0..10_000 {
        let n = r.gen_range(0..40);
        let samples: Vec<ErrorSample> = (0..n)
            .map(|index| ErrorSample {
                index,
                error: r.gen_range(0.0..40.0),
                normalizer: 1.0,
                valid: r.gen_bool(0.9),
            })
            .collect();
        let mut t = 0.0;
        let ts: Vec<f64> = (0..r.gen_range(2..30))
            .map(|_| {
                t += r.gen_range(0.01..3.0);
                t
            })
            .collect();
        let curve = pck_curve(&samples, &ts).map_err(|e| e.to_string())?;
        ensure(curve.values.windows(2).all(|w| w[0] <= w[1]), || format!("curve {i} not monotone"))?;
    }
    Ok(format!("EPE/PCK exact on 100 sets, AUC within {worst_auc:.1e}; 10000 curves monotone"))
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

fn numerics() -> Check {
    let mut r = rng(103);
    let err = |e: hkp_core::Error| e.to_string();

    // Batch-norm folding, per op.
    let mut fold_op = 0f64;
    for _ in 0..50 {
        let (cin, cout) = (r.gen_range(1..6), r.gen_range(1..6));
        let x = rand_tensor(&mut r, Shape::new(1, 5, 5, cin));
        let bn = random_bn(&mut r, cout);
        let p = ConvParams::new(
            KernelShape::new(3, 3, cin, cout),
            rand_vec(&mut r, 9 * cin * cout),
            rand_vec(&mut r, cout),
            1,
            Padding::Same,
        )
        .map_err(err)?;
        let raw = conv2d(&x, &p, Exec::Serial).map_err(err)?;
        let unfolded = naive_batch_norm(&raw, &bn.gamma, &bn.beta, &bn.mean, &bn.variance, bn.epsilon);
        let folded = conv2d(&x, &fold_batchnorm(&p, &bn).map_err(err)?, Exec::Serial).map_err(err)?;
        fold_op = fold_op.max(max_abs_diff(folded.data(), unfolded.data()));
    }
    ensure(fold_op < 1e-6, || format!("op-level fold deviation {fold_op:e}"))?;

    // Batch-norm folding, whole network.
    let net = build_network(&NetworkConfig::with_input_size(112)).map_err(err)?;
    let archive = random_archive(&net, 0);
    let bound = bind_weights(&net, &archive).map_err(err)?;
    let x = rand_tensor(&mut r, Shape::new(1, 112, 112, 3));
    let folded = bound.forward_tensor(&x, Exec::Serial).map_err(err)?;
    let unfolded = forward_unfolded(&net, &archive, &x, Exec::Serial).map_err(err)?;
    let fold_net = max_abs_diff(folded.data(), unfolded.data());
    ensure(fold_net < 1e-6, || format!("network fold deviation {fold_net:e}"))?;

    // Adjoint identity on 4x4 inputs.
    let mut adjoint = 0f64;
    for (k, s) in [(4, 2), (2, 2), (3, 1), (1, 1)] {
        for _ in 0..25 {
            let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
            let x = rand_tensor(&mut r, Shape::new(1, 4, 4, cin));
            let kernel = rand_vec(&mut r, k * k * cin * cout);
            let fwd = ConvParams::new(KernelShape::new(k, k, cin, cout), kernel.clone(), vec![0.0; cout], s, Padding::Same)
                .map_err(err)?;
            let cx = conv2d(&x, &fwd, Exec::Serial).map_err(err)?;
            let y = rand_tensor(&mut r, cx.shape());
            let adj = ConvParams::new(KernelShape::new(k, k, cout, cin), kernel, vec![0.0; cin], s, Padding::Same)
                .map_err(err)?;
            let ty = transposed_conv2d(&y, &adj, Exec::Serial).map_err(err)?;
            adjoint = adjoint.max((inner(cx.data(), y.data()) - inner(x.data(), ty.data())).abs());
        }
    }
    ensure(adjoint < 1e-5, || format!("adjoint gap {adjoint:e}"))?;

    // Strict mode: ten serial runs, bitwise equal to each other and to the parallel run.
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let first = bits(&folded);
    for run in 0..10 {
        let y = bound.forward_tensor(&x, Exec::Serial).map_err(err)?;
        ensure(bits(&y) == first, || format!("serial run {run} differs"))?;
    }
    let par = bound.forward_tensor(&x, Exec::Parallel).map_err(err)?;
    ensure(bits(&par) == first, || "parallel run differs from serial".into())?;
    Ok(format!(
        "fold op {fold_op:.1e}, fold net {fold_net:.1e}, adjoint {adjoint:.1e}, 10 strict runs bitwise equal"
    ))
}

fn parameter_audit() -> Check {
    let net = build_network(&NetworkConfig::default()).map_err(|e| e.to_string())?;
    let archive = random_archive(&net, 0);
    let brute: u64 = net
        .weight_entries()
        .iter()
        .filter(|e| e.role.is_parameter())
        .map(|e| archive.get(&e.name).map_or(0, |a| a.data.len() as u64))
        .sum();
    let counts = count_parameters(&net);
    ensure(counts.total == brute, || format!("count {} vs brute force {brute}", counts.total))?;
    let b = budget(&net).map_err(|e| e.to_string())?;
    ensure(!b.reference_flops_reconstructible, || "FLOP figure unexpectedly reconstructible".into())?;
    println!("{}", b.to_text().trim_end());
    Ok(format!(
        "{} params (encoder {}, decoder {}) vs reference {}, delta {:+}; FLOPs {} @112, {} @224, reference {} flagged NOT reconstructible",
        b.total_params, b.encoder_params, b.decoder_params, b.reference_params, b.param_delta, b.flops_112, b.flops_224, b.reference_flops
    ))
}

fn time_forward(size: usize) -> Result<(f64, f64), String> {
    let net = build_network(&NetworkConfig::with_input_size(size)).map_err(|e| e.to_string())?;
    let net = bind_weights(&net, &random_archive(&net, 0)).map_err(|e| e.to_string())?;
    let x = rand_tensor(&mut rng(size as u64), Shape::new(1, size, size, 3));
    for _ in 0..3 {
        net.forward_tensor(&x, Exec::Serial).map_err(|e| e.to_string())?;
    }
    let runs: Vec<f64> = (0..10)
        .map(|_| {
            let t = Instant::now();
            net.forward_tensor(&x, Exec::Serial).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    Ok((mean, 1e3 / mean))
}

fn throughput() -> Check {
    let (ms112, fps112) = time_forward(112)?;
    let (ms224, fps224) = time_forward(224)?;
    let line = format!("serial 112: {ms112:.1} ms ({fps112:.1} fps), 224: {ms224:.1} ms ({fps224:.1} fps)");
    ensure(ms112 <= 150.0, || format!("{line}; 112 exceeds 150 ms"))?;
    Ok(format!("{line}; target <= 150 ms at 112"))
}

fn accuracy_tables() -> Check {
    // Real datasets and GPU training are out of reach; the property suites above and
    // this formatting fixture stand in. The fixture only checks report formatting.
    let thresholds = Protocol::Px30.thresholds();
    let values: Vec<f64> = thresholds.iter().map(|t| 0.848 + 0.152 * t / 30.0).collect();
    let a = auc(&PckCurve { thresholds, values }).map_err(|e| e.to_string())?;
    let row = Summary {
        auc: a,
        mean_epe: 5.03,
        median_epe: 3.11,
    }
    .table_row("fixture");
    ensure(row == "| fixture | 0.924 | 5.03 | 3.11 |", || format!("row {row}"))?;
    Ok("NOT reproducible here (needs real datasets and trained weights); substituted by the suites above; report row format checked".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check, Duration); 8] = [
        ("architecture trace", architecture_trace, Duration::from_secs(1)),
        ("heatmap codec", heatmap_codec, Duration::from_secs(5)),
        ("decode oracle", decode_oracle, Duration::from_secs(10)),
        ("metrics oracle", metrics_oracle, Duration::from_secs(10)),
        ("numerics", numerics, Duration::from_secs(30)),
        ("parameter and FLOP audit", parameter_audit, Duration::from_secs(30)),
        ("throughput", throughput, Duration::from_secs(60)),
        ("accuracy tables", accuracy_tables, Duration::from_secs(1)),
    ];
    let mut failed = Vec::new();
    for (name, check, limit) in criteria {
        let t = Instant::now();
        let result = check();
        let took = t.elapsed();
        let result = match result {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name} [{took:.2?} / {limit:?}]: {detail}"),
            Err(detail) => {
                println!("FAIL  {name} [{took:.2?} / {limit:?}]: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
