//! Acceptance criteria, run serially with one PASS/FAIL line each.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusetrack::attention::{AttentionParams, ChannelWeights};
use fusetrack::evalbench::{
    overlap_ratio, precision_curve, run_benchmark, success_curve, Aggregation, EchoTracker,
};
use fusetrack::features::{fhog_extract, ConvNet, ConvNetSpec, HogConfig, WeightStore};
use fusetrack::fusion::{branch_response, FusionKernel, FusionParams};
use fusetrack::spectral::{cf_backward, cf_solve, circular_cross_correlate, CfConfig, Plane};
use fusetrack::tracker::{
    fused_response, peak_displacement, solve_template, update_templates, BranchModel, Extractor, FeatureKind,
    Tracker, TrackerConfig, TrackerModels, TrackerState,
};
use fusetrack::training::{
    batch_loss_and_grad, logistic_loss, make_label_map, prepare_all, synth_sequence, synthetic_pairs,
    train_prepared, FusionModel, MotionSpec, PreparedSample, TrainConfig,
};
use fusetrack::{BoundingBox, Tensor3};

type Outcome = Result<String, String>;

fn rand_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn rand_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn spectral_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = rand_tensor(&mut rng, 8, 8, 3);
        let s = rand_tensor(&mut rng, 8, 8, 3);
        let fast = circular_cross_correlate(&t, &s).map_err(|e| e.to_string())?;
        for u in 0..8 {
            for v in 0..8 {
                let mut direct = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        for k in 0..3 {
                            direct += t.get(i, j, k) * s.get((i + u) % 8, (j + v) % 8, k);
                        }
                    }
                }
                worst = worst.max((fast.get(u, v) - direct).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-5, format!("max abs diff {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("max abs diff {worst:.2e} in {elapsed:?}"))
}

/// Dense ridge over every circular shift, solved with nalgebra.
fn dense_ridge(z: &Tensor3, y: &Plane, lambda: f64) -> Vec<f64> {
    let (h, w, c) = z.shape();
    let n = h * w;
    let a = DMatrix::from_fn(n, n * c, |u, col| {
        let (k, i) = (col / n, col % n);
        let (ur, uc, ir, ic) = (u / w, u % w, i / w, i % w);
        z.get((ir + ur) % h, (ic + uc) % w, k)
    });
    let yv = DVector::from_column_slice(y.data());
    let m = a.transpose() * &a + DMatrix::identity(n * c, n * c) * lambda;
    let sol = m.lu().solve(&(a.transpose() * yv)).expect("regularized system is invertible");
    // Back to the (row, col, channel) interleaved layout.
    let mut out = vec![0.0; n * c];
    for k in 0..c {
        for i in 0..n {
            out[i * c + k] = sol[k * n + i];
        }
    }
    out
}

fn cf_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for (h, w, c) in [(6, 6, 1), (4, 4, 2)] {
        for lambda in [0.01, 0.5] {
            let z = rand_tensor(&mut rng, h, w, c);
            let y = rand_plane(&mut rng, h, w);
            let cfg = CfConfig {
                lambda,
                ..CfConfig::default()
            };
            let fast = cf_solve(&z, &y, &cfg).map_err(|e| e.to_string())?;
            let dense = dense_ridge(&z, &y, lambda);
            let num: f64 = fast.data().iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
    }
    ensure(worst < 1e-5, format!("rel error {worst:e}"))?;
    Ok(format!("max rel error {worst:.2e} on 6x6x1 and 4x4x2"))
}

fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-5;
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn training_fixture(rng: &mut ChaCha8Rng) -> (Vec<PreparedSample>, FusionModel) {
    let side = 9;
    let label = make_label_map(side, 2.0).unwrap();
    let samples = (0..2)
        .map(|_| PreparedSample {
            channel_responses: vec![
                (0..5).map(|_| rand_plane(rng, side, side)).collect(),
                (0..3).map(|_| rand_plane(rng, side, side)).collect(),
            ],
            pooled: vec![
                (0..5).map(|_| rng.random_range(0.0..1.5)).collect(),
                (0..3).map(|_| rng.random_range(0.0..1.5)).collect(),
            ],
            label: label.clone(),
        })
        .collect();
    let mut attention = Vec::new();
    for c in [5usize, 3] {
        let mut a = AttentionParams::zeros(c, 0.5);
        let flat: Vec<f64> = (0..a.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        a.assign(&flat);
        attention.push(a);
    }
    let kernels = (0..2)
        .map(|_| FusionKernel::new(3, (0..9).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap())
        .collect();
    let model = FusionModel {
        fusion: FusionParams {
            kernels,
            scale: 1.3,
            bias: -0.1,
        },
        attention,
    };
    (samples, model)
}

fn gradient_suite() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let z = rand_tensor(&mut rng, 4, 5, 2);
        let y = rand_plane(&mut rng, 4, 5);
        let g = rand_tensor(&mut rng, 4, 5, 2);
        let cfg = CfConfig {
            lambda: 0.3,
            ..CfConfig::default()
        };
        let analytic = cf_backward(&g, &z, &y, &cfg).map_err(|e| e.to_string())?;
        let mut f = |x: &[f64]| {
            let w = cf_solve(&Tensor3::new(4, 5, 2, x.to_vec()).unwrap(), &y, &cfg).unwrap();
            w.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..z.data().len() {
            worst[0] = worst[0].max(rel(analytic.data()[i], central_diff(&mut f, z.data(), i)));
        }

        let v = Plane::from_fn(5, 5, |_, _| rng.random_range(-2.0..2.0));
        let label = make_label_map(5, 1.0).unwrap();
        let (_, grad) = logistic_loss(&v, &label, true).map_err(|e| e.to_string())?;
        let mut f = |x: &[f64]| logistic_loss(&Plane::new(5, 5, x.to_vec()).unwrap(), &label, true).unwrap().0;
        for i in 0..25 {
            worst[1] = worst[1].max(rel(grad.data()[i], central_diff(&mut f, v.data(), i)));
        }

        let (samples, model) = training_fixture(&mut rng);
        let refs: Vec<&PreparedSample> = samples.iter().collect();
        let (_, grad) = batch_loss_and_grad(&refs, &model, true).map_err(|e| e.to_string())?;
        let x = model.flatten();
        let mut probe = model.clone();
        let mut f = |p: &[f64]| {
            probe.assign(p);
            batch_loss_and_grad(&refs, &probe, true).unwrap().0
        };
        for i in 0..x.len() {
            worst[2] = worst[2].max(rel(grad[i], central_diff(&mut f, &x, i)));
        }
    }
    ensure(worst.iter().all(|w| *w < 1e-3), format!("rel errors {worst:?}"))?;
    Ok(format!(
        "cf_backward {:.1e}, logistic {:.1e}, train params {:.1e} over 3 seeds",
        worst[0], worst[1], worst[2]
    ))
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor3::from_fn(255, 255, 3, |_, _, _| rng.random_range(0.0..255.0));
    let hog = fhog_extract(&img, &HogConfig::default()).map_err(|e| e.to_string())?;
    ensure(hog.shape() == (62, 62, 31), format!("HOG {:?}", hog.shape()))?;
    let input = img.map(|v| v / 255.0 - 0.5);
    let mut cnn_shapes = Vec::new();
    for spec in [ConvNetSpec::two_conv(), ConvNetSpec::three_conv()] {
        let store = WeightStore::random_orthogonal(&spec, 1).map_err(|e| e.to_string())?;
        let f = ConvNet::new(&spec, &store)
            .and_then(|n| n.forward(&input))
            .map_err(|e| e.to_string())?;
        cnn_shapes.push(f.shape());
        let t = solve_template(&f, &CfConfig::default()).map_err(|e| e.to_string())?;
        let r = branch_response(&t, &f).map_err(|e| e.to_string())?;
        ensure(r.dims() == (33, 33), format!("CNN response {:?}", r.dims()))?;
    }
    ensure(cnn_shapes == vec![(57, 57, 32), (53, 53, 32)], format!("CNN {cnn_shapes:?}"))?;
    let t = solve_template(&hog, &CfConfig::default()).map_err(|e| e.to_string())?;
    ensure((t.height(), t.width()) == (30, 30), format!("HOG template {:?}", t.shape()))?;
    let r = branch_response(&t, &hog).map_err(|e| e.to_string())?;
    ensure(r.dims() == (33, 33), format!("HOG response {:?}", r.dims()))?;
    Ok("HOG 62x62x31, conv2 57x57x32, conv3 53x53x32, HOG template 30x30, responses 33x33".into())
}

fn shift_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ConvNetSpec::two_conv();
    let store = WeightStore::random_orthogonal(&spec, 0).map_err(|e| e.to_string())?;
    let net = Arc::new(ConvNet::new(&spec, &store).map_err(|e| e.to_string())?);
    let cfg = TrackerConfig::default();
    let cnn_feat = rand_tensor(&mut rng, 57, 57, 32);
    let hog_feat = rand_tensor(&mut rng, 62, 62, 31);
    let branch = |kind, extractor: Extractor, feat: &Tensor3| -> Result<BranchModel, String> {
        let template = solve_template(feat, &cfg.cf).map_err(|e| e.to_string())?;
        Ok(BranchModel {
            kind,
            extractor: Arc::new(extractor),
            template_crop: (template.height(), template.width()),
            weights: ChannelWeights::ones(feat.channels()),
            template,
            grid_stride: 4,
        })
    };
    let branches = vec![
        branch(FeatureKind::Cnn, Extractor::Cnn(net), &cnn_feat)?,
        branch(FeatureKind::Hog, Extractor::Hog(HogConfig::default()), &hog_feat)?,
    ];
    let search = [cnn_feat.circshift(3, 5), hog_feat.circshift(3, 5)];
    for selector in [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]] {
        let state = TrackerState {
            branches: branches.clone(),
            bbox: BoundingBox::new(100.0, 100.0, 40.0, 40.0).unwrap(),
            fusion: FusionParams::selector(&selector),
            attention: vec![AttentionParams::zeros(32, 0.5), AttentionParams::zeros(31, 0.5)],
            config: TrackerConfig {
                window_enabled: false,
                ..cfg.clone()
            },
            frames_seen: 1,
        };
        let fused = fused_response(&state, &search).map_err(|e| e.to_string())?;
        let d = peak_displacement(&fused);
        ensure(d == (3, 5), format!("selector {selector:?} gave {d:?}"))?;
    }
    Ok("argmax displacement (3, 5) for both selectors and uniform fusion".into())
}

fn toy_training() -> Outcome {
    let spec = ConvNetSpec::two_conv();
    let store = WeightStore::random_orthogonal(&spec, 0).map_err(|e| e.to_string())?;
    let net = ConvNet::new(&spec, &store).map_err(|e| e.to_string())?;
    let models = TrackerModels::standard(net, HogConfig::default(), 0).map_err(|e| e.to_string())?;
    let pairs = synthetic_pairs(1, 200, 2.0).map_err(|e| e.to_string())?;
    let extractors: Vec<_> = models.branches.iter().map(|b| b.extractor.clone()).collect();
    let samples = prepare_all(&pairs, &extractors, &CfConfig::default()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let out = train_prepared(&samples, &cfg, FusionModel::from_models(&models)).map_err(|e| e.to_string())?;
    let (first, last) = (out.trace[0].mean_loss, out.trace[19].mean_loss);
    ensure(last < 0.5 * first, format!("epoch 1 loss {first:.4}, epoch 20 loss {last:.4}"))?;

    // Branch 1 carries the label pattern, branch 2 is noise.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let label = make_label_map(33, 2.0).unwrap();
    let sample = PreparedSample {
        channel_responses: vec![vec![label.plane().clone()], vec![rand_plane(&mut rng, 33, 33)]],
        pooled: vec![vec![1.0], vec![1.0]],
        label,
    };
    let init = FusionModel {
        fusion: FusionParams::uniform(2),
        attention: vec![AttentionParams::init(1, 1), AttentionParams::init(1, 2)],
    };
    let sep = train_prepared(&[sample], &cfg, init).map_err(|e| e.to_string())?;
    let k1 = sep.model.fusion.kernels[0].data()[0];
    let k2 = sep.model.fusion.kernels[1].data()[0];
    ensure(k1 > k2, format!("k1 {k1:.4} <= k2 {k2:.4}"))?;
    let sep_first = sep.trace[0].mean_loss;
    let sep_last = sep.trace[19].mean_loss;
    ensure(sep_last < sep_first, "separable loss did not decrease")?;
    Ok(format!(
        "200 pairs: loss {first:.4} -> {last:.4}; separable: k1 {k1:.3} > k2 {k2:.3}"
    ))
}

fn end_to_end_tracking() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let spec = ConvNetSpec::two_conv();
        let store = WeightStore::random_orthogonal(&spec, 0).map_err(|e| e.to_string())?;
        let net = ConvNet::new(&spec, &store).map_err(|e| e.to_string())?;
        let models = TrackerModels::standard(net, HogConfig::default(), 0).map_err(|e| e.to_string())?;
        let motion = MotionSpec {
            velocity: (2.0, 0.0),
            noise_sigma: 4.0,
            ..MotionSpec::default()
        };
        let seq = synth_sequence(7, 100, &motion).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let mut tracker = Tracker::new(TrackerConfig::default(), models).map_err(|e| e.to_string())?;
        tracker.init(&seq.frames[0], seq.boxes[0]).map_err(|e| e.to_string())?;
        let mut ious = vec![1.0];
        for (frame, gt) in seq.frames.iter().zip(&seq.boxes).skip(1) {
            let b = tracker.step(frame).map_err(|e| e.to_string())?;
            ious.push(overlap_ratio(&b, gt));
        }
        let elapsed = start.elapsed();
        let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        ensure(min >= 0.5, format!("min IoU {min:.3}"))?;
        ensure(mean >= 0.7, format!("mean IoU {mean:.3}"))?;
        ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
        Ok(format!("min IoU {min:.3}, mean IoU {mean:.3}, {elapsed:.1?} on one thread"))
    })
}

fn metrics_oracle() -> Outcome {
    let b = |cx, cy, w, h| BoundingBox::new(cx, cy, w, h).unwrap();
    let a = b(1.0, 1.0, 2.0, 2.0);
    let shifted = b(2.0, 1.0, 2.0, 2.0);
    let iou = overlap_ratio(&a, &shifted);
    ensure((iou - 1.0 / 3.0).abs() < 1e-12, format!("IoU {iou}"))?;

    let gt = [b(50.0, 50.0, 10.0, 10.0)];
    let at = precision_curve(&[b(70.0, 50.0, 10.0, 10.0)], &gt).map_err(|e| e.to_string())?;
    let over = precision_curve(&[b(70.1, 50.0, 10.0, 10.0)], &gt).map_err(|e| e.to_string())?;
    ensure(at.headline == 1.0, "20.0 px not counted at 20 px")?;
    ensure(over.headline == 0.0, "20.1 px counted at 20 px")?;

    let s = success_curve(&[shifted, a], &[a, a]).map_err(|e| e.to_string())?;
    ensure(s.values[6] == 1.0 && s.values[10] == 0.5, format!("success {:?}", s.values))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seq = dir.path().join("toy");
    std::fs::create_dir_all(seq.join("img")).map_err(|e| e.to_string())?;
    let mut gt_text = String::new();
    for i in 0..3 {
        let img = Tensor3::filled(24, 32, 3, 100.0 + i as f64);
        fusetrack::imaging::save_image(&img, &seq.join("img").join(format!("{:04}.png", i + 1)))
            .map_err(|e| e.to_string())?;
        gt_text.push_str(&format!("{},5,10,8\n", 4 + i));
    }
    std::fs::write(seq.join("groundtruth_rect.txt"), gt_text).map_err(|e| e.to_string())?;
    let report = run_benchmark(&[seq], &EchoTracker, Aggregation::PerSequence).map_err(|e| e.to_string())?;
    let agg = report.aggregate.ok_or("no aggregate")?;
    ensure(agg.success.auc == 1.0, format!("echo AUC {}", agg.success.auc))?;
    ensure(agg.precision.headline == 1.0, "echo precision@20 below 1")?;
    Ok("IoU 1/3, 20.0 px counted and 20.1 px excluded, echo AUC 1.0".into())
}

fn update_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let hog_prev = rand_tensor(&mut rng, 30, 30, 31);
    let hog_new = rand_tensor(&mut rng, 30, 30, 31);
    let cnn_prev = rand_tensor(&mut rng, 25, 25, 32);
    let cnn_new = rand_tensor(&mut rng, 25, 25, 32);
    let spec = ConvNetSpec::two_conv();
    let store = WeightStore::random_orthogonal(&spec, 0).map_err(|e| e.to_string())?;
    let net = Arc::new(ConvNet::new(&spec, &store).map_err(|e| e.to_string())?);
    let model = |kind, extractor, template: &Tensor3| BranchModel {
        kind,
        extractor: Arc::new(extractor),
        template_crop: (template.height(), template.width()),
        weights: ChannelWeights::ones(template.channels()),
        template: template.clone(),
        grid_stride: 4,
    };
    let mut worst = 0.0f64;
    for (eta_c, eta_h) in [(0.0, 0.0), (0.25, 0.25), (1.0, 1.0), (0.25, 1.0), (1.0, 0.0)] {
        let state = TrackerState {
            branches: vec![
                model(FeatureKind::Cnn, Extractor::Cnn(net.clone()), &cnn_prev),
                model(FeatureKind::Hog, Extractor::Hog(HogConfig::default()), &hog_prev),
            ],
            bbox: BoundingBox::new(50.0, 50.0, 20.0, 20.0).unwrap(),
            fusion: FusionParams::uniform(2),
            attention: vec![AttentionParams::zeros(32, 0.5), AttentionParams::zeros(31, 0.5)],
            config: TrackerConfig::default(),
            frames_seen: 1,
        };
        let next = update_templates(state, &[cnn_new.clone(), hog_new.clone()], eta_c, eta_h)
            .map_err(|e| e.to_string())?;
        for (b, (prev, new, eta)) in next
            .branches
            .iter()
            .zip([(&cnn_prev, &cnn_new, eta_c), (&hog_prev, &hog_new, eta_h)])
        {
            for ((got, p), n) in b.template.data().iter().zip(prev.data()).zip(new.data()) {
                worst = worst.max((got - ((1.0 - eta) * p + eta * n)).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} at eta in {{0, 0.25, 1}}"))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test --list` and filtered runs probe the binary; list our criteria.
    if args.iter().any(|a| a == "--list") {
        for i in 1..=9 {
            println!("criterion_{i}: test");
        }
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 spectral oracle", spectral_oracle),
        ("2 correlation filter optimality", cf_optimality),
        ("3 gradient suite", gradient_suite),
        ("4 geometry suite", geometry_suite),
        ("5 shift recovery", shift_recovery),
        ("6 toy training", toy_training),
        ("7 end-to-end synthetic tracking", end_to_end_tracking),
        ("8 metrics oracle", metrics_oracle),
        ("9 update law", update_law),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
