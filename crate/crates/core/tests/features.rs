use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusetrack::features::{
    cnn_forward, fhog_extract, load_weight_store, save_weight_store, ConvLayer, ConvNet, ConvNetSpec, HogConfig,
    WeightStore, FHOG_CHANNELS,
};
use fusetrack::{Error, Tensor3, WeightStoreError};

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

#[test]
fn vertical_step_edge_votes_horizontal_gradient_bin() {
    // Dark left half, bright right half: gradient points along +x, bin 0.
    let img = Tensor3::from_fn(40, 40, 1, |_, c, _| if c < 20 { 10.0 } else { 200.0 });
    let f = fhog_extract(&img, &HogConfig::default()).unwrap();
    let (r, c) = (f.height() / 2, 4);
    let px: Vec<f64> = (0..FHOG_CHANNELS).map(|k| f.get(r, c, k)).collect();
    assert_eq!(argmax(&px[..18]), 0);
    assert_eq!(argmax(&px[18..27]), 0);

    // The reversed edge flips the signed bin by half a turn; unsigned stays.
    let flipped = img.map(|v| 210.0 - v);
    let g = fhog_extract(&flipped, &HogConfig::default()).unwrap();
    let px: Vec<f64> = (0..FHOG_CHANNELS).map(|k| g.get(r, c, k)).collect();
    assert_eq!(argmax(&px[..18]), 9);
    assert_eq!(argmax(&px[18..27]), 0);

    // Far from the edge there is no gradient at all.
    assert!((0..FHOG_CHANNELS).all(|k| f.get(r, 0, k) == 0.0));
}

#[test]
fn half_turn_rotation_permutes_bins_and_mirrors_cells() {
    // Content kept away from the border so the cell grid is symmetric.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let side = 64;
    let img = Tensor3::from_fn(side, side, 1, |r, c, _| {
        if (12..52).contains(&r) && (12..52).contains(&c) {
            rng.random_range(0.0..255.0)
        } else {
            128.0
        }
    });
    let rot = Tensor3::from_fn(side, side, 1, |r, c, _| img.get(side - 1 - r, side - 1 - c, 0));
    let cfg = HogConfig::default();
    let a = fhog_extract(&img, &cfg).unwrap();
    let b = fhog_extract(&rot, &cfg).unwrap();
    assert_eq!(a.shape(), (15, 15, 31));
    let m = 13;
    for r in 0..=m {
        for c in 0..=m {
            for o in 0..18 {
                let want = a.get(m - r, m - c, (o + 9) % 18);
                assert!((b.get(r, c, o) - want).abs() < 1e-9, "signed bin {o} at ({r},{c})");
            }
            for o in 18..27 {
                assert!((b.get(r, c, o) - a.get(m - r, m - c, o)).abs() < 1e-9);
            }
            for t in 0..4 {
                let want = a.get(m - r, m - c, 27 + 3 - t);
                assert!((b.get(r, c, 27 + t) - want).abs() < 1e-9, "texture {t}");
            }
        }
    }
}

#[test]
fn hog_values_are_bounded_by_truncation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor3::from_fn(64, 48, 3, |_, _, _| rng.random_range(0.0..255.0));
    let f = fhog_extract(&img, &HogConfig::default()).unwrap();
    // Each orientation entry averages four clipped values (times 0.5 over four).
    assert!(f.data().iter().all(|v| *v >= 0.0 && *v <= 0.4 + 1e-12));
}

#[test]
fn tiny_image_is_size_error() {
    let img = Tensor3::filled(6, 40, 1, 1.0);
    assert!(matches!(fhog_extract(&img, &HogConfig::default()), Err(Error::Size(_))));
}

/// Direct sliding-window evaluation of a conv layer stack, for comparison.
fn direct_forward(img: &Tensor3, spec: &ConvNetSpec, store: &WeightStore) -> Tensor3 {
    let mut x = img.clone();
    let mut conv_idx = 0;
    for layer in &spec.layers {
        x = match layer {
            ConvLayer::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                conv_idx += 1;
                let w = &store.get(&format!("conv{conv_idx}.weight")).unwrap().data;
                let b = &store.get(&format!("conv{conv_idx}.bias")).unwrap().data;
                let oh = (x.height() - kernel_h) / stride + 1;
                let ow = (x.width() - kernel_w) / stride + 1;
                Tensor3::from_fn(oh, ow, *out_channels, |r, c, o| {
                    let mut acc = b[o] as f64;
                    for i in 0..*in_channels {
                        for ky in 0..*kernel_h {
                            for kx in 0..*kernel_w {
                                let wi = ((o * in_channels + i) * kernel_h + ky) * kernel_w + kx;
                                acc += w[wi] as f64 * x.get(r * stride + ky, c * stride + kx, i);
                            }
                        }
                    }
                    acc
                })
            }
            ConvLayer::Relu => x.map(|v| v.max(0.0)),
            ConvLayer::MaxPool { window, stride } => {
                let oh = (x.height() - window) / stride + 1;
                let ow = (x.width() - window) / stride + 1;
                Tensor3::from_fn(oh, ow, x.channels(), |r, c, k| {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..*window {
                        for dx in 0..*window {
                            m = m.max(x.get(r * stride + dy, c * stride + dx, k));
                        }
                    }
                    m
                })
            }
        };
    }
    x
}

#[test]
fn conv_stack_matches_direct_evaluation() {
    let spec = ConvNetSpec {
        layers: vec![
            ConvLayer::Conv {
                kernel_h: 3,
                kernel_w: 5,
                in_channels: 3,
                out_channels: 6,
                stride: 2,
            },
            ConvLayer::Relu,
            ConvLayer::MaxPool { window: 2, stride: 2 },
            ConvLayer::Conv {
                kernel_h: 3,
                kernel_w: 3,
                in_channels: 6,
                out_channels: 4,
                stride: 1,
            },
        ],
    };
    let mut store = WeightStore::random_orthogonal(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    store
        .insert("conv1.bias", vec![6], (0..6).map(|_| rng.random_range(-0.5..0.5)).collect())
        .unwrap();
    let img = Tensor3::from_fn(29, 31, 3, |_, _, _| rng.random_range(-1.0..1.0));
    let fast = cnn_forward(&img, &spec, &store).unwrap();
    let slow = direct_forward(&img, &spec, &store);
    assert_eq!(fast.shape(), slow.shape());
    assert!(fast.max_abs_diff(&slow) < 1e-4, "{}", fast.max_abs_diff(&slow));
}

#[test]
fn default_specs_geometry_and_stride() {
    for (depth, side) in [(2, 57), (3, 53)] {
        let spec = ConvNetSpec::with_depth(depth).unwrap();
        assert_eq!(spec.total_stride(), 4);
        assert_eq!(spec.output_side(255), Some(side));
    }
    assert!(matches!(ConvNetSpec::with_depth(5), Err(Error::Config(_))));
}

#[test]
fn broken_layer_chain_is_shape_error() {
    let mut spec = ConvNetSpec::two_conv();
    if let ConvLayer::Conv { in_channels, .. } = &mut spec.layers[3] {
        *in_channels = 95;
    }
    assert!(matches!(spec.validate(), Err(Error::Shape(_))));
}

#[test]
fn network_rejects_wrong_weight_shape() {
    let spec = ConvNetSpec::two_conv();
    let mut store = WeightStore::random_orthogonal(&spec, 0).unwrap();
    store.insert("conv2.bias", vec![31], vec![0.0; 31]).unwrap();
    assert!(matches!(
        ConvNet::new(&spec, &store),
        Err(Error::WeightStore(WeightStoreError::ShapeMismatch { .. }))
    ));
}

#[test]
fn weight_store_roundtrip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let spec = ConvNetSpec::three_conv();
    let store = WeightStore::random_orthogonal(&spec, 9).unwrap();
    save_weight_store(&store, &path).unwrap();
    let back = load_weight_store(&path).unwrap();
    assert_eq!(store, back);
    assert_eq!(back.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
    let blob = fs::read(dir.path().join("net.bin")).unwrap();
    let again = dir.path().join("again.json");
    save_weight_store(&back, &again).unwrap();
    assert_eq!(blob, fs::read(dir.path().join("again.bin")).unwrap());
}

fn saved_store(dir: &std::path::Path) -> std::path::PathBuf {
    let mut store = WeightStore::new();
    store.insert("a", vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
    store.insert("b", vec![4], vec![1.0; 4]).unwrap();
    let path = dir.join("w.json");
    save_weight_store(&store, &path).unwrap();
    path
}

#[test]
fn truncated_blob_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_store(dir.path());
    let blob = dir.path().join("w.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        load_weight_store(&path),
        Err(WeightStoreError::TruncatedBlob { ref name, .. }) if name == "b"
    ));
}

#[test]
fn manifest_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_store(dir.path());
    let text = fs::read_to_string(&path).unwrap();

    fs::write(&path, text.replace("\"f32\"", "\"f16\"")).unwrap();
    assert!(matches!(load_weight_store(&path), Err(WeightStoreError::MalformedManifest(_))));

    fs::write(&path, "{ not json").unwrap();
    assert!(matches!(load_weight_store(&path), Err(WeightStoreError::MalformedManifest(_))));

    fs::write(&path, &text).unwrap();
    let mut blob = fs::read(dir.path().join("w.bin")).unwrap();
    blob.extend_from_slice(&[0, 0, 0, 0]);
    fs::write(dir.path().join("w.bin"), blob).unwrap();
    assert!(matches!(load_weight_store(&path), Err(WeightStoreError::MalformedManifest(_))));

    assert!(matches!(
        load_weight_store(&dir.path().join("absent.json")),
        Err(WeightStoreError::Io { .. })
    ));
}

#[test]
fn missing_tensor_is_reported_by_name() {
    let spec = ConvNetSpec::three_conv();
    let store = WeightStore::random_orthogonal(&ConvNetSpec::two_conv(), 0).unwrap();
    match store.validate_for(&spec) {
        Err(WeightStoreError::MissingTensor(name)) => assert_eq!(name, "conv3.weight"),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hog_is_invariant_to_brightness_offset(seed in 0u64..1000, offset in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor3::from_fn(24, 28, 1, |_, _, _| rng.random_range(60.0..190.0));
        let a = fhog_extract(&img, &HogConfig::default()).unwrap();
        let b = fhog_extract(&img.add_scalar(offset), &HogConfig::default()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn hog_output_size_rule(h in 8usize..60, w in 8usize..60) {
        let f = fhog_extract(&Tensor3::filled(h, w, 1, 3.0), &HogConfig::default()).unwrap();
        prop_assert_eq!(f.shape(), (h / 4 - 1, w / 4 - 1, FHOG_CHANNELS));
        prop_assert!(f.data().iter().all(|v| *v == 0.0));
    }
}
