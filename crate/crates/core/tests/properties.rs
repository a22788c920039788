mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residprop::flow::{estimate_flow_with_patch, flow_histogram, flow_to_kernels_masked, match_statistics, FlowField};
use residprop::kalman::{GainModel, Variant};
use residprop::synth::{from_bytes, to_bytes};
use residprop::tensor::{compute_residuals, convolve_channel, reconstruct, translate};
use residprop::{Error, FeatureSequence, FeatureTensor, Kernel, Plane};

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, w: usize, h: usize) -> FeatureTensor {
    FeatureTensor::from_vec(c, w, h, (0..c * w * h).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FlowField {
    // a mix of integer, fractional and zero vectors
    let mut comp = || match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random_range(-3i32..=3) as f64,
        _ => rng.random_range(-3.5..3.5),
    };
    let (u, v): (Vec<f64>, Vec<f64>) = (0..w * h).map(|_| (comp(), comp())).unzip();
    FlowField {
        u: Plane::from_vec(w, h, u).unwrap(),
        v: Plane::from_vec(w, h, v).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_matches_oracle(seed: u64, w in 7usize..14, h in 7usize..14, si in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_plane(&mut rng, w, h);
        let k = random_kernel(&mut rng, [3, 5, 7][si]);
        let got = convolve_channel(&map, &k).unwrap();
        prop_assert!(max_abs_diff(got.as_slice(), conv_oracle(&map, &k).as_slice()) < 1e-12);
    }

    #[test]
    fn impulse_convolution_is_translation(seed: u64, dx in -3i64..=3, dy in -3i64..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&mut rng, 1, 9, 7);
        let k = Kernel::impulse(7, dx, dy).unwrap();
        let got = convolve_channel(&t.plane(0), &k).unwrap();
        let want = translate(&t, dx, dy);
        prop_assert_eq!(got.as_slice(), want.channel(0));
    }

    #[test]
    fn flow_matches_oracle(seed: u64, w in 3usize..10, h in 3usize..10, radius in 1usize..3, pi in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = [1, 3, 5][pi];
        let a = sparse_plane(&mut rng, w, h);
        let b = if rng.random_bool(0.5) { sparse_plane(&mut rng, w, h) } else { a.clone() };
        let f = estimate_flow_with_patch(&a, &b, radius, patch).unwrap();
        let (u, v) = flow_oracle(&a, &b, radius, patch);
        prop_assert_eq!(f.u.as_slice(), &u[..]);
        prop_assert_eq!(f.v.as_slice(), &v[..]);
    }

    #[test]
    fn histogram_and_flow_kernel_match_oracle(seed: u64, si in 0usize..3, masked: bool, sigma in 0.2f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = [3, 5, 7][si];
        let f = random_flow(&mut rng, 6, 5);
        let mask: Option<Vec<bool>> = masked.then(|| (0..30).map(|_| rng.random_bool(0.3)).collect());
        let hist = flow_histogram(&f, size, mask.as_deref()).unwrap();
        let want = histogram_oracle(f.u.as_slice(), f.v.as_slice(), mask.as_deref(), size);
        prop_assert!(max_abs_diff(hist.weights(), &want) < 1e-12);

        let got = flow_to_kernels_masked(&f, mask.as_deref(), &[size], sigma).unwrap();
        match (got, flow_kernel_oracle(&want, size, sigma)) {
            (None, None) => {}
            (Some(k), Some(o)) => prop_assert!(max_abs_diff(k[0].weights(), &o) < 1e-12),
            (g, o) => prop_assert!(false, "kernel {:?} vs oracle {:?}", g, o),
        }
    }

    #[test]
    fn statistics_match_sort_oracle(values in prop::collection::vec(-1.0f64..1.0, 1..60)) {
        let s = match_statistics(&values).unwrap();
        for (got, q) in [(s.p10, 0.1), (s.q25, 0.25), (s.median, 0.5), (s.q75, 0.75), (s.p90, 0.9)] {
            prop_assert!((got - quantile_oracle(&values, q)).abs() < 1e-12);
        }
    }

    #[test]
    fn fsq_round_trip(seed: u64, c in 1usize..4, w in 1usize..7, h in 1usize..7, t in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = FeatureSequence::new((0..t).map(|_| random_tensor(&mut rng, c, w, h)).collect()).unwrap();
        let bytes = to_bytes(&seq);
        prop_assert_eq!(bytes.len(), 24 + 8 * c * w * h * t);
        prop_assert_eq!(&bytes[..4], b"FSQ1");
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &seq);
        let truncated = matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. }));
        prop_assert!(truncated);
    }

    #[test]
    fn residuals_reconstruct_frames(seed: u64, t in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // dyadic values keep every difference and sum exact
        let frames: Vec<FeatureTensor> = (0..t)
            .map(|_| random_tensor(&mut rng, 2, 4, 3).map(|v| (v * 64.0).round() / 64.0))
            .collect();
        let seq = FeatureSequence::new(frames.clone()).unwrap();
        let res = compute_residuals(&seq).unwrap();
        prop_assert_eq!(res.len(), t - 1);
        for (i, r) in res.residuals().iter().enumerate() {
            prop_assert_eq!(&reconstruct(&frames[i], r).unwrap(), &frames[i + 1]);
        }
    }
}

#[test]
fn fsq_header_layout() {
    let seq = FeatureSequence::new(vec![FeatureTensor::zeros(2, 3, 4); 5]).unwrap();
    let bytes = to_bytes(&seq);
    let words: Vec<u32> = bytes[4..24].chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    assert_eq!(words, [1, 2, 3, 4, 5]);
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(from_bytes(&v2), Err(Error::VersionMismatch { found: 2, .. })));
    assert!(matches!(from_bytes(b"NOPE"), Err(Error::BadMagic)));
}

#[test]
fn gain_model_json_round_trip() {
    let m = GainModel::new(Variant::KF2, vec![0.5, -1.25, 2.0, 0.125], 5).unwrap();
    let json = m.to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["variant"], "KF2");
    assert_eq!(v["window"], 5);
    assert_eq!(GainModel::from_json(&json).unwrap(), m);
    for bad in [
        r#"{"variant":"KF2","params":[0,0,0],"window":3}"#,
        r#"{"variant":"KF","params":[0,0,0,0],"window":3}"#,
        r#"{"variant":"KF2","params":[0,0,0,0],"window":3,"lr":1}"#,
        r#"{"variant":"KF3","params":[0,0,0,0],"window":3}"#,
    ] {
        assert!(GainModel::from_json(bad).is_err(), "{bad}");
    }
}
