use evsdf::events::*;
use evsdf::imaging::RgbImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grey_frames(values: &[Vec<f64>], w: usize, h: usize) -> Vec<RgbImage> {
    values
        .iter()
        .map(|v| RgbImage {
            width: w,
            height: h,
            pixels: v.iter().map(|&g| [g; 3]).collect(),
        })
        .collect()
}

fn frames_strategy() -> impl Strategy<Value = (usize, usize, Vec<Vec<f64>>)> {
    (1usize..4, 1usize..4, 2usize..12).prop_flat_map(|(w, h, n)| {
        (
            Just(w),
            Just(h),
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, w * h), n),
        )
    })
}

fn times(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * 0.01).collect()
}

proptest! {
    #[test]
    fn net_events_track_log_change((w, h, vals) in frames_strategy(), c in 0.05f64..0.5) {
        let frames = grey_frames(&vals, w, h);
        let bayer = BayerMask::rggb(w, h);
        let ts = times(frames.len());
        let s = simulate_events(&frames, &ts, c, 2.2, &bayer).unwrap();
        s.validate().unwrap();
        let f = accumulate(&s, -1e-10, ts[ts.len() - 1]).unwrap();
        for i in 0..w * h {
            let dl = log_intensity(vals[vals.len() - 1][i], 2.2) - log_intensity(vals[0][i], 2.2);
            prop_assert!((f.values[i] - dl).abs() < c, "pixel {i}: {} vs {dl}", f.values[i]);
            let k = f.values[i] / c;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulation_is_additive((w, h, vals) in frames_strategy(), split in 0.0f64..1.0) {
        let frames = grey_frames(&vals, w, h);
        let ts = times(frames.len());
        let s = simulate_events(&frames, &ts, 0.15, 2.2, &BayerMask::rggb(w, h)).unwrap();
        let end = ts[ts.len() - 1];
        let mid = split * end + 1e-7;
        prop_assume!(s.events.iter().all(|e| e.t != mid));
        let a = accumulate(&s, -1e-10, mid).unwrap();
        let b = accumulate(&s, mid, end).unwrap();
        let all = accumulate(&s, -1e-10, end).unwrap();
        for i in 0..w * h {
            prop_assert!((a.values[i] + b.values[i] - all.values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn reversed_sequence_flips_polarity((w, h, vals) in frames_strategy()) {
        let bayer = BayerMask::rggb(w, h);
        let ts = times(vals.len());
        let fwd = simulate_events(&grey_frames(&vals, w, h), &ts, 0.2, 2.2, &bayer).unwrap();
        let mut rev_vals = vals.clone();
        rev_vals.reverse();
        let rev = simulate_events(&grey_frames(&rev_vals, w, h), &ts, 0.2, 2.2, &bayer).unwrap();
        // same path walked backwards: net count per pixel negates
        let end = ts[ts.len() - 1];
        let f = accumulate(&fwd, -1e-10, end).unwrap();
        let r = accumulate(&rev, -1e-10, end).unwrap();
        for i in 0..w * h {
            let (dl_f, dl_r) = (f.values[i], r.values[i]);
            let true_dl = log_intensity(vals[vals.len() - 1][i], 2.2) - log_intensity(vals[0][i], 2.2);
            prop_assert!((dl_f - true_dl).abs() < 0.2 && (dl_r + true_dl).abs() < 0.2);
        }
    }
}

#[test]
fn two_frame_monotone_reversal_negates_each_event() {
    let a = grey_frames(&[vec![0.2, 0.5], vec![0.9, 0.1]], 2, 1);
    let mut b = a.clone();
    b.reverse();
    let bayer = BayerMask::rggb(2, 1);
    let ts = [0.0, 1.0];
    let f = simulate_events(&a, &ts, 0.2, 2.2, &bayer).unwrap();
    let r = simulate_events(&b, &ts, 0.2, 2.2, &bayer).unwrap();
    let count = |s: &EventStream, x: u32, p: i8| s.events.iter().filter(|e| e.x == x && e.p == p).count();
    for x in 0..2 {
        assert_eq!(count(&f, x, 1), count(&r, x, -1));
        assert_eq!(count(&f, x, -1), count(&r, x, 1));
    }
}

#[test]
fn doubling_intensity_fires_floor_ln2_over_c() {
    let v0 = 0.3f64;
    let v1 = v0 * 2f64.powf(1.0 / 2.2);
    let frames = grey_frames(&[vec![v0], vec![v1]], 1, 1);
    let s = simulate_events(&frames, &[0.0, 1.0], 0.2, 2.2, &BayerMask::rggb(1, 1)).unwrap();
    assert_eq!(s.len(), (2f64.ln() / 0.2).floor() as usize);
    assert!(s.events.iter().all(|e| e.p == 1));
}

#[test]
fn window_start_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mean: f64 = (0..n)
        .map(|_| {
            let (t0, t1) = sample_window(1.0, 0.5, 0.0, &mut rng).unwrap();
            assert!((0.5..1.0).contains(&t0));
            t1 - t0
        })
        .sum::<f64>()
        / n as f64;
    assert!((mean - 0.25).abs() < 0.25 * 0.05, "{mean}");
}

#[test]
fn event_file_round_trip() {
    let frames = grey_frames(&[vec![0.1, 0.4, 0.9, 0.3], vec![0.8, 0.2, 0.1, 0.35], vec![0.2, 0.9, 0.5, 0.3]], 2, 2);
    let s = simulate_events(&frames, &[0.0, 0.5, 1.0], 0.2, 2.2, &BayerMask::rggb(2, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.txt");
    write_event_file(&s, &path).unwrap();
    let back = read_event_file(&path).unwrap();
    assert_eq!(back.events, s.events);
    assert_eq!((back.width, back.height, back.threshold, back.gamma), (2, 2, 0.2, 2.2));
}
