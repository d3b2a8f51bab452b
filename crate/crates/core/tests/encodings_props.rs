use std::f64::consts::PI;

use evsdf::encodings::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre P_l^m(x) without the Condon–Shortley phase, by the
/// standard three-term recurrence.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    let s = (1.0 - x * x).max(0.0).sqrt();
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pll = 0.0;
    for ll in m + 2..=l {
        pll = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = pll;
    }
    pll
}

fn real_sh(l: usize, m: i64, d: [f64; 3]) -> f64 {
    let theta = d[2].clamp(-1.0, 1.0).acos();
    let phi = d[1].atan2(d[0]);
    let am = m.unsigned_abs() as usize;
    let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
    let p = legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => k * p,
        std::cmp::Ordering::Greater => 2f64.sqrt() * k * p * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => 2f64.sqrt() * k * p * (am as f64 * phi).sin(),
    }
}

fn random_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let a: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * a.cos(), r * a.sin(), z]
}

#[test]
fn sh_matches_legendre_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let d = random_dir(&mut rng);
        let y = sh_encode(d).unwrap();
        let mut i = 0;
        for l in 0..4usize {
            for m in -(l as i64)..=(l as i64) {
                let want = real_sh(l, m, d);
                assert!((y[i] - want).abs() < 1e-10, "l={l} m={m}: {} vs {want}", y[i]);
                i += 1;
            }
        }
    }
    assert!((sh_encode([0.0, 0.0, 1.0]).unwrap()[0] - 0.282_094_8).abs() < 1e-7);
}

#[test]
fn sh_parity_and_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let d = random_dir(&mut rng);
        let a = sh_basis(d);
        let b = sh_basis([-d[0], -d[1], -d[2]]);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            let l = (i as f64).sqrt().floor() as i32;
            assert!((y - (-1f64).powi(l) * x).abs() < 1e-12);
        }
    }
    let n = 100_000;
    let mut gram = [[0.0; SH_DIM]; SH_DIM];
    for _ in 0..n {
        let y = sh_basis(random_dir(&mut rng));
        for i in 0..SH_DIM {
            for j in 0..SH_DIM {
                gram[i][j] += y[i] * y[j];
            }
        }
    }
    for (i, row) in gram.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let est = v * 4.0 * PI / n as f64;
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((est - want).abs() < 0.02, "({i},{j}) {est}");
        }
    }
}

fn reference_beta(k: usize, n: u64, s: &AnnealSchedule) -> f64 {
    let alpha = (s.max_bands as f64 - s.min_bands as f64) * (n as f64) / (s.duration as f64);
    let x = alpha - k as f64 + s.min_bands as f64;
    let x = if x < 0.0 { 0.0 } else if x > 1.0 { 1.0 } else { x };
    (1.0 - (x * PI).cos()) / 2.0
}

#[test]
fn anneal_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sched = AnnealSchedule::default();
    for _ in 0..1000 {
        let k = rng.gen_range(0..9);
        let n = rng.gen_range(0..40_000);
        assert!((anneal_coeff(k, n, &sched) - reference_beta(k, n, &sched)).abs() < 1e-12);
    }
    let s = AnnealSchedule { min_bands: 3, max_bands: 9, duration: 30_000 };
    for k in 0..9 {
        assert_eq!(anneal_coeff(k, 0, &s), if k < 3 { 1.0 } else { 0.0 });
        assert_eq!(anneal_coeff(k, 30_000, &s), 1.0);
    }
}

proptest! {
    #[test]
    fn anneal_is_monotone(k in 0usize..9, n in 0u64..40_000, dn in 0u64..5000) {
        let s = AnnealSchedule::default();
        prop_assert!(anneal_coeff(k, n + dn, &s) >= anneal_coeff(k, n, &s));
        prop_assert!(anneal_coeff(k + 1, n, &s) <= anneal_coeff(k, n, &s));
    }

    #[test]
    fn encoding_jacobian_matches_differences(
        x in prop::array::uniform3(-1.0f64..1.0),
        beta in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let enc = PosEncoding::new(4);
        let jac = pos_encode_jacobian(x, &enc, &beta).unwrap();
        let h = 1e-4;
        for axis in 0..3 {
            let mut a = x;
            let mut b = x;
            a[axis] += h;
            b[axis] -= h;
            let fa = pos_encode(a, &enc, &beta).unwrap();
            let fb = pos_encode(b, &enc, &beta).unwrap();
            for i in 0..enc.output_dim() {
                let fd = (fa[i] - fb[i]) / (2.0 * h);
                let an = jac[axis][i];
                prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "axis {axis} slot {i}: {fd} vs {an}");
            }
        }
    }
}

#[test]
fn encoding_closed_forms() {
    let enc = PosEncoding::new(3);
    assert_eq!(enc.output_dim(), 3 + 6 * 3);
    let e = pos_encode([0.0; 3], &enc, &[1.0; 3]).unwrap();
    for band in 0..3 {
        let o = 3 + 6 * band;
        assert_eq!(&e[o..o + 3], &[0.0; 3]);
        assert_eq!(&e[o + 3..o + 6], &[1.0; 3]);
    }
    let e = pos_encode([0.3, -0.2, 0.7], &enc, &[0.0; 3]).unwrap();
    assert_eq!(&e[..3], &[0.3, -0.2, 0.7]);
    assert!(e[3..].iter().all(|v| *v == 0.0));
    let e = pos_encode([0.25, 0.0, 0.0], &enc, &[1.0; 3]).unwrap();
    assert!((e[3 + 6] - 1.0).abs() < 1e-12);
}
