use evsdf::fields::{FieldConfig, FieldParams, FnField, SdfField};
use evsdf::renderer::*;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RADIUS: f64 = 0.4;

fn sphere(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - RADIUS
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn camera(w: usize, h: usize) -> CameraModel {
    CameraModel::look_at(
        Intrinsics::from_fov(w, h, 30.0),
        Vector3::new(0.0, 0.0, -2.5),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
    )
    .unwrap()
}

/// Distance from the origin to the line of `ray`.
fn miss_distance(ray: &Ray) -> f64 {
    let o = Vector3::from(ray.origin);
    let d = Vector3::from(ray.dir).normalize();
    (o - d * o.dot(&d)).norm()
}

/// Analytic first-hit depth on the sphere of `RADIUS`.
fn hit_depth(ray: &Ray) -> Option<f64> {
    sphere_bounds(ray, RADIUS).map(|(near, _)| near)
}

/// Samples and composites one ray against an analytic field, colouring each
/// interval by its starting sample.
fn render_analytic(
    ray: &Ray,
    field: &dyn SdfField,
    colour: &dyn Fn([f64; 3]) -> [f64; 3],
    s: f64,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    let set = importance_sample(ray, field, s, cfg, rng).unwrap();
    let colours: Vec<[f64; 3]> = set.positions.iter().take(set.alphas.len()).map(|p| colour(*p)).collect();
    composite(&set.alphas, &colours, [BG_VAL; 3]).unwrap().0
}

fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    let dir = loop {
        let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if d.norm() > 0.1 && d.norm() <= 1.0 {
            break d.normalize();
        }
    };
    let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    Ray {
        origin: (target - dir * rng.gen_range(1.5..3.0)).into(),
        dir: dir.into(),
    }
}

#[test]
fn weights_are_valid_on_random_rays() {
    let bumpy = FnField(|p: [f64; 3]| sphere(p) + 0.05 * (9.0 * p[0]).sin() * (7.0 * p[1]).cos());
    let cfg = SamplingConfig {
        n_coarse: 16,
        n_rounds: 2,
        n_per_round: 4,
        bound_radius: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let ray = random_ray(&mut rng);
        let s = 10f64.powf(rng.gen_range(0.0..3.0));
        let set = importance_sample(&ray, &bumpy, s, &cfg, &mut rng).unwrap();
        assert!(set.t_values.windows(2).all(|w| w[0] < w[1]));
        let mut trans = 1.0;
        for (a, w) in set.alphas.iter().zip(&set.weights) {
            assert!((0.0..=1.0).contains(a), "alpha {a}");
            let next = trans * (1.0 - a);
            assert!(next <= trans);
            assert!((w - trans * a).abs() < 1e-15);
            trans = next;
        }
        assert!(set.weights.iter().sum::<f64>() <= 1.0 + 1e-6);
    }
}

#[test]
fn alpha_matches_direct_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let a = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(-1.0..1.0);
        let s = 10f64.powf(rng.gen_range(-1.0..2.5));
        let (pa, pb) = (sigmoid(s * a), sigmoid(s * b));
        let oracle = ((pa - pb) / pa).max(0.0);
        assert!((alpha_from_sdf(a, b, s) - oracle).abs() < 1e-12, "{a} {b} {s}");
    }
    assert!((alpha_from_sdf(0.1, -0.1, 10.0) - 0.63212).abs() < 1e-5);
    assert_eq!(alpha_from_sdf(0.3, 0.3, 50.0), 0.0);
    assert_eq!(alpha_from_sdf(-0.1, 0.2, 50.0), 0.0);
}

#[test]
fn composite_examples() {
    let (rgb, w) = composite(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0; 3]).unwrap();
    assert_eq!(rgb, [0.5, 0.25, 0.0]);
    assert_eq!(w, vec![0.5, 0.25]);
    let (rgb, w) = composite(&[1.0], &[[0.2, 0.4, 0.6]], [1.0; 3]).unwrap();
    assert_eq!((rgb, w), ([0.2, 0.4, 0.6], vec![1.0]));
    let (rgb, _) = composite(&[0.0, 0.0], &[[1.0; 3]; 2], [0.3; 3]).unwrap();
    assert_eq!(rgb, [0.3; 3]);
    assert!(composite(&[0.5], &[], [0.0; 3]).is_err());
    assert!(composite(&[1.5], &[[0.0; 3]], [0.0; 3]).is_err());
}

#[test]
fn peak_weight_sits_on_the_surface_when_sharp() {
    let field = FnField(sphere);
    let cfg = SamplingConfig {
        n_coarse: 1024,
        n_rounds: 0,
        ..SamplingConfig::default()
    };
    let cam = camera(32, 24);
    let ray = cam.ray_through(16.0, 12.0);
    for s in [200.0, 1000.0] {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = hit_depth(&ray).unwrap();
            let set = importance_sample(&ray, &field, s, &cfg, &mut rng).unwrap();
            // weight per unit depth, strata have jittered lengths
            let density: Vec<f64> = set
                .weights
                .iter()
                .zip(set.t_values.windows(2))
                .map(|(w, t)| w / (t[1] - t[0]))
                .collect();
            let i = density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let (near, far) = sphere_bounds(&ray, 1.0).unwrap();
            let spacing = (far - near) / cfg.n_coarse as f64;
            let mid = 0.5 * (set.t_values[i] + set.t_values[i + 1]);
            assert!((mid - truth).abs() <= spacing, "s {s}: {mid} vs {truth}");
        }
    }
}

#[test]
fn importance_rounds_concentrate_near_the_surface() {
    let field = FnField(sphere);
    let cfg = SamplingConfig {
        n_coarse: 32,
        n_rounds: 2,
        n_per_round: 32,
        bound_radius: 1.0,
    };
    let cam = camera(32, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut near, mut total) = (0usize, 0usize);
    for y in 0..24 {
        for x in 0..32 {
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            let Some(truth) = hit_depth(&ray) else { continue };
            let (a, b) = sphere_bounds(&ray, 1.0).unwrap();
            let bin = (b - a) / cfg.n_coarse as f64;
            let set = importance_sample(&ray, &field, 100.0, &cfg, &mut rng).unwrap();
            near += set.t_values.iter().filter(|t| (*t - truth).abs() <= 2.0 * bin).count();
            total += set.len();
        }
    }
    let frac = near as f64 / total as f64;
    assert!(frac >= 0.6, "{frac}");
}

#[test]
fn doubling_coarse_samples_converges() {
    let field = FnField(sphere);
    let colour = |p: [f64; 3]| [0.5 + p[0], 0.5 + p[1], 0.5 + p[2]];
    let cam = camera(24, 18);
    let pixels: Vec<(f64, f64)> = (0..18)
        .flat_map(|y| (0..24).map(move |x| (x as f64 + 0.5, y as f64 + 0.5)))
        .collect();
    let s = 40.0;
    let render = |n: usize, seed: u64| -> Vec<[f64; 3]> {
        let cfg = SamplingConfig {
            n_coarse: n,
            n_rounds: 0,
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pixels
            .iter()
            .map(|&(u, v)| render_analytic(&cam.ray_through(u, v), &field, &colour, s, &cfg, &mut rng))
            .collect()
    };
    let reference = render(4096, 5);
    let errors: Vec<f64> = [8, 16, 32, 64, 128]
        .iter()
        .map(|&n| {
            let img = render(n, 6);
            img.iter()
                .zip(&reference)
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / 3.0)
                .sum::<f64>()
                / img.len() as f64
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
}

#[test]
fn constant_colour_sphere_shows_its_silhouette() {
    let field = FnField(sphere);
    let red = [0.8, 0.3, 0.1];
    let cfg = SamplingConfig {
        n_coarse: 64,
        n_rounds: 2,
        n_per_round: 16,
        bound_radius: 1.0,
    };
    let cam = camera(40, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut inside, mut outside) = (0, 0);
    for y in 0..30 {
        for x in 0..40 {
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            let d = miss_distance(&ray);
            let rgb = render_analytic(&ray, &field, &|_| red, 500.0, &cfg, &mut rng);
            let expect = if d < RADIUS - 0.03 {
                inside += 1;
                red
            } else if d > RADIUS + 0.03 {
                outside += 1;
                [BG_VAL; 3]
            } else {
                continue;
            };
            for k in 0..3 {
                assert!((rgb[k] - expect[k]).abs() < 0.01, "({x}, {y}) {rgb:?}");
            }
        }
    }
    assert!(inside > 50 && outside > 50);
}

#[test]
fn missing_rays_and_coarse_only_sampling() {
    let field = FnField(sphere);
    let ray = Ray {
        origin: [0.0, 2.0, -3.0],
        dir: [0.0, 0.0, 1.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let set = importance_sample(&ray, &field, 50.0, &SamplingConfig::default(), &mut rng).unwrap();
    assert!(set.is_empty());
    let (rgb, w) = composite(&set.alphas, &[], [BG_VAL; 3]).unwrap();
    assert_eq!(rgb, [BG_VAL; 3]);
    assert!(w.is_empty());

    let cfg = SamplingConfig {
        n_coarse: 20,
        n_rounds: 0,
        ..SamplingConfig::default()
    };
    let ray = camera(8, 6).ray_through(4.0, 3.0);
    let (near, far) = sphere_bounds(&ray, 1.0).unwrap();
    let set = importance_sample(&ray, &field, 50.0, &cfg, &mut rng).unwrap();
    assert_eq!(set.len(), 20);
    let step = (far - near) / 20.0;
    for (k, t) in set.t_values.iter().enumerate() {
        let lo = near + k as f64 * step;
        assert!(*t >= lo - 1e-12 && *t <= lo + step + 1e-12);
    }

    let zero = Ray {
        origin: [0.0, 0.0, -2.0],
        dir: [0.0; 3],
    };
    assert!(importance_sample(&zero, &field, 50.0, &cfg, &mut rng).is_err());
    assert!(generate_rays(&camera(8, 6), &[(8, 0)]).is_err());
}

#[test]
fn camera_ray_conventions() {
    let k = Intrinsics::from_fov(20, 10, 60.0);
    let cam = CameraModel::new(k, nalgebra::Matrix3::identity(), Vector3::zeros()).unwrap();
    let ray = cam.ray_through(k.cx, k.cy);
    assert_eq!(ray.dir, [0.0, 0.0, 1.0]);
    let moved = CameraModel::new(k, cam.rotation, Vector3::new(1.0, 2.0, 3.0)).unwrap();
    let a = generate_rays(&cam, &[(3, 4)]).unwrap()[0];
    let b = generate_rays(&moved, &[(3, 4)]).unwrap()[0];
    assert_eq!(a.dir, b.dir);
    assert_eq!(b.origin, [1.0, 2.0, 3.0]);
}

proptest! {
    #[test]
    fn project_then_cast_round_trips(
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..3.0,
        eye in prop::array::uniform3(-2.0f64..2.0),
        local in prop::array::uniform3(-0.5f64..0.5),
        depth in 0.5f64..5.0,
    ) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let cam = CameraModel::new(Intrinsics::from_fov(64, 48, 50.0), *rot.matrix(), Vector3::from(eye)).unwrap();
        let p_cam = Vector3::new(local[0] * depth, local[1] * depth, depth);
        let p = rot * p_cam + Vector3::from(eye);
        let (u, v) = cam.project(p.into()).unwrap();
        let ray = cam.ray_through(u, v);
        let o = Vector3::from(ray.origin);
        let d = Vector3::from(ray.dir);
        let gap = ((p - o) - d * (p - o).dot(&d)).norm();
        prop_assert!(gap < 1e-6, "{}", gap);
    }
}

fn zero_radiance_params() -> FieldParams {
    let mut p = FieldParams::new(FieldConfig::desk(), 0).unwrap();
    for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
        if name.starts_with("rgb.") {
            t.fill(0.0);
        }
        if name == "log_s" {
            t.fill(2000f64.ln());
        }
    }
    p
}

#[test]
fn zero_capacity_radiance_renders_grey() {
    let params = zero_radiance_params();
    let cam = camera(24, 18);
    let cfg = RenderConfig::default();
    let coeffs = vec![1.0; params.config.sdf_bands];
    let img = render_image(&cam, &params, &coeffs, &cfg, 0).unwrap();
    let mut hits = 0;
    for y in 0..18 {
        for x in 0..24 {
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            if miss_distance(&ray) < 0.2 {
                hits += 1;
                let px = img.pixels[y * 24 + x];
                assert!(px.iter().all(|c| (c - 0.5).abs() < 0.01), "({x}, {y}) {px:?}");
            }
        }
    }
    assert!(hits > 10);
}

#[test]
fn rendering_is_deterministic() {
    let params = FieldParams::new(FieldConfig::desk(), 3).unwrap();
    let cam = camera(12, 9);
    let coeffs = vec![1.0; params.config.sdf_bands];
    let cfg = RenderConfig::default();
    let a = render_image(&cam, &params, &coeffs, &cfg, 11).unwrap();
    let b = render_image(&cam, &params, &coeffs, &cfg, 11).unwrap();
    assert_eq!(a, b);
}
