use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SCENE: &str = r#"
preset = "sphere_checker"
width = 24
height = 18
n_frames = 60
fov_deg = 40.0
gt_resolution = 32
"#;

const TRAIN: &str = r#"
iterations = 6
batch_rays = 8
n_coarse = 8
n_rounds = 1
n_per_round = 4
log_interval = 2
checkpoint_interval = 4
anneal_duration = 10
"#;

fn evsdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evsdf")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("scene.toml"), SCENE).unwrap();
        fs::write(dir.path().join("train.toml"), TRAIN).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn simulate(&self) {
        ok(&evsdf(&["simulate", "--config", p(&self.path("scene.toml")), "--out", p(&self.path("data"))]));
    }

    fn train(&self, run: &str, extra: &[&str]) -> Output {
        let (data, config, out) = (self.path("data"), self.path("train.toml"), self.path(run));
        let mut args = vec!["train", "--dataset", p(&data), "--config", p(&config), "--out", p(&out)];
        args.extend(extra);
        evsdf(&args)
    }
}

fn manifest_field(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v[key].to_string()
}

#[test]
fn missing_config_is_invalid_input() {
    let f = Fixture::new();
    let missing = f.path("nope.toml");
    let out = evsdf(&["simulate", "--config", p(&missing), "--out", p(&f.path("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));

    let out = evsdf(&["train", "--config", p(&missing), "--dataset", p(&f.path("d")), "--out", p(&f.path("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_names_the_field() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "threshold = -1.0\n").unwrap();
    let out = evsdf(&["simulate", "--config", p(&f.path("bad.toml")), "--out", p(&f.path("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold"));
}

#[test]
fn simulate_layout_and_manifest_determinism() {
    let f = Fixture::new();
    f.simulate();
    let data = f.path("data");
    for name in ["events.txt", "poses.json", "intrinsics.json", "gt_mesh.ply", "config.json", "manifest.json"] {
        assert!(data.join(name).is_file(), "{name}");
    }
    let hash = manifest_field(&data, "hash");
    let dataset_hash = manifest_field(&data, "dataset_hash");
    let events = fs::read(data.join("events.txt")).unwrap();

    let again = evsdf(&["simulate", "--config", p(&f.path("scene.toml")), "--out", p(&data)]);
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stdout).contains("up to date"));

    ok(&evsdf(&["simulate", "--config", p(&f.path("scene.toml")), "--out", p(&data), "--force"]));
    assert_eq!(manifest_field(&data, "hash"), hash);
    assert_eq!(manifest_field(&data, "dataset_hash"), dataset_hash);
    assert_eq!(fs::read(data.join("events.txt")).unwrap(), events);

    let other = evsdf(&["simulate", "--config", p(&f.path("scene.toml")), "--out", p(&data), "--seed", "9"]);
    assert_eq!(other.status.code(), Some(2));
}

#[test]
fn locked_directory_is_refused() {
    let f = Fixture::new();
    let data = f.path("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join(".evsdf.lock"), "1").unwrap();
    let out = evsdf(&["simulate", "--config", p(&f.path("scene.toml")), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn training_logs_checkpoints_and_resumes_bit_identically() {
    let f = Fixture::new();
    f.simulate();

    ok(&f.train("zero", &["--iterations", "0"]));
    assert!(f.path("zero/checkpoint.json").is_file());
    let log = fs::read_to_string(f.path("zero/train.log")).unwrap();
    assert_eq!(log.lines().count(), 1);

    ok(&f.train("full", &[]));
    let full = fs::read_to_string(f.path("full/train.log")).unwrap();
    assert_eq!(full.lines().count(), 6 / 2 + 1);

    ok(&f.train("split", &["--iterations", "3"]));
    let partial = f.train("split", &[]);
    assert_eq!(partial.status.code(), Some(2));
    ok(&f.train("split", &["--resume"]));
    let split = fs::read_to_string(f.path("split/train.log")).unwrap();
    assert_eq!(split, full);
    assert_eq!(
        fs::read(f.path("split/checkpoint.json")).unwrap(),
        fs::read(f.path("full/checkpoint.json")).unwrap()
    );

    let done = f.train("full", &[]);
    ok(&done);
    assert!(String::from_utf8_lossy(&done.stdout).contains("already"));
}

#[test]
fn corrupt_checkpoint_reports_schema() {
    let f = Fixture::new();
    f.simulate();
    ok(&f.train("run", &["--iterations", "0"]));
    let ck = f.path("run/checkpoint.json");
    let text = fs::read_to_string(&ck).unwrap();
    fs::write(&ck, text.replacen("\"schema_version\":1,", "\"schema_version\":99,", 1)).unwrap();
    let out = f.train("run", &["--resume"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
    let out = evsdf(&["mesh", "--checkpoint", p(&ck), "--out", p(&f.path("m.ply"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mesh_eval_and_render() {
    let f = Fixture::new();
    f.simulate();
    ok(&f.train("run", &["--iterations", "0"]));
    let run = f.path("run");

    let m32 = f.path("m32.ply");
    let m64 = f.path("m64.obj");
    ok(&evsdf(&["mesh", "--checkpoint", p(&run), "--resolution", "32", "--out", p(&m32)]));
    ok(&evsdf(&["mesh", "--checkpoint", p(&run), "--resolution", "64", "--colour", "--out", p(&m64)]));
    let mesh32 = evsdf::meshing::import_mesh(&m32).unwrap();
    let mesh64 = evsdf::meshing::import_mesh(&m64).unwrap();
    assert!(mesh64.triangles.len() > mesh32.triangles.len());
    let colours = mesh64.colours.as_ref().expect("colour flag writes colours");
    assert!(colours.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    // the untrained network is a rough sphere of the init radius
    let mean_r = mesh64.vertices.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum::<f64>()
        / mesh64.vertices.len() as f64;
    assert!((mean_r - 0.5).abs() < 0.15, "mean radius {mean_r}");

    let out = evsdf(&["eval", "--mesh", p(&m32), "--gt", p(&m32), "--out", p(&f.path("report.txt"))]);
    ok(&out);
    let report = fs::read_to_string(f.path("report.txt")).unwrap();
    let kv: std::collections::HashMap<&str, f64> = report
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
        .collect();
    assert!(kv["chamfer"] < 1e-9 && kv["sdf_mae"] < 1e-9, "{report}");
    let unreadable = evsdf(&["eval", "--mesh", p(&f.path("none.ply")), "--gt", p(&m32)]);
    assert_eq!(unreadable.status.code(), Some(2));

    let data = f.path("data");
    let a = f.path("a.png");
    let b = f.path("b.png");
    for img in [&a, &b] {
        ok(&evsdf(&["render", "--checkpoint", p(&run), "--dataset", p(&data), "--pose", "5", "--out", p(img)]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let far = evsdf(&["render", "--checkpoint", p(&run), "--dataset", p(&data), "--pose", "60", "--out", p(&f.path("c.png"))]);
    assert_eq!(far.status.code(), Some(2));

    // a camera at z = 3 looking further along +z sees nothing
    fs::write(
        f.path("away.json"),
        r#"{"timestamps":[0.0],"poses":[[1,0,0,0, 0,1,0,0, 0,0,1,3, 0,0,0,1]]}"#,
    )
    .unwrap();
    let away = f.path("away.png");
    ok(&evsdf(&[
        "render", "--checkpoint", p(&run), "--dataset", p(&data), "--pose", "0",
        "--pose-file", p(&f.path("away.json")), "--out", p(&away),
    ]));
    let img = evsdf::imaging::RgbImage::load_png(&away).unwrap();
    assert!(img.pixels.iter().all(|px| *px == img.pixels[0]));
    assert!((img.pixels[0][0] - 159.0 / 255.0).abs() < 1e-9);

    let gt = f.path("gt.png");
    let mask = f.path("mask.png");
    ok(&evsdf(&[
        "render", "--ground-truth", "--dataset", p(&data), "--pose", "5", "--mask-out", p(&mask), "--out", p(&gt),
    ]));
    let out = evsdf(&[
        "eval", "--mesh", p(&m32), "--gt", p(&data.join("gt_mesh.ply")), "--render", p(&gt), "--reference", p(&gt),
        "--mask", p(&mask),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr=99"));
}
