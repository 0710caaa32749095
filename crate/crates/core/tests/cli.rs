use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cardioseg::localizer::BoundingBox3D;
use cardioseg::metrics::EvaluationReport;
use cardioseg::neuralnet::{NetworkSpec, NetworkWeights};
use cardioseg::phantom::read_manifest;
use cardioseg::volgrid::{read_label, read_volume, write_label, write_volume, ElementType, Grid, LabelVolume, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cardioseg<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardioseg")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files.into_iter().map(|f| (f.clone(), fs::read(f).unwrap())).collect()
}

fn generate_small(out: &Path, n: usize, seed: u64) -> PathBuf {
    let o = ok(cardioseg(&[
        "generate",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--dims",
        "48,48,48",
        "--spacing",
        "1.8",
        "--out",
        &p(out),
    ]));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

/// Localizer weights whose output ignores the input: `bias` feeds the softmax.
fn write_constant_localizers(dir: &Path, bias: [f64; 2]) {
    let spec = NetworkSpec::localizer_default();
    let mut w = NetworkWeights::he_init(&spec, 1).unwrap();
    let last = w.layers.last_mut().unwrap();
    last.weight.iter_mut().for_each(|v| *v = 0.0);
    last.bias = bias.to_vec();
    for axis in ["axial", "coronal", "sagittal"] {
        w.save(dir.join(format!("localizer-{axis}.weights"))).unwrap();
    }
}

fn write_segmenter(dir: &Path) {
    let spec = NetworkSpec::segmentation_default();
    let mut w = NetworkWeights::he_init(&spec, 3).unwrap();
    let last = w.layers.last_mut().unwrap();
    last.bias = vec![0.0, 0.2];
    w.save(dir.join("segmenter.weights")).unwrap();
}

fn write_image(path: &Path, dims: [usize; 3], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(dims, [1.2, 1.2, 1.5], [0.0; 3]).unwrap();
    let centre = dims.map(|d| d as f64 / 2.0);
    let vol = Volume3D::from_fn(grid, |x, y, z| {
        let r2 = (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2) + (z as f64 - centre[2]).powi(2);
        let base = if r2 < 16.0 { 400.0 } else { -50.0 };
        base + rng.random_range(-20.0..20.0)
    })
    .unwrap();
    write_volume(&vol, path, ElementType::Short).unwrap();
}

fn summary_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("summary.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from summary:\n{text}"))
}

#[test]
fn generate_writes_manifest_rows_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ph");
    let manifest = generate_small(&out, 3, 40);
    assert_eq!(manifest, out.join("manifest.txt"));
    let rows = read_manifest(&manifest).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![40, 41, 42]);
    let first = dir_bytes(&out);
    generate_small(&out, 3, 40);
    assert_eq!(dir_bytes(&out), first);
}

#[test]
fn generate_rejects_tiny_dims_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cardioseg(&["generate", "--n", "1", "--dims", "10,10,10", "--out", &p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dims"), "{}", stderr(&o));
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    let out = tmp.path().join("from_cfg");
    fs::write(
        &cfg,
        format!("[generate]\nn = 2\nseed = 7\ndims = 48x48x48\nspacing = 1.8\nout = {}\n", p(&out)),
    )
    .unwrap();
    ok(cardioseg(&["--config", &p(&cfg), "generate", "--n", "1"]));
    let rows = read_manifest(out.join("manifest.txt")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seed, 7);

    fs::write(&cfg, "[generate]\nbogus_key = 1\n").unwrap();
    let o = cardioseg(&["--config", &p(&cfg), "generate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reduced_training_logs_one_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate_small(&tmp.path().join("ph"), 2, 60);
    for (role, extra) in [("localizer-axial", vec![]), ("segmenter", vec!["--patches-per-class", "40"])] {
        let weights = tmp.path().join(format!("{role}.weights"));
        let mut args = vec![
            "train".to_string(),
            "--role".into(),
            role.into(),
            "--manifest".into(),
            p(&manifest),
            "--epochs".into(),
            "3".into(),
            "--batch-size".into(),
            "16".into(),
            "--out".into(),
            p(&weights),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(cardioseg(&args));
        let csv = fs::read_to_string(weights.with_extension("csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss");
        assert_eq!(lines.len(), 4, "{csv}");
        let spec = if role == "segmenter" {
            NetworkSpec::segmentation_default()
        } else {
            NetworkSpec::localizer_default()
        };
        let first = fs::read(&weights).unwrap();
        NetworkWeights::load(&weights, &spec).unwrap();
        ok(cardioseg(&args));
        assert_eq!(fs::read(&weights).unwrap(), first, "{role} retrain differs");
    }
}

#[test]
fn single_class_sampling_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = [12, 12, 12];
    let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let label = LabelVolume::from_fn(grid, |x, y, z| (4..8).contains(&x) && (4..8).contains(&y) && (4..8).contains(&z))
        .unwrap();
    let image = Volume3D::filled(grid, 100.0).unwrap();
    write_volume(&image, tmp.path().join("img.mhd"), ElementType::Short).unwrap();
    write_label(&label, tmp.path().join("lab.mhd")).unwrap();
    // The recorded box is exactly the label, so there are no negatives.
    fs::write(tmp.path().join("manifest.txt"), "0 img.mhd lab.mhd 4 4 4 7 7 7\n").unwrap();
    let o = cardioseg(&[
        "train",
        "--role",
        "segmenter",
        "--manifest",
        &p(&tmp.path().join("manifest.txt")),
        "--epochs",
        "1",
        "--out",
        &p(&tmp.path().join("s.weights")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("single-class"), "{}", stderr(&o));
}

#[test]
fn segment_writes_parseable_outputs_inside_the_box() {
    let tmp = tempfile::tempdir().unwrap();
    let weights = tmp.path().join("w");
    fs::create_dir_all(&weights).unwrap();
    write_constant_localizers(&weights, [0.0, 5.0]);
    write_segmenter(&weights);
    let image = tmp.path().join("img.mhd");
    write_image(&image, [14, 13, 12], 1);
    let run = |out: &Path| {
        ok(cardioseg(&[
            "segment",
            "--image",
            &p(&image),
            "--weights-dir",
            &p(&weights),
            "--out",
            &p(out),
        ]))
    };
    let a = tmp.path().join("a");
    run(&a);
    assert_eq!(summary_value(&a, "status"), "ok");
    let mask = read_label(a.join("mask.mhd")).unwrap();
    let prob = read_volume(a.join("prob.mhd")).unwrap();
    let smooth = read_volume(a.join("prob_smoothed.mhd")).unwrap();
    let img = read_volume(&image).unwrap();
    assert_eq!(mask.dims(), img.dims());
    assert_eq!(prob.dims(), smooth.dims());
    assert!(prob.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
    let lo: Vec<usize> = summary_value(&a, "box_lo").split(' ').map(|s| s.parse().unwrap()).collect();
    let hi: Vec<usize> = summary_value(&a, "box_hi").split(' ').map(|s| s.parse().unwrap()).collect();
    let bbox = BoundingBox3D::new([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]], img.dims()).unwrap();
    assert_eq!(prob.dims(), bbox.extents());
    assert!(mask.foreground().all(|q| bbox.contains(q)));
    assert_eq!(summary_value(&a, "mask_voxels"), mask.count().to_string());
    assert!(a.join("timing.txt").is_file());

    let b = tmp.path().join("b");
    run(&b);
    for f in ["mask.raw", "prob.raw", "prob_smoothed.raw", "summary.txt"] {
        let strip = |d: &Path| fs::read_to_string(d.join(f)).map(|s| s.replace(&p(d), "")).ok();
        if f.ends_with(".txt") {
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn segment_reports_localization_failure() {
    let tmp = tempfile::tempdir().unwrap();
    write_constant_localizers(tmp.path(), [5.0, 0.0]);
    write_segmenter(tmp.path());
    let image = tmp.path().join("img.mhd");
    write_image(&image, [10, 10, 10], 2);
    let out = tmp.path().join("seg");
    let o = cardioseg(&["segment", "--image", &p(&image), "--weights-dir", &p(tmp.path()), "--out", &p(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert_eq!(summary_value(&out, "status"), "localization_failure");
    assert_eq!(summary_value(&out, "axis"), "sagittal");
}

#[test]
fn segment_with_missing_weights_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let image = tmp.path().join("img.mhd");
    write_image(&image, [8, 8, 8], 3);
    let o = cardioseg(&["segment", "--image", &p(&image), "--weights-dir", &p(tmp.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn evaluate_scores_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate_small(&tmp.path().join("ph"), 2, 80);
    let rows = read_manifest(&manifest).unwrap();
    let report_path = tmp.path().join("perfect.json");
    let mut args = vec!["evaluate".to_string()];
    for r in &rows {
        args.extend(["--pred".into(), p(&r.label), "--ref".into(), p(&r.label)]);
    }
    args.extend(["--out".into(), p(&report_path)]);
    ok(cardioseg(&args));
    let report = EvaluationReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.aggregate.dice, 1.0);
    assert_eq!(report.aggregate.mad_mm, Some(0.0));

    // Erode one prediction so the scans differ, then recompute the means from the JSON.
    let pred_dir = tmp.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    let mut label = read_label(&rows[1].label).unwrap();
    let first: Vec<_> = label.foreground().take(label.count() / 3).collect();
    for q in first {
        label.set(q, false);
    }
    let eroded = pred_dir.join("eroded.mhd");
    write_label(&label, &eroded).unwrap();
    let mixed = tmp.path().join("mixed.json");
    ok(cardioseg(&[
        "evaluate",
        "--pred",
        &p(&rows[0].label),
        "--pred",
        &p(&eroded),
        "--manifest",
        &p(&manifest),
        "--out",
        &p(&mixed),
    ]));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mixed).unwrap()).unwrap();
    let scans = json["scans"].as_array().unwrap();
    for key in ["dice", "mad_mm", "sensitivity", "specificity"] {
        let mean = scans.iter().map(|s| s[key].as_f64().unwrap()).sum::<f64>() / scans.len() as f64;
        let agg = json["aggregate"][key].as_f64().unwrap();
        assert!((agg - mean).abs() < 1e-12, "{key}: {agg} vs {mean}");
    }
    assert!(json["aggregate"]["dice"].as_f64().unwrap() < 1.0);

    let missing = tmp.path().join("nope.mhd");
    let o = cardioseg(&["evaluate", "--pred", &p(&rows[0].label), "--ref", &p(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&p(&missing)), "{}", stderr(&o));

    let o = cardioseg(&["evaluate", "--pred", &p(&rows[0].label)]);
    assert_eq!(o.status.code(), Some(2));
}

/// Header and pixels of a binary PPM.
fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20.min(bytes.len())]).into_owned();
    let mut fields = text.split_whitespace();
    assert_eq!(fields.next(), Some("P6"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    let header = format!("P6\n{w} {h}\n255\n").len();
    (w, h, bytes[header..].to_vec())
}

#[test]
fn render_draws_the_mask_boundary_only() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = [16, 12, 10];
    let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Volume3D::from_fn(grid, |_, _, _| rng.random_range(-200.0..800.0)).unwrap();
    let mask = LabelVolume::from_fn(grid, |x, y, z| (3..11).contains(&x) && (0..7).contains(&y) && z == 4).unwrap();
    write_volume(&image, tmp.path().join("img.mhd"), ElementType::Short).unwrap();
    write_label(&mask, tmp.path().join("mask.mhd")).unwrap();
    let out = tmp.path().join("slice.ppm");
    ok(cardioseg(&[
        "render",
        "--image",
        &p(&tmp.path().join("img.mhd")),
        "--mask",
        &p(&tmp.path().join("mask.mhd")),
        "--index",
        "4",
        "--out",
        &p(&out),
    ]));
    let (w, h, px) = read_ppm(&out);
    assert_eq!((w, h), (16, 12));
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < 16 && y < 12 && mask.get(x as usize, y as usize, 4);
    for y in 0..12i64 {
        for x in 0..16i64 {
            let boundary = inside(x, y)
                && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| !inside(x + dx, y + dy));
            let k = 3 * (y as usize * 16 + x as usize);
            let rgb = &px[k..k + 3];
            if boundary {
                assert_eq!(rgb, [255, 0, 0], "({x},{y})");
            } else {
                assert!(rgb[0] == rgb[1] && rgb[1] == rgb[2], "({x},{y}) {rgb:?}");
            }
        }
    }

    let o = cardioseg(&["render", "--image", &p(&tmp.path().join("img.mhd")), "--index", "10", "--out", &p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn render_constant_volume_is_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = Grid::new([9, 7, 5], [1.0; 3], [0.0; 3]).unwrap();
    write_volume(&Volume3D::filled(grid, 300.0).unwrap(), tmp.path().join("c.mhd"), ElementType::Short).unwrap();
    let out = tmp.path().join("c.png");
    ok(cardioseg(&[
        "render",
        "--image",
        &p(&tmp.path().join("c.mhd")),
        "--axis",
        "coronal",
        "--index",
        "1",
        "--index",
        "3",
        "--out",
        &p(&out),
    ]));
    for i in [1, 3] {
        let path = tmp.path().join(format!("c_coronal_{i:03}.png"));
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (9, 5));
        let data = &buf[..info.buffer_size()];
        assert!(data.iter().all(|&v| v == data[0]));
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    assert_eq!(cardioseg(&["train"]).status.code(), Some(2));
    assert_eq!(cardioseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cardioseg(&["train", "--role", "localizer-oblique", "--manifest", "x"]).status.code(), Some(2));
}

/// Five default-size phantoms, 20k patches per class, 10 epochs. Takes about
/// ten minutes on one core; run with `cargo test -- --ignored`.
#[test]
#[ignore]
fn desk_scale_segmenter_training_reduces_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ph");
    ok(cardioseg(&["generate", "--n", "5", "--seed", "1000", "--out", &p(&out)]));
    let weights = tmp.path().join("segmenter.weights");
    ok(cardioseg(&[
        "train",
        "--role",
        "segmenter",
        "--manifest",
        &p(&out.join("manifest.txt")),
        "--patches-per-class",
        "20000",
        "--epochs",
        "10",
        "--precision",
        "f32",
        "--seed",
        "42",
        "--out",
        &p(&weights),
    ]));
    let csv = fs::read_to_string(weights.with_extension("csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses[9] < losses[0], "{losses:?}");
}
