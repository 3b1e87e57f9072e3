use std::path::Path;
use std::process::{Command, Output};

use bcnn::preproc::{self, save_image};
use bcnn::{Engine, Image, InputMode, ModelDescriptor, ReferenceConfig, Shape3};

fn bcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcnn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small(mode: InputMode) -> ModelDescriptor {
    ReferenceConfig {
        height: 16,
        width: 16,
        ..ReferenceConfig::with_mode(mode)
    }
    .random_model(12)
    .unwrap()
}

fn write_model(dir: &Path, m: &ModelDescriptor) -> String {
    let p = dir.join("m.bcnn");
    m.save(&p).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn run_prints_class_scores_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(InputMode::ThresholdRgb);
    let model = write_model(dir.path(), &m);
    let img = preproc::seeded_image(1, 0, m.input_shape());
    let img_path = dir.path().join("x.ppm");
    save_image(&img, &img_path).unwrap();

    let o = bcnn(&["run", "--model", &model, "--image", img_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let expected = Engine::default().forward(&m, &img).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("class=")).count(), 1);
    assert_eq!(lines[0], format!("class={}", expected.class));
    assert!(lines[1].starts_with("scores=["));
    assert_eq!(lines[2], "input_mode=threshold-rgb");
}

#[test]
fn run_converts_rgb_for_gray_models() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(InputMode::ThresholdGray);
    let model = write_model(dir.path(), &m);
    let rgb = preproc::seeded_image(1, 0, Shape3::new(16, 16, 3));
    let img_path = dir.path().join("x.ppm");
    save_image(&rgb, &img_path).unwrap();
    let o = bcnn(&["run", "--model", &model, "--image", img_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gray = preproc::grayscale(&rgb).unwrap();
    let expected = Engine::default().forward(&m, &gray).unwrap().class;
    assert!(stdout(&o).starts_with(&format!("class={expected}\n")));
}

#[test]
fn run_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), &small(InputMode::ThresholdRgb));

    let o = bcnn(&["run", "--model", "/nonexistent.bcnn", "--image", "/nonexistent.ppm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());

    let img_path = dir.path().join("wrong.ppm");
    save_image(&Image::new(Shape3::new(8, 8, 3), vec![0.0; 192]).unwrap(), &img_path).unwrap();
    let o = bcnn(&["run", "--model", &model, "--image", img_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expected 16x16x3"), "{}", stderr(&o));

    let garbage = dir.path().join("g.bcnn");
    std::fs::write(&garbage, b"not a model").unwrap();
    let o = bcnn(&["run", "--model", garbage.to_str().unwrap(), "--image", img_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn bench_reports() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), &small(InputMode::ThresholdRgb));

    let o = bcnn(&["bench", "--model", &model, "--samples", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1 samples"), "{out}");
    assert!(out.contains("Whole network"));
    assert!(!out.contains("Im2col3d"));

    let csv = dir.path().join("layers.csv");
    let o = bcnn(&[
        "bench", "--model", &model, "--samples", "3", "--seed", "4", "--layerwise", "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["Im2col3d", "GEMM-convolution", "Max-Pooling", "Fully-Connected"] {
        assert!(out.contains(name), "missing {name} in\n{out}");
    }
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("stage,mean_us,std_us\n"));
    assert_eq!(csv.lines().count(), 1 + 9 + 1);

    let o = bcnn(&["bench", "--model", &model, "--samples", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bcnn(&["bench", "--model", "/nonexistent.bcnn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_baseline_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), &small(InputMode::ThresholdRgb));
    let csv = dir.path().join("cmp.csv");
    let o = bcnn(&["bench-baseline", "--model", &model, "--samples", "4", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("speedup") && out.contains("class agreement 4/4"), "{out}");
    let csv = std::fs::read_to_string(&csv).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("\"Whole network\""));
    let ratio: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio >= 0.0);
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.rsplitn(6, ',').collect();
        assert!(fields[5].starts_with('"') && fields[5].ends_with('"'), "{line}");
        for f in &fields[..5] {
            assert!(f.parse::<f64>().is_ok(), "{line}");
        }
    }
}

#[test]
fn validate_contract() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), &small(InputMode::Lbp));

    let o = bcnn(&["validate", "--model", &model, "--samples", "5", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("0 divergences / 5 samples"));

    let o = bcnn(&["validate", "--model", &model, "--samples", "5", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first divergence"));

    let o = bcnn(&["validate", "--model", &model, "--samples", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("samples"));
}

#[test]
fn same_seed_same_classes() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(InputMode::ThresholdRgb);
    let model = write_model(dir.path(), &m);
    let a = bcnn(&["validate", "--model", &model, "--samples", "3", "--seed", "9"]);
    let b = bcnn(&["validate", "--model", &model, "--samples", "3", "--seed", "9"]);
    let first = |o: &Output| stdout(o).lines().next().unwrap().to_owned();
    assert_eq!(first(&a), first(&b));
}

#[test]
fn gen_model_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.bcnn");
    let o = bcnn(&["gen-model", "--out", p.to_str().unwrap(), "--mode", "lbp", "--seed", "2", "--height", "8", "--width", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = ModelDescriptor::load(&p).unwrap();
    assert_eq!(m.input_mode(), InputMode::Lbp);
    assert_eq!(m.input_shape(), Shape3::new(8, 8, 3));
}
