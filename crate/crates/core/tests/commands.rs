use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dgdm::commands::{
    self, cmd_ablate, cmd_eval, cmd_train, cmd_visualize, SweepAxis, ABLATION_HEADER,
};
use dgdm::config::RunConfig;
use dgdm::data::{generate, load_folder, write_folder, Dataset, Sample, SyntheticSpec};
use dgdm::eval::{evaluate, BBox, Heatmap};
use dgdm::layer::DgdmConfig;
use dgdm::nn::model::ConvParams;
use dgdm::nn::{build_model, BackboneSpec, Checkpoint, Model, Params, StageSpec, TrainConfig};
use dgdm::viz::{colormap, render_heatmap, GT_COLOR, PRED_COLOR};
use ndarray::{Array1, Array2, Array3};

fn small(out: &Path) -> RunConfig {
    RunConfig::load(
        None,
        &[
            "data.n_train=48",
            "data.n_test=24",
            "data.image_size=32",
            "train.epochs=2",
            "train.batch_size=8",
            &format!("out={}", out.display()),
        ],
    )
    .unwrap()
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_writes_the_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(&small(tmp.path())).unwrap();
    let root = &out.run_dir.root;
    let name = root.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("run_") && name.ends_with("_0"), "{name}");
    for f in [
        "config.resolved",
        "checkpoint.json",
        "logs/train_log.csv",
        "reports/metrics.json",
        "reports/metrics.csv",
        "reports/records.csv",
    ] {
        assert!(root.join(f).is_file(), "missing {f}");
    }
    assert!(root.join("viz").is_dir());
    let log = read(root.join("logs/train_log.csv"));
    assert_eq!(log.lines().next(), Some("epoch,mean_loss,train_acc"));
    assert_eq!(log.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&read(root.join("reports/metrics.json"))).unwrap();
    for k in ["gt_loc", "top1_clas", "top1_loc"] {
        assert!(json[k].is_number(), "{k}");
    }
}

#[test]
fn reruns_and_snapshots_reproduce_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let a = cmd_train(&cfg).unwrap().run_dir;
    let b = cmd_train(&cfg).unwrap().run_dir;
    let snap = RunConfig::from_text(&read(a.config())).unwrap();
    assert_eq!(snap, cfg);
    let c = cmd_train(&snap).unwrap().run_dir;
    for f in [
        "reports/metrics.csv",
        "reports/records.csv",
        "logs/train_log.csv",
    ] {
        let first = read(a.root.join(f));
        assert_eq!(first, read(b.root.join(f)), "{f}");
        assert_eq!(first, read(c.root.join(f)), "{f}");
    }
    assert_eq!(read(a.checkpoint()), read(b.checkpoint()));
}

#[test]
fn eval_reproduces_training_report_and_rejects_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let trained = cmd_train(&cfg).unwrap();
    let eval = cmd_eval(&cfg, &trained.run_dir.checkpoint()).unwrap();
    assert_eq!(eval.report, trained.trained.report);
    assert_eq!(
        read(eval.run_dir.reports().join("metrics.csv")),
        read(trained.run_dir.reports().join("metrics.csv"))
    );
    let mut other = cfg.clone();
    other.data.n_classes = 4;
    let err = cmd_eval(&other, &trained.run_dir.checkpoint()).unwrap_err();
    assert!(err.to_string().contains("classes"), "{err}");
}

/// Recomputes the three metrics from `records.csv` alone.
fn recount(records_csv: &str) -> (f64, f64, f64) {
    let mut lines = records_csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (t, p, gi, pi) = (
        col("true_class"),
        col("pred_class"),
        col("gt_class_iou"),
        col("pred_class_iou"),
    );
    let (mut n, mut gt, mut clas, mut loc) = (0usize, 0usize, 0usize, 0usize);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let right = f[t] == f[p];
        n += 1;
        gt += usize::from(f[gi].parse::<f64>().unwrap() >= 0.5);
        clas += usize::from(right);
        loc += usize::from(right && f[pi].parse::<f64>().unwrap() >= 0.5);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    (pct(gt), pct(clas), pct(loc))
}

#[test]
fn report_matches_independent_recount() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.epochs = 4;
    let run = cmd_train(&cfg).unwrap().run_dir;
    let metrics = read(run.reports().join("metrics.csv"));
    let row: Vec<f64> = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let (gt, clas, loc) = recount(&read(run.reports().join("records.csv")));
    assert_eq!((row[0], row[1], row[2]), (gt, clas, loc));
    assert_eq!(row[3], 24.0);
}

#[test]
fn ablation_row_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.epochs = 1;
    let vals = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let out = cmd_ablate(&cfg, SweepAxis::BlockSize, &vals(&["1", "2", "3"])).unwrap();
    let csv = read(out.run_dir.reports().join("ablation.csv"));
    assert_eq!(csv.lines().next(), Some(ABLATION_HEADER));
    assert_eq!(csv.lines().count(), 4);

    let out = cmd_ablate(
        &cfg,
        SweepAxis::Stage,
        &vals(&["stage1", "stage1+2", "full"]),
    )
    .unwrap();
    let stages: Vec<String> = out.rows.iter().map(|r| r.stage.to_string()).collect();
    assert_eq!(stages, ["stage1", "stage1+2", "full"]);

    let settings =
        commands::ablation_settings(&cfg, SweepAxis::Beta, &vals(&["2", "2.5", "3", "3.5"]))
            .unwrap();
    let betas: Vec<f64> = settings.iter().map(|s| s.cfg.dgdm.cagd.beta).collect();
    assert_eq!(betas, [2.0, 2.5, 3.0, 3.5]);
    assert!(settings
        .iter()
        .all(|s| s.stage.to_string() == "full" && s.cfg.dgdm.use_cagd));

    let table = commands::ablation_settings(&cfg, SweepAxis::Table1, &[]).unwrap();
    let labels: Vec<String> = table
        .iter()
        .map(|s| format!("{} {}", s.stage, s.value))
        .collect();
    assert_eq!(
        labels,
        [
            "stage1 1",
            "stage1 2",
            "stage1 3",
            "stage1 adaptive_7",
            "stage1+2 1",
            "stage1+2 2",
            "stage1+2 3",
            "stage1+2 4",
            "stage1+2 adaptive_7",
            "full 2",
            "full 2.5",
            "full 3",
            "full 3.5",
        ]
    );

    assert!("depth".parse::<SweepAxis>().is_err());
    assert!(cmd_ablate(&cfg, SweepAxis::BlockSize, &vals(&["0"])).is_err());
}

#[test]
fn visualize_writes_three_pngs_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let ckpt = cmd_train(&cfg).unwrap().run_dir.checkpoint();

    let out = cmd_visualize(&cfg, &ckpt, &[], 1).unwrap();
    assert_eq!(out.written.len(), 3);
    assert_eq!(out.skipped, 0);
    let names: Vec<String> = out
        .written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(
        names[0].ends_with("_input.png")
            && names[1].ends_with("_heatmap.png")
            && names[2].ends_with("_overlay.png")
    );
    let overlay = image::open(&out.written[2]).unwrap().to_rgb8();
    assert!(overlay.pixels().any(|p| *p == GT_COLOR));
    assert!(overlay.pixels().any(|p| *p == PRED_COLOR));

    let bogus = tmp.path().join("not_an_image.png");
    fs::write(&bogus, b"plain text").unwrap();
    let good = out.written[0].clone();
    let out = cmd_visualize(
        &cfg,
        &ckpt,
        &[bogus, tmp.path().join("missing.png"), good],
        0,
    )
    .unwrap();
    assert_eq!(out.skipped, 2);
    assert_eq!(out.written.len(), 3);
}

#[test]
fn heatmap_png_inverts_to_heatmap_values() {
    let raw = Array2::from_shape_fn((12, 20), |(y, x)| {
        ((x as f64 - 7.0).powi(2) + (y as f64 - 4.0).powi(2)).sqrt()
    });
    let heat = Heatmap::normalize(&raw);
    let png = render_heatmap(&heat);
    // Nearest colour on a fine grid of the map, as an inverse.
    let table: Vec<(f64, [u8; 3])> = (0..=1000)
        .map(|i| (i as f64 / 1000.0, colormap(i as f64 / 1000.0).0))
        .collect();
    let invert = |p: [u8; 3]| {
        table
            .iter()
            .min_by_key(|(_, c)| {
                c.iter()
                    .zip(p)
                    .map(|(a, b)| (i32::from(*a) - i32::from(b)).pow(2))
                    .sum::<i32>()
            })
            .unwrap()
            .0
    };
    let (mut lo, mut hi) = ((0, 0), (0, 0));
    for ((y, x), &v) in heat.view().indexed_iter() {
        if v < heat.view()[lo] {
            lo = (y, x);
        }
        if v > heat.view()[hi] {
            hi = (y, x);
        }
        let back = invert(png.get_pixel(x as u32, y as u32).0);
        assert!((back - v).abs() <= 0.01, "{v} -> {back}");
    }
    assert_eq!(png.get_pixel(lo.1 as u32, lo.0 as u32).0, colormap(0.0).0);
    assert_eq!(png.get_pixel(hi.1 as u32, hi.0 as u32).0, colormap(1.0).0);
}

/// Three classes; class k is a square painted only in channel k.
fn trivial_dataset(n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let label = i % 3;
            let (x0, y0) = (2 + (i * 5) % 12, 3 + (i * 7) % 10);
            let side = 8 + i % 5;
            let mut image = Array3::zeros((3, 32, 32));
            image
                .slice_mut(ndarray::s![label, y0..y0 + side, x0..x0 + side])
                .fill(1.0);
            Sample {
                id: format!("t{i:03}"),
                image,
                label,
                boxes: vec![BBox::new(
                    x0 as u32,
                    y0 as u32,
                    (x0 + side) as u32,
                    (y0 + side) as u32,
                )
                .unwrap()],
            }
        })
        .collect();
    Dataset {
        class_names: vec!["r".into(), "g".into(), "b".into()],
        samples,
    }
}

/// One identity convolution and an identity classifier: the CAM of class k
/// is exactly channel k of the input.
fn oracle_model() -> Model {
    let spec = BackboneSpec {
        in_channels: 3,
        input_mean: 0.5,
        stages: vec![StageSpec {
            channels: 3,
            convs: 1,
            downsample: false,
        }],
        dgdm_insertion_points: vec![],
        num_classes: 3,
    };
    let mut weight = Array2::zeros((3, 27));
    for c in 0..3 {
        weight[[c, c * 9 + 4]] = 1.0;
    }
    let params = Params {
        convs: vec![ConvParams {
            weight,
            bias: Array1::from_elem(3, 0.5),
        }],
        fc_weight: Array2::eye(3),
        fc_bias: Array1::zeros(3),
    };
    Model::from_parts(spec, DgdmConfig::default(), params).unwrap()
}

#[test]
fn oracle_model_scores_perfectly_through_the_folder_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("trivial");
    write_folder(&trivial_dataset(30), &root).unwrap();
    assert_eq!(load_folder(&root).unwrap().len(), 30);

    let ckpt = tmp.path().join("oracle.json");
    Checkpoint::from_model(&oracle_model(), &TrainConfig::default(), 0, 0)
        .save(&ckpt)
        .unwrap();
    let cfg = RunConfig::load(
        None,
        &[
            "data.source=folder".to_string(),
            format!("data.root={}", root.display()),
            format!("data.test_root={}", root.display()),
            format!("out={}", tmp.path().join("runs").display()),
        ],
    )
    .unwrap();
    let out = cmd_eval(&cfg, &ckpt).unwrap();
    assert_eq!(
        (out.report.gt_loc, out.report.top1_clas, out.report.top1_loc),
        (100.0, 100.0, 100.0)
    );
    assert!(out.records.iter().all(|r| r.gt_class_iou == 1.0));
}

#[test]
fn untrained_model_is_at_chance() {
    let n = 1000;
    let data = generate(&SyntheticSpec {
        n_images: n,
        image_size: 32,
        n_classes: 3,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let model = build_model(&BackboneSpec::toy(3), &DgdmConfig::default(), 5).unwrap();
    let (_, report) = evaluate(&model, &data, 0.2, 100).unwrap();
    let p = 1.0 / 3.0;
    let sigma = 100.0 * (p * (1.0 - p) / n as f64).sqrt();
    assert!(
        (report.top1_clas - 100.0 * p).abs() <= 3.0 * sigma,
        "{}",
        report.top1_clas
    );
}

fn dgdm_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgdm"))
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg_path = tmp.path().join("toy.cfg");
    fs::write(
        &cfg_path,
        "# toy run\ndata.n_train=24\ndata.n_test=12\ndata.image_size=32\ntrain.epochs=1\n",
    )
    .unwrap();

    let ok = dgdm_bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out,
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let run = PathBuf::from(String::from_utf8_lossy(&ok.stdout).lines().next().unwrap());
    assert!(run.join("checkpoint.json").is_file());
    assert!(run.file_name().unwrap().to_string_lossy().ends_with("_3"));

    let bad = dgdm_bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out,
            "--set",
            "dgdm.drop_rate=2.0",
        ])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dgdm.drop_rate"));

    let unknown = dgdm_bin()
        .args(["train", "--out", out, "--set", "sagd.nope=1"])
        .output()
        .unwrap();
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("sagd.nope"));

    let axis = dgdm_bin()
        .args([
            "ablate",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out,
            "--axis",
            "depth",
            "--values",
            "1",
        ])
        .output()
        .unwrap();
    assert!(!axis.status.success());
    assert!(String::from_utf8_lossy(&axis.stderr).contains("depth"));
}
