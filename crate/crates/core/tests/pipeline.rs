use std::path::Path;

use candle_core::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chimera_core::nn::to_vec;
use chimera_core::pipeline::dataset::TOY_CLASS_NAMES;
use chimera_core::pipeline::evaluate::evaluate_model;
use chimera_core::pipeline::heatmap::viridis_lut;
use chimera_core::pipeline::train::read_loss_log;
use chimera_core::pipeline::*;
use chimera_core::selective_distillation::similarity_scores;
use chimera_core::semantic_head::ForwardMode;
use chimera_core::{make_mini_clip, ClipWeightBundle, Error, MiniClipSpec, SplitMode};

fn bundle(seed: u64) -> ClipWeightBundle {
    make_mini_clip(&MiniClipSpec {
        seed,
        d_vis: 16,
        d_emb: 16,
        patch_size: 8,
        class_names: TOY_CLASS_NAMES[..6].iter().map(|s| s.to_string()).collect(),
    })
    .unwrap()
}

fn small_config(root: &Path, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::from_toml_str(
        "iterations = 10\nbatch_size = 4\noptim.lr = 2e-3\nbackbone.channels = 16\n",
    )
    .unwrap();
    cfg.iterations = iterations;
    cfg.output_dir = root.join("run");
    cfg
}

#[test]
fn config_defaults_and_dotted_keys() {
    let cfg = TrainConfig::from_toml_str("").unwrap();
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.sgd.k0, 9000);
    assert_eq!(cfg.sgd.tau, 0.07);
    assert_eq!((cfg.sam.tau_f, cfg.sam.tau_c), (0.07, 0.01));
    assert_eq!(cfg.lambda_sam(), 0.5);
    assert_eq!(cfg.infer.gamma, 0.5);
    assert_eq!((cfg.optim.lr, cfg.optim.weight_decay), (6e-5, 1e-2));

    let cfg = TrainConfig::from_toml_str(
        "sgd.k0 = 500\nsgd.mode = \"increase\"\nsam.lambda = 0.1\ncsh.norm = \"ln-frozen\"\nmode = \"transductive\"\n",
    )
    .unwrap();
    assert_eq!(cfg.sgd.k0, 500);
    assert_eq!(cfg.lambda_sam(), 0.1);
    assert_eq!(cfg.csh.norm, chimera_core::NormKind::LayerNormFrozen);
    assert_eq!(cfg.mode, SplitMode::Transductive);

    let round = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn config_rejects_bad_input() {
    for text in [
        "sgd.k00 = 3",
        "unknown = 1",
        "batch_size = 0",
        "sam.tau_f = 0.0",
        "sgd.tau = -1.0",
        "loss.lambda_sam = 0.5\nsam.lambda = 0.1",
        "csh.norm = \"batch\"",
        "pseudo.k_clusters = 0",
    ] {
        assert!(
            matches!(TrainConfig::from_toml_str(text), Err(Error::Config(_))),
            "accepted `{text}`"
        );
    }
    assert!(TrainConfig::from_toml_str("loss.lambda_sam = 0.5\nsam.lambda = 0.5").is_ok());
}

#[test]
fn config_paths_resolve_against_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    std::fs::write(&path, "dataset = \"data\"\nbundle = \"/abs/bundle\"\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset, dir.path().join("data"));
    assert_eq!(cfg.bundle, Path::new("/abs/bundle"));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn toy_dataset_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_toy_dataset(5, 3, 32, 4, 2, &dir.path().join("a")).unwrap();
    make_toy_dataset(5, 3, 32, 4, 2, &dir.path().join("b")).unwrap();
    assert_eq!(dir_bytes(&dir.path().join("a")), dir_bytes(&dir.path().join("b")));
    assert_eq!((a.seen_ids.len(), a.unseen_ids.len()), (4, 2));

    let loaded = DatasetManifest::load(&dir.path().join("a")).unwrap();
    assert_eq!(loaded.entries, a.entries);
    for s in loaded.load_samples().unwrap() {
        assert!(s.labels.labels.iter().all(|&l| l < 6 || l == 255));
        assert_eq!((s.image.height, s.image.width), (32, 32));
    }

    assert!(make_toy_dataset(5, 3, 30, 4, 2, dir.path()).is_err());
    assert!(make_toy_dataset(5, 0, 32, 4, 2, dir.path()).is_err());
    assert!(make_toy_dataset(5, 3, 32, 0, 2, dir.path()).is_err());
    assert!(make_toy_dataset(5, 3, 32, 10, 10, dir.path()).is_err());
}

#[test]
fn dataset_load_detects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    make_toy_dataset(5, 2, 32, 2, 1, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("label_0001.png")).unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn inductive_split_hides_unseen_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_dataset(9, 4, 32, 3, 3, dir.path()).unwrap();
    let split = m.split(SplitMode::Inductive).unwrap();
    for s in m.load_samples().unwrap() {
        let train = split.training_labels(&s.labels);
        for (g, t) in s.labels.labels.iter().zip(&train.labels) {
            if split.is_unseen(*g as usize) {
                assert_eq!(*t, 255);
            }
        }
    }
}

#[test]
fn smoke_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(3, 4, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..small_config(dir.path(), 10)
    };
    let out = train(&cfg, &manifest, &b).unwrap();
    assert_eq!(out.log.len(), 10);
    assert!(cfg.output_dir.join("checkpoint.json").is_file());
    assert_eq!(out.checkpoint_paths.len(), 3);
    let logged = read_loss_log(&cfg.output_dir.join("loss_log.csv")).unwrap();
    assert_eq!(logged, out.log);
    let header = std::fs::read_to_string(cfg.output_dir.join("loss_log.csv")).unwrap();
    assert!(header.starts_with("iteration,l_seg,l_sgd,l_sam,total,K\n"));
    for r in &logged {
        assert!(r.total.is_finite());
        let sum = r.l_seg + r.l_sgd + cfg.lambda_sam() * r.l_sam;
        assert!((r.total - sum).abs() < 1e-6);
    }
    assert_eq!(logged[0].k, 64);

    let mut transductive = small_config(&dir.path().join("t"), 5);
    transductive.mode = SplitMode::Transductive;
    let out = train(&transductive, &manifest, &b).unwrap();
    assert!(out.log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(3, 2, 32, 2, 1, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let mut trainer = Trainer::new(small_config(dir.path(), 5), &manifest, &b).unwrap();
    trainer.step().unwrap();
    let var = trainer.model.csh.params.var("proj.b2").unwrap();
    var.set(&(var.as_tensor() * f64::NAN).unwrap()).unwrap();
    match trainer.step() {
        Err(Error::NonFiniteLoss { iteration }) => assert_eq!(iteration, 1),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn evaluation_is_deterministic_and_checks_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(3, 3, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let out = train(&small_config(dir.path(), 3), &manifest, &b).unwrap();
    let r1 = evaluate(&out.checkpoint, &manifest, &b, 0.5).unwrap();
    let r2 = evaluate(&out.checkpoint, &manifest, &b, 0.5).unwrap();
    assert_eq!(r1, r2);
    assert!((0.0..=1.0).contains(&r1.h_iou));
    assert!(matches!(
        evaluate(&out.checkpoint, &manifest, &bundle(3), 0.5),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn untrained_model_metrics_are_defined() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(4, 3, 32, 4, 2, dir.path()).unwrap();
    let b = bundle(2);
    let model = Model::init(&small_config(dir.path(), 1), &b).unwrap();
    // Batch-norm running statistics only exist after training; use group norm.
    let mut cfg = small_config(dir.path(), 1);
    cfg.csh.norm = chimera_core::NormKind::GroupNorm;
    let gn = Model::init(&cfg, &b).unwrap();
    let split = manifest.split(SplitMode::Inductive).unwrap();
    let samples = manifest.load_samples().unwrap();
    let (report, preds) = evaluate_model(&gn, &b, &samples, &split, 0.5).unwrap();
    assert!((0.0..=1.0).contains(&report.h_iou));
    assert_eq!(preds[0].height, 32);
    assert!(matches!(
        evaluate_model(&model, &b, &samples, &split, 0.5),
        Err(Error::UninitializedStats)
    ));
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

#[test]
fn cka_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 20, 5);
    assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let q = random_matrix(&mut rng, 5, 5).qr().q();
    assert!((cka(&x, &(&x * q)).unwrap() - 1.0).abs() < 1e-10);
    assert!((cka(&x, &(&x * -3.5)).unwrap() - 1.0).abs() < 1e-12);
    let y = random_matrix(&mut rng, 20, 7);
    let v = cka(&x, &y).unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(cka(&x, &random_matrix(&mut rng, 19, 7)).is_err());
    assert_eq!(cka(&x, &DMatrix::from_element(20, 3, 2.0)).unwrap(), 0.0);
}

#[test]
fn cka_analysis_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(4, 3, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let samples = manifest.load_samples().unwrap();
    for seed in 0..3 {
        let mut cfg = small_config(dir.path(), 1);
        cfg.seed = seed;
        cfg.csh.norm = chimera_core::NormKind::LayerNormLearned;
        let model = Model::init(&cfg, &b).unwrap();
        let report = analyze_cka(&model, &b, &samples, 16, seed).unwrap();
        let n = report.layers.len();
        assert_eq!(n, 11);
        for i in 0..n {
            assert!((report.matrix[i][i] - 1.0).abs() < 1e-6);
            for j in 0..n {
                assert!((report.matrix[i][j] - report.matrix[j][i]).abs() < 1e-12);
                assert!((0.0..=1.0 + 1e-6).contains(&report.matrix[i][j]));
            }
        }
        let csv_path = dir.path().join("cka.csv");
        report.save_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), n + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == n + 1));
        report.save_png(&dir.path().join("cka.png"), 4).unwrap();
        assert!(analyze_cka(&model, &b, &samples[..1], 16, seed).is_err());
    }
}

fn gn_model(root: &Path, b: &ClipWeightBundle) -> Model {
    let mut cfg = small_config(root, 1);
    cfg.csh.norm = chimera_core::NormKind::GroupNorm;
    Model::init(&cfg, b).unwrap()
}

#[test]
fn heatmap_matches_scores_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(4, 1, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let model = gn_model(dir.path(), &b);
    let image = manifest.load_samples().unwrap().remove(0).image;
    let heat = export_heatmap(&model, &b, &image, "grass", HeatmapReference::ClassText).unwrap();
    assert_eq!((heat.height, heat.width), (8, 8));

    let trace = model.forward(&[&image], &b, ForwardMode::Eval).unwrap();
    let text = chimera_core::embed_class_names(&["grass"], &b).unwrap().get(0).unwrap();
    let scores = to_vec(&similarity_scores(&trace.head.f_c, &text).unwrap()).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |m, i| if v[i] > v[m] { i } else { m });
    assert_eq!(argmax(&heat.normalized), argmax(&scores));
    assert_eq!(heat.scores, scores);

    // Decode the rendered PNG through the colour table and compare with the CSV.
    let png = dir.path().join("heat.png");
    let csv_path = dir.path().join("heat.csv");
    heat.save_png(&png).unwrap();
    heat.save_csv(&csv_path).unwrap();
    let lut = viridis_lut();
    let img = image::open(&png).unwrap().to_rgb8();
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let (r, c): (u32, u32) = (rec[0].parse().unwrap(), rec[1].parse().unwrap());
        let v: f64 = rec[3].parse().unwrap();
        let px = img.get_pixel(c, r).0;
        let level = lut.iter().position(|e| *e == px).unwrap();
        assert!((level as f64 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-9);
    }

    let cls = export_heatmap(&model, &b, &image, "grass", HeatmapReference::ImageCls).unwrap();
    assert_eq!(cls.scores.len(), 64);
    assert!(matches!(
        export_heatmap(&model, &b, &image, "unicorn", HeatmapReference::ClassText),
        Err(Error::UnknownClass(_))
    ));
}

#[test]
fn constant_features_render_mid_grey() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(4, 1, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let model = gn_model(dir.path(), &b);
    for name in ["stage2.weight", "stage2.bias"] {
        let var = model.backbone.params.var(name).unwrap();
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let image = manifest.load_samples().unwrap().remove(0).image;
    let heat = export_heatmap(&model, &b, &image, "sky", HeatmapReference::ClassText).unwrap();
    assert!(heat.normalized.iter().all(|&v| v == 0.5));
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(3, 2, 32, 4, 2, &dir.path().join("data")).unwrap();
    let b = bundle(2);
    let out = train(&small_config(dir.path(), 3), &manifest, &b).unwrap();
    let path = dir.path().join("ck.json");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let m1 = out.checkpoint.restore(&b).unwrap();
    let m2 = loaded.restore(&b).unwrap();
    let img = manifest.load_samples().unwrap().remove(0).image;
    let f1 = m1.forward(&[&img], &b, ForwardMode::Eval).unwrap().head.f_c;
    let f2 = m2.forward(&[&img], &b, ForwardMode::Eval).unwrap().head.f_c;
    let bits = |t: &Tensor| to_vec(t).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&f1), bits(&f2));
}
