mod common;

use std::fs;

use common::*;
use inrmotion::metrics::EvalReport;
use inrmotion::motion::{read_keyframes, read_motion, FeatureStats};
use inrmotion_cli::config::RunConfig;

#[test]
fn gen_data_is_seeded_and_stats_match_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&cfg, &["gen-data", "--seed", "7", "--out", s(&a)]);
    ok(&cfg, &["gen-data", "--seed", "7", "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let c = dir.path().join("c");
    ok(&cfg, &["gen-data", "--seed", "8", "--out", s(&c)]);
    assert_ne!(
        snapshot(&a).get(std::path::Path::new("motions/000000.json")),
        snapshot(&c).get(std::path::Path::new("motions/000000.json"))
    );

    let (motions, _) = inrmotion_cli::io::read_motion_dir(&a).unwrap();
    assert_eq!(motions.len(), 4);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("stats.json")).unwrap()).unwrap();
    let features: FeatureStats = serde_json::from_value(stats["features"].clone()).unwrap();
    assert_eq!(features, FeatureStats::compute(&motions).unwrap());
    assert_eq!(stats["seed"], 7);

    let zero = run(&cfg, &["gen-data", "--count", "0", "--out", s(&dir.path().join("z"))]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn config_is_echoed_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("d");
    let st = bin()
        .env("IMGMOTION_DATA_MOTION_FRAMES", "64")
        .args(["--config", s(&cfg), "gen-data", "--out", s(&out)])
        .status()
        .unwrap();
    assert!(st.success());
    let echoed: RunConfig = toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let mut expected =
        RunConfig::load_with_env(Some(&cfg), vec![("IMGMOTION_DATA_MOTION_FRAMES".into(), "64".into())]).unwrap();
    expected.apply_seeds();
    assert_eq!(echoed, expected);
    assert_eq!(echoed.data.motion.frames, 64);
    let (m, _) = read_motion(&out.join("motions/000000.json")).unwrap();
    assert_eq!(m.len(), 64);

    let bad = write_config(&dir.path().join("bad"), "[vae]\nlearning_rate = 1\n");
    assert_eq!(
        run(&bad, &["gen-data", "--out", s(&dir.path().join("x"))])
            .status
            .code(),
        Some(2)
    );
    let st = bin()
        .env("IMGMOTION_VAE_TRAIN_NOPE", "1")
        .args(["gen-data", "--out", s(&dir.path().join("y"))])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let missing = dir.path().join("nowhere.toml");
    assert_eq!(
        run(&missing, &["gen-data", "--out", s(&dir.path().join("w"))])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn training_resumes_bit_identically_and_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    ok(&cfg, &["gen-data", "--out", s(&data)]);

    let full = dir.path().join("full");
    let part = dir.path().join("part");
    ok(&cfg, &["train-vae", "--data", s(&data), "--out", s(&full)]);
    ok(
        &cfg,
        &["train-vae", "--data", s(&data), "--out", s(&part), "--stop-after", "5"],
    );
    assert!(!part.join("vae.json").exists());
    ok(&cfg, &["train-vae", "--data", s(&data), "--out", s(&part), "--resume"]);
    assert_eq!(snapshot(&full), snapshot(&part));

    let vae = full.join("vae.json");
    let lfull = dir.path().join("lfull");
    let lpart = dir.path().join("lpart");
    ok(
        &cfg,
        &["train-ldm", "--data", s(&data), "--vae", s(&vae), "--out", s(&lfull)],
    );
    ok(
        &cfg,
        &[
            "train-ldm",
            "--data",
            s(&data),
            "--vae",
            s(&vae),
            "--out",
            s(&lpart),
            "--stop-after",
            "7",
        ],
    );
    ok(
        &cfg,
        &[
            "train-ldm",
            "--data",
            s(&data),
            "--vae",
            s(&vae),
            "--out",
            s(&lpart),
            "--resume",
        ],
    );
    assert_eq!(snapshot(&lfull), snapshot(&lpart));
    let csv = fs::read_to_string(lfull.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);

    let missing = run(
        &cfg,
        &[
            "train-ldm",
            "--data",
            s(&data),
            "--vae",
            s(&dir.path().join("no.json")),
            "--out",
            s(&lpart),
        ],
    );
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("VAE checkpoint"));
    let no_resume = run(
        &cfg,
        &[
            "train-vae",
            "--data",
            s(&data),
            "--out",
            s(&dir.path().join("fresh")),
            "--resume",
        ],
    );
    assert_eq!(no_resume.status.code(), Some(3));
    let no_data = run(
        &cfg,
        &["train-vae", "--data", s(&dir.path().join("nodata")), "--out", s(&part)],
    );
    assert_eq!(no_data.status.code(), Some(3));

    let nan = bin()
        .env("IMGMOTION_VAE_TRAIN_LR", "1e300")
        .args([
            "--config",
            s(&cfg),
            "train-vae",
            "--data",
            s(&data),
            "--out",
            s(&dir.path().join("nan")),
        ])
        .output()
        .unwrap();
    assert_eq!(nan.status.code(), Some(4));
    assert!(dir.path().join("nan/checkpoint.json").exists());
}

#[test]
fn sampling_evaluation_and_ablation_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny_pipeline(dir.path());
    let sample = |out: &str, kf: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec![
            "sample",
            "--vae",
            s(&p.vae),
            "--ldm",
            s(&p.ldm),
            "--keyframes",
            kf,
            "--ref",
            s(&p.data),
        ];
        args.extend_from_slice(&["--count", "3", "--seed", "5", "--out", s(&out)]);
        args.extend_from_slice(extra);
        ok(&p.cfg, &args);
        out
    };
    let a = sample("a", "random:5", &["--guidance", "img"]);
    let b = sample("b", "random:5", &["--guidance", "img", "--jobs", "3"]);
    assert_eq!(snapshot(&a), snapshot(&b));
    for i in 0..3 {
        let y = read_keyframes(&a.join(format!("keyframes/00000{i}.json")), 10).unwrap();
        assert_eq!(y.count(), 5);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(a.join(format!("meta/00000{i}.json"))).unwrap()).unwrap();
        assert_eq!(meta["seed"], 5 + i);
        assert_eq!(meta["guidance"], "img");
        assert_eq!(meta["keyframes"].as_array().unwrap().len(), 5);
        assert!(meta["trace"]["guided_steps"].as_u64().unwrap() > 0);
    }

    let se = sample("se", "startend:8", &[]);
    let y = read_keyframes(&se.join("keyframes/000000.json"), 10).unwrap();
    assert_eq!(y.indices(), vec![0, 1, 2, 3, 124, 125, 126, 127]);
    let se2 = sample("se2", "startend:2", &["--guidance", "dps"]);
    assert_eq!(
        read_keyframes(&se2.join("keyframes/000001.json"), 10)
            .unwrap()
            .indices(),
        vec![0, 127]
    );
    let file = se.join("keyframes/000000.json");
    let from_file = sample("ff", s(&file), &["--guidance", "geo-only"]);
    assert_eq!(read_keyframes(&from_file.join("keyframes/000002.json"), 10).unwrap(), y);

    let bad_k = run(
        &p.cfg,
        &[
            "sample",
            "--vae",
            s(&p.vae),
            "--ldm",
            s(&p.ldm),
            "--keyframes",
            "random:129",
            "--ref",
            s(&p.data),
            "--out",
            s(&dir.path().join("k")),
        ],
    );
    assert_eq!(bad_k.status.code(), Some(2));

    // Generated set equal to the reference set: zero keyframe error, FID ~ 0.
    let same = dir.path().join("same");
    fs::create_dir_all(same.join("keyframes")).unwrap();
    let (motions, _) = inrmotion_cli::io::read_motion_dir(&p.data).unwrap();
    for (i, m) in motions.iter().enumerate() {
        let mask: Vec<bool> = (0..m.len()).map(|f| f % 40 == 3).collect();
        inrmotion::motion::write_keyframes(
            &same.join(format!("keyframes/{i:06}.json")),
            &m.keyframes(&mask).unwrap(),
        )
        .unwrap();
    }
    inrmotion_cli::io::write_motions(&same, &motions, &inrmotion::motion::Skeleton::humanoid()).unwrap();
    let ev = dir.path().join("ev");
    ok(
        &p.cfg,
        &[
            "evaluate",
            "--gen-dir",
            s(&same),
            "--ref-dir",
            s(&p.data),
            "--vae",
            s(&p.vae),
            "--repeats",
            "10",
            "--out",
            s(&ev),
        ],
    );
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.repeats.len(), 10);
    assert_eq!(report.seeds.len(), 10);
    assert!(report.summary["keyframe_error"].mean < 1e-12);
    assert!(report.summary["latent_fid"].mean.abs() < 1e-6);
    assert_eq!(fs::read_to_string(ev.join("repeats.csv")).unwrap().lines().count(), 11);
    assert!(report.reference.contains_key("peak_jerk"));

    let ev2 = dir.path().join("ev2");
    ok(
        &p.cfg,
        &[
            "evaluate",
            "--gen-dir",
            s(&a),
            "--ref-dir",
            s(&p.data),
            "--vae",
            s(&p.vae),
            "--out",
            s(&ev2),
            "--jobs",
            "2",
        ],
    );
    let ev3 = dir.path().join("ev3");
    ok(
        &p.cfg,
        &[
            "evaluate",
            "--gen-dir",
            s(&a),
            "--ref-dir",
            s(&p.data),
            "--vae",
            s(&p.vae),
            "--out",
            s(&ev3),
        ],
    );
    assert_eq!(
        fs::read(ev2.join("report.json")).unwrap(),
        fs::read(ev3.join("report.json")).unwrap()
    );
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("motions")).unwrap();
    assert_eq!(
        run(
            &p.cfg,
            &[
                "evaluate",
                "--gen-dir",
                s(&empty),
                "--ref-dir",
                s(&p.data),
                "--out",
                s(&ev3)
            ]
        )
        .status
        .code(),
        Some(3)
    );

    let st1 = dir.path().join("st1");
    let common = ["--vae", s(&p.vae), "--ldm", s(&p.ldm), "--ref", s(&p.data)];
    let mut args = vec![
        "ablate-guidance",
        "--mode",
        "stage1",
        "--count",
        "2",
        "--opt-steps",
        "4",
        "--out",
        s(&st1),
    ];
    args.extend_from_slice(&common);
    ok(&p.cfg, &args);
    let csv = fs::read_to_string(st1.join("stage1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,variant,L_trans,L_pos,L_ori,L_rot");
    assert_eq!(csv.lines().count(), 1 + 2 * 5);

    let sw = dir.path().join("sw");
    let mut args = vec![
        "ablate-guidance",
        "--mode",
        "sweep",
        "--param",
        "cfg",
        "--count",
        "2",
        "--out",
        s(&sw),
    ];
    args.extend_from_slice(&common);
    ok(&p.cfg, &args);
    let rows = fs::read_to_string(sw.join("sweep_cfg.csv")).unwrap();
    let values: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["1.0", "1.2", "1.5", "2.0"]);
    let mut args = vec![
        "ablate-guidance",
        "--mode",
        "sweep",
        "--param",
        "steps",
        "--values",
        "2000",
        "--out",
        s(&sw),
    ];
    args.extend_from_slice(&common);
    assert_eq!(run(&p.cfg, &args).status.code(), Some(2));
}
