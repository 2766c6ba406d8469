use std::fs;
use std::path::Path;

use zsv_core::numerics::{randn, write_tensor_file, RngState};

use super::{config, entry};

fn zsv(args: &[&str]) -> u8 {
    entry(std::iter::once("zsv").chain(args.iter().copied()))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--shape", "16,16", "--steps", "10"];

#[test]
fn single_frame_sample_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = zsv(&[
            &[
                "sample",
                "--m",
                "1",
                "--seed",
                "7",
                "--out",
                dir.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat());
        assert_eq!(out, 0);
    }
    let ta = read_tree(&a);
    assert!(ta.iter().any(|(n, _)| n.ends_with("0001.pgm")));
    assert_eq!(ta, read_tree(&b));
}

#[test]
fn gen_noise_records_default_search_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("n");
    let out = zsv(&[
        "gen-noise",
        "--model",
        "dependency",
        "--m",
        "8",
        "--lambda",
        "0.01",
        "--shape",
        "32,32",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out, 0);
    let side = json(&dir.join("noise.json"));
    assert_eq!(side["prior"]["search"]["random_iters"], 10);
    assert_eq!(side["prior"]["search"]["linear_iters"], 15);
    assert_eq!(side["flags"]["lambda"], "0.01");
    assert_eq!(side["achieved_kl"].as_array().unwrap().len(), 7);
    assert_eq!(fs::read_dir(dir.join("noise")).unwrap().count(), 8);
}

#[test]
fn attn_check_reports_small_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("attn.json");
    let out = zsv(&[
        "attn-check",
        "--m",
        "16",
        "--mu",
        "0.98",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out, 0);
    let report = json(&path);
    let text = report.to_string();
    assert!(report["pass"].as_bool().unwrap(), "{text}");
}

#[test]
fn attn_check_reads_tensor_containers() {
    let tmp = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, name) in ["q", "k", "v"].iter().enumerate() {
        let t = randn(&mut RngState::with_stream(5, i as u64), &[6, 4, 8]).unwrap();
        let p = tmp.path().join(format!("{name}.zst"));
        write_tensor_file(&p, &t).unwrap();
        paths.push(p.to_str().unwrap().to_string());
    }
    let report = tmp.path().join("r.json");
    let args = [
        "attn-check",
        "--q",
        &paths[0],
        "--k",
        &paths[1],
        "--v",
        &paths[2],
        "--out",
        report.to_str().unwrap(),
    ];
    assert_eq!(zsv(&args), 0);
    assert!(json(&report)["pass"].as_bool().unwrap());
    assert_eq!(zsv(&["attn-check", "--q", &paths[0]]), 1);
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(zsv(&["sample", "--bogus", "--out", "x"]), 1);
    assert_eq!(zsv(&["sample", "--m", "0", "--out", "x"]), 1);
}

#[test]
fn malformed_config_names_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, "{\n  \"m\": 2,\n  \"lamda\": 0.1\n}\n").unwrap();
    let out = zsv(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out, 1);
    let err = config::load(&cfg).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("lamda"), "{err}");
}

#[test]
fn overflowing_sampler_exits_two_without_output() {
    // A near-vanishing terminal alpha_bar with a very wide Gaussian pushes
    // the clean-frame estimate past f32 range.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"m": 2, "frame_shape": [4, 4], "steps": 5,
            "schedule": {"timesteps": 1000, "beta_start": 0.0001, "beta_end": 0.9},
            "denoiser": {"kind": "mixture_oracle", "mixture": {"shape": [4, 4],
                "components": [{"weight": 1.0, "std": 1e120, "mean": [0.0]}]}}}"#,
    )
    .unwrap();
    let dir = tmp.path().join("o");
    let out = zsv(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out, 2);
    assert!(!dir.join("manifest.json").exists());
}

#[test]
fn manifest_echoes_command_line_flags_only() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let out = zsv(&[
        &[
            "--workers",
            "2",
            "sample",
            "--m",
            "2",
            "--seed",
            "3",
            "--mu",
            "0.5",
            "--out",
            dir.to_str().unwrap(),
        ],
        SMALL,
    ]
    .concat());
    assert_eq!(out, 0);
    let flags = &json(&dir.join("manifest.json"))["flags"];
    assert_eq!(flags["seed"], "3");
    assert_eq!(flags["mu"], "0.5");
    assert_eq!(flags["shape"], "16,16");
    assert!(flags.get("workers").is_none());
    assert!(flags.get("lambda").is_none());
}

#[test]
fn extend_needs_terminal_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let out = zsv(&[
        &["sample", "--m", "2", "--out", dir.to_str().unwrap()],
        SMALL,
    ]
    .concat());
    assert_eq!(out, 0);

    let ext = tmp.path().join("e");
    let ok = zsv(&[
        "extend",
        "--from",
        dir.to_str().unwrap(),
        "--frames",
        "2",
        "--out",
        ext.to_str().unwrap(),
    ]);
    assert_eq!(ok, 0);
    assert_eq!(json(&ext.join("manifest.json"))["frame_count"], 4);

    fs::remove_dir_all(dir.join("noise")).unwrap();
    let bad = zsv(&[
        "extend",
        "--from",
        dir.to_str().unwrap(),
        "--frames",
        "2",
        "--out",
        tmp.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(bad, 1);
}

#[test]
fn analyze_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    assert_eq!(
        zsv(&[
            &["sample", "--m", "3", "--out", dir.to_str().unwrap()],
            SMALL
        ]
        .concat()),
        0
    );
    let before = fs::read(dir.join("metrics.json")).unwrap();
    let again = tmp.path().join("again");
    let out = zsv(&[
        "analyze",
        "--dir",
        dir.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(out, 0);
    assert_eq!(fs::read(again.join("metrics.json")).unwrap(), before);
    assert_eq!(
        fs::read(again.join("traces.csv")).unwrap(),
        fs::read(dir.join("traces.csv")).unwrap()
    );
}

#[test]
fn schedule_dump_has_header_and_every_timestep() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("schedule.csv");
    assert_eq!(zsv(&["schedule-dump", "--out", path.to_str().unwrap()]), 0);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert_eq!(lines[0], "t,beta,alpha_bar");
    assert!(lines[1].starts_with("1,0.0001,"));
    assert!(lines[1000].starts_with("1000,0.02,"));
}
