use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltaconv::attention::{AttentionMap, MapMeta};
use deltaconv::cost::{attn_flops, BlockKind, LayerSpec};
use deltaconv::delta_conv::DeltaConvBlock;
use deltaconv::distill::init_students;
use deltaconv::{dtf, DType, Tensor};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deltaconv"));
    c.env_remove("DELTACONV_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Header-first rows of a CSV, after checking the manifest digest comment.
fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let comment = lines.next().unwrap();
    let manifest = fs::read(path.parent().unwrap().join("manifest.json")).unwrap();
    assert_eq!(comment, format!("# manifest-sha256: {}", sha_hex(&manifest)));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0].iter().position(|h| h == name).unwrap();
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

fn reference_manifest() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/reference_distill.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_manifest(dir: &Path, steps: usize) -> PathBuf {
    let mut m = reference_manifest();
    m["config"]["steps"] = steps.into();
    m["config"]["eval_every"] = 0.into();
    m["config"]["eval_samples"] = 2.into();
    m["config"]["batch_size"] = 2.into();
    m["data"]["count"] = 4.into();
    m["data"]["h"] = 8.into();
    m["data"]["w"] = 8.into();
    let path = dir.join(format!("manifest_{steps}.json"));
    fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cost_single_layer_row_equals_formula() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("one.json");
    fs::write(
        &config,
        r#"{"name": "one", "downscale": 8, "reference": [512, 512],
            "replacement": {"n_stages": 2, "stage_kernels": [3, 1]},
            "layers": [{"h": 64, "w": 64, "c": 320, "kind": "self-attention"}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(run(&["cost", s(&config), "--resolutions", "512,1024", "--out", s(&out)]));
    let rows = read_csv(&out.join("cost_layers.csv"));
    let flops = column(&rows, "attention_flops");
    for (side, value) in [(64, &flops[0]), (128, &flops[1])] {
        let spec = LayerSpec::new(side, side, 320, BlockKind::SelfAttention).unwrap();
        assert_eq!(value.parse::<u128>().unwrap(), attn_flops(&spec).unwrap());
    }
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "cost");
    assert_eq!(manifest["inputs"][0]["sha256"], sha_hex(&fs::read(&config).unwrap()));
}

#[test]
fn cost_sd15_ratio_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(run(&["cost", "sd15-like", "--out", s(&out)]));
    let rows = read_csv(&out.join("cost.csv"));
    let ratio: f64 = column(&rows, "ratio").last().unwrap().parse().unwrap();
    assert!((ratio / 6929.0 - 1.0).abs() < 0.10);
    assert_eq!(code(&run(&["cost", "sd15-like", "--resolutions", "", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["cost", "sd15-like", "--resolutions", "500", "--out", s(&out)])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["cost", s(&bad), "--out", s(&out)])), 2);
}

#[test]
fn output_directory_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let o = bin().args(["cost", "sd15-like", "--resolutions", "512"]).env("DELTACONV_OUT", &out).output().unwrap();
    ok(o);
    assert!(out.join("cost.csv").exists() && out.join("manifest.json").exists());
}

fn save_maps(dir: &Path, maps: &[AttentionMap]) {
    fs::create_dir_all(dir).unwrap();
    for (i, m) in maps.iter().enumerate() {
        m.save(dir, &format!("map{i:02}")).unwrap();
    }
}

fn report(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn analyze_delta_and_uniform_maps() {
    let dir = tempfile::tempdir().unwrap();
    let n = 64;
    let delta: Vec<AttentionMap> = (0..3)
        .map(|layer| {
            let vals = Tensor::from_fn(vec![n, 8, 8], |i| if i / n == i % n { 1.0 } else { 0.0 });
            AttentionMap::new(MapMeta { layer, timestep: Some(10), model_name: "delta".into() }, vals).unwrap()
        })
        .collect();
    save_maps(&dir.path().join("delta"), &delta);
    let out = dir.path().join("delta-out");
    ok(run(&["analyze", s(&dir.path().join("delta")), "--out", s(&out)]));
    let r = report(&out);
    for l in r["layers"].as_array().unwrap() {
        assert_eq!(l["raw"]["k_hat"], 1);
    }
    assert_eq!(r["layers"].as_array().unwrap().len(), 3);

    let uniform = [AttentionMap::new(
        MapMeta { layer: 0, timestep: None, model_name: "uniform".into() },
        Tensor::full(vec![n, 8, 8], 1.0 / n as f64),
    )
    .unwrap()];
    save_maps(&dir.path().join("uniform"), &uniform);
    let out = dir.path().join("uniform-out");
    ok(run(&["analyze", s(&dir.path().join("uniform")), "--out", s(&out)]));
    let rows = read_csv(&out.join("profiles.csv"));
    let first_filtered = rows.iter().find(|r| r[0] == "per-layer/filtered").unwrap();
    assert!(first_filtered[4].parse::<f64>().unwrap().abs() < 1e-9);
}

#[test]
fn analyze_gaussian_maps_match_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let side = 12;
    let n = side * side;
    let stds = [0.6, 1.2, 2.5];
    let maps: Vec<AttentionMap> = stds
        .iter()
        .enumerate()
        .map(|(layer, &std)| {
            let mut data = vec![0.0; n * n];
            for q in 0..n {
                let row = &mut data[q * n..(q + 1) * n];
                for (p, v) in row.iter_mut().enumerate() {
                    let d2 = ((p / side) as f64 - (q / side) as f64).powi(2) + ((p % side) as f64 - (q % side) as f64).powi(2);
                    *v = (-d2 / (2.0 * std * std)).exp();
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            AttentionMap::new(MapMeta { layer, timestep: None, model_name: "gauss".into() }, Tensor::new(vec![n, side, side], data).unwrap()).unwrap()
        })
        .collect();
    save_maps(&dir.path().join("maps"), &maps);
    let out = dir.path().join("out");
    ok(run(&["analyze", s(&dir.path().join("maps")), "--threshold", "0.8", "--out", s(&out)]));
    let r = report(&out);
    for (l, map) in r["layers"].as_array().unwrap().iter().zip(&maps) {
        let mut expected = None;
        for k in (1..=2 * side - 1).step_by(2) {
            let r = (k / 2) as isize;
            let mean = (0..n)
                .map(|q| {
                    let (qy, qx) = ((q / side) as isize, (q % side) as isize);
                    (0..n)
                        .filter(|p| ((p / side) as isize - qy).abs() <= r && ((p % side) as isize - qx).abs() <= r)
                        .map(|p| map.values.data()[q * n + p])
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            if mean + 1e-12 >= 0.8 {
                expected = Some(k);
                break;
            }
        }
        assert_eq!(l["raw"]["k_hat"].as_u64().map(|v| v as usize), expected);
    }
}

#[test]
fn analyze_reports_malformed_files_and_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    fs::create_dir_all(&maps).unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["analyze", s(&maps), "--out", s(&out)])), 2);
    fs::write(maps.join("broken.dtf"), b"DTF1\x03\x00").unwrap();
    fs::write(maps.join("broken.json"), r#"{"layer": 0, "timestep": null, "model_name": "x"}"#).unwrap();
    let o = run(&["analyze", s(&maps), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("broken.dtf") && err.contains("byte 4"), "{err}");
}

#[test]
fn dump_teacher_feeds_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    ok(run(&["dump-teacher", "--layers", "2", "--size", "8", "--timesteps", "10,900", "--out", s(&dump)]));
    let manifest: Value = serde_json::from_slice(&fs::read(dump.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 8);
    let out = dir.path().join("out");
    ok(run(&["analyze", s(&dump.join("maps")), "--out", s(&out)]));
    let r = report(&out);
    let layers = r["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0]["timesteps"], serde_json::json!([10, 900]));
    for l in layers {
        assert!(l["raw"]["k_hat"].as_u64().unwrap() <= 9);
    }
    let again = dir.path().join("again");
    ok(run(&["dump-teacher", "--layers", "2", "--size", "8", "--timesteps", "10,900", "--out", s(&again)]));
    assert_eq!(tree_bytes(&dump.join("maps")), tree_bytes(&again.join("maps")));
}

#[test]
fn distill_zero_steps_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(dir.path(), 0);
    let out = dir.path().join("out");
    ok(run(&["distill", s(&manifest), "--out", s(&out)]));
    let spec = reference_manifest();
    let block = serde_json::from_value(spec["student"]["block"].clone()).unwrap();
    let init = init_students(&block, 2, spec["student"]["init_seed"].as_u64().unwrap()).unwrap();
    for (l, expected) in init.iter().enumerate() {
        let saved = DeltaConvBlock::<f64>::load(out.join(format!("checkpoints/student_{l:02}"))).unwrap();
        assert_eq!(&saved, expected);
    }
    assert_eq!(read_csv(&out.join("trace.csv")), vec![vec!["step", "L_f", "L_z", "total"]]);
}

#[test]
fn distill_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(dir.path(), 4);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(run(&["distill", s(&manifest), "--out", s(&a)]));
    ok(run(&["distill", s(&manifest), "--out", s(&b)]));
    ok(run(&["distill", s(&a.join("manifest.json")), "--out", s(&c)]));
    let (ta, tb, tc) = (tree_bytes(&a.join("checkpoints")), tree_bytes(&b.join("checkpoints")), tree_bytes(&c.join("checkpoints")));
    assert_eq!(ta, tb);
    assert_eq!(ta, tc);
    let trace = read_csv(&a.join("trace.csv"));
    assert_eq!(trace, read_csv(&b.join("trace.csv")));
    assert_eq!(trace, read_csv(&c.join("trace.csv")));
    assert_eq!(trace.len(), 5);
    let summary: Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["teacher_frozen"], true);
    assert_eq!(summary["teacher_hash_before"], summary["teacher_hash_after"]);
}

#[test]
fn distill_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = reference_manifest();
    m["student"]["block"]["channels"] = 4.into();
    let mismatched = dir.path().join("mismatched.json");
    fs::write(&mismatched, m.to_string()).unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["distill", s(&mismatched), "--out", s(&out)])), 2);
    assert!(!out.join("trace.csv").exists());

    let latents = dir.path().join("latents.dtf");
    let mut t = Tensor::<f64>::zeros(vec![2, 8, 8, 8]);
    t.data_mut()[5] = f64::NAN;
    dtf::write(&latents, &t, DType::F64).unwrap();
    let mut m = serde_json::from_str::<Value>(&fs::read_to_string(small_manifest(dir.path(), 2)).unwrap()).unwrap();
    m["data"] = serde_json::json!({"kind": "dtf", "paths": [latents]});
    let nan = dir.path().join("nan.json");
    fs::write(&nan, m.to_string()).unwrap();
    assert_eq!(code(&run(&["distill", s(&nan), "--out", s(&out)])), 4);

    let cost_manifest = dir.path().join("cost-run");
    ok(run(&["cost", "sd15-like", "--resolutions", "512", "--out", s(&cost_manifest)]));
    assert_eq!(code(&run(&["distill", s(&cost_manifest.join("manifest.json")), "--out", s(&out)])), 2);
}

#[test]
fn shipped_manifests_parse_and_preflight() {
    for name in ["reference_distill.json", "self_distill.json"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests").join(name);
        let dir = tempfile::tempdir().unwrap();
        let mut m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m["config"]["steps"] = 1.into();
        let short = dir.path().join(name);
        fs::write(&short, m.to_string()).unwrap();
        ok(run(&["distill", s(&short), "--out", s(&dir.path().join("out"))]));
    }
}

#[test]
fn bench_repeats_change_only_spread_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(run(&["bench", "--block", "neighborhood", "--k", "3", "--sizes", "8,16", "--repeats", "1", "--out", s(&a)]));
    ok(run(&["bench", "--block", "neighborhood", "--k", "3", "--sizes", "8,16", "--repeats", "9", "--out", s(&b)]));
    let (ra, rb) = (read_csv(&a.join("bench.csv")), read_csv(&b.join("bench.csv")));
    for col in ["block", "size", "pixels", "flops"] {
        assert_eq!(column(&ra, col), column(&rb, col));
    }
    assert_eq!(column(&ra, "repeats"), vec!["1", "1"]);
    assert_eq!(column(&rb, "repeats"), vec!["9", "9"]);
    assert_eq!(code(&run(&["bench", "--block", "attention", "--sizes", "", "--out", s(&a)])), 2);
    assert_eq!(code(&run(&["bench", "--block", "delta-conv", "--sizes", "6", "--out", s(&a)])), 2);
}
