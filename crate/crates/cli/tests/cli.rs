use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use moqae_core::checkpoint::{read_cache_dump, read_model, write_router};
use moqae_core::router::Origin;
use moqae_core::model::attn_probe;
use moqae_core::router::{ExpertSet, RouterParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn moqae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moqae"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = moqae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&stdout(args)).unwrap()
}

fn code(args: &[&str]) -> i32 {
    moqae(args).status.code().expect("exit code")
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// One trained run shared by the tests: lambda 0 with the proportional penalty.
struct Trained {
    dir: TempDir,
    report: Value,
}

impl Trained {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().display().to_string();
        let report = json(&["train", "--lambda", "0", "--mem-penalty", "proportional", "--out-dir", &out]);
        Trained { dir, report }
    })
}

#[test]
fn train_writes_checkpoint_log_and_report() {
    let t = trained();
    for f in ["model.bin", "router.bin", "train_log.csv", "train_report.json"] {
        assert!(t.dir.path().join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(t.path("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_model,l_mem,l_total,nll,avg_bits,lr\n"));
    let steps = t.report["metrics"]["steps"].as_f64().unwrap() as usize;
    assert!(steps >= 1);
    assert_eq!(log.lines().count(), steps + 1);
    let m = &t.report["metrics"];
    assert!(m["final_avg_bits"].as_f64().unwrap() < m["initial_avg_bits"].as_f64().unwrap());
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(t.path("train_report.json")).unwrap()).unwrap();
    assert_eq!(saved, t.report);
}

#[test]
fn report_echoes_effective_config_with_sorted_keys() {
    let t = trained();
    let c = &t.report["config"];
    assert_eq!(c["chunk_size"], 32);
    assert_eq!(c["lambda"], 0.0);
    assert_eq!(c["rs_group_size"], 3);
    assert_eq!(c["experts"], serde_json::json!([16, 4, 2]));
    assert_eq!(c["rf"], true);
    assert_eq!(c["mem_penalty"], "proportional");
    assert_eq!(c["calib_frac"], 0.05);
    assert_eq!(c["shape"], "toy");
    assert_eq!(c["corpus"], "<bundled toy corpus>");
    assert_eq!(t.report["version"], "v0.1.0");
    assert_eq!(t.report["timestamp"], 1700000000);
    assert_eq!(t.report["command"], "train");

    let text = std::fs::read_to_string(t.path("train_report.json")).unwrap();
    let top: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("  \""))
        .map(|l| l.trim_start().split('"').nth(1).unwrap())
        .collect();
    assert_eq!(top, ["command", "config", "metrics", "timestamp", "version"]);
    let config_block: Vec<&str> = text
        .split("\"config\": {")
        .nth(1)
        .unwrap()
        .split("\n  }")
        .next()
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("    \""))
        .map(|l| l.trim_start().split('"').nth(1).unwrap())
        .collect();
    let mut sorted = config_block.clone();
    sorted.sort_unstable();
    assert_eq!(config_block, sorted);
}

#[test]
fn eval_with_trained_router() {
    let t = trained();
    let r = json(&["eval", "--model", &t.path("model.bin"), "--checkpoint", &t.path("router.bin")]);
    let m = &r["metrics"];
    let bits = m["avg_bits"].as_f64().unwrap();
    assert!(bits < 16.0 && bits > 2.0);
    assert!(m["kv_cache_bytes"].as_f64().unwrap() < m["kv_cache_bytes_fp16"].as_f64().unwrap());
    assert!(m["router_invocations"].as_f64().unwrap() > 0.0);
    assert!(m["ppl"].as_f64().unwrap().is_finite());
    assert_eq!(r["config"]["checkpoint"], t.path("router.bin"));
}

#[test]
fn eval_dumps_the_first_window_cache() {
    let t = trained();
    let dump = t.dir.path().join("cache.kvd");
    let args = ["eval", "--model", &t.path("model.bin"), "--checkpoint", &t.path("router.bin"), "--window", "100"];
    let mut with_dump = args.to_vec();
    with_dump.extend(["--dump-cache", dump.to_str().unwrap()]);
    json(&with_dump);
    let d = read_cache_dump(std::fs::File::open(&dump).unwrap()).unwrap();
    assert_eq!((d.seq_len, d.chunk_size, d.group_size), (100, 32, 32));
    assert_eq!(d.layers.len(), 4);
    for (i, layer) in d.layers.iter().enumerate() {
        let origins: Vec<Origin> = layer.chunks.iter().map(|c| c.entry.origin).collect();
        assert_eq!(origins[0], Origin::FrozenFp16);
        let routed = if i % 3 == 0 { Origin::Routed } else { Origin::Shared };
        assert_eq!(origins[1..], [routed, routed]);
        assert_eq!((layer.tail_start, layer.tail_k.rows()), (96, 4));
        for c in &layer.chunks {
            assert_eq!(c.k.spec().bits, c.entry.bits);
        }
    }
}

#[test]
fn eval_forced_fp16_is_exactly_sixteen_bits() {
    let t = trained();
    let r = json(&["eval", "--model", &t.path("model.bin"), "--force-bits", "16"]);
    let m = &r["metrics"];
    assert_eq!(m["avg_bits"], 16.0);
    assert_eq!(m["kv_cache_bytes"], m["kv_cache_bytes_fp16"]);
    assert_eq!(m["router_invocations"], 0.0);
    assert!((m["ppl_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn exit_codes() {
    let t = trained();
    let (model, router) = (t.path("model.bin"), t.path("router.bin"));
    assert_eq!(code(&["train", "--corpus", "/definitely/not/here.txt"]), 2);
    assert_eq!(code(&["train", "--lambda", "1.5"]), 2);
    assert_eq!(code(&["train", "--experts", "4,16"]), 2);
    assert_eq!(code(&["train", "--mem-penalty", "cubic"]), 2);
    assert_eq!(code(&["train", "--chunk-size", "0"]), 2);
    assert_eq!(code(&["train", "--shape", "llama2-13b"]), 2);
    assert_eq!(code(&["train", "--no-such-flag"]), 2);
    assert_eq!(code(&["eval", "--model", &model]), 2);
    assert_eq!(code(&["eval", "--model", &model, "--force-bits", "3"]), 2);

    // Checkpoint and shape problems.
    assert_eq!(code(&["eval", "--model", &model, "--checkpoint", "/no/router.bin"]), 3);
    assert_eq!(code(&["eval", "--model", &router, "--force-bits", "4"]), 3);
    assert_eq!(code(&["eval", "--model", &model, "--checkpoint", &model]), 3);
    assert_eq!(code(&["eval", "--model", &model, "--checkpoint", &router, "--experts", "8,2"]), 3);
    let narrow = t.dir.path().join("narrow_router.bin");
    let params = RouterParams::init(8, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let mut buf = Vec::new();
    write_router(&mut buf, &params, &ExpertSet::default()).unwrap();
    std::fs::write(&narrow, buf).unwrap();
    assert_eq!(code(&["eval", "--model", &model, "--checkpoint", narrow.to_str().unwrap()]), 3);
    let out = moqae(&["eval", "--model", &model, "--checkpoint", narrow.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimensional"));
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn memory_report_matches_golden_files() {
    assert_eq!(stdout(&["memory-report", "--lengths", "0,32,1000,131072"]), golden("memory_llama2_13b.csv"));
    assert_eq!(
        stdout(&["memory-report", "--shape", "toy", "--lengths", "0,100,512", "--with-metadata", "--quant-group-size", "64"]),
        golden("memory_toy_metadata.csv")
    );
}

#[test]
fn memory_report_properties() {
    let rows = csv_rows(&stdout(&["memory-report", "--lengths", "131072"]));
    let fp16: u64 = rows[0][2].parse().unwrap();
    assert_eq!(fp16, 107_374_182_400);
    assert!((fp16 as f64 / 100e9 - 1.0).abs() < 0.1);

    let text = stdout(&["memory-report", "--lengths", "0,320,640,6400", "--no-rf", "--force-bits", "4"]);
    let rows = csv_rows(&text);
    assert_eq!(rows[0][2], "0");
    assert_eq!(rows[0][3], "0");
    for r in &rows {
        let (f, s): (u64, u64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert_eq!(s * 4, f);
    }
    let per_token: Vec<u64> = rows[1..].iter().map(|r| r[2].parse::<u64>().unwrap() / r[0].parse::<u64>().unwrap()).collect();
    assert!(per_token.windows(2).all(|w| w[0] == w[1]));
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
}

#[test]
fn latency_counts_router_invocations() {
    let parse = |text: &str| -> Vec<(String, usize, usize)> {
        csv_rows(text).into_iter().map(|r| (r[1].clone(), r[4].parse().unwrap(), r[5].parse().unwrap())).collect()
    };
    let args = ["latency", "--lengths", "96", "--decode-steps", "8", "--repeats", "1"];
    let text = stdout(&args);
    assert!(text.starts_with(
        "length,variant,chunk_size,rf,rs_group_size,router_invocations,prefill_ms,decode_ms_per_token\n"
    ));
    let rows = parse(&text);
    let inv = |name: &str| rows.iter().find(|r| r.0 == name).unwrap().2;
    // Four blocks: groups of three leave two leaders, no sharing leaves four.
    assert_eq!(inv("full") * 2, inv("no_rs"));
    assert_eq!(inv("no_rf") * 2, inv("no_rf_no_rs"));
    assert!(inv("full") < inv("no_rf"));
    assert_eq!(parse(&stdout(&args)), rows);

    let mut four = args.to_vec();
    four.extend(["--group-size", "4"]);
    let rows4 = parse(&stdout(&four));
    let no_rs = rows4.iter().find(|r| r.0 == "no_rs").unwrap().2;
    let full = rows4.iter().find(|r| r.0 == "full").unwrap().2;
    assert_eq!(full * 4, no_rs);

    let count = |chunk: &str| {
        let mut a = args.to_vec();
        a.extend(["--chunk-size", chunk]);
        parse(&stdout(&a)).iter().find(|r| r.0 == "full").unwrap().2
    };
    assert!(count("96") < count("8"));
}

#[test]
fn attn_probe_outputs() {
    let text = stdout(&["attn-probe", "--synthetic-uniform", "--k", "8", "--length", "64"]);
    assert!(text.starts_with("layer,initial_mass,uniform_mass\n"));
    for r in csv_rows(&text) {
        assert_eq!(r[1].parse::<f64>().unwrap(), 0.125);
        assert_eq!(r[2], "0.125");
    }

    let t = trained();
    let text = stdout(&["attn-probe", "--model", &t.path("model.bin"), "--k", "4", "--length", "96"]);
    let model = read_model(std::fs::File::open(t.path("model.bin")).unwrap()).unwrap();
    let corpus = include_bytes!("../data/toy_corpus.txt");
    let eval = &corpus[corpus.len() - 4800..];
    let expected = attn_probe(&model, &eval[..96], 4).unwrap();
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), expected.len());
    for (r, e) in rows.iter().zip(&expected) {
        assert_eq!(r[1], e.to_string());
    }
    // More mass on the first tokens than a uniform spread would give them,
    // in most of the upper layers.
    let upper = &rows[rows.len() / 2..];
    let above = upper.iter().filter(|r| r[1].parse::<f64>().unwrap() > r[2].parse::<f64>().unwrap()).count();
    assert!(above * 2 > upper.len());
    assert_eq!(code(&["attn-probe", "--k", "128", "--length", "128", "--synthetic-uniform"]), 2);
}

#[test]
fn ablate_rows() {
    let t = trained();
    let r = json(&["ablate", "--model", &t.path("model.bin"), "--checkpoint", &t.path("router.bin")]);
    let m = &r["metrics"];
    let get = |k: &str| m[k].as_f64().unwrap_or_else(|| panic!("{k} missing"));
    let variants = ["full", "no_rf", "no_rs", "gs2", "gs3", "gs4"];
    let max = variants.iter().map(|v| get(&format!("{v}.router_invocations"))).fold(0.0, f64::max);
    assert_eq!(get("no_rs.router_invocations"), max);
    assert!(get("gs4.router_invocations") < get("gs2.router_invocations"));
    let base = get("full_precision.ppl");
    for v in variants {
        let p = get(&format!("{v}.ppl"));
        assert!(p.is_finite() && p < 2.0 * base, "{v}: {p} vs {base}");
    }
    assert_eq!(get("full.ppl"), get("gs3.ppl"));
}

#[test]
fn lambda_sweep_schema() {
    let t = trained();
    let text = stdout(&["lambda-sweep", "--model", &t.path("model.bin"), "--lambdas", "0.1,0.9", "--epochs", "1"]);
    assert!(text.starts_with("lambda,mem_penalty,initial_avg_bits,final_avg_bits,eval_avg_bits,ppl\n"));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "0.1");
    assert_eq!(rows[0][1], "as_written");
    assert_eq!(rows[0][2], rows[1][2]);
}

#[test]
fn out_flag_writes_the_printed_text() {
    let dir = TempDir::new().unwrap();
    let file: PathBuf = dir.path().join("mem.csv");
    let printed = stdout(&["memory-report", "--lengths", "64", "--out", file.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(file).unwrap(), printed);
}
