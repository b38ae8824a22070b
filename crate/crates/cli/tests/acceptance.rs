use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vpf_core::agreement::{build_robust_subset, fleiss_kappa, per_item_kappa, CategoryCountTable};
use vpf_core::datamodel::{BinaryLabel, ImageRecord};
use vpf_core::fixtures::{expected_label, generate_fixture, FixtureSpec};
use vpf_core::highlevel::NounMatch;
use vpf_core::judge::{
    parse_binary_answer, parse_rationale_json, render_prompt, render_rationale_prompt, Mode, Parsed, PromptConfig,
    Rationale, RationaleVariant, RenderedPrompt,
};
use vpf_core::lowlevel::{brightness, color_entropy, colorfulness, srgb_to_lab, RgbImage};
use vpf_core::midlevel::{center_bias_index, saliency_entropy, thirds_coverage, top_p_mass_area, SaliencyMap};
use vpf_core::report::f1_from_pr;
use vpf_core::stats::{
    ame_discrete, bh_fdr, effect_table, fit_logit, hc3_cov, log_likelihood, pct_change, LogitFit,
};

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn metric_identity() -> Outcome {
    let rows = [
        (51.01, 98.88, 67.30),
        (44.13, 97.19, 60.70),
        (46.33, 88.76, 60.89),
        (40.51, 89.89, 55.85),
        (39.36, 42.05, 40.66),
        (31.65, 25.00, 27.94),
    ];
    let mut worst: f64 = 0.0;
    for (p, r, f1) in rows {
        let got = f1_from_pr(p, r);
        worst = worst.max((got - f1).abs());
        ensure!(close(got, f1, 0.02), "{p}/{r} -> {got:.4}, printed {f1}");
    }
    Ok(format!("{} rows, max |err| {worst:.4}", rows.len()))
}

fn pct_deltas() -> Outcome {
    let (keyobj, human) = (3.284, 1.222);
    let rows = [
        (2.868, keyobj, -12.67),
        (1.562, human, 27.82),
        (2.696, keyobj, -17.89),
        (1.584, human, 29.62),
        (2.041, keyobj, -37.86),
        (1.881, human, 53.93),
        (2.733, keyobj, -16.77),
        (2.479, human, 102.86),
    ];
    let mut worst: f64 = 0.0;
    for (m, b, want) in rows {
        let got = pct_change(m, b).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure!(close(got, want, 0.05), "{m} vs {b} -> {got:.4}, printed {want}");
    }
    Ok(format!("{} deltas, max |err| {worst:.4} pp", rows.len()))
}

fn low_level_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..100 {
        let px = random_image(&mut rng, 64, 64);
        let img = RgbImage::new(64, 64, px.clone()).map_err(|e| e.to_string())?;
        let lab = srgb_to_lab(&img);
        let c = colorfulness(&img).0;
        ensure!(rel_close(c, ref_colorfulness(64, 64, &px), 1e-9), "image {k}: colorfulness {c}");
        let e = color_entropy(&lab, 32).map_err(|e| e.to_string())?;
        ensure!(rel_close(e, ref_entropy(&px, 32), 1e-9), "image {k}: entropy {e}");
        let b = brightness(&lab);
        ensure!(rel_close(b, ref_brightness(&px), 1e-9), "image {k}: brightness {b}");
    }
    let gray = RgbImage::filled(16, 16, [128, 128, 128]).map_err(|e| e.to_string())?;
    ensure!(colorfulness(&gray).0 == 0.0, "gray colorfulness");
    let split: Vec<[u8; 3]> = (0..64 * 64).map(|k| if k % 64 < 32 { [255, 0, 0] } else { [0, 255, 0] }).collect();
    let split = RgbImage::new(64, 64, split).map_err(|e| e.to_string())?;
    ensure!(colorfulness(&split).0 == 293.25, "red/green split {}", colorfulness(&split).0);
    let white = srgb_to_lab(&RgbImage::filled(8, 8, [255, 255, 255]).map_err(|e| e.to_string())?);
    ensure!(brightness(&white) == 100.0, "white L* {}", brightness(&white));
    Ok("100 random images within 1e-9 relative; gray 0, split 293.25, white 100".into())
}

fn point_map(h: usize, w: usize, i: usize, j: usize) -> SaliencyMap {
    let mut v = vec![0.0; h * w];
    v[i * w + j] = 1.0;
    SaliencyMap::from_raw(h, w, v).unwrap()
}

fn mid_level_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..100 {
        let (h, w, raw, s) = random_saliency(&mut rng);
        let map = SaliencyMap::from_raw(h, w, raw).map_err(|e| e.to_string())?;
        let p = rng.random_range(0.5..1.0);
        let m = h.min(w) as f64;
        let a = top_p_mass_area(&map, p);
        ensure!(close(a, ref_top_p(&s, p), 1e-9), "map {k}: A@p {a}");
        let hs = saliency_entropy(&map).map_err(|e| e.to_string())?;
        ensure!(close(hs, ref_entropy_sal(&s), 1e-9), "map {k}: H_sal {hs}");
        let cbi = center_bias_index(&map, 0.2);
        ensure!(close(cbi, ref_mass_in(&s, h, w, &center(h, w), 0.2 * m), 1e-9), "map {k}: CBI {cbi}");
        let t3 = thirds_coverage(&map, 0.1);
        ensure!(close(t3, ref_mass_in(&s, h, w, &thirds(h, w), 0.1 * m), 1e-9), "map {k}: T3 {t3}");
    }
    let uniform = SaliencyMap::from_raw(100, 100, vec![1.0; 10_000]).map_err(|e| e.to_string())?;
    ensure!(close(top_p_mass_area(&uniform, 0.85), 0.85, 1e-12), "uniform A@0.85");
    ensure!(close(saliency_entropy(&uniform).unwrap(), 1.0, 1e-12), "uniform H_sal");
    let point = point_map(50, 50, 7, 31);
    ensure!(top_p_mass_area(&point, 0.85) == 1.0 / 2500.0, "point A@p");
    ensure!(saliency_entropy(&point).unwrap() == 0.0, "point H_sal");
    ensure!(thirds_coverage(&point_map(90, 90, 30, 60), 0.1) == 1.0, "thirds point T3");
    ensure!(thirds_coverage(&point_map(90, 90, 45, 45), 0.1) == 0.0, "center point T3");
    Ok("100 random maps within 1e-9; uniform, point, thirds and center cases exact".into())
}

fn regression_suite() -> Outcome {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut rows = Vec::new();
    let mut y2 = Vec::new();
    for (x, pos, total) in [(1.0, 30, 40), (0.0, 10, 40)] {
        for i in 0..total {
            rows.extend_from_slice(&[1.0, x]);
            y2.push(f64::from(i < pos));
        }
    }
    let x2 = DMatrix::from_row_slice(80, 2, &rows);
    let fit = fit_logit(&x2, &y2, &names(&["intercept", "x"])).map_err(|e| e.to_string())?;
    let or = fit.coefficients[1].exp();
    ensure!(close(or, 9.0, 1e-6), "2x2 OR {or}");

    let ones = DMatrix::from_element(8, 1, 1.0);
    let y0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let null = fit_logit(&ones, &y0, &names(&["intercept"])).map_err(|e| e.to_string())?;
    let ybar = 0.25f64;
    ensure!(close(null.coefficients[0], (ybar / (1.0 - ybar)).ln(), 1e-10), "null {}", null.coefficients[0]);

    let (x, y) = fixture();
    let fit = fit_logit(&x, &y, &terms()).map_err(|e| e.to_string())?;
    let beta = fit.coefficients.clone();
    let analytic = fit.score(&x);
    let h = 1e-5;
    for j in 0..3 {
        let (mut up, mut dn) = (beta.clone(), beta.clone());
        up[j] += h;
        dn[j] -= h;
        let fd = (log_likelihood(&x, &y, &up) - log_likelihood(&x, &y, &dn)) / (2.0 * h);
        ensure!(close(fd, analytic[j], 1e-5), "score {j}: fd {fd} vs {}", analytic[j]);
    }
    let shifted: Vec<f64> = beta.iter().zip([0.3, -0.2, 0.1]).map(|(b, o)| b + o).collect();
    let probe = LogitFit {
        fitted: (0..50)
            .map(|i| 1.0 / (1.0 + (-(0..3).map(|j| x[(i, j)] * shifted[j]).sum::<f64>()).exp()))
            .collect(),
        coefficients: shifted.clone(),
        ..fit.clone()
    };
    let g = probe.score(&x);
    for j in 0..3 {
        let (mut up, mut dn) = (shifted.clone(), shifted.clone());
        up[j] += h;
        dn[j] -= h;
        let fd = (log_likelihood(&x, &y, &up) - log_likelihood(&x, &y, &dn)) / (2.0 * h);
        ensure!(close(fd, g[j], 1e-5), "off-optimum score {j}: fd {fd} vs {}", g[j]);
    }

    let v = hc3_cov(&fit, &x).map_err(|e| e.to_string())?;
    for i in 0..3 {
        for j in 0..3 {
            ensure!(close(v[(i, j)], HC3[i * 3 + j], 1e-6), "HC3[{i},{j}] {}", v[(i, j)]);
        }
    }
    let eff = effect_table(&fit, &v).map_err(|e| e.to_string())?;
    for k in 0..2 {
        let a = eff[k + 1].ame.ok_or("missing AME")?;
        ensure!(close(a, AME[k], 1e-6), "AME {k} {a}");
    }
    let disc = ame_discrete(&fit, &x);
    for k in 0..2 {
        let a = disc[k + 1].ok_or("missing discrete AME")?;
        ensure!(close(a, AME_DISCRETE[k], 1e-6), "discrete AME {k} {a}");
    }
    let adj = bh_fdr(&[0.01, 0.02, 0.03, 0.04]).map_err(|e| e.to_string())?;
    ensure!(adj == vec![0.04; 4], "BH {adj:?}");
    Ok("OR 9, null logit, score vs finite differences, HC3 and AME on 50 rows, BH exact".into())
}

fn agreement_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 50 {
        let (assign, k) = random_assignments(&mut rng);
        let table = CategoryCountTable::from_assignments(&assign, k).map_err(|e| e.to_string())?;
        let Ok(kappa) = fleiss_kappa(&table) else { continue };
        let oracle = brute_kappa(&assign, k);
        worst = worst.max((kappa - oracle).abs());
        ensure!(close(kappa, oracle, 1e-12), "table {checked}: {kappa} vs {oracle}");
        checked += 1;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = FixtureSpec::default();
    let out = generate_fixture(&spec, dir.path()).map_err(|e| e.to_string())?;
    let subset = build_robust_subset(&out.annotations).map_err(|e| e.to_string())?;
    let want: Vec<(String, BinaryLabel)> =
        (0..spec.n_images).filter_map(|i| expected_label(i).map(|l| (format!("img{i:02}"), l))).collect();
    let got: Vec<(String, BinaryLabel)> = subset.kept.iter().map(|k| (k.image_id.clone(), k.label)).collect();
    ensure!(got == want, "subset {got:?}");
    let counts = (subset.high, subset.low, subset.excluded_mid, subset.source_almost_perfect);
    ensure!(counts == (3, 5, 2, 10), "counts {counts:?}");
    let table = CategoryCountTable::new(vec![vec![4, 0, 0], vec![0, 0, 4], vec![0, 4, 0], vec![2, 1, 1]])
        .map_err(|e| e.to_string())?;
    let pooled = table.pooled_proportions();
    for row in 0..3 {
        let ki = per_item_kappa(&table.items()[row], &pooled).map_err(|e| e.to_string())?;
        ensure!(close(ki, 1.0, 1e-15), "unanimous item {row}: {ki}");
    }
    Ok(format!("50 tables max |err| {worst:.1e}; fixture subset 3 high / 5 low; unanimous kappa 1"))
}

fn core_test_dir(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests").join(sub)
}

fn check_golden(p: &RenderedPrompt, name: &str) -> Result<(), String> {
    let read = |part: &str| {
        fs::read_to_string(core_test_dir("golden").join(format!("{name}.{part}.txt"))).map_err(|e| e.to_string())
    };
    ensure!(p.system == read("system")?, "{name} system prompt differs");
    ensure!(p.user == read("user")?, "{name} user prompt differs");
    Ok(())
}

fn prompt_suite() -> Outcome {
    let message = "Use_recyclable_building_materials";
    let record = ImageRecord::new("1", "img.png", message);
    let nouns = vec![NounMatch { noun: "building".into(), count: 1 }, NounMatch { noun: "recyclable".into(), count: 1 }];
    let mut per_object = IndexMap::new();
    per_object.insert("building".to_string(), "The lush house supports the message.".to_string());
    per_object.insert("recyclable".to_string(), "Bins signal recycling.".to_string());
    let rationale = Rationale { per_object, rationale_overall: "Overall fine.".into(), label_informed: false };
    let judged = [
        (Mode::Baseline, "baseline"),
        (Mode::CognitiveInjection, "cognitive_injection"),
        (Mode::KnowledgeChain, "knowledge_chain"),
        (Mode::AlignedKeyObjectContext, "aligned_context"),
        (Mode::KeyObjectRationale, "key_object_rationale"),
    ];
    for (mode, name) in judged {
        let p = render_prompt(&PromptConfig::new(mode, "m"), &record, Some(&nouns), Some(&rationale))
            .map_err(|e| e.to_string())?;
        check_golden(&p, name)?;
    }
    let keys = vec!["building".to_string(), "recyclable".to_string()];
    let a = render_rationale_prompt(RationaleVariant::Agnostic, message, &keys, None).map_err(|e| e.to_string())?;
    check_golden(&a, "rationale_agnostic")?;
    let i = render_rationale_prompt(RationaleVariant::Informed, message, &keys, Some(BinaryLabel::High))
        .map_err(|e| e.to_string())?;
    check_golden(&i, "rationale_informed")?;

    ensure!(parse_binary_answer("[[yes]]", Mode::Baseline) == Parsed::High, "bare yes");
    ensure!(
        parse_binary_answer("Reasoning: the bins help.\nAnswer: [[no]]", Mode::KnowledgeChain) == Parsed::Low,
        "chain answer"
    );
    ensure!(parse_binary_answer("I think yes.", Mode::Baseline) == Parsed::Unparseable, "no token");

    for (file, head) in [
        ("rationale_agnostic.json", "The image is attractive and credible"),
        ("rationale_informed.json", "Strong message-image alignment"),
    ] {
        let text = fs::read_to_string(core_test_dir("data").join(file)).map_err(|e| e.to_string())?;
        let (r, _) = parse_rationale_json(&text, &keys).map_err(|e| format!("{file}: {e}"))?;
        ensure!(r.per_object.len() == 2 && r.rationale_overall.starts_with(head), "{file} content");
    }
    Ok("7 templates byte-exact; 3 answer classes; both listings parse".into())
}

// Canned chat-completions endpoint counting every request it serves.

struct Stub {
    url: String,
    calls: Arc<AtomicUsize>,
}

fn stub(reply: fn(&Value) -> String) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let counter = counter.clone();
            thread::spawn(move || serve(stream, reply, &counter));
        }
    });
    Stub { url, calls }
}

fn serve(stream: TcpStream, reply: fn(&Value) -> String, calls: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    calls.fetch_add(1, Ordering::SeqCst);
    let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let out = json!({"choices": [{"message": {"role": "assistant", "content": reply(&req)}}]}).to_string();
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
        out.len()
    );
}

fn prompt_text(req: &Value) -> (String, String) {
    let system = req.pointer("/messages/0/content").and_then(Value::as_str).unwrap_or("").to_string();
    let user = match req.pointer("/messages/1/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect(),
        _ => String::new(),
    };
    (system, user)
}

fn canned(req: &Value) -> String {
    let (system, user) = prompt_text(req);
    if system.contains("expert visual persuasion analyst") {
        let keys: Vec<String> = user
            .lines()
            .find_map(|l| l.strip_prefix("key_objects: "))
            .and_then(|l| serde_json::from_str(l).ok())
            .unwrap_or_default();
        let informed = user.lines().any(|l| l.starts_with("label: "));
        let per_object: serde_json::Map<String, Value> = keys
            .iter()
            .map(|k| (k.clone(), Value::String(format!("The {k} is clearly visible and fits the message."))))
            .collect();
        let overall = if informed {
            "The visible objects match the message and the label."
        } else {
            "The visible objects match the message."
        };
        return json!({"per_object": per_object, "rationale_overall": overall}).to_string();
    }
    if user.contains("Reasoning: <your reasoning here>") {
        return "Reasoning: the key objects match the message.\nAnswer: [[yes]]".into();
    }
    "[[yes]]".into()
}

fn always_yes(_: &Value) -> String {
    "[[yes]]".into()
}

fn vpf(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vpf"))
        .args(args)
        .env_remove("VPF_ENDPOINT")
        .env_remove("VPF_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure!(out.status.success(), "vpf {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(stdout)
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() {
            files.insert(name, fs::read(entry.path()).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

const ARTIFACTS: [&str; 7] =
    ["features.csv", "agreement.json", "preds_baseline.jsonl", "effects.json", "metrics.json", "groups.csv", "sim.json"];

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = dir.path().join("fx");
    vpf(&["fixtures", "--seed", "7", "--out", fx.to_str().unwrap()])?;
    let config = fx.join("config.json");
    let server = stub(canned);
    let run = |extra: &[&str]| {
        let mut args = vec!["run", "--config", config.to_str().unwrap(), "--endpoint", server.url.as_str()];
        args.extend_from_slice(extra);
        vpf(&args)
    };
    run(&[])?;
    let first_calls = server.calls.load(Ordering::SeqCst);
    ensure!(first_calls > 0, "first run made no requests");
    let out = fx.join("out");
    for a in ARTIFACTS {
        ensure!(out.join(a).is_file(), "missing artifact {a}");
    }
    for run_id in ["cog", "chain", "ctx", "rationale_agnostic", "rationale_informed"] {
        ensure!(out.join(format!("preds_{run_id}.jsonl")).is_file(), "missing preds for {run_id}");
    }
    // The request log grows on every run and the ledger records hit counts.
    let stable = |m: BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        m.into_iter().filter(|(k, _)| k != "requests.jsonl" && k != "run_ledger.json").collect()
    };
    let before = stable(snapshot(&out)?);
    run(&[])?;
    ensure!(server.calls.load(Ordering::SeqCst) == first_calls, "resume run hit the network");
    ensure!(stable(snapshot(&out)?) == before, "resume run changed artifacts");
    run(&["--force"])?;
    let forced = server.calls.load(Ordering::SeqCst) - first_calls;
    ensure!(forced == 0, "forced rerun made {forced} network calls");
    let after = stable(snapshot(&out)?);
    for (k, v) in &before {
        ensure!(after.get(k) == Some(v), "{k} differs after forced rerun");
    }
    ensure!(after.len() == before.len(), "file set changed after forced rerun");
    Ok(format!("{first_calls} requests on first run; resume and forced rerun byte-identical with 0 calls"))
}

fn recall_bias() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    vpf(&["fixtures", "--out", &p("fx")])?;
    let manifest = p("fx/manifest.jsonl");
    vpf(&["features", "--manifest", &manifest, "--out", &p("features.csv")])?;
    vpf(&[
        "agreement", "--annotations", &p("fx/annotations.csv"), "--manifest", &manifest, "--out", &p("agreement.json"),
        "--labels-out", &p("labels.csv"),
    ])?;
    let server = stub(always_yes);
    vpf(&[
        "judge", "--manifest", &manifest, "--mode", "baseline", "--labels", &p("labels.csv"), "--out",
        &p("preds.jsonl"), "--cache-dir", &p("cache"), "--endpoint", &server.url,
    ])?;
    vpf(&[
        "report", "--features", &p("features.csv"), "--labels", &p("labels.csv"), "--preds", &p("preds.jsonl"),
        "--out-dir", &p("report"),
    ])?;
    let metrics: Value = serde_json::from_str(&fs::read_to_string(p("report/metrics.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let m = metrics.pointer("/runs/0/metrics").ok_or("no metrics for the run")?;
    let get = |k: &str| m.get(k).and_then(Value::as_f64).ok_or(format!("missing {k}"));
    let (recall, precision) = (get("recall")?, get("precision")?);
    let base_rate = 100.0 * 3.0 / 8.0;
    ensure!(recall == 100.0, "recall {recall}");
    ensure!(close(precision, base_rate, 1e-9), "precision {precision} vs base rate {base_rate}");
    ensure!(server.calls.load(Ordering::SeqCst) == 8, "expected 8 requests");
    Ok(format!("recall {recall:.2}, precision {precision:.2} = base rate 3/8"))
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "metric identity", limit: secs(1), run: metric_identity },
        Criterion { id: 2, name: "odds-ratio deltas", limit: secs(1), run: pct_deltas },
        Criterion { id: 3, name: "low-level oracles", limit: secs(10), run: low_level_oracles },
        Criterion { id: 4, name: "mid-level oracles", limit: secs(10), run: mid_level_oracles },
        Criterion { id: 5, name: "regression suite", limit: secs(5), run: regression_suite },
        Criterion { id: 6, name: "agreement suite", limit: secs(5), run: agreement_suite },
        Criterion { id: 7, name: "prompt and parse", limit: secs(1), run: prompt_suite },
        Criterion { id: 8, name: "end-to-end run", limit: secs(30), run: end_to_end },
        Criterion { id: 9, name: "recall bias", limit: secs(5), run: recall_bias },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.limit => Err(format!("took {elapsed:.2?}, limit {:?}", c.limit)),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        println!("{tag} {} {:<18} {:>8.2?}  {detail}", c.id, c.name, elapsed);
        if outcome.is_err() {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
