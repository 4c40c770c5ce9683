//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcal::backends::stub::{RequestClass, StubConfig, StubServer};
use selfcal::calibration::{
    apply_temperature, argmax, bin_records, expected_calibration_error, fit_scalar_temperature, mean_nll,
    ConfidenceRecord, FeatureVector, LatentNet, Outcome, TemperatureModel,
};

type Check = Result<(), String>;
type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn brute_force_ece(outcomes: &[(f64, bool)], k: usize) -> f64 {
    let n = outcomes.len() as f64;
    let mut ece = 0.0;
    for bin in 0..k {
        let members: Vec<&(f64, bool)> = outcomes
            .iter()
            .filter(|(c, _)| ((c * k as f64).floor() as usize).min(k - 1) == bin)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / m;
        let conf = members.iter().map(|(c, _)| c).sum::<f64>() / m;
        ece += m / n * (acc - conf).abs();
    }
    ece
}

fn ece_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for set in 0..1000 {
        let n = rng.random_range(1..=50);
        let v: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                // Mix in exact bin edges.
                let c = if rng.random_bool(0.2) {
                    rng.random_range(0..=10) as f64 / 10.0
                } else {
                    rng.random_range(0.0..=1.0)
                };
                (c, rng.random_bool(0.5))
            })
            .collect();
        let outcomes: Vec<Outcome> = v
            .iter()
            .enumerate()
            .map(|(i, (c, ok))| Outcome::new(format!("q{i}"), *c, *ok))
            .collect();
        let got = expected_calibration_error(&bin_records(&outcomes, 10).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let want = brute_force_ece(&v, 10);
        ensure((got - want).abs() <= 1e-12, || format!("set {set}: {got} vs {want}"))?;
    }
    Ok(())
}

fn temperature_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p = apply_temperature(&logits, 1.0).map_err(|e| e.to_string())?;
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            ensure((a - b / s).abs() <= 1e-12, || {
                format!("softmax mismatch {a} vs {}", b / s)
            })?;
        }
    }
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let p = apply_temperature(&logits, 1e6).map_err(|e| e.to_string())?;
        let dev = p.iter().map(|x| (x - 1.0 / k as f64).abs()).fold(0.0, f64::max);
        ensure(dev <= 1e-5, || format!("deviation from uniform {dev}"))?;
    }
    for i in 0..10_000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let tau = 10f64.powf(rng.random_range(-2.0..3.0));
        let p = apply_temperature(&logits, tau).map_err(|e| e.to_string())?;
        ensure(argmax(&p) == argmax(&logits), || {
            format!("pair {i}: argmax moved at tau {tau}")
        })?;
    }
    Ok(())
}

fn scalar_fit() -> Check {
    let (conf, acc, n, k) = (0.9, 0.6, 500, 4);
    let other = ((1.0 - conf) / (k - 1) as f64).ln();
    let mut logits = vec![other; k];
    logits[0] = f64::ln(conf);
    let n_correct = (acc * n as f64).round() as usize;
    let recs: Vec<ConfidenceRecord> = (0..n)
        .map(|i| {
            let gold = if i < n_correct { 0 } else { 1 + i % (k - 1) };
            ConfidenceRecord::from_logits(format!("q{i}"), 0, logits.clone(), gold).unwrap()
        })
        .collect();
    let TemperatureModel::Scalar { tau } = fit_scalar_temperature(&recs).map_err(|e| e.to_string())? else {
        return Err("expected a scalar model".into());
    };
    let grid_best = (0..400)
        .map(|i| 0.5 + 4.5 * i as f64 / 399.0)
        .min_by(|a, b| mean_nll(&recs, *a).total_cmp(&mean_nll(&recs, *b)))
        .unwrap();
    // p(chosen) = acc at the optimum.
    let analytic = (conf / ((1.0 - conf) / 3.0)).ln() / (acc / ((1.0 - acc) / 3.0)).ln();
    ensure((tau - grid_best).abs() <= 0.02, || {
        format!("tau {tau} vs grid {grid_best}")
    })?;
    ensure((tau - analytic).abs() <= 0.02, || {
        format!("tau {tau} vs analytic {analytic}")
    })?;
    ensure(mean_nll(&recs, tau) <= mean_nll(&recs, 1.0), || {
        "fit worse than tau = 1".into()
    })
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..20 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=32);
        let k = rng.random_range(2..=6);
        let net = LatentNet::seeded(d, 16, rng.random());
        let mut features = Vec::new();
        let mut records = Vec::new();
        for i in 0..n {
            features.push(FeatureVector::new((0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap());
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            records.push(ConfidenceRecord::from_logits(format!("q{i}"), 0, logits, rng.random_range(0..k)).unwrap());
        }
        let (_, grad) = net.nll_and_gradient(&features, &records);
        let p = net.params();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..p.len())
            .map(|j| {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let mut q = p.clone();
                q[j] += h;
                plus.set_params(&q);
                q[j] -= 2.0 * h;
                minus.set_params(&q);
                (plus.mean_nll(&features, &records) - minus.mean_nll(&features, &records)) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&grad).max(norm(&numeric)).max(1e-8);
        let rel = norm(&diff) / scale;
        ensure(rel <= 1e-4, || format!("instance {inst}: relative error {rel}"))?;
    }
    Ok(())
}

fn synthetic_config(schedule: Option<&str>) -> String {
    let schedule = schedule
        .map(|k| format!("\n[schedule]\nkind = \"{k}\"\nfeed_confidence_to_prompt = false\n"))
        .unwrap_or_default();
    format!(
        r#"schema_version = 1
seed = 42
rounds = 5
concurrency = 8

[dataset]
path = "fixture"
repeat = 4

[backend]
kind = "synthetic"
alpha = 0.6
gamma = 0.0
delta = 0.05
sigma = 0.0
k_opts = 4

[method]
kind = "basic"
{schedule}"#
    )
}

struct Run {
    dir: PathBuf,
    code: i32,
}

fn run_cli(root: &Path, name: &str, config: &str, env: &[(&str, &str)]) -> Result<Run, String> {
    let cfg = root.join(format!("{name}.toml"));
    std::fs::write(&cfg, config).map_err(|e| e.to_string())?;
    let dir = root.join(name);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_selfcal"));
    cmd.arg("run").arg("--config").arg(&cfg).arg("--out").arg(&dir);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    Ok(Run {
        dir,
        code: out.status.code().unwrap_or(-1),
    })
}

struct Row {
    round: u32,
    accuracy: f64,
    ece: f64,
    calibrated: bool,
}

fn metrics(dir: &Path) -> Result<Vec<Row>, String> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            let f = |i: usize| c[i].parse::<f64>().map_err(|e| format!("{l}: {e}"));
            Ok(Row {
                round: c[1].parse().map_err(|e| format!("{l}: {e}"))?,
                accuracy: f(3)?,
                ece: f(4)?,
                calibrated: c[6] == "true",
            })
        })
        .collect()
}

fn completed(run: &Run) -> Result<Vec<Row>, String> {
    ensure(run.code == 0, || {
        format!("{} exited with {}", run.dir.display(), run.code)
    })?;
    metrics(&run.dir)
}

fn ece_trend(root: &Path) -> Check {
    let rows = completed(&run_cli(root, "trend", &synthetic_config(None), &[])?)?;
    let ece: Vec<f64> = rows.iter().map(|r| r.ece).collect();
    ensure(ece.len() == 6, || format!("{} points", ece.len()))?;
    ensure(ece.windows(2).all(|w| w[1] >= w[0]), || {
        format!("not non-decreasing: {ece:?}")
    })?;
    ensure(ece[5] - ece[0] >= 0.15, || format!("growth {} < 0.15", ece[5] - ece[0]))
}

fn schedule_ordering(root: &Path) -> Check {
    let last = |kind: &str| -> Result<f64, String> {
        let rows = completed(&run_cli(root, kind, &synthetic_config(Some(kind)), &[])?)?;
        rows.last().map(|r| r.ece).ok_or_else(|| format!("{kind}: no rows"))
    };
    let itc = last("improve_then_calibrate")?;
    let cti = last("calibrate_then_improve")?;
    let it = last("iterative")?;
    ensure(itc <= cti, || format!("ITC {itc} > CTI {cti}"))?;
    ensure(itc <= it + 0.02, || format!("ITC {itc} > iterative {it} + 0.02"))
}

fn argmax_end_to_end(root: &Path) -> Check {
    let raw = completed(&run_cli(root, "plain7", &synthetic_config(None), &[])?)?;
    for kind in ["iterative", "calibrate_then_improve", "improve_then_calibrate"] {
        let rows = completed(&run_cli(root, &format!("{kind}7"), &synthetic_config(Some(kind)), &[])?)?;
        ensure(rows.iter().any(|r| r.calibrated), || {
            format!("{kind}: nothing calibrated")
        })?;
        for r in &rows {
            let base = raw.iter().find(|b| b.round == r.round).ok_or("missing round")?;
            ensure(r.accuracy == base.accuracy, || {
                format!("{kind} round {}: {} vs {}", r.round, r.accuracy, base.accuracy)
            })?;
        }
    }
    Ok(())
}

fn determinism(root: &Path) -> Check {
    let cfg = synthetic_config(Some("iterative")).replace("sigma = 0.0", "sigma = 0.05");
    let a = run_cli(root, "det_a", &cfg, &[])?;
    let b = run_cli(root, "det_b", &cfg, &[])?;
    completed(&a)?;
    completed(&b)?;
    for f in ["metrics.csv", "transcripts.jsonl"] {
        let x = std::fs::read(a.dir.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.dir.join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs"))?;
    }
    Ok(())
}

fn http_config(url: &str) -> String {
    format!(
        r#"schema_version = 1
seed = 9
rounds = 2
concurrency = 4

[dataset]
path = "fixture"

[backend]
kind = "http"
base_url = "{url}"
model_name = "stub"
api_key_env_name = "SELFCAL_ACCEPTANCE_KEY"
timeout_ms = 5000
max_retries = 3
backoff_base_ms = 1

[method]
kind = "basic"
"#
    )
}

fn files_containing(dir: &Path, needle: &str) -> Vec<PathBuf> {
    let mut hits = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if std::fs::read(&p)
                .map(|b| String::from_utf8_lossy(&b).contains(needle))
                .unwrap_or(false)
            {
                hits.push(p);
            }
        }
    }
    hits
}

fn http_robustness(root: &Path) -> Check {
    const KEY: &str = "sk-acceptance-7f3a9c";
    let env = [("SELFCAL_ACCEPTANCE_KEY", KEY)];

    let flaky = StubServer::start(StubConfig {
        fail_first: 2,
        ..StubConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let ok = run_cli(root, "http_flaky", &http_config(&flaky.base_url()), &env)?;
    ensure(ok.code == 0, || format!("flaky run exited with {}", ok.code))?;
    let stats = flaky.stats();
    for class in [
        RequestClass::Answer,
        RequestClass::Feedback,
        RequestClass::Refine,
        RequestClass::Score,
    ] {
        let failures = stats.failures.get(&class).copied().unwrap_or(0);
        ensure(failures == 2, || format!("{class:?}: {failures} injected failures"))?;
    }
    ensure(
        stats.authorization.iter().all(|a| a == &format!("Bearer {KEY}")),
        || "key not sent".into(),
    )?;

    let broken = StubServer::start(StubConfig {
        always_fail: vec![RequestClass::Answer],
        ..StubConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let bad = run_cli(root, "http_broken", &http_config(&broken.base_url()), &env)?;
    ensure(bad.code == 3, || format!("failing run exited with {}", bad.code))?;

    let leaks = files_containing(root, KEY);
    ensure(leaks.is_empty(), || format!("key found in {leaks:?}"))
}

fn main() {
    let root = tempfile::tempdir().expect("tempdir");
    let r = root.path();
    let criteria: Vec<Criterion> = vec![
        ("ECE matches brute force", Duration::from_secs(5), Box::new(ece_oracle)),
        (
            "temperature identities",
            Duration::from_secs(5),
            Box::new(temperature_identities),
        ),
        (
            "scalar fit matches grid search",
            Duration::from_secs(10),
            Box::new(scalar_fit),
        ),
        (
            "latent gradient check",
            Duration::from_secs(30),
            Box::new(gradient_check),
        ),
        (
            "ECE grows across self-improvement rounds",
            Duration::from_secs(60),
            Box::new(|| ece_trend(r)),
        ),
        (
            "improve-then-calibrate has the lowest final ECE",
            Duration::from_secs(180),
            Box::new(|| schedule_ordering(r)),
        ),
        (
            "calibration keeps accuracy sequences",
            Duration::MAX,
            Box::new(|| argmax_end_to_end(r)),
        ),
        (
            "identical runs are byte-identical",
            Duration::MAX,
            Box::new(|| determinism(r)),
        ),
        (
            "HTTP retries, abort code and key hygiene",
            Duration::MAX,
            Box::new(|| http_robustness(r)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = result.and_then(|_| ensure(elapsed < *budget, || format!("took {elapsed:?}, budget {budget:?}")));
        match result {
            Ok(()) => println!("PASS {} {name} ({:.2}s)", i + 1, elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name} ({:.2}s): {msg}", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
