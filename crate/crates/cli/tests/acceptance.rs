//! Acceptance criteria 1-9. Each test prints one `criterion N ... PASS|FAIL`
//! line to stderr (uncaptured) and then asserts.
//!
//! Criteria 6-8 share one reference model trained through the CLI (4096 grids,
//! 2000 steps, seed 0). Tests hold a global lock so timings are not distorted
//! by running concurrently on the same cores.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use swg_core::guidance::{generate, GuidanceConfig};
use swg_core::seed;
use swg_core::spectral::{dft, idft, take_real, weaken, FeatureVector, Renorm, SelectionMask, Weakener};
use swg_core::toymodel::{
    forward_recompute, forward_step, HookSet, KvCache, ModelConfig, ModelWeights, Perturbation, Site, WeakOp,
};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n} {name} ... {} ({detail}; {:.1} s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn swg(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_swg")).args(args).output().expect("spawn swg");
    assert!(out.status.success(), "swg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

struct Reference {
    weights: PathBuf,
    train_time: Duration,
    first_loss: f64,
    final_loss: f64,
}

/// Trains the reference model on first use. Callers must hold the lock.
fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| {
        let dir = scratch("reference");
        let corpus = dir.join("corpus.csv");
        let weights = dir.join("reference.swgw");
        let start = Instant::now();
        swg(&["gen-data", "--count", "4096", "--seed", "0", "--out", p(&corpus)]);
        swg(&["train", "--corpus", p(&corpus), "--steps", "2000", "--seed", "0", "--out", p(&weights), "--log-every", "0"]);
        let train_time = start.elapsed();
        let losses: Vec<f64> = std::fs::read_to_string(dir.join("reference.swgw.loss.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let tail = &losses[losses.len() - 50..];
        Reference {
            weights,
            train_time,
            first_loss: losses[0],
            final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        }
    })
}

/// Rows of a metrics CSV keyed by column name.
fn metrics(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn oracle_dft(c: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (c as f64).sqrt();
    DMatrix::from_fn(c, c, |k, n| {
        let a = -2.0 * PI * ((k * n) % c) as f64 / c as f64;
        Complex64::new(a.cos() * scale, a.sin() * scale)
    })
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn criterion_1_spectral_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for c in [1usize, 2, 4, 16, 37, 64, 512] {
        let w = oracle_dft(c);
        for trial in 0..4 {
            let x: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fv = FeatureVector::new(x.clone()).unwrap();
            let spec = dft(&fv);
            let back = take_real(&idft(spec.as_slice()).unwrap());
            worst = worst.max(inf_norm(&back, &x));
            worst = worst.max((spec.norm() - fv.norm()).abs());
            worst = worst.max(spec.conjugate_asymmetry());

            let xc = DVector::from_iterator(c, x.iter().map(|&v| Complex64::new(v, 0.0)));
            let expected = &w * &xc;
            for (a, b) in spec.as_slice().iter().zip(expected.iter()) {
                worst = worst.max((a - b).norm());
            }

            let band = [(0.0, 0.1), (0.0, 0.5), (0.1, 0.6), (0.0, 1.0)][trial];
            let mask = SelectionMask::from_range(c, band.0, band.1, true).unwrap();
            let mut masked = expected.clone();
            for (v, &keep) in masked.iter_mut().zip(mask.bits()) {
                if !keep {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
            let want: Vec<f64> = (w.adjoint() * masked).iter().map(|z| z.re).collect();
            let got = weaken(&fv, &mask, Renorm::None.into()).unwrap();
            worst = worst.max(inf_norm(got.as_slice(), &want));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(5);
    verdict(1, "spectral correctness", pass, &format!("max error {worst:.2e}"), elapsed);
    assert!(pass);
}

#[test]
fn criterion_2_projection_semantics() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 64;
    let (mut worst_idem, mut rank_excess) = (0.0f64, 0i64);
    for _ in 0..50 {
        let rank = rng.random_range(1..=c);
        let mask = SelectionMask::random_symmetric(c, rank, &mut rng).unwrap();
        let op = Weakener::new(mask.clone(), Renorm::None.into()).unwrap();
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut once = x.clone();
        op.apply(&mut once);
        let mut twice = once.clone();
        op.apply(&mut twice);
        worst_idem = worst_idem.max(inf_norm(&once, &twice));

        let cols: Vec<f64> = (0..c)
            .flat_map(|j| {
                let mut e = vec![0.0; c];
                e[j] = 1.0;
                op.apply(&mut e);
                e
            })
            .collect();
        let numeric = DMatrix::from_column_slice(c, c, &cols)
            .svd(false, false)
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-9)
            .count();
        rank_excess = rank_excess.max(numeric as i64 - mask.rank() as i64);
    }
    let elapsed = start.elapsed();
    let pass = worst_idem <= 1e-5 && rank_excess <= 0 && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "projection semantics",
        pass,
        &format!("idempotence error {worst_idem:.2e}, rank excess {rank_excess}"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_3_renormalization() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let c = rng.random_range(1..=96);
        let rank = rng.random_range(1..=c);
        // Some (length, rank) pairs have no symmetric mask; draw again.
        let Ok(mask) = SelectionMask::random_symmetric(c, rank, &mut rng) else { continue };
        checked += 1;
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fv = FeatureVector::new(x.clone()).unwrap();
        for variant in [Renorm::Spectral, Renorm::Spatial] {
            let y = weaken(&fv, &mask, variant.into()).unwrap();
            worst = worst.max((y.norm() - l2(&x)).abs() / l2(&x));
        }
    }
    let mut zeros_ok = true;
    for variant in [Renorm::None, Renorm::Spectral, Renorm::Spatial, Renorm::UnitSpatial] {
        let zero = FeatureVector::new(vec![0.0; 32]).unwrap();
        let any = FeatureVector::new((0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = weaken(&zero, &SelectionMask::from_range(32, 0.0, 0.1, true).unwrap(), variant.into());
        let b = weaken(&any, &SelectionMask::none(32), variant.into());
        zeros_ok &= matches!((a, b), (Ok(a), Ok(b)) if a.as_slice().iter().chain(b.as_slice()).all(|&v| v == 0.0));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && zeros_ok && elapsed < Duration::from_secs(5);
    verdict(
        3,
        "renormalization",
        pass,
        &format!("max relative energy error {worst:.2e}, zero cases {}", if zeros_ok { "ok" } else { "bad" }),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_4_theory_instance() {
    let _g = serial();
    let dir = scratch("theory");
    let out = dir.join("theory.json");
    let start = Instant::now();
    swg(&["verify-theory", "--dim-x", "16", "--dim-z", "4", "--trials", "100", "--seed", "0", "--out", p(&out)]);
    let elapsed = start.elapsed();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let trials = v["trials"].as_array().unwrap();
    let held = trials
        .iter()
        .filter(|t| t["i_masked"].as_f64().unwrap() <= t["i_full"].as_f64().unwrap() + 1e-9)
        .count();
    let invariance = v["max_invariance_error"].as_f64().unwrap();
    let pass = trials.len() == 100 && held == 100 && invariance <= 1e-8 && elapsed < Duration::from_secs(30);
    verdict(
        4,
        "theory instance",
        pass,
        &format!("{held}/100 information inequalities, max invariance error {invariance:.2e}"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_5_model_plumbing() {
    let _g = serial();
    let start = Instant::now();
    let w = ModelWeights::init(ModelConfig::default(), 0.3, &mut seed::rng(5, "init", 0)).unwrap();
    let cfg = *w.config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mask = SelectionMask::from_range(cfg.hidden, 0.0, 0.1, true).unwrap();
    let hooked = Perturbation::spectral(
        HookSet::all_layers(cfg.layers, Site::Value),
        Weakener::new(mask.clone(), Renorm::Spectral.into()).unwrap(),
    );
    let mut worst = 0.0f32;
    for i in 0..20 {
        let len = rng.random_range(2..=cfg.max_seq);
        let mut tokens = vec![cfg.bos_token(), cfg.class_token(Some(i % cfg.class_count))];
        tokens.extend((2..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)));
        for perturb in [None, Some(&hooked)] {
            let full = forward_recompute(&w, &tokens, perturb).unwrap();
            let mut cache = KvCache::new(&cfg);
            for (t, &tok) in tokens.iter().enumerate() {
                let step = forward_step(&w, &mut cache, tok, perturb).unwrap();
                for (a, b) in step.iter().zip(&full[t]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let empty = Perturbation::new(HookSet::new(), WeakOp::Prune);
    let g = generate(&w, &GuidanceConfig::new(1.0, empty), 64, 5).unwrap();
    let bitwise = g.trace.iter().all(|s| s.perturbed_logits.as_ref() == Some(&s.base_logits));
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && bitwise && elapsed < Duration::from_secs(30);
    verdict(
        5,
        "model plumbing",
        pass,
        &format!("max cache/recompute gap {worst:.2e}, empty hooks bitwise {bitwise}"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_6_entropy_ordering() {
    let _g = serial();
    let r = reference();
    let dir = scratch("entropy");
    let start = Instant::now();
    swg(&[
        "sample", "--weights", p(&r.weights), "--n", "100", "--seed", "0", "--class", "none", "--hooks", "all.v",
        "--retain", "0:0.1", "--omega-s", "0", "--out", p(&dir.join("samples")),
    ]);
    swg(&["analyze-entropy", "--traces", p(&dir.join("samples")), "--out", p(&dir.join("entropy.csv"))]);
    let elapsed = r.train_time + start.elapsed();
    let rows = metrics(&dir.join("entropy.csv"));
    let last = rows.last().unwrap();
    let (base, weak) = (num(last, "base_mean"), num(last, "perturbed_mean"));
    let pass = weak > base && num(last, "n") == 100.0 && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "entropy ordering",
        pass,
        &format!(
            "final cumulative entropy perturbed {weak:.2} vs base {base:.2} nats; training loss {:.3} -> {:.3} in {:.0} s",
            r.first_loss,
            r.final_loss,
            r.train_time.as_secs_f64()
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_7_guidance_efficacy() {
    let _g = serial();
    let r = reference();
    let dir = scratch("efficacy");
    let csv = dir.join("sweep.csv");
    let start = Instant::now();
    swg(&[
        "sweep", "--weights", p(&r.weights), "--n", "256", "--seed", "0", "--omega-s", "0,1,2,3,4", "--retain",
        "0:0.1,0:0.9", "--hooks", "all.r", "--class", "cycle", "--out", p(&csv),
    ]);
    let elapsed = start.elapsed();
    let rows = metrics(&csv);
    let rate = |ws: f64, band: &str| {
        rows.iter()
            .find(|row| num(row, "omega_s") == ws && row["retention"] == band)
            .map(|row| num(row, "validity_rate"))
            .unwrap()
    };
    let base = rate(0.0, "0:0.1");
    let (best_ws, best) = [1.0, 2.0, 3.0, 4.0]
        .into_iter()
        .map(|ws| (ws, rate(ws, "0:0.1")))
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let wide = rate(best_ws, "0:0.9");
    let curve: Vec<String> = [0.0, 1.0, 2.0, 3.0, 4.0].iter().map(|&ws| format!("{:.3}", rate(ws, "0:0.1"))).collect();
    let pass = best - base >= 0.05 && best > wide && elapsed < Duration::from_secs(600);
    verdict(
        7,
        "guidance efficacy",
        pass,
        &format!(
            "validity by omega_s [{}]; best omega_s={best_ws} gains {:+.1} pp; 0:0.9 at same scale {wide:.3}",
            curve.join(", "),
            100.0 * (best - base)
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_8_swg_cfg_compatibility() {
    let _g = serial();
    let r = reference();
    let dir = scratch("cfg");
    let csv = dir.join("sweep.csv");
    let start = Instant::now();
    swg(&[
        "sweep", "--weights", p(&r.weights), "--n", "256", "--seed", "0", "--omega-s", "0,0.5,1,2", "--omega-c",
        "0,1,2,3", "--hooks", "all.r", "--class", "cycle", "--out", p(&csv),
    ]);
    let elapsed = start.elapsed();
    let rows = metrics(&csv);
    let best = |keep: &dyn Fn(f64, f64) -> bool| {
        rows.iter()
            .filter(|row| keep(num(row, "omega_s"), num(row, "omega_c")))
            .map(|row| (num(row, "valid_match_rate"), num(row, "omega_s"), num(row, "omega_c")))
            .fold((f64::MIN, 0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
    };
    let swg_only = best(&|ws, wc| ws > 0.0 && wc == 0.0);
    let cfg_only = best(&|ws, wc| ws == 0.0 && wc > 0.0);
    let joint = best(&|ws, wc| ws > 0.0 && wc > 0.0);
    let pass = joint.0 >= swg_only.0 && joint.0 >= cfg_only.0 && elapsed < Duration::from_secs(600);
    verdict(
        8,
        "SWG x CFG compatibility",
        pass,
        &format!(
            "joint {:.3} at (omega_s={}, omega_c={}); SWG only {:.3}; CFG only {:.3}",
            joint.0, joint.1, joint.2, swg_only.0, cfg_only.0
        ),
        elapsed,
    );
    assert!(pass);
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let name = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(name, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

#[test]
fn criterion_9_reproducibility() {
    let _g = serial();
    let start = Instant::now();
    let runs: Vec<BTreeMap<String, String>> = (0..2)
        .map(|run| {
            let d = scratch(&format!("repro{run}"));
            let corpus = d.join("corpus.csv");
            let weights = d.join("model.swgw");
            swg(&["gen-data", "--count", "256", "--seed", "9", "--out", p(&corpus), "--render-dir", p(&d.join("renders"))]);
            swg(&["train", "--corpus", p(&corpus), "--steps", "40", "--seed", "9", "--out", p(&weights), "--log-every", "0"]);
            swg(&[
                "sample", "--weights", p(&weights), "--n", "8", "--seed", "9", "--omega-s", "2", "--omega-c", "1",
                "--class", "cycle", "--top-k", "10", "--trace-json", "--out", p(&d.join("samples")),
            ]);
            swg(&[
                "sweep", "--weights", p(&weights), "--n", "8", "--seed", "9", "--omega-s", "0,1,3", "--retain",
                "0:0.1,0.2:0.6", "--hooks", "all.v;0.q,1.m", "--out", p(&d.join("sweep.csv")),
            ]);
            swg(&["verify-theory", "--trials", "10", "--seed", "9", "--out", p(&d.join("theory.json"))]);
            swg(&["analyze-entropy", "--traces", p(&d.join("samples")), "--out", p(&d.join("entropy.csv"))]);
            std::fs::write(d.join("vectors.csv"), "1,2,3,4,5,6,7,8\n-0.5,0.25,3,9\n").unwrap();
            swg(&["weaken", "--input", p(&d.join("vectors.csv")), "--out", p(&d.join("weak.csv"))]);
            hash_tree(&d)
        })
        .collect();
    let differing: Vec<&String> = runs[0].keys().filter(|k| runs[0].get(*k) != runs[1].get(*k)).collect();
    let elapsed = start.elapsed();
    let pass = runs[0].len() == runs[1].len() && differing.is_empty();
    verdict(
        9,
        "reproducibility",
        pass,
        &format!("{} artifacts hashed, {} differ", runs[0].len(), differing.len()),
        elapsed,
    );
    assert!(pass, "differing artifacts: {differing:?}");
}
