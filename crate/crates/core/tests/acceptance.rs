//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bsgtune::bsg::{basis, BsgGeometry, CpIndex, KnotVector};
use bsgtune::env::{reward_terms, Action, EnvConfig, SignalWindow};
use bsgtune::gradcheck::run_suite;
use bsgtune::harness::ablate::ablate;
use bsgtune::harness::evaluate::{evaluate, OracleGains, Scenario, ScenarioMode};
use bsgtune::harness::{load_config, train, Checkpoint, RunConfig};
use bsgtune::learner::{bandit, AgentConfig, Variant};
use bsgtune::plant::{OperatingBox, PlantConfig, PlantState, ThetaFamily, ThetaMap};

type Check = Result<String, String>;

fn say(line: &str) {
    // written straight to the handle so the test harness does not capture it
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (ok, detail) = match res {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    say(&format!(
        "criterion {n:>2} {:<4} {name} ({secs:.1}s): {detail}",
        if ok { "PASS" } else { "FAIL" }
    ));
    ok
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn smoke_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    load_config(&path).expect("smoke config loads")
}

// ---------- criterion 1: B-splines ----------

fn random_clamped(rng: &mut ChaCha8Rng) -> KnotVector {
    let d = rng.random_range(0..=4usize);
    let m = rng.random_range(d + 1..=d + 8);
    let lo = rng.random_range(-2.0..0.0);
    let hi = lo + rng.random_range(0.5..3.0);
    let mut interior: Vec<f64> = (0..m - d - 1).map(|_| rng.random_range(lo..hi)).collect();
    interior.sort_by(f64::total_cmp);
    let mut knots = vec![lo; d + 1];
    knots.extend(interior);
    knots.extend(vec![hi; d + 1]);
    KnotVector::new(knots, d).unwrap()
}

fn exact_basis(i: usize, d: usize, v: &BigRational, k: &[BigRational]) -> BigRational {
    if d == 0 {
        let last = &k[k.len() - 1];
        let inside = &k[i] <= v && v < &k[i + 1];
        let closing = v == last && k[i] < k[i + 1] && &k[i + 1] == last;
        return if inside || closing { BigRational::one() } else { BigRational::zero() };
    }
    let mut acc = BigRational::zero();
    let dl = &k[i + d] - &k[i];
    if !dl.is_zero() {
        acc += (v - &k[i]) / dl * exact_basis(i, d - 1, v, k);
    }
    let dr = &k[i + d + 1] - &k[i + 1];
    if !dr.is_zero() {
        acc += (&k[i + d + 1] - v) / dr * exact_basis(i + 1, d - 1, v, k);
    }
    acc
}

fn dyadic(n: i64) -> BigRational {
    BigRational::new(n.into(), 256.into())
}

/// Clamped knots on a 1/256 grid so every value is exact in f64.
fn dyadic_axis(rng: &mut ChaCha8Rng) -> (Vec<i64>, usize) {
    let d = rng.random_range(1..=3usize);
    let m = rng.random_range(d + 1..=d + 5);
    let top = 256;
    let mut interior: Vec<i64> = (0..m - d - 1).map(|_| rng.random_range(1..top)).collect();
    interior.sort();
    let mut knots = vec![0; d + 1];
    knots.extend(interior);
    knots.extend(vec![top; d + 1]);
    (knots, d)
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_pou: f64 = 0.0;
    for _ in 0..50 {
        let kv = random_clamped(&mut rng);
        let (lo, hi) = kv.domain();
        for _ in 0..1000 {
            let v = rng.random_range(lo..=hi);
            let mut sum = 0.0;
            for i in 0..kv.cp_count() {
                let b = basis(i, kv.degree(), v, &kv).unwrap();
                ensure(b >= 0.0, || format!("negative basis {b}"))?;
                sum += b;
            }
            worst_pou = worst_pou.max((sum - 1.0).abs());
        }
    }
    ensure(worst_pou < 1e-12, || format!("partition of unity off by {worst_pou:e}"))?;

    let mut worst_oracle: f64 = 0.0;
    for _ in 0..100 {
        let (k0, d0) = dyadic_axis(&mut rng);
        let (k1, d1) = dyadic_axis(&mut rng);
        let ax = |k: &[i64], d| KnotVector::new(k.iter().map(|&v| v as f64 / 256.0).collect(), d).unwrap();
        let (a0, a1) = (ax(&k0, d0), ax(&k1, d1));
        let (m0, m1) = (a0.cp_count(), a1.cp_count());
        let cps_num: Vec<i64> = (0..m0 * m1).map(|_| rng.random_range(-2560..2560)).collect();
        let cps: Vec<f64> = cps_num.iter().map(|&c| c as f64 / 256.0).collect();
        let g = BsgGeometry::new(vec![a0, a1], cps).unwrap();
        let r0: Vec<BigRational> = k0.iter().map(|&v| dyadic(v)).collect();
        let r1: Vec<BigRational> = k1.iter().map(|&v| dyadic(v)).collect();
        for _ in 0..10 {
            let (u, w) = (rng.random_range(0..=256i64), rng.random_range(0..=256i64));
            let (ru, rw) = (dyadic(u), dyadic(w));
            let b0: Vec<BigRational> = (0..m0).map(|i| exact_basis(i, d0, &ru, &r0)).collect();
            let b1: Vec<BigRational> = (0..m1).map(|j| exact_basis(j, d1, &rw, &r1)).collect();
            let mut exact = BigRational::zero();
            for i in 0..m0 {
                for j in 0..m1 {
                    exact += &b0[i] * &b1[j] * dyadic(cps_num[i * m1 + j]);
                }
            }
            let fast = g.evaluate(&[u as f64 / 256.0, w as f64 / 256.0]).unwrap();
            worst_oracle = worst_oracle.max((fast - exact.to_f64().unwrap()).abs());
        }
    }
    ensure(worst_oracle < 1e-12, || format!("tensor-product evaluation off by {worst_oracle:e}"))?;

    let mut violations = 0usize;
    let mut scanned = 0usize;
    for _ in 0..20 {
        let d = rng.random_range(1..=3usize);
        let n = rng.random_range(d + 1..=8);
        let ax = KnotVector::clamped_uniform(d, n, 0.0, 1.0).unwrap();
        let cps: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = BsgGeometry::new(vec![ax.clone(), ax], cps).unwrap();
        let idx = CpIndex::new([rng.random_range(0..n), rng.random_range(0..n)]);
        let moved = g.apply_delta(&BTreeMap::from([(idx.clone(), 0.7)]), None).unwrap();
        let support = g.local_support(&idx).unwrap();
        for a in 0..=40 {
            for b in 0..=40 {
                let p = [a as f64 / 40.0, b as f64 / 40.0];
                if !support.contains(&p) {
                    scanned += 1;
                    if g.evaluate(&p).unwrap() != moved.evaluate(&p).unwrap() {
                        violations += 1;
                    }
                }
            }
        }
    }
    ensure(violations == 0, || format!("{violations} locality violations"))?;
    Ok(format!(
        "max |sum b - 1| {worst_pou:.1e} over 50 x 1000 points; oracle error {worst_oracle:.1e} over 100 geometries; \
         0 locality violations in {scanned} scanned points"
    ))
}

// ---------- criterion 2: plant ----------

fn max_step_error(dt: f64) -> f64 {
    let (theta1, theta2) = (0.5, 0.123);
    let map = ThetaMap {
        family: ThetaFamily::Poly,
        coeffs: [theta1, 0.0, 0.0, theta2, 0.0],
        operating_box: OperatingBox::default(),
    };
    let cfg = PlantConfig {
        dt_sim: dt,
        ..PlantConfig::default()
    };
    let mut p = PlantState::new(0.0, 0.0);
    let mut worst: f64 = 0.0;
    let steps = (3.0 / dt).round() as usize;
    for _ in 0..steps {
        p.step(1.0, [0.5, 0.5], dt, &map, &cfg).unwrap();
        let t = p.t;
        let exact = if t <= theta2 { 0.0 } else { 1.0 - (-(t - theta2) / theta1).exp() };
        worst = worst.max((p.x - exact).abs());
    }
    worst
}

fn criterion_2() -> Check {
    let e1 = max_step_error(0.01);
    let e2 = max_step_error(0.005);
    let ratio = e1 / e2;
    ensure(e1 < 1e-6, || format!("max error {e1:e} at dt 0.01"))?;
    ensure(ratio >= 8.0, || format!("halving ratio {ratio:.2}"))?;
    Ok(format!("max error {e1:.2e} at dt 0.01, {e2:.2e} at dt 0.005, ratio {ratio:.1}"))
}

// ---------- criterion 3: reward ----------

fn criterion_3() -> Check {
    let cfg = EnvConfig::default();
    let mut win = SignalWindow::default();
    for k in 0..10 {
        win.t.push(k as f64 * cfg.dt);
        win.e.push(1.0);
        win.u.push(0.0);
        for ch in [&mut win.y_d, &mut win.y, &mut win.kp, &mut win.ki, &mut win.w1, &mut win.w2] {
            ch.push(0.0);
        }
    }
    let a = Action::from_slice(&[0.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut worst: f64 = 0.0;
    for (ema, r_sc) in [(None, 0.0), (Some(-1.0), 1.0), (Some(0.0), 0.0)] {
        let r = reward_terms(&win, &a, ema, &cfg);
        worst = worst
            .max((r.r_j + 0.0495).abs())
            .max((r.r_a + 0.125).abs())
            .max((r.r_sc - r_sc).abs())
            .max((r.total - (100.0 * -0.0495 + -0.125 + r_sc)).abs());
    }
    ensure(worst < 1e-12, || format!("worst deviation {worst:e}"))?;
    Ok(format!("r_J -0.0495, r_a -0.125 and totals with and without the shaping bonus, max deviation {worst:.1e}"))
}

// ---------- criterion 4: defaults ----------

fn criterion_4() -> Check {
    let c = AgentConfig::default();
    let checks: [(&str, bool); 16] = [
        ("discount", c.discount == 0.90),
        ("target_smoothing", c.target_smoothing == 5e-3),
        ("learning_rate", c.learning_rate == 3e-4),
        ("batch_size", c.batch_size == 128),
        ("gradient_steps", c.gradient_steps == 4),
        ("lstm_layers", c.lstm_layers == 2),
        ("lstm_hidden", c.lstm_hidden == 256),
        ("num_q_networks", c.num_q_networks == 2),
        ("quantiles_per_net", c.quantiles_per_net == 25),
        ("top_quantiles_to_drop_per_net", c.top_quantiles_to_drop_per_net == 2),
        ("kept", c.kept_quantiles() == 46),
        ("blocks", c.actor_blocks == 2 && c.critic_blocks == 2),
        ("hidden_units", c.hidden_units == 256),
        ("dropout", c.dropout_rate_actor == 0.03 && c.dropout_rate_critic == 0.03),
        ("entropy_target", c.entropy_target == -8.0),
        ("init_temperature", c.init_temperature == 1.0),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(k, _)| *k).collect();
    ensure(bad.is_empty(), || format!("defaults differ: {bad:?}"))?;
    let dump = toml::to_string(&c).unwrap();
    Ok(format!("{} agent defaults checked; dump: {}", checks.len(), dump.lines().collect::<Vec<_>>().join("; ")))
}

// ---------- criterion 5: gradients ----------

fn criterion_5() -> Check {
    let t0 = Instant::now();
    let results = run_suite(20, 5);
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        ensure(r.repetitions >= 20, || format!("{} ran {} repetitions", r.primitive, r.repetitions))?;
        ensure(r.max_rel_error < 1e-4, || format!("{} relative error {:e}", r.primitive, r.max_rel_error))?;
    }
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    let names: Vec<&str> = results.iter().map(|r| r.primitive).collect();
    Ok(format!("{} primitives x 20 reps, worst relative error {worst:.1e}: {}", names.len(), names.join(", ")))
}

// ---------- criterion 6: bandit ----------

fn criterion_6() -> Check {
    let mut parts = Vec::new();
    let mut passed = 0;
    for seed in 0..3 {
        let r = bandit::run(&bandit::smoke_config(), seed, 5000, 1.0, 100, 0.1).map_err(|e| e.to_string())?;
        match r.reached(0.1) {
            Some(s) => {
                passed += 1;
                parts.push(format!("seed {seed}: {:.2} -> <0.1 at {s} steps", r.initial));
            }
            None => parts.push(format!("seed {seed}: {:.2} -> {:.3} after 5000 steps", r.initial, r.last())),
        }
    }
    ensure(passed == 3, || format!("{passed}/3 seeds: {}", parts.join("; ")))?;
    Ok(format!("3/3 seeds: {}", parts.join("; ")))
}

// ---------- criterion 7: smoke task ----------

fn criterion_7(root: &Path) -> Check {
    let cfg = smoke_config();
    let mut parts = Vec::new();
    let mut passed = 0;
    for seed in 0..3 {
        let s = train(cfg.clone(), seed, &root.join(format!("smoke_{seed}")), false).map_err(|e| e.to_string())?;
        let imp = s.r_j_improvement.ok_or("no final evaluation")?;
        let fin = s.final_eval.ok_or("no final evaluation")?;
        if imp >= 0.2 {
            passed += 1;
        }
        parts.push(format!(
            "seed {seed}: r_J {:.5} vs baseline {:.5} ({:+.1}%)",
            fin.mean_r_j,
            s.baseline.mean_r_j,
            100.0 * imp
        ));
    }
    ensure(passed >= 2, || format!("{passed}/3 seeds reach 20%: {}", parts.join("; ")))?;
    Ok(format!("{passed}/3 seeds reach 20%: {}", parts.join("; ")))
}

// ---------- criterion 8: ablation ----------

fn criterion_8(root: &Path) -> Check {
    let mut cfg = smoke_config();
    cfg.run.total_env_steps = 2000;
    cfg.run.eval_interval = 500;
    cfg.run.eval_episodes = 2;
    let variants = [Variant::Tqc, Variant::Droq, Variant::React];
    let out = root.join("ablate");
    let outcome = ablate(&cfg, &variants, &[0, 1], &out, false).map_err(|e| e.to_string())?;
    ensure(outcome.failures.is_empty(), || format!("failures: {:?}", outcome.failures))?;
    let curves = std::fs::read_to_string(out.join("curves.csv")).map_err(|e| e.to_string())?;
    let mut lines = curves.lines();
    ensure(lines.next() == Some("variant,env_step,mean,std,n"), || "bad curves header".into())?;
    for v in &variants {
        let name = v.to_string();
        let rows = curves.lines().filter(|l| l.starts_with(&format!("{name},"))).count();
        ensure(rows == 4, || format!("{name} has {rows} curve rows"))?;
    }
    ensure(out.join("ablation.csv").exists() && out.join("summary.json").exists(), || "missing outputs".into())?;
    let summary: Vec<String> = outcome
        .variants
        .iter()
        .map(|v| format!("{} {:.3}+-{:.3}", v.variant, v.final_mean, v.final_std))
        .collect();
    Ok(format!("{}; ordering {}", summary.join(", "), outcome.ordering.join(" > ")))
}

// ---------- criterion 9: evaluate ----------

fn criterion_9(root: &Path, checkpoint: &Path) -> Check {
    let ck = Checkpoint::load(checkpoint).map_err(|e| e.to_string())?;
    let policy = Scenario::default();
    let out = root.join("eval_policy");
    let rep = evaluate(&ck, &policy, &out).map_err(|e| e.to_string())?;
    ensure(rep.points.len() >= 4, || format!("{} operating points", rep.points.len()))?;
    for i in 0..rep.points.len() {
        for s in ["baseline", "adapted"] {
            let p = out.join(format!("trajectory_op{i}_{s}.csv"));
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            ensure(text.starts_with("t,y_d,y,e,u,w1,w2,kP,kI\n"), || format!("bad header in {}", p.display()))?;
        }
    }
    let adaptation = std::fs::read_to_string(out.join("adaptation.csv")).map_err(|e| e.to_string())?;
    ensure(adaptation.lines().count() == 151, || "adaptation log is not 150 steps".into())?;
    let report_rows = std::fs::read_to_string(out.join("report.csv")).map_err(|e| e.to_string())?.lines().count() - 1;
    ensure(report_rows == rep.points.len(), || format!("report has {report_rows} rows"))?;

    let oracle = Scenario {
        mode: ScenarioMode::Oracle,
        oracle: Some(OracleGains { kp: 1.0, ki: 1.0 }),
        ..Scenario::default()
    };
    let orep = evaluate(&ck, &oracle, &root.join("eval_oracle")).map_err(|e| e.to_string())?;
    ensure(orep.adapted_mean_sse < orep.baseline_mean_sse, || {
        format!("oracle sse {:.4} vs baseline {:.4}", orep.adapted_mean_sse, orep.baseline_mean_sse)
    })?;
    Ok(format!(
        "policy: 150 steps, {} points, mean sse baseline {:.4} adapted {:.4}; oracle kP 1 kI 1: sse {:.4} < baseline {:.4}",
        rep.points.len(),
        rep.baseline_mean_sse,
        rep.adapted_mean_sse,
        orep.adapted_mean_sse,
        orep.baseline_mean_sse
    ))
}

// ---------- criterion 10: reproducibility ----------

fn criterion_10(root: &Path, first: &Path) -> Check {
    let second = root.join("smoke_0_repeat");
    train(smoke_config(), 0, &second, false).map_err(|e| e.to_string())?;
    let mut same = Vec::new();
    for f in ["metrics.csv", "eval.csv", "checkpoint.json", "replay.bin"] {
        let a = std::fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(second.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs"))?;
        same.push(format!("{f} ({} bytes)", a.len()));
    }
    Ok(format!("identical: {}", same.join(", ")))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().to_path_buf();
    let mut results = vec![
        run(1, "B-spline basis and evaluation", criterion_1),
        run(2, "plant step response", criterion_2),
        run(3, "reward arithmetic", criterion_3),
        run(4, "agent defaults", criterion_4),
        run(5, "gradient checks", criterion_5),
        run(6, "bandit learning", criterion_6),
        run(7, "smoke task improvement", || criterion_7(&root)),
        run(8, "ablation sweep", || criterion_8(&root)),
    ];
    let seed0 = root.join("smoke_0");
    let have_seed0 = seed0.join("checkpoint.json").exists();
    results.push(run(9, "evaluation rollout", || {
        ensure(have_seed0, || "no smoke checkpoint to evaluate".into())?;
        criterion_9(&root, &seed0.join("checkpoint.json"))
    }));
    results.push(run(10, "reproducibility", || {
        ensure(have_seed0, || "no first smoke run to compare".into())?;
        criterion_10(&root, &seed0)
    }));
    let passed = results.iter().filter(|&&ok| ok).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}
