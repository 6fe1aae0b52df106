//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Set `ACCEPTANCE_ONLY=1,7` to run a subset.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::process::Command;
use std::time::Instant;

use common::oracle::{brute_borrow, brute_nb, jackknife_plus};
use hybridtrial::adaptive::{adaptive_threshold, AdaptiveSettings};
use hybridtrial::conformal::{cvplus_pvalues, full_conformal_pvalues, jackknife_plus_pvalues, select_ecs, split_conformal_pvalues};
use hybridtrial::data::write_dataset;
use hybridtrial::estimators::{estimate_csb, estimate_difmeans, estimate_fb, estimate_nb};
use hybridtrial::frt::{enumerate_frt, run_frt, FrtConfig};
use hybridtrial::seed::stream_rng;
use hybridtrial::simlab::{generate_scenario, population_ate, run_replications, Hypothesis, ScenarioConfig, SimulationRun, SimulationSettings};
use hybridtrial::{partition, ColumnMapping, ConformalMethod, DesignSpec, EstimatorKind, EstimatorSpec, NuisanceConfig};
use rand::Rng;
use rayon::prelude::*;

type Check = Result<String, String>;

const ALPHA: f64 = 0.05;
const REPS: usize = 500;

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

/// Criterion 1: exact size of the FRT on an enumerable design.
fn frt_exactness() -> Check {
    let start = Instant::now();
    let data = common::dataset(&mut stream_rng(101, 0), 4, 4, 4, 1);
    let sets = partition(&data).unwrap();
    let design = DesignSpec::bernoulli(0.5).unwrap();
    let spec = EstimatorSpec::new(EstimatorKind::FullBorrow);
    let cfg = NuisanceConfig::default();
    let en = enumerate_frt(&data, &sets, &design, &spec, &cfg, 11).map_err(|e| e.to_string())?;
    ensure(en.distinct(), "statistic values are not distinct".into())?;
    let size = en.size();
    let mut parts = vec![format!("|A|={size} (excluded {})", en.excluded)];
    for alpha in [0.05, 0.10, 0.25] {
        let got = en.rejection_probability(alpha);
        let want = (alpha * size as f64).floor() / size as f64;
        ensure(got == want, format!("alpha={alpha}: P(p<=alpha)={got} but floor(alpha|A|)/|A|={want}"))?;
        parts.push(format!("P(p<={alpha})={got}"));
    }
    let mc = run_frt(&data, &sets, &design, &FrtConfig::new(spec, 10_000, 12), &cfg).map_err(|e| e.to_string())?;
    ensure((mc.p_value - en.p_value).abs() <= 0.02, format!("Monte Carlo p {} vs exact {}", mc.p_value, en.p_value))?;
    parts.push(format!("exact p={:.4}, MC p={:.4}", en.p_value, mc.p_value));
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(parts.join(", "))
}

struct SimRuns {
    null: Vec<(f64, SimulationRun)>,
    alt0: SimulationRun,
    alt8: SimulationRun,
}

fn scenario(b: f64, hypothesis: Hypothesis) -> ScenarioConfig {
    ScenarioConfig { name: format!("b{b}-{hypothesis:?}"), bias_b: b, hypothesis, ..Default::default() }
}

fn run_sims() -> Result<SimRuns, String> {
    let settings = SimulationSettings { replications: REPS, frt_resamples: 1000, alpha: ALPHA, ..Default::default() };
    let go = |b: f64, h: Hypothesis, seed: u64| run_replications(&scenario(b, h), &settings, seed).map_err(|e| e.to_string());
    let mut null = Vec::new();
    for (k, b) in [0.0, 4.0, 8.0].into_iter().enumerate() {
        null.push((b, go(b, Hypothesis::SharpNull, 2000 + k as u64)?));
    }
    Ok(SimRuns { null, alt0: go(0.0, Hypothesis::Alternative, 3000)?, alt8: go(8.0, Hypothesis::Alternative, 3008)? })
}

fn metric<'a>(run: &'a SimulationRun, method: &str) -> &'a hybridtrial::simlab::Metrics {
    &run.metrics.iter().find(|m| m.method == method).expect("method present").metrics
}

const NB: &str = "nb";
const FB: &str = "fb";
const CSB: &str = "csb(adaptive)";

/// Criterion 2: type I error under the sharp null.
fn type_one_error(s: &SimRuns) -> Check {
    let bound = ALPHA + 3.0 * (ALPHA * (1.0 - ALPHA) / REPS as f64).sqrt();
    let mut parts = Vec::new();
    let mut worst = Vec::new();
    for (b, run) in &s.null {
        let rates: Vec<String> = [NB, FB, CSB]
            .iter()
            .map(|m| {
                let r = metric(run, m).rejection_rate.unwrap();
                if r > bound {
                    worst.push(format!("b={b} {m} rate {r}"));
                }
                format!("{m}={r:.3}")
            })
            .collect();
        parts.push(format!("b={b}: {}", rates.join(" ")));
    }
    ensure(worst.is_empty(), format!("exceeds {bound:.4}: {}", worst.join("; ")))?;
    Ok(format!("bound {bound:.4}; {}", parts.join("; ")))
}

/// Criterion 3: MSE ratios without hidden bias.
fn efficiency(s: &SimRuns) -> Check {
    let nb = metric(&s.alt0, NB).mse;
    let fb = metric(&s.alt0, FB).mse / nb;
    let csb = metric(&s.alt0, CSB).mse / nb;
    let msg = format!("MSE(FB)/MSE(NB)={fb:.3} (target 0.58±0.15), MSE(CSB)/MSE(NB)={csb:.3} (target 0.80±0.15)");
    ensure((fb - 0.58).abs() <= 0.15 && (csb - 0.80).abs() <= 0.15, msg.clone())?;
    Ok(msg)
}

/// Criterion 4: relative power gains without hidden bias.
fn power_gain(s: &SimRuns) -> Check {
    let nb = metric(&s.alt0, NB).rejection_rate.unwrap();
    let fb = metric(&s.alt0, FB).rejection_rate.unwrap() / nb - 1.0;
    let csb = metric(&s.alt0, CSB).rejection_rate.unwrap() / nb - 1.0;
    let msg = format!("power NB={nb:.3}; gain FB={:+.1}% (target +46±15), CSB={:+.1}% (target +45±15)", 100.0 * fb, 100.0 * csb);
    ensure((fb - 0.46).abs() <= 0.15 && (csb - 0.45).abs() <= 0.15, msg.clone())?;
    Ok(msg)
}

/// Criterion 5: direction checks under large hidden bias.
fn large_bias(s: &SimRuns) -> Check {
    let pow = |m| metric(&s.alt8, m).rejection_rate.unwrap();
    let c = metric(&s.alt8, CSB);
    let msg = format!(
        "power NB={:.3} FB={:.3} CSB={:.3}; CSB |bias|={:.4} vs 0.25*SD={:.4}",
        pow(NB),
        pow(FB),
        pow(CSB),
        c.bias.abs(),
        0.25 * c.sd
    );
    ensure(pow(CSB) > pow(NB) && pow(FB) < pow(NB) && c.bias.abs() <= 0.25 * c.sd, msg.clone())?;
    Ok(msg)
}

/// Criterion 6: marginal validity of conformal p-values for an
/// exchangeable external control.
fn conformal_validity() -> Check {
    let n = 2000;
    let cfg = ScenarioConfig { bias_b: 0.0, ec_noise_scale: 1.0, ..Default::default() };
    // First external of each replicate: independent draws across replicates.
    let draws: Vec<([f64; 4], usize)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let (d, _) = generate_scenario(&cfg, &mut stream_rng(6000, r as u64)).unwrap();
            let sets = partition(&d).unwrap();
            let mut rng = stream_rng(6001, r as u64);
            let split = split_conformal_pvalues(&d, &sets, 0.25, &mut rng).unwrap().pvalues[0];
            let full = full_conformal_pvalues(&d, &sets).unwrap().pvalues[0];
            let cv = cvplus_pvalues(&d, &sets, 10, &mut rng).unwrap().pvalues[0];
            let jk = jackknife_plus_pvalues(&d, &sets).unwrap().pvalues[0];
            ([split, full, cv, jk], sets.rct_controls.len())
        })
        .collect();
    let min_controls = draws.iter().map(|d| d.1).min().unwrap() as f64;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for gamma in [0.1, 0.2] {
        let se = 3.0 * (gamma * (1.0 - gamma) / n as f64).sqrt();
        let k = 10.0;
        let bounds = [gamma + se, gamma + se, 2.0 * gamma + (1.0 - k / min_controls) / (k + 1.0) + se, 2.0 * gamma];
        for (m, name) in ["split", "full", "cv+", "jackknife+"].iter().enumerate() {
            let rate = draws.iter().filter(|d| d.0[m] <= gamma).count() as f64 / n as f64;
            if rate > bounds[m] {
                failures.push(format!("{name} at gamma={gamma}: {rate} > {:.4}", bounds[m]));
            }
            parts.push(format!("{name}@{gamma}={rate:.4}<={:.3}", bounds[m]));
        }
    }
    ensure(failures.is_empty(), failures.join("; "))?;
    Ok(parts.join(" "))
}

/// Criterion 7: algebraic identities and brute-force agreement.
fn identities() -> Check {
    let cfg = NuisanceConfig::default();
    let mut rng = stream_rng(7000, 0);
    let mut oracle_checks = 0;
    let mut worst_endpoint = 0.0_f64;
    let mut worst_oracle = 0.0_f64;
    for k in 0..100u64 {
        // Endpoint identities on n ≤ 40.
        let (n1, n0, ne) = (rng.random_range(5..=14), rng.random_range(11..=14), rng.random_range(1..=12));
        let d = common::dataset(&mut rng, n1, n0, ne, 2);
        let sets = partition(&d).unwrap();
        let design = DesignSpec::bernoulli(rng.random_range(0.3..0.7)).unwrap();
        let method = [ConformalMethod::split(), ConformalMethod::Full, ConformalMethod::CvPlus { folds: 5 }, ConformalMethod::JackknifePlus][k as usize % 4];
        let nb = estimate_nb(&d, &sets, &design, &cfg).unwrap().value;
        let fb = estimate_fb(&d, &sets, &design, &cfg).unwrap().value;
        let c1 = estimate_csb(&d, &sets, &design, 1.0, &method, &cfg, &mut stream_rng(k, 1)).unwrap().0.value;
        let c0 = estimate_csb(&d, &sets, &design, 0.0, &method, &cfg, &mut stream_rng(k, 2)).unwrap().0.value;
        worst_endpoint = worst_endpoint.max((c1 - nb).abs()).max((c0 - fb).abs());
        let jk = jackknife_plus_pvalues(&d, &sets).unwrap();
        let cv = cvplus_pvalues(&d, &sets, sets.rct_controls.len(), &mut stream_rng(k, 3)).unwrap();
        ensure(
            jk.pvalues.iter().zip(&cv.pvalues).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("dataset {k}: CV+ with |C| folds differs from jackknife+"),
        )?;

        // Brute-force oracle on n ≤ 12.
        let (n1, n0, ne) = (rng.random_range(3..=4), rng.random_range(4..=5), rng.random_range(2..=3));
        let d = common::dataset(&mut rng, n1, n0, ne, 1);
        let sets = partition(&d).unwrap();
        let e = rng.random_range(0.3..0.7);
        let design = DesignSpec::bernoulli(e).unwrap();
        let mean = |idx: &[usize]| idx.iter().map(|&i| d.outcome()[i]).sum::<f64>() / idx.len() as f64;
        worst_oracle = worst_oracle.max((estimate_difmeans(&d, &sets).unwrap().value - (mean(&sets.treated) - mean(&sets.rct_controls))).abs());
        worst_oracle = worst_oracle.max((estimate_nb(&d, &sets, &design, &cfg).unwrap().value - brute_nb(&d, &sets, e)).abs());
        if let Some(o) = brute_borrow(&d, &sets, e, &sets.external) {
            worst_oracle = worst_oracle.max((estimate_fb(&d, &sets, &design, &cfg).unwrap().value - o).abs());
            oracle_checks += 1;
        }
        let gamma = 0.3;
        let pvals: Vec<f64> = sets.external.iter().map(|&j| jackknife_plus(&d, &sets, j)).collect();
        let chosen = select_ecs(&pvals, &sets.external, gamma);
        let csb = estimate_csb(&d, &sets, &design, gamma, &ConformalMethod::JackknifePlus, &cfg, &mut stream_rng(k, 4)).unwrap().0.value;
        let brute = if chosen.is_empty() { Some(brute_nb(&d, &sets, e)) } else { brute_borrow(&d, &sets, e, &chosen) };
        if let Some(o) = brute {
            worst_oracle = worst_oracle.max((csb - o).abs());
            oracle_checks += 1;
        }
    }
    let msg = format!("max |CSB(1)-NB|,|CSB(0)-FB| = {worst_endpoint:.1e}; max oracle gap = {worst_oracle:.1e} over {oracle_checks} borrowing checks; CV+(K=|C|) == jackknife+ bitwise on 100 datasets");
    ensure(worst_endpoint <= 1e-12 && worst_oracle <= 1e-10 && oracle_checks >= 150, msg.clone())?;
    Ok(msg)
}

/// Criterion 8: behavior of the adaptive threshold.
fn adaptive_behavior() -> Check {
    let cfg = NuisanceConfig::default();
    let method = ConformalMethod::default();
    let settings = AdaptiveSettings::default();
    let mut parts = Vec::new();
    let mut verdict = Ok(());
    for b in [0.0, 8.0] {
        let sc = scenario(b, Hypothesis::Alternative);
        let truth = population_ate(&sc);
        let reps: Vec<Result<(f64, f64, f64, Vec<f64>, bool), String>> = (0..200u64)
            .into_par_iter()
            .map(|r| {
                let (d, _) = generate_scenario(&sc, &mut stream_rng(8000 + b as u64, r)).map_err(|e| e.to_string())?;
                let sets = partition(&d).map_err(|e| e.to_string())?;
                let design = sc.design();
                let mut rng = stream_rng(8100 + b as u64, r);
                let prof = adaptive_threshold(&d, &sets, &design, &method, &settings, &cfg, &mut rng).map_err(|e| e.to_string())?;
                let last = prof.grid.iter().position(|&g| g == 1.0).unwrap();
                let identity = prof.mse_hat[last].to_bits() == prof.var_gamma[last].to_bits();
                let est = estimate_csb(&d, &sets, &design, prof.gamma_star, &method, &cfg, &mut rng).map_err(|e| e.to_string())?.0.value;
                let fb = estimate_fb(&d, &sets, &design, &cfg).map_err(|e| e.to_string())?.value;
                Ok((prof.gamma_star, est, fb, prof.tau_hat.clone(), identity))
            })
            .collect();
        let reps: Vec<_> = reps.into_iter().collect::<Result<_, _>>()?;
        let n = reps.len() as f64;
        let mut gammas: Vec<f64> = reps.iter().map(|r| r.0).collect();
        gammas.sort_by(f64::total_cmp);
        let median = 0.5 * (gammas[99] + gammas[100]);
        let mse_adaptive = reps.iter().map(|r| (r.1 - truth).powi(2)).sum::<f64>() / n;
        let mse_fb = reps.iter().map(|r| (r.2 - truth).powi(2)).sum::<f64>() / n;
        let grid_len = reps[0].3.len();
        let oracle_mse = (0..grid_len).map(|g| reps.iter().map(|r| (r.3[g] - truth).powi(2)).sum::<f64>() / n).fold(f64::INFINITY, f64::min);
        let identity_all = reps.iter().all(|r| r.4);
        let not_zero = reps.iter().filter(|r| r.0 != 0.0).count() as f64 / n;
        parts.push(format!(
            "b={b}: median gamma={median}, MSE(adaptive)={mse_adaptive:.4}, MSE(gamma=0)={mse_fb:.4}, excess over best fixed gamma={:.4}, gamma!=0 in {:.0}%",
            mse_adaptive - oracle_mse,
            100.0 * not_zero
        ));
        if !identity_all {
            verdict = Err(format!("b={b}: mse_hat(1) != var_gamma(1) in some run"));
        }
        if b == 0.0 && !(median == 0.0 || median == 0.1) {
            verdict = Err(format!("b=0 median gamma {median} not in {{0, 0.1}}"));
        }
        if b == 8.0 && !(mse_adaptive < mse_fb) {
            verdict = Err(format!("b=8 MSE(adaptive) {mse_adaptive} not below MSE(gamma=0) {mse_fb}"));
        }
    }
    let msg = parts.join("; ");
    verdict.map_err(|e| format!("{e}; {msg}"))?;
    Ok(msg)
}

/// Criterion 9: byte-identical CLI output across worker counts.
fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = ScenarioConfig { name: "det".into(), bias_b: 4.0, ..Default::default() };
    let (d, _) = generate_scenario(&sc, &mut stream_rng(9000, 0)).unwrap();
    let csv = dir.path().join("trial.csv");
    write_dataset(&d, &ColumnMapping::default(), fs::File::create(&csv).unwrap()).unwrap();
    let sc_path = dir.path().join("scenario.json");
    fs::write(&sc_path, serde_json::to_string(&ScenarioConfig { n1: 20, n0: 15, n_e: 20, ..sc }).unwrap()).unwrap();

    let mut compared = 0;
    for (cmd, src_flag, src) in [("analyze", "--input", &csv), ("simulate", "--scenario", &sc_path)] {
        let mut outputs: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
        for threads in ["1", "4", "8"] {
            let out = dir.path().join(format!("{cmd}-{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_hybridtrial"))
                .args([cmd, src_flag, src.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads, "--B", "199", "--L", "50", "--replications", "12", "--seed", "99"])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), format!("{cmd} at {threads} threads failed: {}", String::from_utf8_lossy(&status.stderr)))?;
            let mut files = BTreeMap::new();
            for entry in fs::read_dir(&out).unwrap() {
                let entry = entry.unwrap();
                files.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path()).unwrap());
            }
            outputs.push(files);
        }
        for other in &outputs[1..] {
            ensure(other == &outputs[0], format!("{cmd} outputs differ across thread counts"))?;
        }
        compared += outputs[0].len();
    }
    Ok(format!("{compared} output files byte-identical at 1, 4 and 8 workers"))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut timed = |k: u32, name: &'static str, f: &dyn Fn() -> Check| {
        if wanted(k) {
            let t = Instant::now();
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
            let secs = t.elapsed().as_secs_f64();
            print_line(k, name, &r, secs);
            results.push((k, name, r, secs));
        }
    };
    timed(1, "FRT exactness by enumeration", &frt_exactness);
    timed(6, "conformal marginal validity", &conformal_validity);
    timed(7, "estimator identities", &identities);
    timed(8, "adaptive threshold behavior", &adaptive_behavior);
    timed(9, "determinism across worker counts", &determinism);
    if [2, 3, 4, 5].into_iter().any(wanted) {
        let t = Instant::now();
        let sims = run_sims();
        let secs = t.elapsed().as_secs_f64();
        println!("  (simulation runs for criteria 2-5: {secs:.0}s)");
        let checks: [(u32, &'static str, fn(&SimRuns) -> Check); 4] = [
            (2, "type I error under hidden bias", type_one_error),
            (3, "b=0 efficiency gains", efficiency),
            (4, "b=0 power gains", power_gain),
            (5, "large-bias direction checks", large_bias),
        ];
        for (k, name, f) in checks {
            if wanted(k) {
                let r = match &sims {
                    Ok(s) => f(s),
                    Err(e) => Err(format!("simulation failed: {e}")),
                };
                print_line(k, name, &r, 0.0);
                results.push((k, name, r, 0.0));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary:");
    for (k, name, r, _) in &results {
        println!("  criterion {k} [{}] {name}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| r.2.is_err()) {
        std::process::exit(1);
    }
}

fn print_line(k: u32, name: &str, r: &Check, secs: f64) {
    let time = if secs > 0.0 { format!(" ({secs:.1}s)") } else { String::new() };
    match r {
        Ok(msg) => println!("criterion {k}: PASS {name}{time}: {msg}"),
        Err(msg) => println!("criterion {k}: FAIL {name}{time}: {msg}"),
    }
}
