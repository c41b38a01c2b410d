//! Acceptance criteria, run sequentially with one PASS/FAIL line each.

mod common;

use std::time::{Duration, Instant};

use common::{centered, dot2, gradient_errors, power_deflation, random_layer, random_map};
use gaunet::bench::{run_bench, BenchConfig};
use gaunet::density::{analytic_noise_moments, boundary_mass_loss, generate_density_map, monte_carlo_noise_moments, PointAnnotations};
use gaunet::experiments::{run_robustness_study, run_variance_study, RobustnessStudyConfig, StudyData, VarianceStudyConfig};
use gaunet::gconv::{forward_lra_oracle, forward_lra_oracle_with, MeanPlacement, OracleGuard};
use gaunet::kernels::sample_kernel_bank;
use gaunet::lowrank::pca_select;
use gaunet::net::{train, NetworkConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = [1, 2, 4, 8, 16][i % 5];
        let (c_in, c_out) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let radius = rng.random_range(1..=4);
        let layer = random_layer(&mut rng, c_in, c_out, k, radius, true);
        let x = random_map(&mut rng, c_in, h, w);
        let d = layer.forward_fast(&x).unwrap().max_abs_diff(&forward_lra_oracle(&x, &layer).unwrap());
        worst = worst.max(d);
    }
    let t = start.elapsed();
    Outcome {
        pass: worst <= 1e-10 && within(Duration::from_secs(60), t),
        detail: format!("100 instances, max |Δ| = {worst:.3e}, {t:.2?}"),
    }
}

fn subpixel_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let fracs = [0.25, 0.5, 0.75];
    let mut cases = 0;
    for &fy in &fracs {
        for &fx in &fracs {
            for k in [1, 4, 8] {
                let mut layer = random_layer(&mut rng, 2, 2, k, 3, true);
                for m in &mut layer.means {
                    m[0] = rng.random_range(-3..=2) as f64 + fy;
                    m[1] = rng.random_range(-3..=2) as f64 + fx;
                }
                let x = random_map(&mut rng, 2, 24, 20);
                let oracle = forward_lra_oracle_with(&x, &layer, MeanPlacement::BilinearPreshift, OracleGuard::LRA).unwrap();
                worst = worst.max(layer.forward_fast(&x).unwrap().max_abs_diff(&oracle));
                cases += 1;
            }
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("{cases} instances over 9 fractional offsets, max |Δ| = {worst:.3e}"),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for i in 0..20 {
        let mut layer = random_layer(&mut rng, 1, 1, [1, 2, 4][i % 3], 2, false);
        layer.train_means = true;
        let x = random_map(&mut rng, 1, 8, 8);
        let up = random_map(&mut rng, 1, 8, 8);
        for (class, err) in gradient_errors(&layer, &x, &up, 1e-5) {
            match worst.iter_mut().find(|(c, _)| *c == class) {
                Some(slot) => slot.1 = slot.1.max(err),
                None => worst.push((class, err)),
            }
        }
    }
    let t = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let listing: Vec<String> = worst.iter().map(|(c, e)| format!("{c} {e:.1e}")).collect();
    Outcome {
        pass: worst.len() == 6 && max <= 1e-4 && within(Duration::from_secs(120), t),
        detail: format!("20 instances, max rel err per class [{}], {t:.2?}", listing.join(", ")),
    }
}

fn density_mass() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_slack = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(16..=64), rng.random_range(16..=64));
        let n = rng.random_range(0..=80);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
            .collect();
        let beta = rng.random_range(1.0..9.0);
        let ann = PointAnnotations::new(pts, h, w).unwrap();
        let map = generate_density_map(&ann, beta).unwrap();
        let allowed = 0.01 * n as f64 + boundary_mass_loss(&ann, beta);
        let slack = allowed - (map.sum() - n as f64).abs();
        if slack < 0.0 {
            failures += 1;
        }
        worst_slack = worst_slack.min(slack);
    }
    Outcome {
        pass: failures == 0,
        detail: format!("50 sets, {failures} violations, smallest slack {worst_slack:.3e}"),
    }
}

fn noise_moments() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<[f64; 2]> = (0..12)
        .map(|_| [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)])
        .collect();
    let ann = PointAnnotations::new(pts, 32, 32).unwrap();
    let trials = 10_000;
    let mut parts = Vec::new();
    let mut pass = true;
    for eps in [1.0, 2.0] {
        let exact = analytic_noise_moments(&ann, 4.0, eps).unwrap();
        let mc = monte_carlo_noise_moments(&ann, 4.0, eps, trials, 6).unwrap();
        let ok = exact
            .mean_map
            .iter()
            .zip(&exact.var_map)
            .zip(&mc.mean_map)
            .filter(|((m, v), s)| (*s - *m).abs() <= 3.0 * (*v / trials as f64).sqrt() + 1e-15)
            .count();
        let frac = ok as f64 / exact.mean_map.len() as f64;
        pass &= frac >= 0.99;
        parts.push(format!("eps {eps}: {:.2}% of pixels", 100.0 * frac));
    }
    let t = start.elapsed();
    Outcome {
        pass: pass && within(Duration::from_secs(300), t),
        detail: format!("{} within 3 SE, {t:.2?}", parts.join(", ")),
    }
}

fn pca_certification() -> Outcome {
    let mut worst_orth = 0.0f64;
    let mut worst_eig = 0.0f64;
    let mut retained = Vec::new();
    for seed in 0..5 {
        let bank = sample_kernel_bank(100, 1.0, (-0.5, 0.5), Some(4), seed).unwrap();
        let basis = pca_select(&bank, 16).unwrap();
        retained.push(basis.k());
        let vs = &basis.grids[usize::from(basis.has_mean_component)..];
        for (i, a) in vs.iter().enumerate() {
            assert_eq!(a.len(), 81);
            for (j, b) in vs.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((dot2(a, b) - want).abs());
            }
        }
        let (vals, _) = power_deflation(&centered(&bank), basis.eigenvalues.len(), seed + 1000);
        for (lib, oracle) in basis.eigenvalues.iter().zip(&vals) {
            worst_eig = worst_eig.max((lib - oracle).abs() / oracle.abs());
        }
    }
    Outcome {
        pass: worst_orth <= 1e-8 && worst_eig <= 1e-6,
        detail: format!(
            "5 banks of 100 kernels (81-dim), K retained {retained:?}, orthonormality {worst_orth:.1e}, eigenvalue rel err {worst_eig:.1e}"
        ),
    }
}

fn speedup_ladder() -> Outcome {
    let start = Instant::now();
    let report = run_bench(&BenchConfig::default()).unwrap();
    let t = start.elapsed();
    let f = |v| report.median(v, "forward").unwrap();
    let (fast, lra, vanilla) = (f("fast"), f("lra"), f("vanilla"));
    let ratio = vanilla / fast;
    let predicted = report.op_counts.vanilla_over_fast();
    Outcome {
        pass: report.ordering_holds() && ratio >= 5.0 && predicted == 324.0 && within(Duration::from_secs(600), t),
        detail: format!(
            "median forward ms fast {fast:.3} < lra {lra:.3} < vanilla {vanilla:.3}; vanilla/fast {ratio:.1}x; predicted op ratio {predicted}x; {t:.1?}"
        ),
    }
}

fn study_network() -> NetworkConfig {
    NetworkConfig::tiny()
}

fn noise_robustness() -> Outcome {
    let start = Instant::now();
    let cfg = RobustnessStudyConfig {
        network: study_network(),
        data: StudyData::default(),
        ..RobustnessStudyConfig::default()
    };
    let (_, curves) = run_robustness_study(&cfg).unwrap();
    let t = start.elapsed();
    let get = |name: &str| curves.iter().find(|c| c.variant == name).unwrap();
    let (g, s) = (get("gaussian"), get("standard"));
    let fmt = |c: &gaunet::experiments::DegradationCurve| {
        let pts: Vec<String> = c.mean_mae.iter().zip(&c.se_mae).map(|(m, e)| format!("{m:.2}±{e:.2}")).collect();
        format!("{} [{}] ratio {:.3}", c.variant, pts.join(" "), c.relative_degradation())
    };
    let trend = g.relative_degradation() < s.relative_degradation();
    let mono = g.non_decreasing_within_se() && s.non_decreasing_within_se();
    Outcome {
        pass: trend && mono && within(Duration::from_secs(3600), t),
        detail: format!(
            "ladder {:?}, {} seeds; {}; {}; gaussian ratio < standard: {trend}; both non-decreasing within SE: {mono}; {t:.1?}",
            cfg.ladder,
            cfg.seeds.len(),
            fmt(s),
            fmt(g)
        ),
    }
}

fn rerun_variance() -> Outcome {
    let start = Instant::now();
    let cfg = VarianceStudyConfig {
        network: study_network(),
        data: StudyData::default(),
        ..VarianceStudyConfig::default()
    };
    let report = run_variance_study(&cfg).unwrap();
    let t = start.elapsed();
    let m = |k: &str| report.metric(k).unwrap_or(f64::NAN);
    let (g, s) = (m("gaussian_mean_var_whole"), m("standard_mean_var_whole"));
    Outcome {
        pass: g <= s && within(Duration::from_secs(3600), t),
        detail: format!(
            "{} replicas, radius {}: mean count variance gaussian {g:.4} vs standard {s:.4} (high-density {:.4} vs {:.4}, low-density {:.4} vs {:.4}); {t:.1?}",
            cfg.replicas,
            cfg.noise_radius,
            m("gaussian_mean_var_high"),
            m("standard_mean_var_high"),
            m("gaussian_mean_var_low"),
            m("standard_mean_var_low"),
        ),
    }
}

fn training_sanity() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = StudyData::default().generate().unwrap();
    let (_, report) = train(&NetworkConfig::tiny(), &train_set, &TrainOptions::default(), Some(&test_set)).unwrap();
    let t = start.elapsed();
    let last = report.epochs.last().unwrap();
    let mae = last.eval_mae.unwrap();
    let bound = 0.15 * test_set.mean_count();
    let medians: Vec<f64> = report.epochs.iter().map(|e| e.loss_median).collect();
    let monotone = medians.windows(2).all(|w| w[1] < w[0]);
    Outcome {
        pass: report.epochs.len() == 30 && mae <= bound && monotone && within(Duration::from_secs(900), t),
        detail: format!(
            "{} epochs, test MAE {mae:.3} vs bound {bound:.3} (mean count {:.2}), epoch-median loss {:.4} -> {:.4} monotone: {monotone}; {t:.1?}",
            report.epochs.len(),
            test_set.mean_count(),
            medians[0],
            medians[medians.len() - 1]
        ),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("subpixel equivalence", subpixel_equivalence),
        ("gradient suite", gradient_suite),
        ("density mass", density_mass),
        ("noise-moment agreement", noise_moments),
        ("PCA certification", pca_certification),
        ("speedup ladder", speedup_ladder),
        ("noise robustness trend", noise_robustness),
        ("rerun-variance trend", rerun_variance),
        ("training sanity", training_sanity),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", i + 1, outcome.detail);
        if !outcome.pass {
            failed.push(format!("{}. {name}", i + 1));
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
