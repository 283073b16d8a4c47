//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`).

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use gpstruct::clustering::{crp_log_prior, ClusterConfig};
use gpstruct::gp::{log_marginal, Dataset};
use gpstruct::inference::{
    chain_rng, unconstrained_log_joint, HyperMode, Model, ScheduleConfig, TraceState,
};
use gpstruct::io::{ingest_csv, HoldoutMode, HoldoutSpec};
use gpstruct::kernel::{HyperSite, KernelAst, ROOT};
use gpstruct::pipeline::{
    cluster_series, compare_inference, fit_structure, CompareStart, MethodRun, AUX_STREAM,
};
use gpstruct::prior::{
    ast_log_prior, sample_ast, sample_hyper, structure_log_prior, subtree_log_prior, PriorConfig,
};
use gpstruct::synth::{cluster_demo, synth_data, SynthKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = fn() -> Outcome;

/// Total variation between two distributions over the same buckets.
fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn constrained(ast: &KernelAst) -> Vec<f64> {
    ast.hyper_addresses()
        .into_iter()
        .map(|a| ast.hyper(a).expect("own address").constrained)
        .collect()
}

fn gradient_matches_finite_differences() -> Outcome {
    let model = Model {
        prior: PriorConfig {
            operator_weights: [0.5, 0.5, 0.0],
            ..PriorConfig::default()
        },
        ..Model::default()
    };
    let data = synth_data(SynthKind::LinPlusPer, 10, &mut chain_rng(1, AUX_STREAM)).unwrap();
    let mut rng = chain_rng(1, 0);
    let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
    let (mut trees, mut sites, mut worst) = (0, 0, 0.0_f64);
    // sites off at the reference step, and their best agreement over other steps
    let (mut off, mut refined_worst) = (0, 0.0_f64);
    while trees < 200 {
        let Ok(state) = TraceState::from_prior(vec![data.clone()], model.clone(), &mut rng) else {
            continue;
        };
        trees += 1;
        for (addr, g) in state.hyper_gradient().unwrap() {
            let site = *state.ast().hyper(addr).unwrap();
            let central = |eps: f64| {
                let at = |dt: f64| {
                    let mut ast = state.ast().clone();
                    ast.set_hyper(
                        addr,
                        HyperSite::from_unconstrained(site.unconstrained + dt, site.offset),
                    )
                    .unwrap();
                    unconstrained_log_joint(state.model(), &ast, state.data()).unwrap()
                };
                (at(eps) - at(-eps)) / (2.0 * eps)
            };
            let err = rel(g, central(1e-5));
            sites += 1;
            worst = worst.max(err);
            if err > 1e-5 {
                off += 1;
                let best = [1e-4, 1e-6, 1e-7]
                    .map(|eps| rel(g, central(eps)))
                    .into_iter()
                    .fold(err, f64::min);
                refined_worst = refined_worst.max(best);
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!(
            "{trees} trees, {sites} sites, worst relative error {worst:.2e}; \
             {off} sites above 1e-5 at step 1e-5, within {refined_worst:.1e} at their best step"
        ),
    )
}

/// `log N(y; 0, K + σ²I)` through an LU factorization and explicit solve.
fn dense_log_density(ast: &KernelAst, data: &Dataset, noise_var: f64) -> f64 {
    let n = data.len();
    let k = ast.cov_matrix(ROOT, &data.xs).unwrap() + DMatrix::identity(n, n) * noise_var;
    let lu = k.lu();
    let y = data.y_vector();
    let alpha = lu.solve(&y).expect("nonsingular");
    -0.5 * y.dot(&alpha)
        - 0.5 * lu.determinant().ln()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn likelihood_matches_dense_oracle() -> Outcome {
    let prior = PriorConfig::default();
    let mut rng = chain_rng(2, 0);
    let (mut checked, mut worst) = (0, 0.0_f64);
    while checked < 1000 {
        let ast = sample_ast(&prior, ROOT, &mut rng);
        let n = rng.random_range(1..=8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let data = Dataset::new(xs, ys).unwrap();
        let Ok(fast) = log_marginal(&ast, &data, 0.1) else {
            continue;
        };
        let dense = dense_log_density(&ast, &data, 0.1);
        worst = worst.max((fast - dense).abs() / fast.abs().max(dense.abs()).max(1.0));
        checked += 1;
    }
    outcome(
        worst <= 1e-9,
        format!("{checked} instances, worst relative error {worst:.2e}"),
    )
}

fn mh_ratio_collapses_to_likelihood_ratio() -> Outcome {
    let model = Model::default();
    let data = synth_data(SynthKind::LinPlusPer, 8, &mut chain_rng(3, AUX_STREAM)).unwrap();
    let p = &model.prior;
    let mut rng = chain_rng(3, 0);
    let (mut checked, mut worst) = (0, 0.0_f64);
    while checked < 1000 {
        let ast = sample_ast(p, ROOT, &mut rng);
        let nodes = ast.indices();
        let node = nodes[rng.random_range(0..nodes.len())];
        let mut prop = ast.clone();
        prop.replace_subtree(node, sample_ast(p, node, &mut rng));
        let (Ok(l0), Ok(l1)) = (
            log_marginal(&ast, &data, model.noise_var),
            log_marginal(&prop, &data, model.noise_var),
        ) else {
            continue;
        };
        // target ratio times reverse over forward proposal density
        let full = (ast_log_prior(p, &prop) + l1) - (ast_log_prior(p, &ast) + l0)
            + subtree_log_prior(p, &ast, node)
            - subtree_log_prior(p, &prop, node);
        let bare = l1 - l0;
        worst = worst.max((full - bare).abs() / bare.abs().max(1.0));
        checked += 1;
    }
    outcome(
        worst <= 1e-10,
        format!("{checked} proposals, worst relative gap {worst:.2e}"),
    )
}

/// Marginal likelihood of a one-site leaf under the `Exp(1)` prior, by the
/// midpoint rule in `u = exp(-h)`.
fn integrated_likelihood(symbol: &str, data: &Dataset, noise_var: f64) -> f64 {
    let m = 200_000;
    (0..m)
        .map(|i| {
            let u = (i as f64 + 0.5) / m as f64;
            let ast = KernelAst::from_json_str(&format!(r#"["{symbol}", {}]"#, -u.ln())).unwrap();
            log_marginal(&ast, data, noise_var).unwrap().exp()
        })
        .sum::<f64>()
        / m as f64
}

fn truncated_grammar_posterior() -> Outcome {
    let model = Model {
        prior: PriorConfig {
            kernel_weights: [0.5, 0.5, 0.0, 0.0, 0.0],
            max_depth: 1,
            ..PriorConfig::default()
        },
        ..Model::default()
    };
    let data = Dataset::new(
        vec![0.0, 2.5, 5.0, 7.5, 10.0],
        vec![0.9, 0.3, 1.2, 0.4, 0.7],
    )
    .unwrap();
    let wn = integrated_likelihood("WN", &data, model.noise_var);
    let c = integrated_likelihood("C", &data, model.noise_var);
    let exact = [wn / (wn + c), c / (wn + c)];
    let mut rng = chain_rng(4, 0);
    let mut state = TraceState::from_prior(vec![data], model, &mut rng).unwrap();
    let steps = 100_000;
    let mut wn_visits = 0usize;
    for _ in 0..steps {
        state.mh_structure_step(true, &mut rng).unwrap();
        wn_visits += usize::from(state.ast().structure_label() == "WN");
    }
    let occupancy = [
        wn_visits as f64 / steps as f64,
        1.0 - wn_visits as f64 / steps as f64,
    ];
    let tv = total_variation(&exact, &occupancy);
    outcome(
        tv <= 0.02,
        format!(
            "P(WN|D) exact {:.4} vs chain {:.4}, TV {tv:.4}",
            exact[0], occupancy[0]
        ),
    )
}

/// Index of the multiple of 3 the period is near, if any.
fn period_mode(period: f64) -> Option<u32> {
    let k = (period / 3.0).round();
    (k >= 1.0 && (period - 3.0 * k).abs() < 0.75).then_some(k as u32)
}

fn mode_shares(method: &MethodRun, burn_in: f64) -> HashMap<Option<u32>, f64> {
    let periods: Vec<f64> = method
        .hypers(burn_in)
        .into_iter()
        .flatten()
        .map(|h| h[1])
        .collect();
    let mut shares = HashMap::new();
    for &p in &periods {
        *shares.entry(period_mode(p)).or_insert(0.0) += 1.0 / periods.len() as f64;
    }
    shares
}

fn mh_explores_period_modes() -> Outcome {
    let data = synth_data(SynthKind::Periodic, 200, &mut chain_rng(0, AUX_STREAM)).unwrap();
    let holdout = HoldoutSpec {
        fraction: 0.2,
        mode: HoldoutMode::ExtrapolateTail,
    };
    let (train, test) = holdout
        .split(&data, &mut chain_rng(0, AUX_STREAM + 1))
        .unwrap();
    let schedule = ScheduleConfig {
        sweeps: 50,
        hyper_steps: 4,
        structure_steps: 0,
        step_size: 1e-3,
        chains: 8,
        ..ScheduleConfig::default()
    };
    // every chain of both methods starts in the basin of the period-6 mode
    let start = KernelAst::periodic(1.0, 6.0);
    let methods = compare_inference(
        &train,
        &test,
        false,
        &Model::default(),
        &schedule,
        &start,
        CompareStart::Given,
        200,
    )
    .unwrap();
    let (mh, grad) = (&methods[0], &methods[1]);
    let mh_shares = mode_shares(mh, schedule.burn_in);
    let grad_shares = mode_shares(grad, schedule.burn_in);
    let share = |s: &HashMap<Option<u32>, f64>, k| s.get(&Some(k)).copied().unwrap_or(0.0);
    let (mh3, mh6) = (share(&mh_shares, 1), share(&mh_shares, 2));
    let grad_top = grad_shares.values().copied().fold(0.0, f64::max);
    let runs_settled = grad.runs.iter().all(|r| {
        let periods: Vec<Option<u32>> = r
            .kept(schedule.burn_in)
            .iter()
            .map(|s| period_mode(constrained(&s.ast)[1]))
            .collect();
        let top = periods
            .iter()
            .map(|m| periods.iter().filter(|n| *n == m).count())
            .max()
            .unwrap_or(0);
        top as f64 >= 0.9 * periods.len() as f64
    });
    let mse = |m: &MethodRun| m.errors.as_ref().unwrap().overall.mse;
    let pass = mh3 >= 0.05
        && mh6 >= 0.05
        && grad_top >= 0.9
        && runs_settled
        && mse(mh) <= 0.35
        && mse(grad) <= 0.35;
    outcome(
        pass,
        format!(
            "MH period mass near 3 {mh3:.3}, near 6 {mh6:.3}; gradient top mode {grad_top:.3}; \
             held-out MSE MH {:.3}, gradient {:.3}",
            mse(mh),
            mse(grad)
        ),
    )
}

fn structure_posterior_favours_trend() -> Outcome {
    let data = synth_data(SynthKind::LinPlusPer, 50, &mut chain_rng(0, AUX_STREAM)).unwrap();
    let holdout = HoldoutSpec {
        fraction: 0.2,
        mode: HoldoutMode::ExtrapolateTail,
    };
    let (train, test) = holdout
        .split(&data, &mut chain_rng(0, AUX_STREAM + 1))
        .unwrap();
    let seeds = 6;
    let (mut labels, mut wins) = (Vec::new(), 0);
    let mut rmses = Vec::new();
    for seed in 0..seeds {
        let schedule = ScheduleConfig {
            sweeps: 200,
            hyper_steps: 20,
            structure_steps: 20,
            chains: 8,
            seed,
            hyper_mode: HyperMode::Mixed,
            ..ScheduleConfig::default()
        };
        let report =
            fit_structure(&train, &test, false, &Model::default(), &schedule, 200).unwrap();
        labels.extend(
            report
                .kept(schedule.burn_in)
                .iter()
                .map(|s| s.label.clone()),
        );
        let avg = report.metrics.model_average.unwrap().overall.rmse;
        let map = report.metrics.map_structure.unwrap().rmse;
        wins += usize::from(avg < map);
        rmses.push(format!("{avg:.3}/{map:.3}"));
    }
    let total = labels.len() as f64;
    let lin_mass = labels.iter().filter(|l| l.contains("LIN")).count() as f64 / total;
    let target = labels
        .iter()
        .filter(|l| *l == "LIN + PER" || *l == "PER + LIN")
        .count();
    let pass = lin_mass >= 0.5 && target > 0 && 2 * wins >= seeds as usize;
    outcome(
        pass,
        format!(
            "LIN-containing mass {lin_mass:.3}, LIN + PER samples {target}, model average beats MAP in \
             {wins}/{seeds} seeds (average/MAP RMSE {})",
            rmses.join(" ")
        ),
    )
}

fn clustering_recovers_ground_truth() -> Outcome {
    let series: Vec<(String, Dataset)> = cluster_demo(100, &mut chain_rng(0, AUX_STREAM))
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, d)| ((i + 1).to_string(), d))
        .collect();
    let schedule = ScheduleConfig {
        sweeps: 80,
        hyper_steps: 20,
        structure_steps: 20,
        chains: 1,
        hyper_mode: HyperMode::Mixed,
        ..ScheduleConfig::default()
    };
    let report = cluster_series(
        &series,
        false,
        &Model::default(),
        &schedule,
        &ClusterConfig::default(),
    )
    .unwrap();
    let mode = report.partitions.mode().unwrap_or("");
    let top = &report.partitions.entries[0];
    outcome(
        report.partitions.total == 64 && mode == "{1,2}{3,4}",
        format!(
            "modal partition {mode} with {}/{} samples",
            top.count, report.partitions.total
        ),
    )
}

fn gp_beats_linear_regression() -> Outcome {
    let schedule = ScheduleConfig {
        sweeps: 200,
        hyper_steps: 20,
        structure_steps: 20,
        chains: 8,
        hyper_mode: HyperMode::Mh,
        ..ScheduleConfig::default()
    };
    let airline = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/airline.csv");
    let airline = ingest_csv(&airline).unwrap().into_single().unwrap();
    let tail = HoldoutSpec {
        fraction: 0.2,
        mode: HoldoutMode::ExtrapolateTail,
    };
    let (train, test) = tail
        .split(&airline, &mut chain_rng(0, AUX_STREAM + 1))
        .unwrap();
    let air = fit_structure(&train, &test, true, &Model::default(), &schedule, 200).unwrap();
    let cp = synth_data(SynthKind::CpDemo, 100, &mut chain_rng(0, AUX_STREAM)).unwrap();
    let middle = HoldoutSpec {
        fraction: 0.2,
        mode: HoldoutMode::InterpolateMiddle,
    };
    let (train, test) = middle
        .split(&cp, &mut chain_rng(0, AUX_STREAM + 1))
        .unwrap();
    let cp = fit_structure(&train, &test, false, &Model::default(), &schedule, 200).unwrap();
    let rmse = |r: &gpstruct::pipeline::FitReport| {
        (
            r.metrics.model_average.as_ref().unwrap().overall.rmse,
            r.metrics.blr.unwrap().rmse,
        )
    };
    let ((air_gp, air_blr), (cp_gp, cp_blr)) = (rmse(&air), rmse(&cp));
    outcome(
        air_gp < air_blr && cp_gp < cp_blr,
        format!(
            "airline RMSE GP {air_gp:.2} vs BLR {air_blr:.2}; changepoint RMSE GP {cp_gp:.3} vs BLR {cp_blr:.3}"
        ),
    )
}

fn restricted_growth_strings(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for _ in 1..n {
        out = out
            .into_iter()
            .flat_map(|a| {
                let max = *a.iter().max().unwrap();
                (0..=max + 1).map(move |c| {
                    let mut b = a.clone();
                    b.push(c);
                    b
                })
            })
            .collect();
    }
    out
}

fn prior_is_self_consistent() -> Outcome {
    let cfg = PriorConfig::default();
    let mut rng = chain_rng(9, 0);
    let draws = 100_000;
    let mut buckets: HashMap<String, (usize, f64)> = HashMap::new();
    for _ in 0..draws {
        let t = sample_ast(&cfg, ROOT, &mut rng);
        let mass = structure_log_prior(&cfg, &t).exp();
        buckets.entry(t.structure_label()).or_insert((0, mass)).0 += 1;
    }
    let mut ranked: Vec<(String, (usize, f64))> = buckets.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then_with(|| a.0.cmp(&b.0)));
    let (mut sampled, mut exact) = (Vec::new(), Vec::new());
    for (_, (count, mass)) in ranked.iter().take(10) {
        sampled.push(*count as f64 / draws as f64);
        exact.push(*mass);
    }
    sampled.push(1.0 - sampled.iter().sum::<f64>());
    exact.push(1.0 - exact.iter().sum::<f64>());
    let tv = total_variation(&sampled, &exact);

    let crp_total: f64 = restricted_growth_strings(4)
        .iter()
        .map(|a| crp_log_prior(a, 0.5).exp())
        .sum();

    let mean = (0..draws)
        .map(|_| sample_hyper(&mut rng, 0.0).constrained)
        .sum::<f64>()
        / draws as f64;
    let pass = tv <= 0.02 && (crp_total - 1.0).abs() <= 1e-12 && (mean - 1.0).abs() <= 0.02;
    outcome(
        pass,
        format!(
            "top-10 structure TV {tv:.4}; partition prior total {crp_total:.15}; hyperparameter mean {mean:.4}"
        ),
    )
}

fn cli_output_is_deterministic() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_gpstruct"))
            .args(["predict", "--seed", "17", "--chains", "1", "--out"])
            .arg(&out)
            .args([
                "--set",
                "schedule.sweeps=10",
                "--set",
                "schedule.hyper_steps=5",
                "--set",
                "schedule.structure_steps=5",
                "--set",
                "holdout.fraction=0.2",
                "--set",
                "output.grid_points=40",
                "--set",
                "output.predictive_samples=3",
            ])
            .output()
            .expect("binary runs");
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (run("first"), run("second"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    outcome(
        !a.is_empty() && a == b,
        format!("{} files compared: {}", a.len(), names.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion, Duration); 10] = [
        (
            "gradient correctness",
            gradient_matches_finite_differences,
            Duration::from_secs(60),
        ),
        (
            "likelihood oracle",
            likelihood_matches_dense_oracle,
            Duration::from_secs(30),
        ),
        (
            "MH cancellation identity",
            mh_ratio_collapses_to_likelihood_ratio,
            Duration::from_secs(60),
        ),
        (
            "truncated-grammar posterior",
            truncated_grammar_posterior,
            Duration::from_secs(120),
        ),
        (
            "MH vs gradient period modes",
            mh_explores_period_modes,
            Duration::from_secs(600),
        ),
        (
            "structure posterior on LIN + PER",
            structure_posterior_favours_trend,
            Duration::from_secs(900),
        ),
        (
            "series clustering",
            clustering_recovers_ground_truth,
            Duration::from_secs(1200),
        ),
        (
            "GP vs linear regression",
            gp_beats_linear_regression,
            Duration::from_secs(1200),
        ),
        (
            "prior self-consistency",
            prior_is_self_consistent,
            Duration::from_secs(60),
        ),
        (
            "determinism",
            cli_output_is_deterministic,
            Duration::from_secs(600),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= *budget;
        failed += usize::from(!pass);
        println!(
            "{} [{:>2}] {name}: {} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
