//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Numeric arguments select criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use semirobust::attacks::{correlation_attack, fgsm, pgd, AttackConfig};
use semirobust::autodiff::Activation;
use semirobust::config::ExperimentConfig;
use semirobust::data::{Dataset, Split};
use semirobust::loss::LossSpec;
use semirobust::metrics::{check_theorem1, mean_loss};
use semirobust::mi::{base_mi, edge_mi, JointHistogram, MiConfig};
use semirobust::model::Network;
use semirobust::probe::{train_probe, ProbeHead, ProbeTrainConfig};
use semirobust::protocols::{algorithm2, evaluate_lambda, planted_lambda_network, LambdaConfig, LambdaSolution, RhoReport};
use semirobust::rng;
use semirobust::run::{run, BoundsReport, Stage};
use semirobust::training::batch_gradients;
use semirobust::Tensor;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line { pass, detail: detail.into() }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_labels(n: usize, classes: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

fn flat_grad(net: &Network, x: &Tensor, y: &[usize]) -> Vec<f64> {
    let (_, g) = batch_gradients(net, &LossSpec::cross_entropy(), x, y).unwrap();
    g.iter().flat_map(|(w, b)| w.data().iter().chain(b.data()).copied().collect::<Vec<_>>()).collect()
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let mut r = rng::seeded(101);
    let acts = [Activation::Relu, Activation::Tanh, Activation::Identity];
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for (arch, depth) in (2..=6).enumerate() {
        let mut dims = vec![r.random_range(3..8)];
        dims.extend((0..depth).map(|_| r.random_range(3..9)));
        let mut act: Vec<Activation> = (0..depth).map(|_| acts[r.random_range(0..acts.len())]).collect();
        act[depth - 1] = Activation::Identity;
        let net = Network::build(&dims, &act, 200 + arch as u64).unwrap();
        let classes = dims[depth];
        let x = uniform(12, dims[0], -1.0, 1.0, &mut r);
        let y = random_labels(12, classes, &mut r);
        let data = Dataset::new(x.clone(), y.clone(), classes, Split::Train).unwrap();
        let analytic = flat_grad(&net, &x, &y);
        let point = net.flat_params(1..=depth).unwrap();
        let h = 1e-6;
        let mut probe = net.clone();
        for i in 0..point.len() {
            let mut p = point.clone();
            p[i] = point[i] + h;
            probe.set_flat_params(1..=depth, &p).unwrap();
            let fp = mean_loss(&probe, &data, &LossSpec::cross_entropy()).unwrap();
            p[i] = point[i] - h;
            probe.set_flat_params(1..=depth, &p).unwrap();
            let fm = mean_loss(&probe, &data, &LossSpec::cross_entropy()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        params += point.len();
    }
    let secs = t.elapsed().as_secs_f64();
    line(
        worst <= 1e-4 && secs < 30.0,
        format!("gradient check on 5 architectures ({params} parameters): max relative error {worst:.2e} (<= 1e-4), {secs:.1}s (< 30s)"),
    )
}

fn criterion_2() -> Line {
    let eps = 8.0 / 255.0;
    let cfg = AttackConfig {
        epsilon: eps,
        ..AttackConfig::default()
    };
    let single = AttackConfig {
        iterations: 1,
        random_start: false,
        step_size: eps,
        ..cfg.clone()
    };
    let loss = LossSpec::cross_entropy();
    let mut r = rng::seeded(202);
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    let check = |delta: &Tensor, x: &Tensor, checked: &mut usize, violations: &mut usize| {
        for i in 0..x.rows() {
            let d = delta.row(i);
            let xi = x.row(i);
            let inside = d.iter().all(|v| v.abs() <= eps + 1e-9);
            let clamped = d.iter().zip(xi).all(|(dv, xv)| (0.0..=1.0).contains(&(xv + dv)));
            *checked += 1;
            if !(inside && clamped) {
                *violations += 1;
            }
        }
    };
    let per_kind = 3334;
    let batch = 200;
    let mut net_seed = 300;
    let mut done = [0usize; 3];
    while done.iter().any(|&d| d < per_kind) {
        net_seed += 1;
        let net = Network::build(&[20, 16, 16, 3], &[Activation::Relu, Activation::Tanh, Activation::Identity], net_seed).unwrap();
        let x = uniform(batch, 20, 0.0, 1.0, &mut r);
        let y = random_labels(batch, 3, &mut r);
        if done[0] < per_kind {
            let f = fgsm(&net, &loss, &x, &y, &cfg).unwrap();
            check(&f.delta, &x, &mut checked, &mut violations);
            let p1 = pgd(&net, &loss, &x, &y, &single, None, &mut r).unwrap();
            compared += x.rows();
            if p1.delta.data() != f.delta.data() || p1.apply(&x, &single).unwrap() != f.apply(&x, &cfg).unwrap() {
                mismatches += 1;
            }
            done[0] += batch;
        }
        if done[1] < per_kind {
            let p = pgd(&net, &loss, &x, &y, &cfg, None, &mut r).unwrap();
            check(&p.delta, &x, &mut checked, &mut violations);
            done[1] += batch;
        }
        if done[2] < per_kind {
            let probe = ProbeHead::identity(3);
            let c = correlation_attack(net.view(1, 3).unwrap(), &probe, &x, &y, &cfg, None, &mut r).unwrap();
            check(&c.perturbation.delta, &x, &mut checked, &mut violations);
            done[2] += batch;
        }
    }
    line(
        checked >= 10_000 && violations == 0 && mismatches == 0,
        format!(
            "{checked} FGSM/PGD/correlation examples at eps=8/255: {violations} outside the eps-ball or [0,1]; PGD(1 step, step=eps) vs FGSM on {compared} samples: {mismatches} differing batches"
        ),
    )
}

fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Tensor, Tensor) {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::seeded(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        xs.push(a);
        ys.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (Tensor::matrix(n, 1, xs).unwrap(), Tensor::matrix(n, 1, ys).unwrap())
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let cfg = MiConfig::default();
    let n = 20_000;
    let mut r = rng::seeded(303);
    let ux = uniform(n, 1, 0.0, 1.0, &mut r);
    let uy = uniform(n, 1, 0.0, 1.0, &mut r);
    let indep = edge_mi(&ux, &uy, &cfg).unwrap().value_nats;
    let mut parts = vec![format!("independent {indep:.4} (|.| <= 0.05)")];
    let mut pass = indep.abs() <= 0.05;
    for (rho, seed) in [(0.5, 304), (0.8, 305)] {
        let (x, y) = gaussian_pair(n, rho, seed);
        let est = edge_mi(&x, &y, &cfg).unwrap().value_nats;
        let truth = -0.5 * (1.0 - rho * rho).ln();
        pass &= (est - truth).abs() <= 0.10;
        parts.push(format!("rho={rho}: {est:.4} vs {truth:.4} (+-0.10)"));
    }
    let h = JointHistogram::from_counts(&[vec![40, 10], vec![10, 40]]).unwrap();
    let fixture = base_mi(&h);
    let closed_form = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
    pass &= (fixture - closed_form).abs() <= 1e-10 && format!("{fixture:.4}") == "0.1927";
    parts.push(format!("2x2 fixture {fixture:.12} vs 0.8ln1.6+0.2ln0.4 = {closed_form:.12} (+-1e-10, rounds to 0.1927)"));
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    parts.push(format!("{secs:.1}s (< 60s)"));
    line(pass, format!("MI oracles: {}", parts.join("; ")))
}

fn criterion_4() -> Line {
    let acts = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Relu,
        Activation::Tanh,
        Activation::Relu,
        Activation::Identity,
    ];
    let net = Network::build(&[8, 12, 12, 12, 12, 12, 2], &acts, 404).unwrap();
    let mut r = rng::seeded(405);
    let x = uniform(300, 8, 0.0, 1.0, &mut r);
    let y = net.predict(&x).unwrap();
    let data = Dataset::new(x, y, 2, Split::Test).unwrap();
    let attack = AttackConfig {
        epsilon: 0.1,
        step_size: 0.025,
        ..AttackConfig::default()
    };
    let mut worst_comp: f64 = 0.0;
    let mut worst_cons: f64 = 0.0;
    let mut dominance = true;
    let mut gaps = Vec::new();
    for j in 2..=6 {
        let probe = train_probe(&net, j, &data, &ProbeTrainConfig::default(), 406 + j as u64).unwrap();
        let rep = check_theorem1(&net, j, &probe, &data, &attack, 407).unwrap();
        worst_comp = worst_comp.max(rep.composition_max_diff);
        worst_cons = worst_cons.max(rep.construction_max_diff);
        dominance &= rep.gamma_prev_reattacked <= rep.gamma_j + 1e-9;
        gaps.push(format!("j={j}: {:.4}<={:.4}", rep.gamma_prev_reattacked, rep.gamma_j));
    }
    line(
        worst_comp <= 1e-12 && worst_cons <= 1e-12 && dominance,
        format!(
            "6-layer network: composition diff {worst_comp:.1e}, construction diff {worst_cons:.1e} (<= 1e-12); re-attacked gamma(j-1) <= gamma(j) + 1e-9: {}",
            gaps.join(", ")
        ),
    )
}

fn criterion_5() -> Line {
    let planted = planted_lambda_network(6, &[8, 6, 5], 3, 4, 505).unwrap();
    let mut r = rng::seeded(506);
    let x_train = uniform(1000, 6, -1.0, 1.0, &mut r);
    let y_train = planted.net.predict(&x_train).unwrap();
    let train = Dataset::new(x_train, y_train, 4, Split::Train).unwrap();
    let x_test = uniform(2000, 6, -1.0, 1.0, &mut r);
    let y_test = planted.net.predict(&x_test).unwrap();
    let cfg = LambdaConfig {
        a: planted.a,
        batch_size: 250,
        ..LambdaConfig::default()
    };
    let sol = algorithm2(&planted.net, &train, &cfg).unwrap();
    let ev = evaluate_lambda(&planted.net, &sol.lambda, &x_test, &y_test, "clean", 0, 507).unwrap();
    line(
        ev.max_abs_error <= 1e-6 && ev.argmax_agreement == 1.0,
        format!(
            "planted-lambda network, K={} batches, ridge {:e}, 2000 test samples: max abs error {:.2e} (<= 1e-6), argmax agreement {:.2}% (100%)",
            sol.batches,
            sol.ridge,
            ev.max_abs_error,
            100.0 * ev.argmax_agreement
        ),
    )
}

/// Output of one full desk pipeline run.
struct Desk {
    dir: PathBuf,
    rho_secs: f64,
    cfg: ExperimentConfig,
}

const DESK_STAGES: [Stage; 6] = [
    Stage::RhoLearn,
    Stage::LambdaSolve,
    Stage::Bounds,
    Stage::AttackEval,
    Stage::Diagnostics,
    Stage::Report,
];

fn run_desk(root: &Path) -> Desk {
    let mut cfg = ExperimentConfig::from_toml(DESK_CONFIG).unwrap();
    cfg.output_dir = root.to_path_buf();
    let mut rho_secs = 0.0;
    let mut dir = PathBuf::new();
    for stage in DESK_STAGES {
        let t = Instant::now();
        let rec = run(&cfg, stage).unwrap_or_else(|e| panic!("desk stage {}: {e}", stage.name()));
        if stage == Stage::RhoLearn {
            rho_secs = t.elapsed().as_secs_f64();
        }
        dir = rec.run_dir;
    }
    Desk { dir, rho_secs, cfg }
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> T {
    serde_json::from_slice(&fs::read(dir.join(name)).unwrap()).unwrap()
}

fn criterion_6(desk: &Desk) -> Line {
    let r: RhoReport = read_json(&desk.dir, "rho_report.json");
    let gap = r.acc_star - r.acc_standard.adv_acc;
    let expected: Vec<usize> = (r.a + 1..=r.depth).collect();
    let rho_ok = r.rho.keys().copied().collect::<Vec<_>>() == expected && r.rho.values().all(|v| v.is_finite() && *v >= 0.0);
    let converged = r.converged_mask.iter().filter(|&&c| c).count();
    let pass = gap >= 15.0 && r.acc_sr < r.acc_tilde && converged >= 1 && rho_ok && desk.rho_secs < 900.0;
    line(
        pass,
        format!(
            "desk rho learning (a={}, T={}, E={}, k={}): Acc* {:.2} vs standard {:.2} (gap {:.2} >= 15); Acc_sr {:.2} < Acc_tilde {:.2}; {converged}/{} trials converged; rho {:?} finite and >= 0; {:.0}s (< 900s)",
            r.a,
            r.trials.len(),
            desk.cfg.rho.max_epochs,
            r.k,
            r.acc_star,
            r.acc_standard.adv_acc,
            gap,
            r.acc_sr,
            r.acc_tilde,
            r.trials.len(),
            r.rho.values().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            desk.rho_secs
        ),
    )
}

fn criterion_7(desk: &Desk) -> Line {
    let text = fs::read_to_string(desk.dir.join("table1.csv")).unwrap();
    let mut rows = text.lines();
    let header = rows.next().unwrap_or_default();
    let expected = "Network,Dataset,#f_b,Acc*,Acc_sr,Ãcc,Diff,#Epochs,ρ_n,ρ_{n−3},ρ_{n−7},ρ_{n−11}";
    let row: Vec<&str> = rows.next().unwrap_or_default().split(',').collect();
    if header != expected || row.len() != 12 {
        return line(false, format!("table1.csv malformed: header {header:?}, {} cells", row.len()));
    }
    let num = |i: usize| row[i].parse::<f64>().unwrap_or(f64::NAN);
    let (acc_star, acc_sr, acc_tilde, diff) = (num(3), num(4), num(5), num(6));
    let populated = row.iter().all(|c| !c.is_empty()) && row[8..].iter().all(|c| *c == "-" || c.parse::<f64>().is_ok()) && num(8).is_finite();
    let r: RhoReport = read_json(&desk.dir, "rho_report.json");
    let converged = r.converged_mask.iter().any(|&c| c);
    let pass = populated && converged && acc_sr < acc_tilde && (acc_tilde - acc_star).abs() <= r.k && ((acc_tilde - acc_star) - diff).abs() < 0.006;
    line(
        pass,
        format!(
            "table1.csv row [{}]: Acc_sr {acc_sr:.2} < Acc_tilde {acc_tilde:.2}; |Acc_tilde - Acc*| = {:.2} <= k = {}",
            row.join(","),
            (acc_tilde - acc_star).abs(),
            r.k
        ),
    )
}

fn criterion_8(desk: &Desk) -> Line {
    let b: BoundsReport = read_json(&desk.dir, "bounds.json");
    let norm_ok = desk.cfg.bounds.perturbation_norm == 1e-2 && desk.cfg.bounds.taylor_slack == 1.1 && b.perturbations.len() == 100;
    let pass = norm_ok && b.hessian_dominated >= 95 && b.lipschitz_fraction == 1.0;
    line(
        pass,
        format!(
            "{} tail perturbations of norm {:e}: Hessian bound (slack x{}) dominates in {} (>= 95); Lipschitz bound {:.3} covers {:.2}% of {} per-sample deviations (100%); lambda_max {:.4}, settled grad norm {:.2e}",
            b.perturbations.len(),
            desk.cfg.bounds.perturbation_norm,
            b.taylor_slack,
            b.hessian_dominated,
            b.lipschitz.bound,
            100.0 * b.lipschitz_fraction,
            b.perturbations.len() * b.samples,
            b.hessian.lambda_max.value,
            b.settle_grad_norm
        ),
    )
}

fn criterion_9(desk: &Desk) -> Line {
    let sol: LambdaSolution = read_json(&desk.dir, "lambda_solution.json");
    let rows: BTreeMap<&str, (f64, f64)> = sol.evaluations.iter().map(|e| (e.inputs.as_str(), (e.acc_tilde, e.acc_rand))).collect();
    let Some(&(tilde, rand)) = rows.get("pgd") else {
        return line(false, "lambda_solution.json has no pgd evaluation");
    };
    let clean = rows.get("clean").copied().unwrap_or((f64::NAN, f64::NAN));
    line(
        tilde - rand >= 20.0,
        format!(
            "lambda solve on PGD test inputs: Acc_tilde {tilde:.2} vs Acc_rand {rand:.2} (gap {:.2} >= 20); clean inputs {:.2} vs {:.2}",
            tilde - rand,
            clean.0,
            clean.1
        ),
    )
}

/// Report files of a run directory; `run-*.json` records carry timings and are excluded.
fn report_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("run-"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn criterion_10(desk: &Desk, root: &Path) -> Line {
    let first_copy = root.join("first");
    fs::rename(&desk.dir, &first_copy).unwrap();
    let again = run_desk(root);
    let a = report_files(&first_copy);
    let b = report_files(&again.dir);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty() && again.dir == desk.dir;
    line(
        pass,
        format!(
            "desk pipeline repeated with seed {}: {} report files compared, {} differ{}",
            desk.cfg.seed,
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({differing:?})") }
        ),
    )
}

type DeskCheck = fn(&Desk) -> Line;

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut results: Vec<(u32, Line)> = Vec::new();
    let mut report = |id: u32, l: Line| {
        println!("criterion {id:>2}: {} {}", if l.pass { "PASS" } else { "FAIL" }, l.detail);
        results.push((id, l));
    };
    let quick: [(u32, fn() -> Line); 5] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (id, f) in quick {
        if wanted(id) {
            report(id, f());
        }
    }
    if (6..=10).any(wanted) {
        let root = tempfile::tempdir().unwrap();
        let desk = run_desk(root.path());
        let desk_checks: [(u32, DeskCheck); 4] = [(6, criterion_6), (7, criterion_7), (8, criterion_8), (9, criterion_9)];
        for (id, f) in desk_checks {
            if wanted(id) {
                report(id, f(&desk));
            }
        }
        if wanted(10) {
            report(10, criterion_10(&desk, root.path()));
        }
    }
    let failed = results.iter().filter(|(_, l)| !l.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
