//! Pipelines behind the CLI. Every run writes into `output_dir/<config hash>`;
//! pretrained checkpoints found there are reused by later stages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Provenance};
use crate::config::{Algorithm, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    a1_diagnostic, a2_diagnostic, estimate_gamma, hessian_bound, lipschitz_bound, mean_loss, output_deviations,
    perturb_tail, AssumptionDiagnostics, HessianBound, LipschitzBound, SemirobustnessEstimate,
};
use crate::model::{Network, SubnetworkSplit};
use crate::probe::{train_probe, ProbeHead};
use crate::protocols::{
    algorithm1_trials, algorithm2, attacked_inputs, evaluate_lambda, pretrain, table1_csv, LambdaSolution, Pretrained,
    RhoLearningConfig, RhoReport, RhoSetup,
};
use crate::rng;
use crate::training::{evaluate, round2, settle_tail, write_json_lines, AccTag, AccuracyRecord, EpochStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    AttackEval,
    Diagnostics,
    RhoLearn,
    LambdaSolve,
    Bounds,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::AttackEval => "attack-eval",
            Stage::Diagnostics => "diagnostics",
            Stage::RhoLearn => "rho-learn",
            Stage::LambdaSolve => "lambda-solve",
            Stage::Bounds => "bounds",
            Stage::Report => "report",
        }
    }
}

impl From<Algorithm> for Stage {
    fn from(a: Algorithm) -> Self {
        match a {
            Algorithm::Alg1 => Stage::RhoLearn,
            Algorithm::Alg2 => Stage::LambdaSolve,
            Algorithm::Diagnostics => Stage::Diagnostics,
            Algorithm::Bounds => Stage::Bounds,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub run_dir: PathBuf,
    /// Every JSON report written by the stage, keyed by file name.
    pub reports: BTreeMap<String, serde_json::Value>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
}

pub const STANDARD_CKPT: &str = "standard.ckpt";
pub const ROBUST_CKPT: &str = "robust.ckpt";

struct Runner {
    cfg: ExperimentConfig,
    dir: PathBuf,
    train: Dataset,
    test: Dataset,
    rho_cfg: RhoLearningConfig,
    record: RunRecord,
}

/// Runs one stage and writes its `run-<stage>.json` record.
pub fn run(cfg: &ExperimentConfig, stage: Stage) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = cfg.run_dir()?;
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let (train, test) = cfg
        .dataset
        .load(rng::derive(cfg.seed, rng::stream::DATA))
        .map_err(|e| e.in_phase("dataset"))?;
    let mut runner = Runner {
        record: RunRecord {
            stage,
            config: cfg.clone(),
            config_hash: cfg.content_hash()?,
            run_dir: dir.clone(),
            reports: BTreeMap::new(),
            timings: BTreeMap::new(),
            artifacts: Vec::new(),
        },
        cfg: cfg.clone(),
        rho_cfg: cfg.rho_config(),
        dir,
        train,
        test,
    };
    runner.write_text("config.toml", &cfg.to_toml()?)?;
    let outcome = match stage {
        Stage::Train => runner.stage_train(),
        Stage::AttackEval => runner.stage_attack_eval(),
        Stage::Diagnostics => runner.stage_diagnostics(),
        Stage::RhoLearn => runner.stage_rho(),
        Stage::LambdaSolve => runner.stage_lambda(),
        Stage::Bounds => runner.stage_bounds(),
        Stage::Report => runner.stage_report(),
    };
    runner.record.timings.insert("total".into(), started.elapsed().as_secs_f64());
    let record_path = runner.dir.join(format!("run-{}.json", stage.name()));
    fs::write(&record_path, serde_json::to_vec_pretty(&runner.record)?)?;
    outcome.map_err(|e| e.in_phase(stage.name()))?;
    Ok(runner.record)
}

impl Runner {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn note(&mut self, name: &str) {
        let p = self.path(name);
        if !self.record.artifacts.contains(&p) {
            self.record.artifacts.push(p);
        }
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        self.note(name);
        Ok(())
    }

    fn write_report<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let json = serde_json::to_value(value)?;
        let mut text = serde_json::to_string_pretty(&json)?;
        text.push('\n');
        self.write_text(name, &text)?;
        self.record.reports.insert(name.to_string(), json);
        Ok(())
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self).map_err(|e| e.in_phase(phase.to_string()));
        self.record.timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    fn setup(&self) -> RhoSetup<'_> {
        RhoSetup {
            train: &self.train,
            test: &self.test,
            loss: self.cfg.loss,
            train_cfg: &self.cfg.training,
            train_attack: &self.cfg.train_attack,
            eval_attack: self.cfg.measurement_attack(),
            mi: &self.cfg.mi,
            rho: &self.rho_cfg,
            seed: self.cfg.seed,
        }
    }

    /// Loads both pretrained networks from the run directory, training and
    /// saving them first when absent.
    fn pretrained(&mut self) -> Result<Pretrained> {
        let (std_path, rob_path) = (self.path(STANDARD_CKPT), self.path(ROBUST_CKPT));
        if std_path.exists() && rob_path.exists() {
            let (standard, _) = checkpoint::load(&std_path)?;
            let (robust, _) = checkpoint::load(&rob_path)?;
            let standard_log = read_log(&self.path("train_standard.jsonl"))?;
            let robust_log = read_log(&self.path("train_robust.jsonl"))?;
            return Ok(Pretrained {
                standard,
                robust,
                standard_log,
                robust_log,
            });
        }
        let pre = self.timed("pretrain", |r| pretrain(&r.cfg.network, &r.setup()))?;
        checkpoint::save(&std_path, &pre.standard, self.cfg.seed, Provenance::Standard)?;
        checkpoint::save(&rob_path, &pre.robust, self.cfg.seed, Provenance::Adversarial)?;
        self.note(STANDARD_CKPT);
        self.note(ROBUST_CKPT);
        for (name, log) in [("train_standard.jsonl", &pre.standard_log), ("train_robust.jsonl", &pre.robust_log)] {
            write_json_lines(BufWriter::new(fs::File::create(self.path(name))?), log)?;
            self.note(name);
        }
        Ok(pre)
    }

    fn semirobust(&self, pre: &Pretrained) -> Result<Network> {
        let mut net = pre.robust.clone();
        net.load_tail_from(&pre.standard, self.cfg.a)?;
        Ok(net)
    }

    fn stage_train(&mut self) -> Result<()> {
        let pre = self.pretrained()?;
        let summary = TrainSummary {
            standard: pre.standard_log.last().cloned(),
            robust: pre.robust_log.last().cloned(),
            standard_hash: pre.standard.weight_hash(),
            robust_hash: pre.robust.weight_hash(),
        };
        self.write_report("train_summary.json", &summary)
    }

    fn stage_attack_eval(&mut self) -> Result<()> {
        let pre = self.pretrained()?;
        let sr = self.semirobust(&pre)?;
        let seed = rng::derive(self.cfg.seed, rng::stream::EVAL);
        let records = self.timed("evaluate", |r| {
            [(AccTag::Acc, &pre.standard), (AccTag::AccStar, &pre.robust), (AccTag::AccSr, &sr)]
                .into_iter()
                .map(|(tag, net)| evaluate(net, &r.test, &r.cfg.loss, &r.cfg.eval_attacks, seed, tag))
                .collect::<Result<Vec<AccuracyRecord>>>()
        })?;
        self.write_report("accuracy.json", &records)?;
        self.write_text("accuracy.csv", &accuracy_csv(&records))
    }

    fn stage_diagnostics(&mut self) -> Result<()> {
        let net = match self.cfg.diagnostics.checkpoint.clone() {
            Some(p) => checkpoint::load(&p)?.0,
            None => {
                let pre = self.pretrained()?;
                self.semirobust(&pre)?
            }
        };
        let before = net.weight_hash();
        let a = self.cfg.a;
        let split = SubnetworkSplit::new(a, net.depth())?;
        let seed = rng::derive(self.cfg.seed, rng::stream::EVAL);
        let probes: Vec<ProbeHead> = self.timed("probes", |r| {
            (a..=net.depth())
                .map(|j| train_probe(&net, j, &r.train, &r.cfg.probes, rng::derive(r.cfg.seed, rng::stream::PROBE + j as u64)))
                .collect()
        })?;
        let attack = self.cfg.measurement_attack().clone();
        let diag: AssumptionDiagnostics = self.timed("a2", |r| {
            a2_diagnostic(&net, &split, &probes, &r.test, &r.cfg.loss, &attack, &r.cfg.mi, seed)
        })?;
        let gammas: Vec<SemirobustnessEstimate> = self.timed("gamma", |r| {
            probes
                .iter()
                .map(|p| estimate_gamma(&net, p.layer, p, &r.test, &attack, seed))
                .collect()
        })?;
        let mut by_attack = String::from("attack,epsilon,layer,rho_hat\n");
        let mut variants = vec![("clean".to_string(), None)];
        for e in &self.cfg.eval_attacks {
            variants.push((e.name().to_string(), Some(e.config.clone())));
        }
        for (name, atk) in &variants {
            let deps = self.timed(&format!("a1 {name}"), |r| {
                match atk {
                    Some(c) => a1_diagnostic(&net, &split, &r.test, &r.cfg.loss, c, &r.cfg.mi, seed),
                    None => {
                        let acts = net.forward_collect(&r.test.features, false)?;
                        crate::metrics::layer_dependencies(&acts, &r.test.labels, &split, &r.cfg.mi)
                    }
                }
            })?;
            let eps = atk.as_ref().map_or(0.0, |c| c.epsilon);
            for d in deps {
                let _ = writeln!(by_attack, "{name},{eps},{},{}", d.layer, d.rho_hat);
            }
        }
        if net.weight_hash() != before {
            return Err(Error::Config("diagnostics modified the network weights".into()));
        }
        self.write_text("diagnostics.json", &format!("{}\n", diag.to_json()?))?;
        self.record
            .reports
            .insert("diagnostics.json".into(), serde_json::from_str(&diag.to_json()?)?);
        self.write_text("diagnostics.csv", &diag.to_csv())?;
        self.write_report("gamma.json", &gammas)?;
        let mut g = String::from("layer,gamma_hat,clean_correlation\n");
        for e in &gammas {
            let _ = writeln!(g, "{},{},{}", e.layer, e.gamma_hat, e.clean_correlation);
        }
        self.write_text("plot_gamma_layers.csv", &g)?;
        self.write_text("plot_rho_attacks.csv", &by_attack)
    }

    fn stage_rho(&mut self) -> Result<()> {
        let pre = self.pretrained()?;
        let report = self.timed("algorithm1", |r| algorithm1_trials(&r.cfg.network, &pre, &r.setup()))?;
        self.write_report("rho_report.json", &report)?;
        self.write_text("table1.csv", &table1_csv(std::slice::from_ref(&report)))?;
        self.write_text("rho_traces.csv", &rho_traces_csv(&report))?;
        let mut layers = String::from("layer,rho\n");
        for (j, v) in &report.rho {
            let _ = writeln!(layers, "{j},{v}");
        }
        self.write_text("plot_rho_layers.csv", &layers)
    }

    fn stage_lambda(&mut self) -> Result<()> {
        let pre = self.pretrained()?;
        let lcfg = self.cfg.lambda_config();
        let mut sol: LambdaSolution = self.timed("algorithm2", |r| algorithm2(&pre.robust, &r.train, &lcfg))?;
        let seed = rng::derive(self.cfg.seed, rng::stream::LAMBDA);
        let attack = self.cfg.measurement_attack().clone();
        let adv = self.timed("attack", |r| attacked_inputs(&pre.robust, &r.test, &r.cfg.loss, &attack, seed))?;
        sol.evaluations.push(evaluate_lambda(
            &pre.robust,
            &sol.lambda,
            &self.test.features,
            &self.test.labels,
            "clean",
            lcfg.random_draws,
            seed,
        )?);
        sol.evaluations.push(evaluate_lambda(
            &pre.robust,
            &sol.lambda,
            &adv,
            &self.test.labels,
            "pgd",
            lcfg.random_draws,
            seed,
        )?);
        self.write_report("lambda_solution.json", &sol)?;
        self.write_text("table2.csv", &lambda_csv(&sol))
    }

    fn stage_bounds(&mut self) -> Result<()> {
        let pre = self.pretrained()?;
        let report = self.timed("bounds", |r| bounds_experiment(&r.cfg, &pre.robust, &r.test))?;
        self.write_report("bounds.json", &report)?;
        let mut csv = String::from("perturbation,loss_diff,hessian_bound,hessian_dominates,max_output_dev,lipschitz_bound,lipschitz_dominates\n");
        for p in &report.perturbations {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                p.index, p.loss_diff, p.hessian_bound, p.hessian_dominates, p.max_output_deviation, p.lipschitz_bound, p.lipschitz_samples_dominated == report.samples
            );
        }
        self.write_text("bounds.csv", &csv)
    }

    /// Collects the reports already in the run directory into `summary.json`
    /// and regenerates the CSV tables from them.
    fn stage_report(&mut self) -> Result<()> {
        let mut summary = BTreeMap::new();
        for name in ["train_summary.json", "accuracy.json", "rho_report.json", "lambda_solution.json", "bounds.json", "diagnostics.json", "gamma.json"] {
            let p = self.path(name);
            if p.exists() {
                let v: serde_json::Value = serde_json::from_slice(&fs::read(&p)?)?;
                summary.insert(name.to_string(), v);
            }
        }
        if summary.is_empty() {
            return Err(Error::Config(format!("no reports found in {}", self.dir.display())));
        }
        if let Some(v) = summary.get("rho_report.json") {
            let report: RhoReport = serde_json::from_value(v.clone())?;
            self.write_text("table1.csv", &table1_csv(&[report]))?;
        }
        if let Some(v) = summary.get("lambda_solution.json") {
            let sol: LambdaSolution = serde_json::from_value(v.clone())?;
            self.write_text("table2.csv", &lambda_csv(&sol))?;
        }
        self.write_report("summary.json", &summary)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub standard: Option<EpochStats>,
    pub robust: Option<EpochStats>,
    pub standard_hash: String,
    pub robust_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheck {
    pub index: usize,
    /// `L(F̃) − L(F*)` on the evaluation data.
    pub loss_diff: f64,
    /// `taylor_slack · ½|λmax|·‖δω‖²`
    pub hessian_bound: f64,
    pub hessian_dominates: bool,
    pub max_output_deviation: f64,
    pub lipschitz_bound: f64,
    pub lipschitz_samples_dominated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub a: usize,
    pub samples: usize,
    pub settle_grad_norm: f64,
    pub base_loss: f64,
    pub hessian: HessianBound,
    pub lipschitz: LipschitzBound,
    pub taylor_slack: f64,
    pub perturbations: Vec<PerturbationCheck>,
    pub hessian_dominated: usize,
    /// Fraction of (perturbation, sample) pairs whose output deviation is within the Lipschitz bound.
    pub lipschitz_fraction: f64,
}

/// Settles the tail of `robust` on `data`, then compares random tail
/// perturbations against the Hessian and Lipschitz bounds.
pub fn bounds_experiment(cfg: &ExperimentConfig, robust: &Network, data: &Dataset) -> Result<BoundsReport> {
    let b = &cfg.bounds;
    let a = cfg.a;
    let mut star = robust.clone();
    let settle_grad_norm = settle_tail(&mut star, a, data, &cfg.loss, b.settle_lr, b.settle_tol, b.settle_steps)?;
    let base_loss = mean_loss(&star, data, &cfg.loss)?;
    let mut r = rng::seeded(rng::derive(cfg.seed, rng::stream::BOUNDS));
    let mut perturbations = Vec::with_capacity(b.perturbations);
    let mut first: Option<(HessianBound, LipschitzBound)> = None;
    let mut lip_ok = 0usize;
    for index in 0..b.perturbations {
        let tilde = perturb_tail(&star, a, b.perturbation_norm, &mut r)?;
        if first.is_none() {
            let h = hessian_bound(&star, &tilde, a, data, &cfg.loss, b.power, b.stationarity_tol, cfg.seed)?;
            first = Some((h, lipschitz_bound(&star, &tilde, a, data)?));
        }
        let (h, _) = first.as_ref().expect("set above");
        let lip = lipschitz_bound(&star, &tilde, a, data)?;
        let loss_diff = mean_loss(&tilde, data, &cfg.loss)? - base_loss;
        let hb = b.taylor_slack * 0.5 * h.lambda_max.value.abs() * b.perturbation_norm.powi(2);
        let devs = output_deviations(&star, &tilde, data)?;
        let dominated = devs.iter().filter(|&&d| d <= lip.bound).count();
        lip_ok += dominated;
        perturbations.push(PerturbationCheck {
            index,
            loss_diff,
            hessian_bound: hb,
            hessian_dominates: loss_diff.abs() <= hb,
            max_output_deviation: devs.iter().copied().fold(0.0, f64::max),
            lipschitz_bound: lip.bound,
            lipschitz_samples_dominated: dominated,
        });
    }
    let (hessian, lipschitz) = first.ok_or_else(|| Error::Config("bounds need at least one perturbation".into()))?;
    let hessian_dominated = perturbations.iter().filter(|p| p.hessian_dominates).count();
    let total = (b.perturbations * data.len()).max(1);
    Ok(BoundsReport {
        a,
        samples: data.len(),
        settle_grad_norm,
        base_loss,
        hessian,
        lipschitz,
        taylor_slack: b.taylor_slack,
        perturbations,
        hessian_dominated,
        lipschitz_fraction: lip_ok as f64 / total as f64,
    })
}

fn read_log(path: &Path) -> Result<Vec<EpochStats>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn accuracy_csv(records: &[AccuracyRecord]) -> String {
    let attacks: Vec<&String> = records.first().map(|r| r.adversarial.keys().collect()).unwrap_or_default();
    let mut s = String::from("tag,dataset,samples,clean");
    for a in &attacks {
        let _ = write!(s, ",{a}");
    }
    s.push('\n');
    for r in records {
        let tag = serde_json::to_value(r.tag).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = write!(s, "{tag},{},{},{:.2}", r.dataset.replace(',', ";"), r.samples, r.clean_acc);
        for a in &attacks {
            let _ = write!(s, ",{:.2}", r.adversarial.get(*a).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

pub fn rho_traces_csv(report: &RhoReport) -> String {
    let mut s = String::from("trial,epoch,layer,mi,raw_mi,adv_acc,converged\n");
    for t in &report.trials {
        for m in &t.epochs {
            for (j, v) in &m.mi {
                let _ = writeln!(s, "{},{},{j},{v},{},{},{}", t.trial, m.epoch, m.raw_mi[j], m.adv_acc, t.converged);
            }
        }
    }
    s
}

pub fn lambda_csv(sol: &LambdaSolution) -> String {
    let mut s = String::from("inputs,Acc_network,Acc_tilde,Acc_rand,argmax_agreement,max_abs_error\n");
    for e in &sol.evaluations {
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{},{}",
            e.inputs,
            e.acc_network,
            e.acc_tilde,
            e.acc_rand,
            round2(100.0 * e.argmax_agreement),
            e.max_abs_error
        );
    }
    s
}
