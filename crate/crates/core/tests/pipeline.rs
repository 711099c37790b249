use std::collections::BTreeMap;
use std::fs;

use semirobust::config::ExperimentConfig;
use semirobust::protocols::{LambdaSolution, RhoReport};
use semirobust::run::{run, Stage};

fn tiny(root: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
seed = 11
a = 2
[dataset]
n_train = 400
n_test = 200
[network]
dims = [11, 10, 10, 10, 2]
[training]
epochs = 4
optimizer = "sgd_momentum"
[rho]
trials = 3
max_epochs = 3
k = 2.0
finetune_lr = 0.005
"#,
    )
    .unwrap();
    cfg.output_dir = root.to_path_buf();
    cfg
}

#[test]
fn rho_is_rederivable_from_the_persisted_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let rec = run(&cfg, Stage::RhoLearn).unwrap();
    let report: RhoReport = serde_json::from_slice(&fs::read(rec.run_dir.join("rho_report.json")).unwrap()).unwrap();

    // final-epoch I_{j,t} of each trial, read back from rho_traces.csv
    let traces = fs::read_to_string(rec.run_dir.join("rho_traces.csv")).unwrap();
    let mut last: BTreeMap<(usize, usize), (usize, f64, bool)> = BTreeMap::new();
    for l in traces.lines().skip(1) {
        let c: Vec<&str> = l.split(',').collect();
        let (trial, epoch, layer) = (c[0].parse().unwrap(), c[1].parse().unwrap(), c[2].parse().unwrap());
        let mi: f64 = c[3].parse().unwrap();
        let conv = c[6] == "true";
        let e = last.entry((trial, layer)).or_insert((0, 0.0, conv));
        if epoch >= e.0 {
            *e = (epoch, mi, conv);
        }
    }
    if report.approximation.is_none() {
        for (j, rho) in &report.rho {
            let min = last
                .iter()
                .filter(|((_, l), (_, _, c))| l == j && *c)
                .map(|(_, (_, v, _))| *v)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(*rho, min, "layer {j}");
        }
    } else {
        for (j, rho) in &report.rho {
            let max = last.iter().filter(|((_, l), _)| l == j).map(|(_, (_, v, _))| *v).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(*rho, max, "layer {j}");
        }
    }

    // no trial runs past its first converging epoch
    for t in &report.trials {
        let hit = t.epochs.iter().position(|m| report.acc_star - m.adv_acc <= report.k);
        if let Some(i) = hit {
            assert_eq!(i + 1, t.epochs.len());
        }
        assert!(t.epochs.iter().all(|m| m.adv_acc <= report.acc_tilde));
    }

    let table = fs::read(rec.run_dir.join("table1.csv")).unwrap();
    run(&cfg, Stage::Report).unwrap();
    assert_eq!(fs::read(rec.run_dir.join("table1.csv")).unwrap(), table);
    assert!(rec.run_dir.join("summary.json").exists());
}

#[test]
fn lambda_solution_has_one_block_per_head_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let rec = run(&cfg, Stage::LambdaSolve).unwrap();
    let sol: LambdaSolution = serde_json::from_slice(&fs::read(rec.run_dir.join("lambda_solution.json")).unwrap()).unwrap();
    assert_eq!(sol.lambda.len(), 2);
    let total: usize = sol.lambda.iter().map(|l| l.numel()).sum();
    assert_eq!(total, (10 + 10) * 2);
    assert_eq!(sol.batches, 1);
    assert_eq!(sol.evaluations.len(), 2);
    let table = fs::read_to_string(rec.run_dir.join("table2.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
