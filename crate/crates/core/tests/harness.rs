use std::fs;

use dal::corpus::{generate_benchmark, GeneratorConfig, Setting, SplitName};
use dal::harness::{protocol_config, run_ablation, run_main, write_report, ExperimentSpec, Method};
use dal::model::InputMode;
use dal::trainer::TrainConfig;

fn spec(setting: Setting) -> ExperimentSpec {
    let mut s = ExperimentSpec::new("h", setting, "unused");
    s.generator = GeneratorConfig {
        n_train: 80,
        n_valid: 40,
        n_test_id: 40,
        n_test_ood: 40,
        n_evidence: 3,
        ..GeneratorConfig::default()
    };
    s.train = TrainConfig {
        max_epochs: 3,
        d_w: 8,
        d_s: 8,
        cls_hidden: 8,
        ..protocol_config()
    };
    s.grid = vec![0.01, 1.0];
    s.seeds = vec![3, 5];
    s
}

// Selection is per method, so the main comparison is a sub-report of the ablation.
#[test]
fn main_rows_are_a_subset_of_ablation_rows() {
    let s = spec(Setting::CrossTopic);
    let bench = generate_benchmark(&s.generator, s.setting).unwrap();
    let main = run_main(&s, &bench).unwrap();
    let abl = run_ablation(&s, &bench).unwrap();
    for m in [Method::Baseline, Method::Dal] {
        assert_eq!(main.selection(m), abl.selection(m));
        for split in [SplitName::TestId, SplitName::TestOod] {
            assert_eq!(main.aggregate(m, InputMode::Both, split), abl.aggregate(m, InputMode::Both, split));
        }
    }
    let rows = |r: &dal::harness::RunReport| {
        r.records
            .iter()
            .filter(|x| matches!(x.method, Method::Baseline | Method::Dal))
            .copied()
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(&main), rows(&abl));
    let n = abl.selection(Method::DalNews).unwrap();
    assert_eq!(n.beta, Some(0.0));
    let e = abl.selection(Method::DalEnv).unwrap();
    assert_eq!(e.alpha, Some(0.0));
}

#[test]
fn report_files_are_reproducible_and_carry_the_hash() {
    let s = spec(Setting::CrossPlatform);
    let bench = generate_benchmark(&s.generator, s.setting).unwrap();
    let d = tempfile::tempdir().unwrap();
    let a = write_report(&run_main(&s, &bench).unwrap(), &s, &d.path().join("a")).unwrap();
    let b = write_report(&run_main(&s, &bench).unwrap(), &s, &d.path().join("b")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let hash = s.config_hash();
    for name in ["report.csv", "runs.csv", "report.md"] {
        assert!(fs::read_to_string(d.path().join("a").join(name)).unwrap().contains(&hash), "{name}");
    }
    assert!(fs::read_to_string(d.path().join("a/report.md")).unwrap().contains(&s.benchmark_hash()));
}

#[test]
fn test_metrics_only_for_selected_configs() {
    let s = spec(Setting::CrossPlatform);
    let bench = generate_benchmark(&s.generator, s.setting).unwrap();
    let r = run_main(&s, &bench).unwrap();
    let sel = r.selection(Method::Dal).unwrap();
    let tested: Vec<_> = r
        .records
        .iter()
        .filter(|x| x.method == Method::Dal && x.split == SplitName::TestOod)
        .collect();
    assert_eq!(tested.len(), s.seeds.len());
    assert!(tested.iter().all(|x| x.alpha == sel.alpha && x.beta == sel.beta));
    let tests: Vec<&String> = r.audit.iter().filter(|l| l.contains(" test ")).collect();
    assert_eq!(tests.len(), 2 * s.seeds.len() * 2);
}
