use std::fs;

use dsflow_cli::config::ExperimentConfig;
use dsflow_cli::pipeline::{self, Layout, Method};
use dsflow_core::coupling::load_coupling;
use dsflow_core::integrators::IntegratorKind;
use dsflow_core::metrics::read_metric_csv;
use dsflow_core::model::{ModelParams, ModelSpec};
use dsflow_core::training::endpoint_change_fraction;

fn tiny(dir: &std::path::Path, bench: &str) -> ExperimentConfig {
    let text = format!(
        "benchmark = {bench}
seeds = 3
pairs = 1500
model.hidden_widths = 16, 16
train.iterations = 40
train.batch_size = 256
train.log_every = 10
eval.samples = 400
eval.timing_samples = 300
eval.timing_batches = 3
eval.swd_projections = 32
mechanism.points = 64
helmholtz.resolution = 16
output_dir = {}
",
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn run_all_writes_every_artifact_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "checkerboard");
    pipeline::run_all(&cfg).unwrap();
    let layout = Layout::new(tmp.path());
    for p in [
        layout.base_checkpoint(3),
        layout.checkpoint(3, Method::Vanilla, 2),
        layout.checkpoint(3, Method::Ds, 2),
        layout.coupling(3, Method::Ds, 1),
        layout.metrics(),
        layout.mechanism(),
        layout.helmholtz(),
        layout.manifest(),
    ] {
        assert!(p.exists(), "missing {}", p.display());
    }

    let van = load_coupling(&layout.coupling(3, Method::Vanilla, 1)).unwrap();
    let ds = load_coupling(&layout.coupling(3, Method::Ds, 1)).unwrap();
    assert_eq!(van.x0, ds.x0, "both methods start from the same sources");
    assert!(endpoint_change_fraction(&ds, &van, 1e-6) > 0.0);

    let rows = read_metric_csv(&layout.metrics()).unwrap();
    // control + 5 models x 5 NFEs
    assert_eq!(rows.len(), 1 + 5 * 5);
    let control = rows.iter().find(|r| r.method == "control").unwrap();
    assert_eq!(control.swd, 0.0);
    assert_eq!(control.forbidden_frac, Some(0.0));
    assert!(rows.iter().all(|r| r.forbidden_frac.is_some() && r.swd.is_finite()));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(layout.manifest()).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert!(files.contains_key("seed3/base.ckpt"));
    assert!(!files.contains_key("manifest.json"));
    assert!(files.values().all(|h| h.as_str().unwrap().len() == 64));

    // Second run reuses checkpoints and couplings, so their hashes match;
    // only wall times may differ.
    let before = fs::read(layout.checkpoint(3, Method::Ds, 2)).unwrap();
    let before_pairs = fs::read(layout.coupling(3, Method::Vanilla, 2)).unwrap();
    pipeline::run_all(&cfg).unwrap();
    assert_eq!(before, fs::read(layout.checkpoint(3, Method::Ds, 2)).unwrap());
    assert_eq!(before_pairs, fs::read(layout.coupling(3, Method::Vanilla, 2)).unwrap());
    let again = read_metric_csv(&layout.metrics()).unwrap();
    for (a, b) in rows.iter().zip(&again) {
        assert_eq!((a.swd, a.forbidden_frac, a.nfe), (b.swd, b.forbidden_frac, b.nfe));
    }
}

#[test]
fn reruns_in_a_fresh_directory_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = tiny(d, "gmm");
        pipeline::train_base(&cfg, 3).unwrap();
        pipeline::reflow(&cfg, 3, Method::Ds).unwrap();
    }
    let la = Layout::new(a.path());
    let lb = Layout::new(b.path());
    for k in 1..=2 {
        assert_eq!(
            fs::read(la.checkpoint(3, Method::Ds, k)).unwrap(),
            fs::read(lb.checkpoint(3, Method::Ds, k)).unwrap()
        );
        assert_eq!(fs::read(la.coupling(3, Method::Ds, k)).unwrap(), fs::read(lb.coupling(3, Method::Ds, k)).unwrap());
    }
}

#[test]
fn reflow_without_a_base_model_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "checkerboard");
    let err = pipeline::reflow(&cfg, 3, Method::Vanilla).unwrap_err();
    assert!(format!("{err:#}").contains("base model"), "{err:#}");
    assert!(pipeline::eval(&cfg).is_err());
}

#[test]
fn generate_with_each_integrator() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "checkerboard");
    pipeline::train_base(&cfg, 3).unwrap();
    let ckpt = Layout::new(tmp.path()).base_checkpoint(3);
    for kind in IntegratorKind::ALL {
        let spec = pipeline::integrator_of_kind(&cfg, kind);
        let out = tmp.path().join(format!("{}.csv", kind.tag()));
        let x = pipeline::generate(&cfg, &ckpt, &spec, 50, 3, &out).unwrap();
        assert_eq!(x.dim(), (50, 2));
        assert!(x.iter().all(|v| v.is_finite()));
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 51, "{kind}");
    }
}

#[test]
fn helmholtz_on_a_trained_field_meets_the_invariants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "checkerboard");
    pipeline::train_base(&cfg, 3).unwrap();
    let mut cfg = cfg;
    cfg.helmholtz_resolution = 64;
    let c = pipeline::helmholtz(&cfg, None).unwrap();
    let text = fs::read_to_string(Layout::new(tmp.path()).helmholtz()).unwrap();
    assert_eq!(text.lines().count(), 1 + 64 * 64);
    assert!(c.reconstruction <= 1e-10 && c.transport_divergence <= 1e-10 && c.orthogonality <= 1e-8, "{c:?}");
}

#[test]
fn zero_model_correlations_are_undefined() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "checkerboard");
    let zero = ModelParams::zeros(&ModelSpec::new(2, vec![8]).unwrap());
    let res = pipeline::mechanism_for(&cfg, &[("zero".to_string(), &zero)], 1).unwrap();
    assert_eq!(res[0].pearson, None);
    let text = fs::read_to_string(Layout::new(tmp.path()).mechanism()).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "zero,undefined,undefined,0,0,0");
    assert!(tmp.path().join("mechanism_zero.csv").exists());
}
