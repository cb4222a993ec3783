use continual_anomaly::eval::{run_continual, BenchConfig};
use continual_anomaly::synth::{generate, SynthSpec};

fn spec(magnitude: f64) -> SynthSpec {
    SynthSpec {
        tasks: 1,
        train_images: 20,
        test_normal: 30,
        test_anomalous: 30,
        anomaly_magnitude: magnitude,
        seed: 11,
        ..SynthSpec::default()
    }
}

fn single_task_auroc(magnitude: f64) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&spec(magnitude), dir.path()).unwrap();
    let mut cfg = BenchConfig::default();
    cfg.train.epochs = 10;
    let out = run_continual(&manifest, &cfg).unwrap();
    assert!(out.report.forgetting.is_none());
    out.report.tasks[0].metrics.image_auroc.unwrap()
}

#[test]
fn zero_magnitude_is_chance_level() {
    let a = single_task_auroc(0.0);
    assert!((0.25..=0.75).contains(&a), "{a}");
}

#[test]
fn default_magnitude_separates() {
    assert!(single_task_auroc(spec(0.0).noise * 5.0) >= 0.95);
}
