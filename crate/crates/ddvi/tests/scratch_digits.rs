use std::path::Path;


use ddvi::pipeline::config::TrainConfig;
use ddvi::pipeline::data::load_csv;
use ddvi::pipeline::predict::{evaluate, EvalMetrics};
use ddvi::pipeline::train::train;

fn digits_config_t(method: &str, layers: usize, iterations: usize, trainable: &str) -> TrainConfig {
    let mut cfg = digits_config(method, layers, iterations);
    cfg.set("trainable", trainable).unwrap();
    cfg
}

fn digits_config(method: &str, layers: usize, iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("task", "classification"),
        ("method", method),
        ("layers", &layers.to_string() as &str),
        ("inducing", "64"),
        ("pca", "16"),
        ("iterations", &iterations.to_string()),
        ("batch", "256"),
        ("n_mc", "8"),
        ("steps", "10"),
        ("hidden_cap", "6"),
        ("score_hidden", "128,128"),
        ("lr", "0.01"),
        ("seed", "0"),
        ("checkpoint_every", "1000"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn run(method: &str, layers: usize, iterations: usize) -> EvalMetrics {
    run_cfg(digits_config(method, layers, iterations), method, layers)
}

fn run_cfg(cfg: TrainConfig, method: &str, layers: usize) -> EvalMetrics {
    let t0 = std::time::Instant::now();
    let ds = load_csv(Path::new("tests/data/digits.csv"), false, 1, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&cfg, &ds, dir.path(), None).unwrap();
    println!("  {method} L{layers} {} iters trained in {:.1?}", cfg.iterations, t0.elapsed());
    let metrics_text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics_text.lines().collect();
    for line in lines.iter().skip(1).step_by((lines.len() / 8).max(1)) {
        println!("    {line}");
    }
    let cp = ddvi::pipeline::checkpoint::load(&outcome.checkpoint_path).unwrap();
    let test = load_csv(&dir.path().join("test_split.csv"), false, 1, true).unwrap();
    let (_, metrics) = evaluate(&cp, &test, 64, 7).unwrap();
    println!("  {method} L{layers} metrics {metrics:?} total {:.1?}", t0.elapsed());
    metrics
}

#[test]
#[ignore]
fn digits_probe_short() {
    let mut cfg = digits_config("ddvi", 2, 3000);
    cfg.set("sigma2", "0.1").unwrap();
    cfg.set("g", "0.31622776601683794").unwrap();
    cfg.set("hidden_cap", "8").unwrap();
    cfg.set("lr_final", "0.001").unwrap();
    run_cfg(cfg, "ddvi", 2);
}

#[test]
#[ignore]
fn digits_probe_full() {
    run("dsvi", 2, 3000);
    run("ddvi", 2, 3000);
}

#[test]
#[ignore]
fn write_fuzz_seeds() {
    let cfg = TrainConfig::default();
    std::fs::write("fuzz/corpus/config_parse/defaults", cfg.to_text()).unwrap();
    let mut cp = ddvi::pipeline::checkpoint::Checkpoint::new(cfg.to_text());
    cp.insert("meta.iter", ddvi::model::Tensor::new(&[], vec![3.0]));
    cp.insert("l0.z", ddvi::model::Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.4]));
    let bytes = ddvi::pipeline::checkpoint::encode(&cp);
    std::fs::write("fuzz/corpus/checkpoint_decode/small", bytes).unwrap();
}
