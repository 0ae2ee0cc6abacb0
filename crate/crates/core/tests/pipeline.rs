use clearlab_core::data::SynthSpec;
use clearlab_core::experiment::{prepare, run_seed, ExperimentConfig};
use clearlab_core::model::ModelConfig;
use clearlab_core::trainer::{config_line, epoch_line, summary_line, Method};
use serde_json::Value;

fn tiny(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synth = SynthSpec { n: 200, ..SynthSpec::default() };
    cfg.model = ModelConfig { hidden: 8, heads: 2, ffn: 16, adapter_dim: 4, ..ModelConfig::default() };
    cfg.pretrain.steps = 20;
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    cfg.train.ensemble_forwards = 2;
    cfg.train.avg_window = 2;
    cfg.train.method = method;
    cfg
}

#[test]
fn routed_run_end_to_end() {
    let cfg = tiny(Method::Clear);
    let prepared = prepare(&cfg).unwrap();
    let mut streamed = 0;
    let m = run_seed(&cfg, &prepared, 0, &mut |_| streamed += 1).unwrap();
    assert_eq!(m.epochs.len(), 4);
    assert_eq!(streamed, 4);

    let acc: Vec<f64> = m.epochs.iter().map(|e| e.test_accuracy).collect();
    let peak = acc.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(m.summary.peak_accuracy, peak);
    assert!((m.summary.average_accuracy - (acc[2] + acc[3]) / 2.0).abs() < 1e-12);
    assert_eq!(m.summary.base_checksum_before, m.summary.base_checksum_after);
    assert_eq!(m.summary.base_checksum_before, prepared.base.checksum());

    // routing only starts after warm-up
    assert!(!m.epochs[0].routed);
    assert!(m.epochs[1..].iter().all(|e| e.routed));
    assert!(m.epochs[0].gmm.is_none());
    assert!(m.epochs[1].gmm.is_some());
}

#[test]
fn metrics_lines_are_tagged_json() {
    let cfg = tiny(Method::Peft);
    let prepared = prepare(&cfg).unwrap();
    let m = run_seed(&cfg, &prepared, 1, &mut |_| {}).unwrap();
    let mut lines = vec![config_line(&cfg)];
    lines.extend(m.epochs.iter().map(epoch_line));
    lines.push(summary_line(&m.summary));
    let tags: Vec<String> = lines
        .iter()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["record"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(tags[0], "config");
    assert!(tags[1..5].iter().all(|t| t == "epoch"));
    assert_eq!(tags[5], "summary");
    let echoed: Value = serde_json::from_str(&lines[0]).unwrap();
    let back: ExperimentConfig = serde_json::from_value(echoed["config"].clone()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn different_seeds_differ() {
    let cfg = tiny(Method::Clear);
    let prepared = prepare(&cfg).unwrap();
    let a = run_seed(&cfg, &prepared, 0, &mut |_| {}).unwrap();
    let b = run_seed(&cfg, &prepared, 1, &mut |_| {}).unwrap();
    assert_ne!(
        a.epochs.iter().map(|e| e.train_ce.to_bits()).collect::<Vec<_>>(),
        b.epochs.iter().map(|e| e.train_ce.to_bits()).collect::<Vec<_>>()
    );
}
