use std::path::Path;

use urnet::data::{parse_modalities, Dataset, DatasetManifest, RegionMap};
use urnet::harness::*;
use urnet::model::{Model, ModelConfig};
use urnet::moddrop::ModalityMask;
use urnet::Error;

fn dataset(mods: &str, samples: usize, seed: u64) -> Dataset {
    Dataset::generate(DatasetManifest::new("toy", parse_modalities(mods).unwrap(), samples, 16, seed).unwrap()).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        levels: 2,
        base_width: 4,
        rep_channels: 4,
        decoder_blocks: 1,
        ..ModelConfig::default()
    }
}

fn train_cfg(scenario: Scenario) -> TrainConfig {
    TrainConfig {
        scenario,
        epochs_seg: 2,
        pretrain_max_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn params(m: &Model) -> Vec<(String, Vec<f32>)> {
    m.store().params().iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
}

#[test]
fn metric_examples() {
    let gt = [0, 1, 1, 1, 1, 0, 0, 0];
    let pr = [0, 0, 0, 1, 1, 1, 1, 0];
    assert_eq!(dice(&gt, &gt, &[1]).unwrap(), 1.0);
    assert_eq!(dice(&pr, &gt, &[1]).unwrap(), 0.5);
    assert_eq!(dice(&[1, 0], &[0, 1], &[1]).unwrap(), 0.0);
    assert_eq!(dice(&[0, 0], &[0, 0], &[1]).unwrap(), 1.0);
    assert!(dice(&[0], &[0, 0], &[1]).is_err());

    let zeros = [0.0f32; 16];
    assert_eq!(psnr(&zeros, &zeros, 1.0).unwrap(), 99.0);
    assert!(psnr(&[1.0; 16], &zeros, 1.0).unwrap().abs() < 1e-12);
    assert!((psnr(&[0.5; 16], &zeros, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!((psnr(&[0.5; 16], &zeros, 1.0).unwrap() - 6.02).abs() < 1e-2);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = dataset("F,T1,T1c,T2", 12, 1);
    for scenario in [Scenario::BaselineMd, Scenario::UrnMd] {
        let cfg = TrainConfig {
            lr_seg: 0.0,
            ..train_cfg(scenario)
        };
        let zero = train_scenario(&cfg, &tiny_model(), &ds, &[]).unwrap();
        let untrained = train_scenario(&TrainConfig { epochs_seg: 0, ..cfg.clone() }, &tiny_model(), &ds, &[]).unwrap();
        assert_eq!(params(&zero.model), params(&untrained.model), "{scenario}");
        assert!(!zero.trace.is_empty());
    }
}

#[test]
fn training_is_deterministic() {
    let ds = dataset("F,T1,T1c,T2", 12, 2);
    for scenario in [Scenario::Baseline, Scenario::UrnMd] {
        let a = train_scenario(&train_cfg(scenario), &tiny_model(), &ds, &[]).unwrap();
        let b = train_scenario(&train_cfg(scenario), &tiny_model(), &ds, &[]).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(params(&a.model), params(&b.model));
        let c = train_scenario(&TrainConfig { seed: 4, ..train_cfg(scenario) }, &tiny_model(), &ds, &[]).unwrap();
        assert_ne!(a.trace, c.trace);
    }
}

#[test]
fn training_lowers_the_loss() {
    let ds = dataset("F,T1,T1c,T2", 24, 5);
    let cfg = TrainConfig {
        epochs_seg: 15,
        lr_seg: 3e-3,
        ..train_cfg(Scenario::Baseline)
    };
    let t = train_scenario(&cfg, &tiny_model(), &ds, &[]).unwrap();
    let first: f64 = t.trace[..4].iter().map(|r| r.loss).sum::<f64>() / 4.0;
    let n = t.trace.len();
    let last: f64 = t.trace[n - 4..].iter().map(|r| r.loss).sum::<f64>() / 4.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn pretrained_encoders_stay_frozen() {
    let seg = dataset("F,T1,T1c,T2", 10, 3);
    let hcp = dataset("T1,T2", 8, 4);
    let cfg = train_cfg(Scenario::UrnMdPretrained);
    let pre_only = TrainConfig { epochs_seg: 0, ..cfg.clone() };
    let before = train_scenario(&pre_only, &tiny_model(), &seg, &[&seg, &hcp]).unwrap();
    let after = train_scenario(&cfg, &tiny_model(), &seg, &[&seg, &hcp]).unwrap();
    assert!(after.pretrain_epochs >= 1);
    let enc = |m: &Model| -> Vec<(String, Vec<f32>)> { params(m).into_iter().filter(|(n, _)| n.starts_with("enc.")).collect() };
    let (b, a) = (enc(&before.model), enc(&after.model));
    assert!(!b.is_empty());
    for ((n, x), (_, y)) in b.iter().zip(&a) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "{n} changed");
    }
    for (p, q) in before.model.store().buffers().iter().zip(after.model.store().buffers()) {
        if p.name.starts_with("enc.") {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
    let head = |m: &Model| -> Vec<Vec<f32>> { params(m).into_iter().filter(|(n, _)| n.starts_with("seg.")).map(|(_, v)| v).collect() };
    assert_ne!(head(&before.model), head(&after.model));
    assert!(after.model.store().params().iter().all(|p| p.frozen == p.name.starts_with("enc.")));
}

#[test]
fn pretraining_needs_two_modalities() {
    let seg = dataset("F,T1,T1c,T2", 8, 3);
    let single = dataset("T1", 8, 4);
    let err = train_scenario(&train_cfg(Scenario::UrnMdPretrained), &tiny_model(), &seg, &[&single]);
    assert!(matches!(err, Err(Error::Config(_))));
    let err = train_scenario(&train_cfg(Scenario::UrnMdPretrained), &tiny_model(), &seg, &[]);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn pretraining_stops_after_patience() {
    let seg = dataset("T1,T2", 8, 3);
    let cfg = TrainConfig {
        pretrain_max_epochs: 50,
        pretrain_patience: 3,
        pretrain_tolerance: 0.99,
        epochs_seg: 0,
        ..train_cfg(Scenario::UrnMdPretrained)
    };
    // no epoch can cut the loss by 99%, so only the first one counts as progress
    let t = train_scenario(&cfg, &tiny_model(), &seg, &[&seg]).unwrap();
    assert_eq!(t.pretrain_epochs, 4);
    let val: Vec<&TraceRow> = t.trace.iter().filter(|r| r.validation).collect();
    assert_eq!(val.len(), 4);
}

#[test]
fn sweep_covers_every_pattern_and_agrees_with_direct_evaluation() {
    let ds = dataset("F,T1,T1c,T2", 10, 6);
    let samples: Vec<usize> = (6..10).collect();
    let regions = RegionMap::default();
    for scenario in [Scenario::BaselineMd, Scenario::UrnMd] {
        let t = train_scenario(&train_cfg(scenario), &tiny_model(), &ds, &[]).unwrap();
        let report = sweep(&t.model, &ds, &samples, &regions).unwrap();
        let patterns = report.patterns();
        assert_eq!(patterns.len(), 15);
        assert_eq!(patterns[0], "1111");
        assert_eq!(patterns[14], "0001");
        let psnr_rows = |p: &str| report.rows.iter().filter(|r| r.pattern == p && r.metric == "psnr").count();
        assert_eq!(psnr_rows("1111"), 0);
        if scenario.is_urn() {
            assert_eq!(psnr_rows("1000"), 3);
            assert_eq!(psnr_rows("0110"), 2);
        } else {
            assert_eq!(report.rows.len(), 45);
        }
        for mask in [ModalityMask::all(4), ModalityMask::new(vec![false, true, true, false])] {
            let direct = evaluate(&t.model, &ds, &samples, &mask, &regions).unwrap();
            for (region, v) in direct {
                let swept = report.value(&mask.pattern(), &region, "dice").unwrap();
                assert!((swept - v).abs() < 1e-12, "{scenario} {region}: {swept} vs {v}");
            }
        }
        let text = report.to_csv();
        assert_eq!(SweepReport::from_csv(&text, Path::new("r.csv")).unwrap(), report);
    }
}

#[test]
fn urn_prediction_ignores_unavailable_inputs() {
    let ds = dataset("F,T1,T1c,T2", 6, 7);
    let t = train_scenario(&train_cfg(Scenario::UrnMd), &tiny_model(), &ds, &[]).unwrap();
    let mask = ModalityMask::new(vec![false, true, false, true]);
    let a = predict(&t.model, &ds, 2, &mask).unwrap();
    let mut scrambled = ds.clone();
    for img in [0, 2] {
        scrambled.samples[2].images[img].iter_mut().for_each(|v| *v = 5.0 - *v);
    }
    let b = predict(&t.model, &scrambled, 2, &mask).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.syntheses.iter().map(|(j, _)| *j).collect::<Vec<_>>(), vec![0, 2]);
}

#[test]
fn malformed_reports_are_rejected() {
    let p = Path::new("bad.csv");
    assert!(SweepReport::from_csv("pattern,value\n", p).is_err());
    assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1x11,WT,dice,0.5\n"), p).is_err());
    assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1011,WT,dice\n"), p).is_err());
    assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1011,WT,dice,abc\n"), p).is_err());
}

#[test]
fn svg_has_one_group_per_pattern() {
    let ds = dataset("F,T1,T1c,T2", 6, 8);
    let t = train_scenario(&train_cfg(Scenario::Baseline), &tiny_model(), &ds, &[]).unwrap();
    let report = sweep(&t.model, &ds, &[4, 5], &RegionMap::default()).unwrap();
    let mods = ds.manifest.modalities.clone();
    let one = render_svg(&[("baseline".into(), report.clone())], "WT", "dice", &mods).unwrap();
    assert!(one.starts_with("<svg"));
    assert_eq!(one.matches("class=\"group\"").count(), 15);
    let three = render_svg(
        &[("a".into(), report.clone()), ("b".into(), report.clone()), ("c".into(), report)],
        "WT",
        "dice",
        &mods,
    )
    .unwrap();
    assert_eq!(three.matches("class=\"group\"").count(), 15);
    assert_eq!(three.matches("class=\"bar\"").count(), 45);
}
