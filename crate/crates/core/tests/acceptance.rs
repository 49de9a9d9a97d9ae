//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use urnet::data::{load_dataset, parse_modalities, save_dataset, Dataset, DatasetManifest, RegionMap};
use urnet::gradcheck::{project, uniform, GradCheck};
use urnet::harness::{mean_image_psnr, sweep, train_scenario, Scenario, SweepReport, TrainConfig};
use urnet::model::{load_checkpoint, save_checkpoint, Mode, Model, ModelConfig, SynthesisDecoder, UrnModel};
use urnet::moddrop::DropConfig;
use urnet::rng;
use urnet::tensor::{BnMode, Graph, ParamStore, Tensor, Var};
use urnet::urn::{fuse, fuse_canonical, variance_penalty, FusionF};
use urnet::Error;

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN: usize = 200;
const EVAL: usize = 60;
const SIZE: usize = 32;
const HCP_SAMPLES: usize = 200;
/// Pre-training schedule for the trend runs; the rest of the configuration is default.
const PRE_LR: f64 = 1e-2;
const PRE_MAX_EPOCHS: usize = 25;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: String) -> Line {
    println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Line { id, pass, detail }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64).unwrap().cdf(stat)
}

fn sampler() -> Line {
    let start = Instant::now();
    let draws = 100_000u64;
    let (mut min_p, mut worst_sum, mut ok) = (1.0f64, 0.0f64, true);
    for (t, theta) in [0.5, 0.8].into_iter().enumerate() {
        for n_max in 1..=3 {
            let cfg = DropConfig::new(theta, n_max, 1, 4).unwrap();
            let pmf: Vec<f64> = (0..=n_max).map(|k| cfg.pmf(k).unwrap()).collect();
            let sum_err = (pmf.iter().sum::<f64>() - 1.0).abs();
            worst_sum = worst_sum.max(sum_err);
            let mut r = rng::stream(2024, "acceptance-sampler", t as u64, n_max as u64);
            let mut counts = vec![0u64; n_max + 1];
            for _ in 0..draws {
                counts[cfg.sample_drop_count(&mut r)] += 1;
            }
            let expected: Vec<f64> = pmf.iter().map(|p| p * draws as f64).collect();
            let p = chi_square_p(&counts, &expected);
            min_p = min_p.min(p);
            ok &= p > 0.01 && sum_err < 1e-12;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        "1 sampler",
        ok && secs < 10.0,
        format!("6 configurations, smallest p = {min_p:.4}, worst |sum pmf - 1| = {worst_sum:.1e}, {secs:.1} s"),
    )
}

type Build = Box<dyn Fn(&[Tensor<f64>]) -> urnet::Result<(Graph<f64>, Var, Vec<Var>)>>;

fn variables(g: &mut Graph<f64>, v: &[Tensor<f64>]) -> Vec<Var> {
    v.iter().map(|t| g.variable(t.clone())).collect()
}

fn distinct_values(shape: &[usize], seed: u64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let base = uniform(&[len], 0.0, 1.0, seed);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| base.data()[a].total_cmp(&base.data()[b]));
    let mut data = vec![0.0; len];
    for (rank, &i) in order.iter().enumerate() {
        data[i] = rank as f64 * 0.05 - 1.0;
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mag = uniform(shape, 0.05, 1.0, seed);
    let sign = uniform(shape, 0.0, 1.0, seed + 99);
    let data = mag.data().iter().zip(sign.data()).map(|(&m, &s)| if s < 0.5 { -m } else { m }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `(operation, inputs, graph builder, step)` for every checked case.
fn gradient_cases() -> Vec<(String, Vec<Tensor<f64>>, Build, f64)> {
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Build, f64)> = Vec::new();
    let conv = [
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
        ([1, 1, 5, 5], [2, 1, 3, 3], 1, 1),
        ([2, 2, 6, 4], [3, 2, 1, 1], 1, 0),
        ([1, 3, 7, 7], [2, 3, 3, 3], 2, 1),
        ([3, 2, 4, 6], [2, 2, 5, 3], 1, 2),
    ];
    for (i, (xs, ws, stride, pad)) in conv.into_iter().enumerate() {
        let seed = 1000 + i as u64 * 10;
        let inputs = vec![uniform(&xs, -1.0, 1.0, seed), uniform(&ws, -1.0, 1.0, seed + 1), uniform(&[ws[0]], -1.0, 1.0, seed + 2)];
        let build: Build = Box::new(move |v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let y = g.conv2d(vars[0], vars[1], vars[2], stride, pad)?;
            let l = project(&mut g, y, seed)?;
            Ok((g, l, vars))
        });
        cases.push(("conv2d".into(), inputs, build, 1e-3));
    }

    let spatial = [[1, 1, 4, 4], [2, 3, 4, 6], [1, 2, 8, 2], [3, 1, 2, 2], [2, 2, 6, 6]];
    for (i, s) in spatial.iter().enumerate() {
        let seed = 1100 + i as u64;
        let build: Build = Box::new(move |v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let y = g.max_pool2(vars[0])?;
            let l = project(&mut g, y, seed)?;
            Ok((g, l, vars))
        });
        cases.push(("max_pool2".into(), vec![distinct_values(s, seed)], build, 1e-3));

        let cout = 1 + i % 3;
        let inputs = vec![uniform(s, -1.0, 1.0, seed), uniform(&[s[1], cout, 2, 2], -1.0, 1.0, seed + 7), uniform(&[cout], -1.0, 1.0, seed + 8)];
        let build: Build = Box::new(move |v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let y = g.upsample2(vars[0], vars[1], vars[2])?;
            let l = project(&mut g, y, seed)?;
            Ok((g, l, vars))
        });
        cases.push(("upsample2".into(), inputs, build, 1e-3));
    }

    let bn = [[2, 3, 4, 4], [4, 2, 3, 3], [1, 1, 5, 5], [3, 4, 2, 2], [2, 1, 6, 2]];
    for (i, s) in bn.iter().enumerate() {
        let seed = 1200 + i as u64;
        let c = s[1];
        let inputs = vec![uniform(s, -2.0, 2.0, seed), uniform(&[c], 0.5, 1.5, seed + 1), uniform(&[c], -0.5, 0.5, seed + 2)];
        let mean = uniform(&[c], -0.2, 0.2, seed + 3).into_data();
        let var = uniform(&[c], 0.5, 2.0, seed + 4).into_data();
        for mode in ["train", "eval", "fixed"] {
            let (mean, var) = (mean.clone(), var.clone());
            let build: Build = Box::new(move |v| {
                let mut g = Graph::new();
                let vars = variables(&mut g, v);
                let m = match mode {
                    "train" => BnMode::Train { running: None },
                    "eval" => BnMode::Eval { mean: &mean, var: &var },
                    _ => BnMode::Fixed,
                };
                let y = g.batchnorm(vars[0], Some(vars[1]), Some(vars[2]), m)?;
                let l = project(&mut g, y, seed)?;
                Ok((g, l, vars))
            });
            cases.push((format!("batchnorm-{mode}"), inputs.clone(), build, 1e-3));
        }
    }

    let flat: [&[usize]; 5] = [&[7], &[2, 3], &[1, 2, 3, 3], &[4, 1, 2, 2], &[2, 2, 2, 5]];
    for (i, s) in flat.iter().enumerate() {
        let seed = 1300 + i as u64;
        let build: Build = Box::new(move |v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let y = g.leaky_relu(vars[0], 0.2)?;
            let l = project(&mut g, y, seed)?;
            Ok((g, l, vars))
        });
        cases.push(("leaky_relu".into(), vec![away_from_zero(s, seed)], build, 1e-3));
    }

    let ce = [[1, 4, 2, 2], [2, 3, 3, 3], [3, 2, 1, 4], [1, 5, 4, 4], [2, 4, 2, 3]];
    for (i, s) in ce.iter().enumerate() {
        let seed = 1400 + i as u64;
        let labels: Vec<u8> = uniform(&[s[0] * s[2] * s[3]], 0.0, s[1] as f64, seed + 1).data().iter().map(|&v| v as u8).collect();
        let build: Build = Box::new(move |v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let l = g.softmax_cross_entropy(vars[0], &labels)?;
            Ok((g, l, vars))
        });
        cases.push(("cross_entropy".into(), vec![uniform(s, -3.0, 3.0, seed)], build, 1e-3));
    }

    let rep = [[1, 1, 1, 1], [2, 3, 4, 4], [1, 16, 3, 5], [3, 2, 2, 2], [2, 4, 6, 3]];
    for (i, s) in rep.iter().enumerate() {
        let seed = 1500 + i as u64;
        for f in [FusionF::Identity, FusionF::Exp] {
            let inputs = (0..3).map(|k| uniform(s, -2.0, 2.0, seed * 10 + k)).collect();
            let build: Build = Box::new(move |v| {
                let mut g = Graph::new();
                let vars = variables(&mut g, v);
                let z = fuse(&mut g, &vars, f)?;
                let l = project(&mut g, z, seed)?;
                Ok((g, l, vars))
            });
            cases.push((format!("fusion-{f}"), inputs, build, 1e-3));
        }
        let inputs = (0..3).map(|k| uniform(s, -2.0, 2.0, seed * 20 + k)).collect();
        let build: Build = Box::new(|v| {
            let mut g = Graph::new();
            let vars = variables(&mut g, v);
            let l = variance_penalty(&mut g, &vars)?;
            Ok((g, l, vars))
        });
        cases.push(("variance_penalty".into(), inputs, build, 1e-3));
    }

    let dec = [[2, 3, 4, 4], [1, 2, 6, 6], [3, 3, 4, 6], [2, 4, 5, 5], [2, 2, 8, 4]];
    for (i, shape) in dec.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let d = SynthesisDecoder::new(&mut store, "dec", shape[1], 2, 0.2, &mut rng::stream(i as u64, "acceptance-dec", 0, 0));
        let store: ParamStore<f64> = store.cast();
        let probe = store.find("dec.res0.conv2.weight").unwrap();
        let seed = 1600 + i as u64;
        let inputs = vec![uniform(&shape, -1.0, 1.0, seed), store.get(probe).value.clone()];
        let build: Build = Box::new(move |v| {
            let mut s = store.clone();
            s.get_mut(probe).value = v[1].clone();
            let mut g = Graph::new();
            let x = g.variable(v[0].clone());
            let w = g.param(&s, probe);
            let y = d.forward(&mut g, &s, x, Mode::Train)?;
            let l = project(&mut g, y, seed)?;
            Ok((g, l, vec![x, w]))
        });
        cases.push(("decoder".into(), inputs, build, 1e-6));
    }
    cases
}

fn gradients() -> Line {
    let start = Instant::now();
    let cases = gradient_cases();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut failures = Vec::new();
    for (op, inputs, build, eps) in &cases {
        let err = GradCheck { eps: *eps, ..GradCheck::default() }
            .run(inputs, build)
            .map(|r| r.max())
            .unwrap_or(f64::INFINITY);
        if !(err < 1e-3) {
            failures.push(format!("{op} ({err:.1e})"));
        }
        match worst.iter_mut().find(|(o, _)| o == op) {
            Some((_, w)) => *w = w.max(err),
            None => worst.push((op.clone(), err)),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    line(
        "2 gradients",
        failures.is_empty() && secs < 120.0,
        format!(
            "{} cases over {} operations, worst relative error {max:.1e}, {secs:.1} s{}",
            cases.len(),
            worst.len(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn fused(inputs: &[Tensor<f32>], f: FusionF) -> Vec<f32> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let z = fuse(&mut g, &vars, f).unwrap();
    g.value(z).data().to_vec()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn fusion() -> Line {
    let shape = [2, 16, 8, 8];
    let inputs: Vec<Tensor<f32>> = (0..4).map(|k| uniform(&shape, -2.0, 2.0, 1700 + k).cast()).collect();

    let mut permutation_ok = true;
    for f in [FusionF::Identity, FusionF::Exp] {
        let reference = {
            let mut g = Graph::new();
            let vars: Vec<(usize, Var)> = inputs.iter().enumerate().map(|(i, t)| (i, g.input(t.clone()))).collect();
            let z = fuse_canonical(&mut g, &vars, f).unwrap();
            g.value(z).data().to_vec()
        };
        for order in permutations(4) {
            let mut g = Graph::new();
            let vars: Vec<(usize, Var)> = order.iter().map(|&i| (i, g.input(inputs[i].clone()))).collect();
            let z = fuse_canonical(&mut g, &vars, f).unwrap();
            permutation_ok &= g.value(z).data().iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }

    let mut idem = 0.0f64;
    for f in [FusionF::Identity, FusionF::Exp] {
        for k in [1, 2, 4] {
            let dup = vec![inputs[0].clone(); k];
            let z = fused(&dup, f);
            idem = z.iter().zip(inputs[0].data()).map(|(a, b)| (a - b).abs() as f64).fold(idem, f64::max);
        }
    }

    let z = fused(&inputs, FusionF::Identity);
    let mean_err = (0..z.len())
        .map(|i| (z[i] as f64 - inputs.iter().map(|t| t.data()[i] as f64).sum::<f64>() / 4.0).abs())
        .fold(0.0, f64::max);

    let pair = [Tensor::new([1], vec![0.0f32]).unwrap(), Tensor::new([1], vec![3f32.ln()]).unwrap()];
    let ln2_err = (fused(&pair, FusionF::Exp)[0] as f64 - 2f64.ln()).abs();

    line(
        "3 fusion",
        permutation_ok && idem < 1e-5 && mean_err < 1e-6 && ln2_err < 1e-5,
        format!(
            "permutations bit-exact: {permutation_ok}, idempotence {idem:.1e}, identity vs mean {mean_err:.1e}, exp(0, ln 3) vs ln 2 {ln2_err:.1e}"
        ),
    )
}

struct SeedRun {
    seed: u64,
    baseline: SweepReport,
    baseline_md: SweepReport,
    urn: SweepReport,
    pretrained: SweepReport,
    oracle: Vec<(String, f64)>,
}

fn trend_runs() -> (Vec<SeedRun>, f64) {
    let start = Instant::now();
    let regions = RegionMap::default();
    let mods = parse_modalities("F,T1,T1c,T2").unwrap();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let mut m = DatasetManifest::new("brats-toy", mods.clone(), TRAIN + EVAL, SIZE, 10 + seed).unwrap();
            m.train_fraction = TRAIN as f64 / (TRAIN + EVAL) as f64;
            let brats = Dataset::generate(m).unwrap();
            let hcp = Dataset::generate(
                DatasetManifest::new("hcp-toy", parse_modalities("T1,T2").unwrap(), HCP_SAMPLES, SIZE, 20 + seed).unwrap(),
            )
            .unwrap();
            let (train, eval) = brats.manifest.split();
            assert_eq!((train.len(), eval.len()), (TRAIN, EVAL));
            let run = |scenario: Scenario| {
                let t0 = Instant::now();
                let mut cfg = TrainConfig { scenario, seed, ..TrainConfig::default() };
                let pre: Vec<&Dataset> = if scenario == Scenario::UrnMdPretrained {
                    cfg.lr_pre = PRE_LR;
                    cfg.pretrain_max_epochs = PRE_MAX_EPOCHS;
                    vec![&brats, &hcp]
                } else {
                    Vec::new()
                };
                let trained = train_scenario(&cfg, &ModelConfig::default(), &brats, &pre).unwrap();
                let report = sweep(&trained.model, &brats, &eval, &regions).unwrap();
                progress(&format!(
                    "seed {seed} {scenario}: {:.0} s{}",
                    t0.elapsed().as_secs_f64(),
                    if trained.pretrain_epochs > 0 { format!(", {} pre-training epochs", trained.pretrain_epochs) } else { String::new() }
                ));
                report
            };
            SeedRun {
                seed,
                baseline: run(Scenario::Baseline),
                baseline_md: run(Scenario::BaselineMd),
                urn: run(Scenario::UrnMd),
                pretrained: run(Scenario::UrnMdPretrained),
                oracle: mods.iter().map(|m| (m.clone(), mean_image_psnr(&brats, &train, &eval, m).unwrap())).collect(),
            }
        })
        .collect();
    (runs, start.elapsed().as_secs_f64())
}

fn wt(r: &SweepReport, pattern: &str) -> f64 {
    r.value(pattern, "WT", "dice").unwrap()
}

fn mean<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let v: Vec<f64> = it.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
}

fn trend_criteria(runs: &[SeedRun], secs: f64) -> Vec<Line> {
    let patterns = runs[0].baseline.patterns();
    let majority = runs.len() / 2 + 1;
    let mut out = Vec::new();

    let drop = |r: &SweepReport| wt(r, "1111") - wt(r, "0111");
    let base_drop: Vec<f64> = runs.iter().map(|r| drop(&r.baseline)).collect();
    out.push(line(
        "4a baseline collapse",
        mean(base_drop.iter().copied()) > 0.25,
        format!("WT drop without F {:.3} (seeds {})", mean(base_drop.iter().copied()), fmt(&base_drop)),
    ));

    let md_drop: Vec<f64> = runs.iter().map(|r| drop(&r.baseline_md)).collect();
    out.push(line(
        "4b dropout degrades gracefully",
        mean(md_drop.iter().copied()) < 0.10,
        format!("WT drop without F {:.3} (seeds {})", mean(md_drop.iter().copied()), fmt(&md_drop)),
    ));

    let urn_wt: Vec<f64> = runs.iter().map(|r| r.urn.mean("WT", "dice").unwrap()).collect();
    let md_wt: Vec<f64> = runs.iter().map(|r| r.baseline_md.mean("WT", "dice").unwrap()).collect();
    let wins: Vec<usize> = runs
        .iter()
        .map(|r| patterns.iter().filter(|p| wt(&r.urn, p) > wt(&r.baseline_md, p)).count())
        .collect();
    let seeds_won = wins.iter().filter(|&&w| 2 * w > patterns.len()).count();
    out.push(line(
        "4c unified representation",
        mean(urn_wt.iter().copied()) >= mean(md_wt.iter().copied()) - 0.02 && seeds_won >= majority,
        format!(
            "mean WT {:.3} vs {:.3}; strictly higher on {:?} of {} combinations per seed",
            mean(urn_wt.iter().copied()),
            mean(md_wt.iter().copied()),
            wins,
            patterns.len()
        ),
    ));

    let all_regions = |r: &SweepReport| mean(["ET", "TC", "WT"].iter().map(|k| r.mean(k, "dice").unwrap()));
    let pre_all = mean(runs.iter().map(|r| all_regions(&r.pretrained)));
    let urn_all = mean(runs.iter().map(|r| all_regions(&r.urn)));
    let gains: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let g = |k: &str| r.pretrained.mean(k, "dice").unwrap() - r.urn.mean(k, "dice").unwrap();
            (g("ET"), g("TC"))
        })
        .collect();
    let improved = gains.iter().filter(|(et, tc)| *et > 0.0 && *tc > 0.0).count();
    out.push(line(
        "4d pre-training",
        pre_all >= urn_all - 0.02 && improved >= majority,
        format!(
            "mean Dice {pre_all:.3} vs {urn_all:.3}; ET/TC gain per seed {}; improved on {improved} of {} seeds",
            gains.iter().map(|(a, b)| format!("{a:+.3}/{b:+.3}")).collect::<Vec<_>>().join(", "),
            runs.len()
        ),
    ));

    let full_md: Vec<f64> = runs.iter().map(|r| wt(&r.baseline_md, "1111")).collect();
    let full_base: Vec<f64> = runs.iter().map(|r| wt(&r.baseline, "1111")).collect();
    out.push(line(
        "4e dropout as regularizer",
        mean(full_md.iter().copied()) >= mean(full_base.iter().copied()) - 0.02,
        format!("all-available WT {:.3} vs {:.3}", mean(full_md.iter().copied()), mean(full_base.iter().copied())),
    ));

    out.push(line("4 runtime", secs < 3600.0, format!("{} seeds, 4 scenarios each, {:.0} s", runs.len(), secs)));
    out
}

fn synthesis(runs: &[SeedRun]) -> Line {
    let mods: Vec<String> = runs[0].oracle.iter().map(|(m, _)| m.clone()).collect();
    let mut beats = true;
    let mut parts = Vec::new();
    for (j, m) in mods.iter().enumerate() {
        let pattern: String = (0..mods.len()).map(|i| if i == j { '0' } else { '1' }).collect();
        let psnr = mean(runs.iter().map(|r| r.pretrained.value(&pattern, m, "psnr").unwrap()));
        let oracle = mean(runs.iter().map(|r| r.oracle[j].1));
        beats &= psnr > oracle;
        parts.push(format!("{m} {psnr:.1}/{oracle:.1}"));
    }
    let by_count = |count: usize| -> Vec<f64> {
        runs.iter()
            .flat_map(|r| r.pretrained.rows.iter())
            .filter(|row| row.metric == "psnr" && row.pattern.chars().filter(|&c| c == '1').count() == count)
            .map(|row| row.value)
            .collect()
    };
    let (one, three) = (by_count(1), by_count(3));
    let finite = one.iter().chain(&three).all(|v| v.is_finite());
    let (one, three) = (mean(one), mean(three));
    line(
        "5 synthesis",
        beats && finite && one < three,
        format!(
            "held-out PSNR vs mean-image dB: {}; one available {one:.1} dB < three available {three:.1} dB",
            parts.join(", ")
        ),
    )
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        fs::create_dir_all(dir).unwrap();
        let cli = |args: &[&str]| {
            let o = Command::new(env!("CARGO_BIN_EXE_urnet")).current_dir(dir).args(args).output().unwrap();
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        };
        let tiny = [
            "--set", "levels=2", "--set", "base_width=4", "--set", "rep_channels=4",
            "--set", "epochs_seg=2", "--set", "pretrain_max_epochs=2", "--seed", "4",
        ];
        cli(&["gen-data", "--out", "brats", "--name", "brats", "--samples", "12", "--size", "16", "--seed", "3"]);
        cli(&["gen-data", "--out", "hcp", "--name", "hcp", "--modalities", "T1,T2", "--samples", "8", "--size", "16", "--seed", "5"]);
        for sc in ["baseline", "baseline-md", "urn-md", "urn-md-pretrained"] {
            let mut args = vec!["train", "--scenario", sc, "--data", "brats", "--out", sc];
            if sc == "urn-md-pretrained" {
                args.extend(["--pretrain-data", "brats", "--pretrain-data", "hcp"]);
            }
            args.extend(tiny);
            cli(&args);
            cli(&["sweep", "--model", sc, "--data", "brats", "--out", &format!("r-{sc}")]);
        }
        cli(&[
            "plot", "--report", "r-baseline/report.csv", "--report", "r-baseline-md/report.csv",
            "--report", "r-urn-md/report.csv", "--report", "r-urn-md-pretrained/report.csv", "--out", "fig.svg",
        ]);
        tree(dir)
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    let kinds = |t: &[(String, Vec<u8>)], ext: &str| t.iter().filter(|(n, _)| n.ends_with(ext)).count();
    line(
        "6 determinism",
        a == b && kinds(&a, ".svg") == 5 && kinds(&a, "checkpoint.txt") == 4,
        format!(
            "two full CLI runs, {} files ({} checkpoints, {} csv, {} svg), identical: {}",
            a.len(),
            kinds(&a, "checkpoint.txt"),
            kinds(&a, ".csv"),
            kinds(&a, ".svg"),
            a == b
        ),
    )
}

fn round_trips() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let ds = Dataset::generate(DatasetManifest::new("rt", parse_modalities("F,T1,T1c,T2").unwrap(), 5, 16, 9).unwrap()).unwrap();
    save_dataset(&ds, &root.join("d1")).unwrap();
    let back = load_dataset(&root.join("d1")).unwrap();
    save_dataset(&back, &root.join("d2")).unwrap();
    checks.push(("dataset round trip", back == ds && tree(&root.join("d1")) == tree(&root.join("d2"))));

    let cfg = ModelConfig { levels: 2, base_width: 4, rep_channels: 4, decoder_blocks: 1, fusion: FusionF::Exp, ..ModelConfig::default() };
    let mut urn = UrnModel::new(cfg, 3).unwrap();
    urn.freeze_encoders();
    let model = Model::Urn(urn);
    save_checkpoint(&model, &root.join("c1")).unwrap();
    let loaded = load_checkpoint(&root.join("c1")).unwrap();
    save_checkpoint(&loaded, &root.join("c2")).unwrap();
    checks.push(("checkpoint round trip", tree(&root.join("c1")) == tree(&root.join("c2"))));

    let d = root.join("d1");
    let victim = d.join("samples/000002/T1c.f32");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 1]).unwrap();
    checks.push(("truncated image", matches!(load_dataset(&d), Err(Error::Format { path, .. }) if path == victim)));
    fs::write(&victim, &bytes).unwrap();
    let manifest = d.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
    checks.push(("dataset version", matches!(load_dataset(&d), Err(Error::Version { .. }))));
    fs::write(&manifest, "[").unwrap();
    checks.push(("dataset manifest syntax", matches!(load_dataset(&d), Err(Error::Format { .. }))));
    fs::remove_file(&manifest).unwrap();
    checks.push(("dataset manifest missing", matches!(load_dataset(&d), Err(Error::Io { .. }))));

    let c = root.join("c1");
    let victim = c.join("params/0001.f32");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[4..]).unwrap();
    checks.push(("truncated parameter", matches!(load_checkpoint(&c), Err(Error::Format { path, .. }) if path == victim)));
    fs::write(&victim, &bytes).unwrap();
    let manifest = c.join("checkpoint.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("version=1", "version=2")).unwrap();
    checks.push(("checkpoint version", matches!(load_checkpoint(&c), Err(Error::Version { .. }))));
    fs::write(&manifest, text.replace("fusion=exp", "fusion=max")).unwrap();
    checks.push(("checkpoint field", matches!(load_checkpoint(&c), Err(Error::Format { .. }))));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    line(
        "7 formats",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} round-trip and corruption checks", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn main() {
    let mut lines = vec![sampler(), gradients(), fusion()];
    progress("trend runs: 3 seeds x 4 scenarios");
    let (runs, secs) = trend_runs();
    lines.extend(trend_criteria(&runs, secs));
    lines.push(synthesis(&runs));
    lines.push(determinism());
    lines.push(round_trips());
    for r in &runs {
        let summary = |name: &str, rep: &SweepReport| {
            format!(
                "{name} ET {:.3} TC {:.3} WT {:.3}",
                rep.mean("ET", "dice").unwrap(),
                rep.mean("TC", "dice").unwrap(),
                rep.mean("WT", "dice").unwrap()
            )
        };
        println!(
            "  seed {}: {}; {}; {}; {}",
            r.seed,
            summary("baseline", &r.baseline),
            summary("baseline-md", &r.baseline_md),
            summary("urn-md", &r.urn),
            summary("urn-md-pretrained", &r.pretrained)
        );
    }
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!("acceptance: {} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        for l in failed {
            eprintln!("failed {}: {}", l.id, l.detail);
        }
        std::process::exit(1);
    }
}
