//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hallucinator_core::checkpoint::{checkpoint_bytes, checkpoint_from_bytes, decode_checkpoint};
use hallucinator_core::feature_store::{
    decode_fsf, encode_fsf, normalize_set, FeatureCollection, FeatureSequence, FeatureSet, MaskedSet,
};
use hallucinator_core::hallucinator::gaussian::kl_standard_normal;
use hallucinator_core::hallucinator::{ElboNoise, HallucinatorConfig, HallucinatorModel, Variant};
use hallucinator_core::knn::build_index;
use hallucinator_core::nn::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};
use hallucinator_core::synth::{
    ablation_rows, evaluate_counts, gen_corpus, run_ablation_suite, training_data, variant_label,
    write_ablation_csv, CountMetrics, EvalProtocol, EvalSplit, SynthConfig, SyntheticCorpus, VariantResult,
};
use hallucinator_core::trainer::{mcar_split, train, TrainConfig, TrainOutcome, Trainer};
use hallucinator_core::{Error, FormatError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const CORPUS_SEED: u64 = 7;
const TABLE_COUNTS: [usize; 4] = [500, 1_000, 2_000, 5_000];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn_set(n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
    FeatureSet::new(d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn random_split(x: &FeatureSet, rng: &mut ChaCha8Rng) -> (FeatureSet, MaskedSet) {
    let s = mcar_split(x, x.len(), rng).unwrap();
    (s.x_e, s.masked)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut model = HallucinatorModel::<f64>::new(HallucinatorConfig::tiny(8), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // generic point: shrink weights so the unnormalized stacks stay O(1), randomize biases
    for p in model.params_mut().iter_mut() {
        let is_bias = p.name.ends_with(".b");
        for v in p.tensor.data_mut() {
            *v = if is_bias {
                0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.5 * *v
            };
        }
    }
    let x = randn_set(8, 8, &mut rng);
    let missing = [1, 3, 6];
    let flags: Vec<bool> = (0..8).map(|i| !missing.contains(&i)).collect();
    let masked = MaskedSet::new(8, x.data().to_vec(), flags).unwrap();
    let x_e = x.select(&missing);
    let noise = ElboNoise::sample(model.config(), missing.len(), &mut rng);
    let mut store = model.params().clone();
    let r = grad_check(
        &mut store,
        |g| model.elbo_graph(g, &x_e, &masked, &noise).unwrap().total,
        &GradCheckOptions {
            floor: 1e-4,
            ..Default::default()
        },
    );
    let secs = start.elapsed().as_secs_f64();
    check(
        r.max_rel_error < 1e-3 && secs < 60.0,
        format!("max rel error {:.2e} (< 1e-3) in {secs:.1} s (< 60 s)", r.max_rel_error),
    )
}

fn permutation_laws() -> Outcome {
    let start = Instant::now();
    let model = HallucinatorModel::<f32>::new(HallucinatorConfig::desk(32), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200;
    let x = randn_set(n, 32, &mut rng);
    let (_, masked) = random_split(&x, &mut rng);
    let flags = masked.observed_flags().to_vec();
    let post = model.posterior_theta(&x, &flags).unwrap();
    let prior = model.prior_base(&masked).unwrap();
    let g = model.embed_g(&masked).unwrap();
    let mut failures = 0;
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..100 {
        perm.shuffle(&mut rng);
        let pf: Vec<bool> = perm.iter().map(|&i| flags[i]).collect();
        let pm = masked.permuted(&perm);
        failures += usize::from(model.posterior_theta(&x.select(&perm), &pf).unwrap() != post);
        failures += usize::from(model.prior_base(&pm).unwrap() != prior);
        failures += usize::from(model.embed_g(&pm).unwrap() != g.select_rows(&perm));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures == 0 && secs < 60.0,
        format!("{failures} of 300 exact-equality checks failed, {secs:.1} s"),
    )
}

fn flow_invertibility() -> Outcome {
    let model = HallucinatorModel::<f64>::new(HallucinatorConfig::desk(8), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, masked) = random_split(&randn_set(200, 8, &mut rng), &mut rng);
    let theta_dim = model.config().theta_dim;
    // scale 3 puts some samples in the tails
    let eps = randn(1000, theta_dim, &mut rng).map(|v| 3.0 * v);
    let (y, _) = model.flow_forward(&masked, &eps).unwrap();
    let (back, _) = model.flow_inverse(&masked, &y).unwrap();
    let round_trip = back.max_abs_diff(&eps);

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    // magnitudes from 1e-6 to 10 so the near-zero regime is exercised
    let spread = |rng: &mut ChaCha8Rng| randn(1000, 4, rng).map(|v| v * 10f64.powf(-6.0 + 7.0 * (v.abs() % 1.0)));
    let mu = g.input(spread(&mut rng));
    let lv = g.input(spread(&mut rng));
    let kl = kl_standard_normal(&mut g, mu, lv);
    let min_kl = g.value(kl).data().iter().copied().fold(f64::INFINITY, f64::min);
    let z = g.input(Tensor::matrix(1, 16, vec![0.0; 16]).unwrap());
    let kl0 = kl_standard_normal(&mut g, z, z);
    let kl0 = g.value(kl0).data()[0];
    check(
        round_trip < 1e-6 && min_kl >= 0.0 && kl0 == 0.0,
        format!("round trip {round_trip:.2e} (< 1e-6), min KL_z {min_kl:.3e} (≥ 0), KL_z at origin {kl0}"),
    )
}

fn mcar_procedure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200;
    let x = randn_set(n, 2, &mut rng);
    let draws = 100_000;
    let mut counts = vec![0u64; n];
    let mut broken = 0;
    for _ in 0..draws {
        let s = mcar_split(&x, n, &mut rng).unwrap();
        counts[s.missing.len() - 1] += 1;
        let mut seen = vec![0u8; n];
        for &i in &s.missing {
            seen[i] += 1;
        }
        let partition = s.reassemble() == x
            && s.x_e.len() == s.missing.len()
            && (0..n).all(|i| {
                if seen[i] == 1 {
                    !s.masked.is_observed(i) && s.masked.value(i).iter().all(|&v| v == 0.0)
                } else {
                    seen[i] == 0 && s.masked.is_observed(i) && s.masked.value(i) == x.row(i)
                }
            });
        broken += usize::from(!partition);
    }
    let expected = draws as f64 / n as f64;
    let chi: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi);
    check(
        p > 0.01 && broken == 0,
        format!("N_e chi-square p = {p:.3} (> 0.01), {broken} of {draws} splits break the partition"),
    )
}

/// Textbook cosine ranking over every target, ties to the lower index.
fn exhaustive(target: &FeatureSet, q: &[f32], k: usize) -> Vec<usize> {
    let norm = |v: &[f32]| v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(f64, usize)> = target
        .rows()
        .enumerate()
        .map(|(j, t)| {
            let dot: f64 = q.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
            (if qn == 0.0 { 0.0 } else { dot / (qn * norm(t)) }, j)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

fn knn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 32;
    let mut mismatches = 0;
    let mut member_misses = 0;
    let mut queries = 0;
    for (size, nq) in [(50, 250), (500, 250), (5_000, 250), (50_000, 250)] {
        let target = randn_set(size, d, &mut rng);
        let index = build_index(&target).unwrap();
        for qi in 0..nq {
            let k = [1, 4, 10][qi % 3];
            let q: Vec<f32> = if qi % 5 == 0 {
                // perturbed member: the nearest candidates are close together
                let j = rng.random_range(0..size);
                target.row(j).iter().map(|&v| v + 1e-3 * rng.random::<f32>()).collect()
            } else {
                (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            mismatches += usize::from(index.nearest(&q, k).unwrap() != exhaustive(&target, &q, k));
            queries += 1;
        }
        for _ in 0..50 {
            let j = rng.random_range(0..size);
            member_misses += usize::from(index.nearest(target.row(j), 1).unwrap() != [j]);
        }
    }
    check(
        mismatches == 0 && member_misses == 0,
        format!("{mismatches} of {queries} queries differ from the exhaustive scan, {member_misses} of 200 members missed"),
    )
}

struct Trained {
    corpus: SyntheticCorpus,
    outcome: TrainOutcome,
    train_secs: f64,
    eval_secs: f64,
    metrics: Vec<CountMetrics>,
    protocol: EvalProtocol,
    model_config: HallucinatorConfig,
    train_config: TrainConfig,
}

fn train_reference() -> Result<Trained, String> {
    let config = SynthConfig::default();
    let corpus = gen_corpus(CORPUS_SEED, &config).map_err(|e| e.to_string())?;
    let model_config = HallucinatorConfig::desk(config.dim);
    let train_config = TrainConfig::desk();
    let start = Instant::now();
    let outcome = train(&training_data(&corpus), model_config.clone(), train_config.clone()).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let protocol = EvalProtocol::default();
    let start = Instant::now();
    let split = EvalSplit::new(&corpus, &protocol).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = std::iter::once(0).chain(TABLE_COUNTS).collect();
    let metrics = evaluate_counts(&outcome.best, &corpus, &split, &counts, &protocol).map_err(|e| e.to_string())?;
    let eval_secs = start.elapsed().as_secs_f64();
    for m in &metrics {
        println!(
            "    count {:>5}: content_error {:.4} fidelity {:.4} hallucination_fidelity {:.4} coverage {:.4}",
            m.count, m.content_error, m.fidelity, m.hallucination_fidelity, m.coverage
        );
    }
    Ok(Trained {
        corpus,
        outcome,
        train_secs,
        eval_secs,
        metrics,
        protocol,
        model_config,
        train_config,
    })
}

fn end_to_end(t: &Trained) -> Outcome {
    let initial = t.outcome.initial_val.total;
    let vals: Vec<f64> = t.outcome.history.iter().map(|r| r.val_elbo).collect();
    let last = *vals.last().ok_or("empty history")?;
    // smoothing: means over ten consecutive blocks must not fall by more
    // than 1% of the final magnitude
    let blocks = 10.min(vals.len());
    let means: Vec<f64> = (0..blocks)
        .map(|b| {
            let (lo, hi) = (b * vals.len() / blocks, (b + 1) * vals.len() / blocks);
            vals[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let slack = 0.01 * last.abs();
    let monotone = means.windows(2).all(|w| w[1] >= w[0] - slack);
    let gain = (last - initial) / initial.abs();
    let total = t.train_secs + t.eval_secs;
    check(
        monotone && gain >= 0.2 && total < 900.0,
        format!(
            "validation bound {initial:.4e} -> {last:.1} (gain {:.1}% of |initial|, need ≥ 20%), smoothed monotone: {monotone}, {} epochs, train {:.0} s + eval {:.0} s (< 900 s)",
            100.0 * gain,
            vals.len(),
            t.train_secs,
            t.eval_secs
        ),
    )
}

fn at(t: &Trained, count: usize) -> &CountMetrics {
    t.metrics.iter().find(|m| m.count == count).expect("count evaluated")
}

fn hallucination_utility(t: &Trained) -> Outcome {
    let (none, some) = (at(t, 0), at(t, 2_000));
    let drop = none.content_error - some.content_error;
    check(
        drop >= 0.10 && some.hallucination_fidelity >= 0.90,
        format!(
            "content error {:.4} -> {:.4} (drop {drop:.4}, need ≥ 0.10), hallucinated-frame fidelity {:.4} (need ≥ 0.90)",
            none.content_error, some.content_error, some.hallucination_fidelity
        ),
    )
}

fn count_trend(t: &Trained) -> Outcome {
    let rows: Vec<&CountMetrics> = TABLE_COUNTS.iter().map(|&c| at(t, c)).collect();
    let ce_ok = rows.windows(2).all(|w| w[1].content_error <= w[0].content_error + 0.01);
    let fid_ok = rows.windows(2).all(|w| w[1].fidelity <= w[0].fidelity + 0.02);
    let fmt = |f: fn(&CountMetrics) -> f64| rows.iter().map(|m| format!("{:.4}", f(m))).collect::<Vec<_>>().join(" ");
    check(
        ce_ok && fid_ok,
        format!(
            "content error [{}], fidelity [{}] over counts {TABLE_COUNTS:?}",
            fmt(|m| m.content_error),
            fmt(|m| m.fidelity)
        ),
    )
}

fn mean_fidelity(m: &[CountMetrics]) -> f64 {
    let rows: Vec<f64> = m.iter().filter(|m| TABLE_COUNTS.contains(&m.count)).map(|m| m.fidelity).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

fn ablation(t: &Trained) -> Outcome {
    let others: Vec<_> = Variant::ALL[1..].iter().map(|v| v.flags()).collect();
    let mut results = vec![VariantResult {
        flags: Variant::V1.flags(),
        outcome: t.outcome.clone(),
        metrics: t.metrics.iter().filter(|m| m.count > 0).copied().collect(),
    }];
    results.extend(
        run_ablation_suite(&t.corpus, &others, &TABLE_COUNTS, &t.model_config, &t.train_config, &t.protocol)
            .map_err(|e| format!("a variant failed: {e}"))?,
    );
    let rows = ablation_rows(&results);
    let path = std::env::temp_dir().join("hallucinator_ablation.csv");
    write_ablation_csv(&path, &rows).map_err(|e| e.to_string())?;
    let fid: Vec<(String, f64)> = results
        .iter()
        .map(|r| (variant_label(r.flags), mean_fidelity(&r.metrics)))
        .collect();
    for (name, f) in &fid {
        println!("    {name}: mean fidelity {f:.4}");
    }
    let finite = rows.iter().all(|r| r.content_error.is_finite() && r.fidelity.is_finite());
    let (v1, v3, v6) = (fid[0].1, fid[2].1, fid[5].1);
    check(
        finite && v1 - v3 >= 0.15 && v6 < v1,
        format!(
            "V1 {v1:.4}, V3 {v3:.4} (drop {:.4}, need ≥ 0.15), V6 {v6:.4} (need < V1), all six trained, table at {}",
            v1 - v3,
            path.display()
        ),
    )
}

fn performance() -> Outcome {
    let d = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let corpus: Vec<FeatureSet> = (0..10).map(|_| normalize_set(&randn_set(200, d, &mut rng))).collect();
    let train_config = TrainConfig {
        epochs: 1,
        batch_size: 3,
        ..TrainConfig::paper()
    };
    let outcome = Trainer::new(HallucinatorConfig::paper(d), train_config)
        .and_then(|t| t.run(&corpus))
        .map_err(|e| e.to_string())?;
    let model = outcome.last;
    let target = randn_set(100, d, &mut rng);
    let start = Instant::now();
    let out = model.hallucinate(&target, 30_000, &mut rng).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        out.len() == 30_000 && secs < 10.0,
        format!(
            "{} vectors at d = {d} in {secs:.2} s (< 10 s) after {} training steps",
            out.len(),
            model.trained_steps()
        ),
    )
}

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut data: Vec<f32> = (0..64 * 5).map(|_| StandardNormal.sample(&mut rng)).collect();
    data[..4].copy_from_slice(&[-0.0, f32::MIN_POSITIVE, f32::MAX, 1e-42]);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let set: FeatureCollection = FeatureSet::new(5, data.clone()).unwrap().into();
    let seq: FeatureCollection = FeatureSequence::new(5, data.clone()).unwrap().into();
    let mut fsf_ok = true;
    for c in [&set, &seq] {
        let back = decode_fsf(&encode_fsf(c).unwrap()).unwrap();
        fsf_ok &= std::mem::discriminant(&back) == std::mem::discriminant(c) && bits(back.data()) == bits(&data);
    }
    let good = encode_fsf(&set).unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 2;
    let fsf_errors = matches!(decode_fsf(&magic), Err(Error::Format(FormatError::BadMagic { .. })))
        && matches!(decode_fsf(&version), Err(Error::Format(FormatError::UnsupportedVersion(2))))
        && matches!(
            decode_fsf(&good[..good.len() - 4]),
            Err(Error::Format(FormatError::TruncatedPayload { .. }))
        );

    let mut model = HallucinatorModel::<f32>::new(HallucinatorConfig::desk(32), 5).unwrap();
    model.set_trained_steps(9);
    let bytes = checkpoint_bytes(&model, None, None).unwrap();
    let loaded = checkpoint_from_bytes(&bytes).unwrap();
    let phck_ok = checkpoint_bytes(&loaded.model, None, None).unwrap() == bytes
        && model
            .params()
            .iter()
            .zip(loaded.model.params().iter())
            .all(|(p, q)| p.name == q.name && bits(p.tensor.data()) == bits(q.tensor.data()));
    let mut version = bytes.clone();
    version[4] = 7;
    let phck_errors = matches!(decode_checkpoint(&version), Err(Error::Format(FormatError::UnsupportedVersion(7))))
        && matches!(
            decode_checkpoint(&bytes[..bytes.len() / 2]),
            Err(Error::Format(FormatError::CorruptRecord { ref name, .. })) if !name.is_empty()
        );
    check(
        fsf_ok && fsf_errors && phck_ok && phck_errors,
        format!(
            "FSF round trip {fsf_ok}, FSF errors distinct {fsf_errors}, PHCK round trip {phck_ok}, PHCK errors named {phck_errors}"
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome, failed: &mut usize) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = Duration::from_secs_f64(start.elapsed().as_secs_f64().round());
    match result {
        Ok(detail) => println!("PASS {name}: {detail} [{took:?}]"),
        Err(detail) => {
            *failed += 1;
            println!("FAIL {name}: {detail} [{took:?}]");
        }
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    run("gradient correctness", gradient_correctness, &mut failed);
    run("permutation laws", permutation_laws, &mut failed);
    run("flow invertibility", flow_invertibility, &mut failed);
    run("MCAR procedure", mcar_procedure, &mut failed);
    run("kNN oracle equivalence", knn_oracle, &mut failed);
    run("performance budget", performance, &mut failed);
    run("formats", formats, &mut failed);

    println!("training the reference model on the desk corpus");
    match train_reference() {
        Ok(t) => {
            run("end-to-end desk training", || end_to_end(&t), &mut failed);
            run("hallucination utility", || hallucination_utility(&t), &mut failed);
            run("count trend", || count_trend(&t), &mut failed);
            run("ablation", || ablation(&t), &mut failed);
        }
        Err(e) => {
            for name in ["end-to-end desk training", "hallucination utility", "count trend", "ablation"] {
                failed += 1;
                println!("FAIL {name}: reference training failed: {e}");
            }
        }
    }
    println!("{failed} of 11 criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
