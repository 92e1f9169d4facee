//! Acceptance criteria, one PASS/FAIL line each. Run a subset with `ACCEPTANCE_ONLY=1,3,6`.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pitsep_core::assignment::{best_perm_bruteforce, best_perm_hungarian, pit_loss, CostMatrix};
use pitsep_core::corpus::{build_dataset, CorpusConfig, Dataset, Split};
use pitsep_core::dsp::{istft, stft, StftConfig, Waveform};
use pitsep_core::inference::{metaframe_mse, AssignmentMode};
use pitsep_core::masking::{apply_masks, softmax_masks, StreamMagnitudes};
use pitsep_core::metrics::{aggregate, evaluate_irm, evaluate_separations, EvalMode, EvalRecord};
use pitsep_core::model::{MetaFrame, Model, ModelLayout};
use pitsep_core::training::{train, Criterion, TrainConfig, TrainingCurve};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mags(v: Array3<f64>) -> StreamMagnitudes {
    StreamMagnitudes::new(v).unwrap()
}

fn random_mags(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> StreamMagnitudes {
    mags(Array3::from_shape_simple_fn(dim, || {
        rng.gen_range(0.0..1.0)
    }))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    pitsep_core::assignment::Permutation::all(n)
        .map(|p| p.as_slice().to_vec())
        .collect()
}

fn permutation_invariance(
    rng: &mut ChaCha8Rng,
    instances: usize,
    sizes: &[usize],
) -> (usize, usize) {
    let mut failures = 0;
    let mut checks = 0;
    for k in 0..instances {
        let s = sizes[k % sizes.len()];
        let frames = rng.gen_range(1..6);
        let bins = rng.gen_range(1..9);
        let est = random_mags(rng, (s, frames, bins));
        let refs = random_mags(rng, (s, frames, bins));
        let (base, _) = pit_loss(&est, &refs).unwrap();
        for sigma in permutations(s) {
            checks += 1;
            let (l, _) = pit_loss(&est, &refs.reordered(&sigma)).unwrap();
            if l.to_bits() != base.to_bits() {
                failures += 1;
            }
        }
    }
    (checks, failures)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (checks, failures) = permutation_invariance(&mut rng, 1000, &[2, 3]);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 10.0,
        format!("{checks} permuted evaluations, {failures} mismatches, {secs:.2}s"),
    )
}

fn assignment_oracle(
    rng: &mut ChaCha8Rng,
    sizes: std::ops::RangeInclusive<usize>,
) -> (usize, usize) {
    let mut mismatches = 0;
    let mut total = 0;
    for n in sizes {
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let c = CostMatrix::from_rows(&rows).unwrap();
            let (_, brute) = best_perm_bruteforce(&c).unwrap();
            let (_, hung) = best_perm_hungarian(&c).unwrap();
            total += 1;
            if brute.to_bits() != hung.to_bits() {
                mismatches += 1;
            }
        }
    }
    (total, mismatches)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let (total, mismatches) = assignment_oracle(&mut rng, 2..=7);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 5.0,
        format!("{total} matrices, {mismatches} total-cost mismatches, {secs:.2}s"),
    )
}

/// Loss of the full pipeline as a function of normalized input features.
fn pipeline_loss(model: &Model, x: &Array1<f64>, mf: &MetaFrame) -> f64 {
    let (logits, _) = model.net.forward(x.view()).unwrap();
    let l = &model.layout;
    let z = logits
        .into_shape_with_order((l.streams, l.output_frames, l.bins))
        .unwrap();
    let masks = softmax_masks(z.view());
    let est = apply_masks(&masks, mf.mixture.view()).unwrap();
    pit_loss(&est, mf.references.as_ref().unwrap()).unwrap().0
}

fn close(a: f64, n: f64, scale: f64) -> bool {
    (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3 * scale)
}

/// Checks analytic against central-difference gradients at one random non-tie point.
/// Returns the worst relative vector error.
fn gradient_point(rng: &mut ChaCha8Rng, streams: usize, seed: u64) -> Option<(bool, f64)> {
    let layout = ModelLayout {
        streams,
        bins: 4,
        input_frames: 3,
        output_frames: 2,
    };
    let stft_cfg = StftConfig {
        frame_len: 6,
        hop: 3,
        fft_len: 6,
        window: pitsep_core::dsp::Window::SqrtHann,
    };
    let mut model = Model::init(layout, &[7], stft_cfg, 8000, seed).unwrap();
    for p in model.net.parameters_mut() {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let mf = MetaFrame {
        center: 0,
        features: Array1::from_shape_simple_fn(12, || rng.gen_range(0.0..3.0)),
        mixture: Array2::from_shape_simple_fn((2, 4), || rng.gen_range(0.2..2.0)),
        references: Some(random_mags(rng, (streams, 2, 4))),
    };
    // skip points where two assignments are nearly tied
    let est = model.estimate(&[&mf]).unwrap().remove(0);
    let c = pitsep_core::assignment::pairwise_cost(&est, mf.references.as_ref().unwrap()).unwrap();
    let mut totals: Vec<f64> = pitsep_core::assignment::Permutation::all(streams)
        .map(|p| c.total(&p))
        .collect();
    totals.sort_by(f64::total_cmp);
    if totals[1] - totals[0] < 1e-3 * totals[0].max(1e-9) {
        return None;
    }

    let result = model.loss_and_gradients(&[&mf], Criterion::Pit).unwrap();
    let analytic: Vec<f64> = result
        .gradients
        .slices()
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..model.net.parameters().len() {
        for k in 0..model.net.parameters()[p].len() {
            let orig = model.net.parameters()[p][k];
            model.net.parameters_mut()[p][k] = orig + h;
            let up = model.evaluate(&[&mf], Criterion::Pit).unwrap();
            model.net.parameters_mut()[p][k] = orig - h;
            let down = model.evaluate(&[&mf], Criterion::Pit).unwrap();
            model.net.parameters_mut()[p][k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let x = model.features(mf.features.view()).unwrap();
    let input_analytic: Vec<f64> = result.gradients.input.row(0).to_vec();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let up = pipeline_loss(&model, &xp, &mf);
        xp[i] -= 2.0 * h;
        let down = pipeline_loss(&model, &xp, &mf);
        numeric.push((up - down) / (2.0 * h));
    }
    let all: Vec<f64> = analytic.into_iter().chain(input_analytic).collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ok = all.iter().zip(&numeric).all(|(a, n)| close(*a, *n, scale));
    let diff: f64 = all
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    Some((ok, diff / norm.max(1e-300)))
}

fn gradient_suite(seed: u64, streams: usize, points: usize) -> (usize, usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut failed, mut worst) = (0, 0, 0.0f64);
    let mut attempt = 0;
    while checked < points {
        attempt += 1;
        if let Some((ok, rel)) = gradient_point(&mut rng, streams, attempt) {
            checked += 1;
            failed += usize::from(!ok);
            worst = worst.max(rel);
        }
    }
    (checked, failed, worst)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (checked, failed, worst) = gradient_suite(3, 2, 20);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed == 0 && secs < 30.0,
        format!("{checked} points, {failed} failing, worst vector rel err {worst:.2e}, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = StftConfig::default();
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let len = rng.gen_range(1000..6000);
        let x = Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap();
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg, 8000).unwrap();
        let range = cfg.interior(spec.frames());
        let range = range.start..range.end.min(len);
        let (mut sig, mut err) = (0.0, 0.0);
        for i in range {
            sig += x.samples()[i].powi(2);
            err += (x.samples()[i] - y.samples()[i]).powi(2);
        }
        worst = worst.min(10.0 * (sig / err.max(1e-300)).log10());
    }
    outcome(
        worst > 60.0,
        format!("50 signals, worst interior SNR {worst:.1} dB"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut worst_cons) = (0.0f64, 0.0f64);
    let mut bins_checked = 0;
    for k in 0..500 {
        let s = 2 + k % 3;
        let (t, f) = (rng.gen_range(1..8), rng.gen_range(1..40));
        let spread = [1.0, 10.0, 300.0][k % 3];
        let z = Array3::from_shape_simple_fn((s, t, f), || rng.gen_range(-spread..spread));
        let m = softmax_masks(z.view());
        worst_sum = worst_sum.max(m.max_sum_error());
        let mix = Array2::from_shape_simple_fn((t, f), || rng.gen_range(0.0..5.0));
        let est = apply_masks(&m, mix.view()).unwrap();
        let total = est.values().sum_axis(Axis(0));
        for (a, b) in total.iter().zip(&mix) {
            let rel = (a - b).abs() / b.abs().max(1e-300);
            if *b > 0.0 {
                worst_cons = worst_cons.max(rel);
            }
        }
        bins_checked += t * f;
    }
    outcome(
        worst_sum < 1e-6 && worst_cons < 1e-6,
        format!(
            "{bins_checked} bins, max |sum-1| {worst_sum:.1e}, max conservation rel err {worst_cons:.1e}"
        ),
    )
}

/// Synthetic corpus with a 100-speaker training pool.
fn dataset(sources: usize, train: usize, valid: usize, test: usize, seed: u64) -> Dataset {
    let cfg = CorpusConfig {
        sources,
        train_speakers: 100,
        num_train: train,
        num_valid: valid,
        num_test_cc: test,
        num_test_oc: test,
        ..CorpusConfig::default()
    };
    build_dataset(&cfg, seed).unwrap()
}

fn curve_line(curve: &TrainingCurve) -> String {
    let first = curve.epochs.first().map_or(f64::NAN, |r| r.valid_mse);
    let last = curve.epochs.last().map_or(f64::NAN, |r| r.valid_mse);
    let best = curve
        .epochs
        .iter()
        .map(|r| r.valid_mse)
        .fold(f64::INFINITY, f64::min);
    format!("valid {first:.5} -> {last:.5} (best {best:.5})")
}

fn relative_change(curve: &TrainingCurve) -> f64 {
    let first = curve.epochs.first().unwrap().valid_mse;
    let last = curve.epochs.last().unwrap().valid_mse;
    (last - first) / first
}

fn fig2_config(criterion: Criterion) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        criterion,
        input_frames: 11,
        output_frames: 5,
        shift: 1,
        hidden: vec![128, 128, 128],
        epoch_metaframes: Some(1000),
        max_valid_metaframes: Some(200),
        seed: 6,
        ..TrainConfig::default()
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let data = dataset(2, 1000, 200, 0, 60);
    let stft_cfg = StftConfig::default();
    let train_s = &data.split(Split::Train).samples;
    let valid_s = &data.split(Split::Valid).samples;
    let (_, pit) = train(
        &fig2_config(Criterion::Pit),
        &stft_cfg,
        train_s,
        valid_s,
        None,
    )
    .unwrap();
    let (_, conv) = train(
        &fig2_config(Criterion::Conventional),
        &stft_cfg,
        train_s,
        valid_s,
        None,
    )
    .unwrap();
    let pit_drop = -relative_change(&pit);
    let conv_change = relative_change(&conv);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pit_drop >= 0.5 && conv_change.abs() <= 0.2,
        format!(
            "pit {} drop {:.1}%; conventional {} change {:+.1}%; {secs:.0}s",
            curve_line(&pit),
            100.0 * pit_drop,
            curve_line(&conv),
            100.0 * conv_change
        ),
    )
}

const TABLE_WINDOWS: [usize; 3] = [31, 7, 5];

fn table_config(output_frames: usize) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        criterion: Criterion::Pit,
        input_frames: 31,
        output_frames,
        shift: 1,
        hidden: vec![128, 128, 128],
        epoch_metaframes: Some(4000),
        max_valid_metaframes: Some(400),
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Shared state for criteria 7-9: three trained window configurations scored on both test
/// conditions, plus the oracle.
struct TableRun {
    records: Vec<EvalRecord>,
    /// Meta-frames where the optimal trace scored worse than the default trace.
    argmin_violations: usize,
    metaframes_compared: usize,
    test_mixtures: usize,
}

fn table_run() -> TableRun {
    let data = dataset(2, 400, 60, 200, 70);
    let stft_cfg = StftConfig::default();
    let train_s = &data.split(Split::Train).samples;
    let valid_s = &data.split(Split::Valid).samples;
    let models: Vec<Model> = TABLE_WINDOWS
        .iter()
        .map(|&m| {
            let (model, curve) =
                train(&table_config(m), &stft_cfg, train_s, valid_s, None).unwrap();
            println!("    trained 31\\{m}: {}", curve_line(&curve));
            model
        })
        .collect();
    let modes = [AssignmentMode::Optimal, AssignmentMode::Default];
    let mut records = Vec::new();
    let mut argmin_violations = 0;
    let mut metaframes_compared = 0;
    let mut test_mixtures = 0;
    for split in [Split::TestCc, Split::TestOc] {
        let samples = &data.split(split).samples;
        let ids: Vec<String> = data
            .split(split)
            .manifest
            .records
            .iter()
            .map(|r| r.id.clone())
            .collect();
        test_mixtures += samples.len();
        use rayon::prelude::*;
        let per_sample: Vec<(Vec<EvalRecord>, usize, usize)> = samples
            .par_iter()
            .zip(ids.par_iter())
            .map(|(sample, id)| {
                let mut recs = Vec::new();
                let (mut bad, mut compared) = (0, 0);
                for model in &models {
                    let (r, seps) =
                        evaluate_separations(model, id, split.name(), sample, &modes, 1).unwrap();
                    let refs = seps[0].ref_windows.as_ref().unwrap();
                    let opt =
                        metaframe_mse(&seps[0].outputs, refs, &seps[0].estimate.trace).unwrap();
                    let def =
                        metaframe_mse(&seps[1].outputs, refs, &seps[1].estimate.trace).unwrap();
                    compared += opt.len();
                    bad += opt.iter().zip(&def).filter(|(o, d)| o > d).count();
                    recs.extend(r);
                }
                recs.push(evaluate_irm(id, split.name(), sample, &stft_cfg).unwrap());
                (recs, bad, compared)
            })
            .collect();
        for (r, bad, compared) in per_sample {
            records.extend(r);
            argmin_violations += bad;
            metaframes_compared += compared;
        }
    }
    TableRun {
        records,
        argmin_violations,
        metaframes_compared,
        test_mixtures,
    }
}

fn sdri_table(run: &TableRun) -> HashMap<(String, EvalMode, Option<usize>), f64> {
    aggregate(&run.records)
        .into_iter()
        .map(|a| ((a.split, a.mode, a.out_window), a.sdri))
        .collect()
}

const OPT: EvalMode = EvalMode::Assign(AssignmentMode::Optimal);
const DEF: EvalMode = EvalMode::Assign(AssignmentMode::Default);

fn criterion_7(run: &TableRun) -> Outcome {
    let t = sdri_table(run);
    let cc = |mode, m| t[&("test-cc".to_string(), mode, Some(m))];
    let opt: Vec<f64> = TABLE_WINDOWS.iter().map(|&m| cc(OPT, m)).collect();
    let def: Vec<f64> = TABLE_WINDOWS.iter().map(|&m| cc(DEF, m)).collect();
    let a = run.argmin_violations == 0;
    let b = opt.windows(2).all(|w| w[1] >= w[0]);
    let c = opt.iter().zip(&def).all(|(o, d)| o >= d);
    let n = run.test_mixtures / 2;
    outcome(
        a && b && c && n >= 200,
        format!(
            "(a) {}/{} meta-frames with opt > def MSE; (b) opt SDRi 31/7/5 = {:.2}/{:.2}/{:.2} dB; \
             (c) def SDRi = {:.2}/{:.2}/{:.2} dB; {n} CC mixtures",
            run.argmin_violations,
            run.metaframes_compared,
            opt[0],
            opt[1],
            opt[2],
            def[0],
            def[1],
            def[2]
        ),
    )
}

fn criterion_8(run: &TableRun) -> Outcome {
    let t = sdri_table(run);
    let mut ok = true;
    let mut parts = Vec::new();
    for split in ["test-cc", "test-oc"] {
        let irm = t[&(split.to_string(), EvalMode::Irm, None)];
        let best = TABLE_WINDOWS
            .iter()
            .flat_map(|&m| [OPT, DEF].map(|mode| t[&(split.to_string(), mode, Some(m))]))
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= irm > best;
        parts.push(format!(
            "{split}: IRM {irm:.2} dB vs best model {best:.2} dB"
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_9(run: &TableRun) -> Outcome {
    let t = sdri_table(run);
    let mut ok = true;
    let mut parts = Vec::new();
    for &m in &TABLE_WINDOWS {
        let cc = t[&("test-cc".to_string(), OPT, Some(m))];
        let oc = t[&("test-oc".to_string(), OPT, Some(m))];
        ok &= (cc - oc).abs() <= 2.0;
        parts.push(format!("31\\{m} CC {cc:.2} / OC {oc:.2} dB"));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let data = dataset(3, 1000, 200, 0, 100);
    let cfg = TrainConfig {
        seed: 10,
        ..fig2_config(Criterion::Pit)
    };
    let (_, curve) = train(
        &cfg,
        &StftConfig::default(),
        &data.split(Split::Train).samples,
        &data.split(Split::Valid).samples,
        None,
    )
    .unwrap();
    let drop = -relative_change(&curve);
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (checks, perm_fail) = permutation_invariance(&mut rng, 300, &[3]);
    let (_, oracle_fail) = assignment_oracle(&mut rng, 3..=3);
    let (points, grad_fail, _) = gradient_suite(1011, 3, 10);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        drop >= 0.3 && perm_fail + oracle_fail + grad_fail == 0,
        format!(
            "{} drop {:.1}%; S=3 suites: {checks} invariance checks, 200 assignment oracles, \
             {points} gradient points, {} failures; {secs:.0}s",
            curve_line(&curve),
            100.0 * drop,
            perm_fail + oracle_fail + grad_fail
        ),
    )
}

/// Criterion number, label, and check.
type Entry<F> = (u32, &'static str, F);
type TableCheck = fn(&TableRun) -> Outcome;

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let simple: [Entry<fn() -> Outcome>; 6] = [
        (1, "permutation invariance", criterion_1),
        (2, "assignment oracle", criterion_2),
        (3, "end-to-end gradient", criterion_3),
        (4, "stft round trip", criterion_4),
        (5, "mask normalization", criterion_5),
        (6, "pit vs conventional curves", criterion_6),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let o = f();
            report(n, name, &o);
            results.push((n, name, o));
        }
    }
    if wanted(7) || wanted(8) || wanted(9) {
        let start = Instant::now();
        let run = table_run();
        println!(
            "    window sweep finished in {:.0}s",
            start.elapsed().as_secs_f64()
        );
        let table: [Entry<TableCheck>; 3] = [
            (7, "window sweep structure", criterion_7),
            (8, "oracle dominance", criterion_8),
            (9, "open vs closed condition", criterion_9),
        ];
        for (n, name, f) in table {
            if wanted(n) {
                let o = f(&run);
                report(n, name, &o);
                results.push((n, name, o));
            }
        }
    }
    if wanted(10) {
        let o = criterion_10();
        report(10, "three-talker training", &o);
        results.push((10, "three-talker training", o));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn report(n: u32, name: &str, o: &Outcome) {
    println!(
        "criterion {n:>2} {:<28} {}  {}",
        name,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}
