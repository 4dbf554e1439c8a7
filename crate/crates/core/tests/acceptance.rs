//! One test per acceptance criterion. Each prints a single PASS/FAIL line;
//! run with `--nocapture` to see them.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{planted_config, tiny_config, verdict};
use mmanet::data::enumerate_patterns;
use mmanet::mad::{classification_uncertainty, Discrepancy};
use mmanet::mar::{
    class_histogram, kl_divergence, pattern_divergence, single_modality_mask,
    HistogramNormalization, PatternPredictionTensor,
};
use mmanet::{
    acer, evaluate_combinations, generate_dataset, mad_loss, pretrain_teacher, train_deployment,
    FusedFeature, MadMode, MarMode,
};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `rows x cols` with orthonormal rows, `rows <= cols`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut q = gaussian(rng, rows, cols);
    for i in 0..rows {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let prev = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &prev);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

#[test]
fn mad_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, ct, cd) = (rng.random_range(2..16), rng.random_range(2..12), 16);
        let z_t = gaussian(&mut rng, b, ct);
        let mut z_d = z_t.dot(&orthonormal_rows(&mut rng, ct, cd));
        for mut row in z_d.rows_mut() {
            let s: f64 = rng.random_range(0.1..10.0);
            row *= s;
        }
        let y_t = gaussian(&mut rng, b, 3);
        let out = mad_loss(
            &FusedFeature::from_matrix(z_t),
            &FusedFeature::from_matrix(z_d),
            &y_t,
            MadMode::Mad,
            Discrepancy::Absolute,
        )
        .unwrap();
        worst = worst.max(out.loss.abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && elapsed < 1.0;
    verdict(
        "distillation loss vanishes for matching relations",
        pass,
        format!("max |L| = {worst:.3e} (tol 1e-9), {elapsed:.3}s"),
    );
    assert!(pass);
}

#[test]
fn mad_gradient_check() {
    let start = Instant::now();
    let (b, d, k, h) = (4, 8, 3, 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z_t = FusedFeature::from_matrix(gaussian(&mut rng, b, d));
        let z_d = gaussian(&mut rng, b, d);
        let y_t = gaussian(&mut rng, b, k) * 2.0;
        let loss = |z: &Array2<f64>| {
            mad_loss(
                &z_t,
                &FusedFeature::from_matrix(z.clone()),
                &y_t,
                MadMode::Mad,
                Discrepancy::Absolute,
            )
            .unwrap()
        };
        let analytic = loss(&z_d)
            .grad
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for i in 0..b {
            for j in 0..d {
                let mut plus = z_d.clone();
                plus[[i, j]] += h;
                let mut minus = z_d.clone();
                minus[[i, j]] -= h;
                let numeric = (loss(&plus).loss - loss(&minus).loss) / (2.0 * h);
                let a = analytic[[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && elapsed < 10.0;
    verdict(
        "distillation gradient matches central differences",
        pass,
        format!("max relative error {worst:.3e} over 20 instances (tol 1e-4), {elapsed:.3}s"),
    );
    assert!(pass);
}

#[test]
fn uncertainty_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ok = 0;
    for _ in 0..100 {
        let b = rng.random_range(2..20);
        let k = rng.random_range(2..8);
        let mut logits = gaussian(&mut rng, b, k) * 3.0;
        let u = rng.random_range(0..b);
        let s = (u + rng.random_range(1..b)) % b;
        logits.row_mut(u).fill(rng.random_range(-5.0..5.0));
        let top = rng.random_range(0..k);
        let margin = 10.0 + rng.random_range(0.0..5.0);
        let rest = logits
            .row(s)
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != top)
            .map(|(_, v)| *v)
            .fold(f64::MIN, f64::max);
        logits[[s, top]] = rest + margin;
        let w = classification_uncertainty(&logits).weights;
        if w[u] > w[s] && (w.sum() - 1.0).abs() <= 1e-9 {
            ok += 1;
        }
    }
    verdict(
        "uncertain teacher samples get larger weights",
        ok == 100,
        format!("{ok}/100 batches ordered with weights summing to 1"),
    );
    assert_eq!(ok, 100);
}

#[test]
fn kl_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut min_g = f64::INFINITY;
    let mut max_identical = 0.0f64;
    for _ in 0..1000 {
        let (patterns, n, k) = (4, rng.random_range(1..60), rng.random_range(2..6));
        let t = Array3::from_shape_fn((patterns, n, k), |_| rng.sample::<f64, _>(StandardNormal));
        let g = pattern_divergence(&class_histogram(
            &PatternPredictionTensor(t.clone()),
            HistogramNormalization::Smoothed,
        ));
        min_g = g.iter().copied().fold(min_g, f64::min);
        let first = t.index_axis(Axis(0), 0).to_owned();
        let same = Array3::from_shape_fn((patterns, n, k), |(_, i, j)| first[[i, j]]);
        let g = pattern_divergence(&class_histogram(
            &PatternPredictionTensor(same),
            HistogramNormalization::Smoothed,
        ));
        max_identical = g.iter().copied().fold(max_identical, f64::max);
    }
    let hand = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
    let pass = min_g >= 0.0 && max_identical <= 1e-6 && (hand - 0.5108).abs() <= 1e-3;
    verdict(
        "divergence properties",
        pass,
        format!("min g = {min_g:.3e}, identical max {max_identical:.3e}, KL([.5,.5]||[.9,.1]) = {hand:.4}"),
    );
    assert!(pass);
}

#[test]
fn mining_recovery() {
    let start = Instant::now();
    let mut hits = 0;
    let mut omega_ok = true;
    let mut picks = Vec::new();
    for seed in 0..10u64 {
        let planted = (seed % 3) as usize;
        let mut cfg = planted_config(seed, planted);
        cfg.train.epochs = cfg.mar.warmup_epochs + 1;
        let data = generate_dataset::<f64>(&cfg.dataset).unwrap();
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let run = train_deployment(&cfg, &data, &teacher).unwrap();
        let strong = run.mining.strong_modality.unwrap();
        picks.push(strong);
        if strong == planted {
            hits += 1;
            let omega = run.mining.omega.as_ref().unwrap();
            let expected: Vec<_> = enumerate_patterns(3)
                .unwrap()
                .all
                .into_iter()
                .filter(|p| !p.is_present(planted))
                .collect();
            omega_ok &= omega.len() == 3 && *omega == expected;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = hits >= 9 && omega_ok && elapsed < 300.0;
    verdict(
        "mining recovers the planted strong modality",
        pass,
        format!("{hits}/10 seeds (need 9), picks {picks:?}, weak set correct: {omega_ok}, {elapsed:.1}s"),
    );
    assert!(pass);
}

#[test]
fn directional_end_to_end() {
    let start = Instant::now();
    let seeds = 0..3u64;
    let n = seeds.clone().count() as f64;
    let (mut base_avg, mut mad_avg) = (0.0, 0.0);
    let (mut mad_weak, mut mar_weak) = (0.0, 0.0);
    for seed in seeds {
        let planted = (seed % 3) as usize;
        let cfg = planted_config(seed, planted);
        let names = cfg.dataset.modality_names();
        let weak: Vec<String> = enumerate_patterns(3)
            .unwrap()
            .all
            .iter()
            .filter(|p| !p.is_present(planted))
            .map(|p| p.label(&names))
            .collect();
        let data = generate_dataset::<f64>(&cfg.dataset).unwrap();
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let score = |mad: MadMode, mar: MarMode| {
            let mut c = cfg.clone();
            c.mad.mode = mad;
            c.mar.mode = mar;
            let run = train_deployment(&c, &data, &teacher).unwrap();
            evaluate_combinations(&run.net, &data.test, &names)
                .unwrap()
                .report
        };
        let base = score(MadMode::Off, MarMode::Off);
        let mad = score(MadMode::Mad, MarMode::Off);
        let both = score(MadMode::Mad, MarMode::Mar);
        base_avg += base.average.error_rate / n;
        mad_avg += mad.average.error_rate / n;
        mad_weak += mad.mean_error_over(&weak).unwrap() / n;
        mar_weak += both.mean_error_over(&weak).unwrap() / n;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass_a = mad_avg < base_avg;
    let pass_b = mar_weak < mad_weak;
    verdict(
        "distillation lowers average combination error",
        pass_a,
        format!("seed-mean average error {base_avg:.3}% -> {mad_avg:.3}%"),
    );
    verdict(
        "regularization lowers weak-combination error",
        pass_b,
        format!("seed-mean weak-row error {mad_weak:.3}% -> {mar_weak:.3}%, {elapsed:.1}s"),
    );
    assert!(pass_a && pass_b && elapsed < 900.0);
}

#[test]
fn sp_sr_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut sp_ok = true;
    for _ in 0..50 {
        let b = rng.random_range(2..12);
        let z_t = FusedFeature::from_matrix(gaussian(&mut rng, b, 6));
        let z_d = FusedFeature::from_matrix(gaussian(&mut rng, b, 6));
        let y_t = Array2::from_elem((b, 4), rng.random_range(-3.0..3.0));
        for disc in [Discrepancy::Absolute, Discrepancy::Signed] {
            let mad = mad_loss(&z_t, &z_d, &y_t, MadMode::Mad, disc).unwrap();
            let sp = mad_loss(&z_t, &z_d, &y_t, MadMode::Sp, disc).unwrap();
            sp_ok &= mad == sp;
        }
    }
    let mut sr_ok = true;
    for m in 2..=6 {
        let all = enumerate_patterns(m).unwrap().all;
        let mask = single_modality_mask(&all);
        let chosen: Vec<_> = all
            .iter()
            .zip(&mask)
            .filter(|(_, &s)| s)
            .map(|(p, _)| p.clone())
            .collect();
        sr_ok &= chosen.len() == m && chosen.iter().all(|p| p.num_present() == 1);
    }
    verdict(
        "unweighted and single-modality baselines",
        sp_ok && sr_ok,
        format!("uniform-teacher equality {sp_ok}, singleton mask {sr_ok}"),
    );
    assert!(sp_ok && sr_ok);
}

#[test]
fn acer_hand_counts() {
    let labels: Vec<usize> = [vec![1; 10], vec![0; 10]].concat();
    let mut preds = labels.clone();
    preds[3] = 0;
    preds[7] = 0;
    preds[12] = 1;
    let hand = acer(&preds, &labels).unwrap();
    let perfect = acer(&labels, &labels).unwrap().acer;
    let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    let wrong = acer(&flipped, &labels).unwrap().acer;
    let pass = hand.acer == 0.15
        && hand.apcer == 0.2
        && hand.bpcer == 0.1
        && perfect == 0.0
        && wrong == 1.0;
    verdict(
        "ACER hand counts",
        pass,
        format!("hand {} perfect {perfect} all-wrong {wrong}", hand.acer),
    );
    assert!(pass);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmanet"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn deterministic_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(&cfg_path, tiny_config(5).to_toml()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let teacher_dir = tmp.path().join("teacher");
    let out = cli(&[
        "train-teacher",
        "--config",
        cfg,
        "--out",
        teacher_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let teacher = teacher_dir.join("teacher.json");
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = cli(&[
                "train-deployment",
                "--config",
                cfg,
                "--teacher",
                teacher.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
            ]);
            assert!(
                out.status.success(),
                "{}",
                String::from_utf8_lossy(&out.stderr)
            );
            dir
        })
        .collect();
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let same_log = read(&runs[0], "train_log.jsonl") == read(&runs[1], "train_log.jsonl");
    let same_ckpt = read(&runs[0], "deployment.json") == read(&runs[1], "deployment.json");
    verdict(
        "repeat runs are byte-identical",
        same_log && same_ckpt,
        format!("train log identical {same_log}, checkpoint identical {same_ckpt}"),
    );
    assert!(same_log && same_ckpt);
}

#[test]
fn loss_ledger() {
    let cfg = planted_config(4, 1);
    let data = generate_dataset::<f64>(&cfg.dataset).unwrap();
    let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
    let run = train_deployment(&cfg, &data, &teacher).unwrap();
    let worst = run
        .log
        .records
        .iter()
        .map(|r| {
            (r.total_loss - (r.task_loss + cfg.mad.alpha * r.mad_loss + cfg.mar.beta * r.mar_loss))
                .abs()
        })
        .fold(0.0, f64::max);
    let active = run
        .log
        .records
        .iter()
        .filter(|r| r.mad_loss > 0.0 && r.mar_loss > 0.0)
        .count();
    let pass = worst <= 1e-6 && active > 0;
    verdict(
        "logged total equals the weighted sum of its parts",
        pass,
        format!(
            "max deviation {worst:.3e} over {} epochs ({active} with every term active)",
            run.log.records.len()
        ),
    );
    assert!(pass);
}
