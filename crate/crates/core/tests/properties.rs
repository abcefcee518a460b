//! Randomized properties checked against the oracles in `common`.

mod common;

use common::*;
use dcg_core::contrastive::{clip_loss, clip_loss_grad, init_projector, DualProjector};
use dcg_core::dataset::{split, Lang, PairRecord, PairSet, Style};
use dcg_core::eval::{plan_populations, run_trials, Direction, DirectionChoice, EvalConfig, SamplingMode};
use dcg_core::synthgen::{generate, generate_with_maps, SynthSpec};
use dcg_core::trainer::{train, validation_loss, StopReason, TrainConfig};
use dcg_core::viz::{export_scatter, pca_2d, scatter, ScatterGroup};
use dcg_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

fn records(n: usize, tag: &str) -> Vec<PairRecord> {
    (0..n)
        .map(|i| PairRecord {
            id: format!("{tag}{i}"),
            dataset: tag.into(),
            lang: Lang::En,
            style: Style::Unknown,
            image_row: i,
            text_row: i,
            n_words: 1,
            text_raw: None,
            extra: Default::default(),
        })
        .collect()
}

// contrastive ------------------------------------------------------------------

#[test]
fn loss_is_ln_b_when_all_logits_match() {
    for b in [2usize, 3, 4] {
        let x = Matrix::from_fn(b, 3, |_, j| [1.0, 2.0, -1.0][j]);
        let p = DualProjector::identity(3);
        let (loss, _) = clip_loss(&p, &x, &x).unwrap();
        assert!((loss - (b as f64).ln()).abs() < 1e-6, "B = {b}: {loss}");
    }
}

#[test]
fn loss_matches_reference_and_is_permutation_invariant() {
    for seed in 0..20 {
        let mut rng = rng(seed);
        let b = rng.random_range(2..12);
        let x = gaussian(b, 10, &mut rng);
        let y = gaussian(b, 10, &mut rng);
        let p = init_projector(10, 5, seed).unwrap();
        let (loss, cache) = clip_loss(&p, &x, &y).unwrap();
        let reference = clip_loss_f64(
            &to_rows(&x),
            &to_rows(&y),
            &to_rows(&p.image_head.weight),
            &to_rows(&p.text_head.weight),
            p.log_logit_scale as f64,
        );
        assert!((loss - reference).abs() < 1e-5 * reference.max(1.0));
        for m in [&cache.image_proj, &cache.text_proj] {
            for i in 0..b {
                let n: f64 = m.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let (permuted, _) = clip_loss(&p, &x.gather_rows(&perm), &y.gather_rows(&perm)).unwrap();
        assert!((loss - permuted).abs() < 1e-9 * loss.max(1.0));
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..24 {
        let mut rng = rng(100 + seed);
        let b = rng.random_range(2..9);
        let (d_in, d_out) = (rng.random_range(2..10), rng.random_range(2..6));
        let mut p = init_projector(d_in, d_out, seed).unwrap();
        p.log_logit_scale = rng.random_range(-1.0f32..4.0);
        let x = gaussian(b, d_in, &mut rng);
        let y = gaussian(b, d_in, &mut rng);
        let g = clip_loss_grad(&p, &x, &y).unwrap();
        let fd = clip_fd_grads(&x, &y, &p.image_head.weight, &p.text_head.weight, p.log_logit_scale as f64, 1e-4);
        let widen = |m: &Matrix| m.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        assert!(rel_err(&widen(&g.image_weight), &fd.image) < 1e-4, "seed {seed} image");
        assert!(rel_err(&widen(&g.text_weight), &fd.text) < 1e-4, "seed {seed} text");
        assert!((g.log_logit_scale - fd.log_scale).abs() <= 1e-4 * fd.log_scale.abs().max(1e-3), "seed {seed} scale");
    }
}

#[test]
fn gradient_is_invariant_to_input_scale() {
    // Scaling an image row scales its projection, which normalisation removes.
    let mut rng = rng(7);
    let x = gaussian(5, 6, &mut rng);
    let y = gaussian(5, 6, &mut rng);
    let p = init_projector(6, 4, 1).unwrap();
    let x2 = Matrix::from_fn(5, 6, |i, j| x.get(i, j) * 2.0);
    let (a, b) = (clip_loss(&p, &x, &y).unwrap().0, clip_loss(&p, &x2, &y).unwrap().0);
    assert!((a - b).abs() < 1e-6);
    let g = clip_loss_grad(&p, &x2, &y).unwrap();
    let fd = clip_fd_grads(&x2, &y, &p.image_head.weight, &p.text_head.weight, p.log_logit_scale as f64, 1e-4);
    let widen = |m: &Matrix| m.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    assert!(rel_err(&widen(&g.image_weight), &fd.image) < 1e-4);
}

// trainer ----------------------------------------------------------------------

fn tiny_task(seed: u64) -> (PairSet, PairSet) {
    let set = generate(&SynthSpec { n_pairs: 400, latent_dim: 6, backbone_dim: 24, seed, map_seed: 1, ..Default::default() })
        .unwrap();
    let (tr, va, _) = split(&set, 300, 100, 0, seed).unwrap();
    (tr, va)
}

#[test]
fn stored_weights_are_the_best_validation_epoch() {
    for seed in 0..3 {
        let (tr, va) = tiny_task(seed);
        // Large steps so validation loss can go back up.
        let cfg = TrainConfig { epochs: 12, d_out: 8, learning_rate: 0.05, seed, ..Default::default() };
        let (ckpt, log) = train(&tr, &va, &cfg).unwrap();
        let best = log.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(ckpt.meta.best_val_loss, best);
        assert_eq!(log.val_loss[log.best_epoch - 1], best);
        let recomputed = validation_loss(&ckpt.projector, &va, cfg.batch_size, cfg.seed).unwrap();
        assert!((recomputed - best).abs() < 1e-9, "{recomputed} vs {best}");
    }
}

#[test]
fn early_stopping_respects_patience() {
    for seed in 0..3 {
        let (tr, va) = tiny_task(10 + seed);
        let cfg = TrainConfig { epochs: 30, d_out: 8, learning_rate: 0.2, patience: 2, seed, ..Default::default() };
        let (_, log) = train(&tr, &va, &cfg).unwrap();
        let run = log.epochs_run();
        assert!(run <= 30);
        if log.stop_reason == StopReason::EarlyStopped {
            assert!(run > cfg.patience);
            assert_eq!(run, log.best_epoch + cfg.patience);
        } else {
            assert_eq!(run, 30);
        }
    }
}

#[test]
fn without_early_stopping_every_epoch_runs() {
    let (tr, va) = tiny_task(20);
    let cfg = TrainConfig { epochs: 7, d_out: 8, learning_rate: 0.5, early_stopping: false, ..Default::default() };
    let (ckpt, log) = train(&tr, &va, &cfg).unwrap();
    assert_eq!(log.epochs_run(), 7);
    assert_eq!(log.val_loss.len(), 7);
    assert_eq!(log.stop_reason, StopReason::EpochsExhausted);
    assert_eq!(ckpt.meta.epoch_reached, 7);
}

#[test]
fn training_loss_falls() {
    let (tr, va) = tiny_task(30);
    let cfg = TrainConfig { epochs: 5, d_out: 8, early_stopping: false, learning_rate: 1e-3, ..Default::default() };
    let (_, log) = train(&tr, &va, &cfg).unwrap();
    assert!(log.train_loss[4] < log.train_loss[0], "{:?}", log.train_loss);
}

#[test]
fn frozen_logit_scale_stays_put() {
    let (tr, va) = tiny_task(40);
    let p0 = init_projector(24, 8, 42).unwrap();
    let cfg = TrainConfig { epochs: 3, d_out: 8, freeze_logit_scale: true, ..Default::default() };
    let (ckpt, _) = train(&tr, &va, &cfg).unwrap();
    assert_eq!(ckpt.projector.log_logit_scale, p0.log_logit_scale);
}

// eval -------------------------------------------------------------------------

fn random_set(n: usize, d: usize, rng: &mut impl Rng) -> PairSet {
    PairSet::new(records(n, "r"), gaussian(n, d, rng), gaussian(n, d, rng)).unwrap()
}

#[test]
fn recall_is_monotone_and_std_is_population_std() {
    for seed in 0..10 {
        let mut rng = rng(300 + seed);
        let set = random_set(200, 6, &mut rng);
        let p = init_projector(6, 4, seed).unwrap();
        let cfg = EvalConfig { population_sizes: vec![20, 50], trials: 4, ks: vec![1, 3, 10, 20], seed, ..Default::default() };
        let report = run_trials(&set, &p, &cfg).unwrap();
        for dir in [Direction::TextToImage, Direction::ImageToText] {
            for pop in [20, 50] {
                let means: Vec<f64> = cfg.ks.iter().map(|&k| report.cell(dir, pop, k).unwrap().mean).collect();
                assert!(means.windows(2).all(|w| w[0] <= w[1]));
                for &k in &cfg.ks {
                    let c = report.cell(dir, pop, k).unwrap();
                    let t = c.per_trial.len() as f64;
                    let mean = c.per_trial.iter().sum::<f64>() / t;
                    let var = c.per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
                    assert!((c.mean - mean).abs() < 1e-12);
                    assert!((c.std - var.sqrt()).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn report_does_not_depend_on_record_order_when_trials_cover_the_set() {
    let mut rng = rng(9);
    let set = random_set(60, 5, &mut rng);
    let p = init_projector(5, 3, 0).unwrap();
    let cfg = EvalConfig { population_sizes: vec![60], trials: 1, ks: vec![1, 5, 10], ..Default::default() };
    let base = run_trials(&set, &p, &cfg).unwrap();
    let mut perm: Vec<usize> = (0..60).collect();
    perm.shuffle(&mut rng);
    let shuffled = PairSet::new(records(60, "r"), set.gather_images(&perm), set.gather_texts(&perm)).unwrap();
    let other = run_trials(&shuffled, &p, &cfg).unwrap();
    for (a, b) in base.cells.iter().zip(&other.cells) {
        assert_eq!(a.mean, b.mean);
    }
}

#[test]
fn plans_are_disjoint_when_possible() {
    for (n, pops, trials) in [(1000usize, vec![10usize, 50], 10usize), (300, vec![100, 50], 3), (250, vec![100], 3)] {
        let plans = plan_populations(n, &pops, trials, 5).unwrap();
        let everything_fits = pops.iter().map(|p| p * trials).sum::<usize>() <= n;
        let mut global = std::collections::HashSet::new();
        for plan in &plans {
            assert_eq!(plan.trials.len(), trials);
            let disjoint = plan.population * trials <= n;
            assert_eq!(plan.mode == SamplingMode::Disjoint, disjoint);
            let mut within = std::collections::HashSet::new();
            for t in &plan.trials {
                assert_eq!(t.len(), plan.population);
                let distinct: std::collections::HashSet<_> = t.iter().collect();
                assert_eq!(distinct.len(), t.len());
                for &i in t {
                    assert!(i < n);
                    if disjoint {
                        assert!(within.insert(i));
                    }
                    if everything_fits {
                        assert!(global.insert(i));
                    }
                }
            }
        }
    }
    assert!(plan_populations(10, &[11], 1, 0).is_err());
}

#[test]
fn perfect_alignment_scores_one_with_zero_spread() {
    let mut rng = rng(4);
    let x = gaussian(300, 8, &mut rng);
    let set = PairSet::new(records(300, "p"), x.clone(), x).unwrap();
    let cfg = EvalConfig { population_sizes: vec![30, 100], trials: 3, ks: vec![1, 5], direction: DirectionChoice::Both, seed: 0 };
    let report = run_trials(&set, &DualProjector::identity(8), &cfg).unwrap();
    for c in &report.cells {
        assert_eq!((c.mean, c.std), (1.0, 0.0));
    }
}

// synthgen ---------------------------------------------------------------------

#[test]
fn analytic_heads_beat_raw_cosine() {
    for seed in 0..10 {
        let sigma = [0.0, 0.05, 0.1, 0.2][seed as usize % 4];
        let data = generate_with_maps(&SynthSpec {
            n_pairs: 500,
            latent_dim: 8,
            backbone_dim: 48,
            noise_sigma: sigma,
            seed,
            map_seed: seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = EvalConfig {
            population_sizes: vec![100],
            trials: 5,
            ks: vec![1],
            direction: DirectionChoice::TextToImage,
            seed,
        };
        let r1 = |p: &DualProjector| run_trials(&data.set, p, &cfg).unwrap().cells[0].mean;
        let analytic = r1(&data.maps.analytic_projector());
        let identity = r1(&DualProjector::identity(48));
        assert!(analytic > identity, "seed {seed}: {analytic} <= {identity}");
        assert!(analytic > 0.5);
    }
}

#[test]
fn generated_sets_are_internally_consistent() {
    let set = generate(&SynthSpec { n_pairs: 300, backbone_dim: 32, latent_dim: 4, seed: 9, ..Default::default() }).unwrap();
    assert_eq!(set.len(), 300);
    let ids: std::collections::HashSet<_> = set.records().iter().map(|r| &r.id).collect();
    assert_eq!(ids.len(), 300);
    for r in set.records() {
        assert!((1..=30).contains(&r.n_words));
        assert!(r.image_row < 300 && r.text_row < 300);
    }
    assert!(set.image_embeddings().is_finite() && set.text_embeddings().is_finite());
    // The constructor re-validates everything.
    PairSet::new(set.records().to_vec(), (**set.image_embeddings()).clone(), (**set.text_embeddings()).clone()).unwrap();
}

// viz --------------------------------------------------------------------------

/// Cyclic Jacobi eigenvalues of a symmetric matrix, largest first.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

fn column_variance(m: &Matrix, col: usize) -> f64 {
    let n = m.rows() as f64;
    let mean: f64 = (0..m.rows()).map(|i| m.get(i, col) as f64).sum::<f64>() / n;
    (0..m.rows()).map(|i| (m.get(i, col) as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn pca_variances_match_jacobi_oracle() {
    for seed in 0..8 {
        let mut rng = rng(500 + seed);
        let (n, d) = (rng.random_range(10..60), rng.random_range(2..7));
        let stretch: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..4.0)).collect();
        let x = Matrix::from_fn(n, d, |_, j| (rng.random::<f64>() - 0.5) as f32 * stretch[j] as f32);
        let rows = to_rows(&x);
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n as f64 - 1.0))
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(cov.clone());
        let out = pca_2d(&x).unwrap();
        for c in 0..2 {
            let v = column_variance(&out, c);
            assert!((v - ev[c]).abs() <= 1e-5 * ev[0], "seed {seed} component {c}: {v} vs {}", ev[c]);
        }
        let total: f64 = (0..d).map(|j| cov[j][j]).sum();
        assert!(column_variance(&out, 0) + column_variance(&out, 1) <= total * (1.0 + 1e-6));

        let shifted = Matrix::from_fn(n, d, |i, j| x.get(i, j) + 3.0);
        let out2 = pca_2d(&shifted).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-5, "translation changed the projection: {a} vs {b}");
        }
    }
}

#[test]
fn separated_groups_stay_separated() {
    let mut rng = rng(77);
    let a = gaussian(50, 6, &mut rng);
    let b = Matrix::from_fn(50, 6, |i, j| a.get((i + 7) % 50, j) * 0.5 + if j == 2 { 20.0 } else { 0.0 });
    let export = scatter(&[ScatterGroup::new("a", a), ScatterGroup::new("b", b)]).unwrap();
    let xs = |g: &str| export.rows.iter().filter(|r| r.group == g).map(|r| r.x).collect::<Vec<_>>();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&xs("a")), stats(&xs("b")));
    assert!((ma - mb).abs() > 3.0 * sa.max(sb), "{ma} ± {sa} vs {mb} ± {sb}");
}

#[test]
fn csv_has_one_row_per_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let mut rng = rng(3);
    let g = ScatterGroup::with_ids("only", gaussian(12, 4, &mut rng), (0..12).map(|i| format!("id{i}")).collect()).unwrap();
    export_scatter(&[g], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,y,group,id");
    assert_eq!(lines.len(), 13);
    assert!(lines[1].ends_with(",only,id0"));
}
