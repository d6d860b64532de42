use metaisda::augment_loss::ClasswiseCovTable;
use metaisda::datakit::{gen_synthetic, Dataset, SynthConfig};
use metaisda::metagrad::{isda_batch, meta_gradient_exact, pseudo_step, MetaGradMode};
use metaisda::networks::{classifier_forward, covnet_forward, FreezeMask};
use metaisda::numkit::{ParamSet, RngState};
use metaisda::trainer::{
    lambda_at, lr_at, run, run_with, split_batch, split_rng, train_step, BatchSampler, TrainConfig,
    TrainMode, TrainState,
};

fn small_data(seed: u64) -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        meta_categories: 2,
        subclasses_per_meta: 2,
        input_dim: 8,
        train_per_class: 12,
        test_per_class: 10,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, &mut RngState::new(seed)).unwrap()
}

fn small_config(mode: TrainMode, total: usize) -> TrainConfig {
    TrainConfig {
        mode,
        total_iterations: total,
        batch_size: 8,
        block_widths: vec![8, 6],
        metric_every: 5,
        lr_g: 1.0,
        ..TrainConfig::default()
    }
}

fn trajectory(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    run_with(cfg, train, test, |s| {
        out.push(s.classifier.flatten().iter().map(|v| v.to_bits()).collect())
    })
    .unwrap();
    out
}

#[test]
fn zero_lambda_meta_matches_baseline_bitwise() {
    let (train, test) = small_data(1);
    let mut meta = small_config(TrainMode::Meta, 40);
    meta.lambda0 = 0.0;
    let ce = TrainConfig {
        mode: TrainMode::CeBaseline,
        ..meta.clone()
    };
    let a = trajectory(&meta, &train, &test);
    let b = trajectory(&ce, &train, &test);
    assert_eq!(a.len(), 40);
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_leave_initial_state() {
    let (train, test) = small_data(2);
    for mode in TrainMode::ALL {
        let cfg = small_config(mode, 0);
        let init = TrainState::init(&cfg, &train).unwrap();
        let state = run(&cfg, &train, &test).unwrap();
        assert_eq!(state.classifier, init.classifier);
        assert_eq!(state.covnet, init.covnet);
        assert_eq!(state.classwise, init.classwise);
        assert_eq!(state.iteration, 0);
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.history[0].iteration, 0);
    }
}

#[test]
fn runs_are_deterministic() {
    let (train, test) = small_data(3);
    for mode in TrainMode::ALL {
        let cfg = small_config(mode, 12);
        let a = run(&cfg, &train, &test).unwrap();
        let b = run(&cfg, &train, &test).unwrap();
        assert_eq!(a.history, b.history, "{mode}");
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.covnet, b.covnet);
    }
}

#[test]
fn metric_rows_at_interval_and_end() {
    let (train, test) = small_data(4);
    let state = run(&small_config(TrainMode::Meta, 12), &train, &test).unwrap();
    let its: Vec<usize> = state.history.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 5, 10, 12]);
    for w in state.history.windows(2) {
        assert!(w[1].running_min_grad <= w[0].running_min_grad);
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

/// One iteration replayed by hand: two pseudo/meta/real cycles with the
/// halves exchanged, the CovNet moving by exactly −β times the exact
/// meta-gradient in each.
#[test]
fn one_iteration_is_two_cycles_with_exact_covnet_steps() {
    for seed in 0..5 {
        let (train, _) = small_data(10 + seed);
        let mut cfg = small_config(TrainMode::Meta, 1);
        cfg.seed = seed;
        cfg.meta_grad_mode = Some(MetaGradMode::Exact);
        let mut state = TrainState::init(&cfg, &train).unwrap();
        let batch = train.batch(
            &BatchSampler::new(&cfg, train.len())
                .unwrap()
                .next_indices()
                .unwrap(),
        );
        let (first, second) = split_batch(&batch, &mut split_rng(&cfg, 0)).unwrap();

        let lambda = lambda_at(1, 1, cfg.lambda0, cfg.schedule_alpha).unwrap();
        let (alpha, beta) = lr_at(0, &cfg).unwrap();
        let mut f = state.classifier.clone();
        let mut g = state.covnet.clone();
        let mut g_steps = Vec::new();
        for (a, b) in [(&first, &second), (&second, &first)] {
            let (_, rec) = pseudo_step(&f, &g, a, lambda, alpha, FreezeMask::none()).unwrap();
            let mg = meta_gradient_exact(&rec, &g, b).unwrap().grad;
            let before = g.clone();
            g.axpy_in_place(-beta, &mg).unwrap();
            let mut expected = mg.clone();
            expected.scale_in_place(-beta);
            g_steps.push((before, g.clone(), expected));
            let eval = isda_batch(&f, a, lambda, FreezeMask::none(), |_, x| {
                covnet_forward(x, &g).map(|(d, _)| d)
            })
            .unwrap();
            f.axpy_in_place(-alpha, &eval.grads).unwrap();
        }

        train_step(&mut state, &first, &second, &cfg).unwrap();
        assert_eq!(state.iteration, 1);
        assert_eq!(state.classifier, f);
        assert_eq!(state.covnet, g);
        for (before, after, expected) in g_steps {
            let change: Vec<f64> = after
                .flatten()
                .iter()
                .zip(before.flatten())
                .map(|(x, y)| x - y)
                .collect();
            assert!(rel(&change, &expected.flatten()) <= 1e-12);
        }
        assert!(train_step(&mut state, &first, &second, &cfg).is_err());
    }
}

/// The trainer adds nothing to the class-wise table beyond feeding it the
/// features of each half batch before the step taken on that half.
#[test]
fn classwise_table_equals_replayed_stream() {
    let (train, test) = small_data(5);
    let cfg = small_config(TrainMode::ClasswiseIsda, 15);
    let state = run(&cfg, &train, &test).unwrap();

    let mut classifier = TrainState::init(&cfg, &train).unwrap().classifier;
    let mut replay = ClasswiseCovTable::new(train.num_classes(), 6);
    let mut sampler = BatchSampler::new(&cfg, train.len()).unwrap();
    for t in 0..cfg.total_iterations {
        let batch = train.batch(&sampler.next_indices().unwrap());
        let (first, second) = split_batch(&batch, &mut split_rng(&cfg, t)).unwrap();
        let lambda =
            lambda_at(t + 1, cfg.total_iterations, cfg.lambda0, cfg.schedule_alpha).unwrap();
        let alpha = lr_at(t, &cfg).unwrap().0;
        for half in [&first, &second] {
            for i in 0..half.len() {
                let out = classifier_forward(half.input(i), &classifier).unwrap();
                replay.update(&out.feature, half.labels[i]).unwrap();
            }
            let eval = isda_batch(&classifier, half, lambda, FreezeMask::none(), |i, _| {
                replay.lookup(half.labels[i])
            })
            .unwrap();
            classifier.axpy_in_place(-alpha, &eval.grads).unwrap();
        }
    }
    assert_eq!(state.classwise.as_ref(), Some(&replay));
    assert_eq!(state.classifier, classifier);
}

#[test]
fn frozen_blocks_unchanged_through_pseudo_phase() {
    let (train, _) = small_data(6);
    let cfg = small_config(TrainMode::Meta, 1);
    let state = TrainState::init(&cfg, &train).unwrap();
    let batch = train.batch(&(0..8).collect::<Vec<_>>());
    for n in 0..=2 {
        let mask = FreezeMask::new(n, 2).unwrap();
        let (pseudo, rec) =
            pseudo_step(&state.classifier, &state.covnet, &batch, 2.0, 0.1, mask).unwrap();
        for k in 0..2 {
            if k < n {
                assert_eq!(pseudo.blocks[k], state.classifier.blocks[k]);
            } else {
                assert_ne!(pseudo.blocks[k], state.classifier.blocks[k]);
            }
        }
        assert_eq!(rec.pseudo_params().unwrap(), pseudo);
    }
}

#[test]
fn freeze_real_keeps_frozen_blocks_for_the_whole_run() {
    let (train, test) = small_data(7);
    for n in 0..=2 {
        let mut cfg = small_config(TrainMode::Meta, 6);
        cfg.freeze_blocks = n;
        cfg.freeze_real = true;
        let init = TrainState::init(&cfg, &train).unwrap();
        let state = run(&cfg, &train, &test).unwrap();
        for k in 0..n {
            assert_eq!(state.classifier.blocks[k], init.classifier.blocks[k]);
        }
        for k in n..2 {
            assert_ne!(state.classifier.blocks[k], init.classifier.blocks[k]);
        }
        assert_ne!(state.classifier.head, init.classifier.head);
    }
}

#[test]
fn meta_update_interval_skips_covnet_steps() {
    let (train, test) = small_data(8);
    let mut cfg = small_config(TrainMode::Meta, 1);
    cfg.meta_update_every = 2;
    // Iteration 0 updates; with T = 1 that is the only iteration.
    let s = run(&cfg, &train, &test).unwrap();
    assert_ne!(s.covnet, TrainState::init(&cfg, &train).unwrap().covnet);

    let mut sampler = BatchSampler::new(&cfg, train.len()).unwrap();
    cfg.total_iterations = 2;
    let mut state = TrainState::init(&cfg, &train).unwrap();
    for t in 0..2 {
        let batch = train.batch(&sampler.next_indices().unwrap());
        let (a, b) = split_batch(&batch, &mut split_rng(&cfg, t)).unwrap();
        let before = state.covnet.clone();
        train_step(&mut state, &a, &b, &cfg).unwrap();
        assert_eq!(state.covnet == before, t == 1);
    }
}

#[test]
fn mode_and_source_must_agree() {
    let (train, _) = small_data(9);
    let cw = small_config(TrainMode::ClasswiseIsda, 3);
    let meta = small_config(TrainMode::Meta, 3);
    let batch = train.batch(&(0..8).collect::<Vec<_>>());
    let (a, b) = split_batch(&batch, &mut RngState::new(0)).unwrap();
    let mut s = TrainState::init(&meta, &train).unwrap();
    assert!(train_step(&mut s, &a, &b, &cw).is_err());
    let mut s = TrainState::init(&cw, &train).unwrap();
    assert!(train_step(&mut s, &a, &b, &meta).is_err());
    let empty = batch.select(&[]);
    assert!(train_step(&mut s, &a, &empty, &cw).is_err());
}
