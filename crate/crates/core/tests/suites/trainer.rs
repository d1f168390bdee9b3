use l2d_core::data::LabeledDataset;
use l2d_core::model::{accuracy, argmax, Parameterized, TaskModel};
use l2d_core::objectives::{club_estimate, cross_entropy, MmdKernel};
use l2d_core::optim::{Sgd, SgdConfig};
use l2d_core::rng::SeedTree;
use l2d_core::style::MixWeights;
use l2d_core::trainer::{evaluate, load_task_model, train, Ablation, EvalReport, Learner, TrainConfig};
use l2d_core::{Tape, Tensor};

/// The file is ordered by label, so take every `stride`-th image to cover all classes.
fn spread(n: usize, offset: usize) -> Vec<usize> {
    let stride = crate::support::mnist().len() / n;
    (0..n).map(|i| i * stride + offset).collect()
}

fn small_batch(n: usize, offset: usize) -> (Tensor, Vec<usize>) {
    crate::support::mnist().batch(&spread(n, offset)).unwrap()
}

fn learner(cfg: &TrainConfig, seed: u64) -> Learner {
    let seeds = SeedTree::new(seed);
    Learner::new(cfg, 10, &mut seeds.stream("init"), &mut seeds.stream("generator")).unwrap()
}

fn weights(k: usize, seed: u64) -> MixWeights {
    MixWeights::sample(k, 0.1, &mut SeedTree::new(seed).stream("mix-weights")).unwrap()
}

fn params_of(p: &impl Parameterized) -> Vec<Tensor> {
    p.named_params().into_iter().map(|(_, t)| t.clone()).collect()
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn steps_touch_only_their_own_parameters() {
    let (x, y) = small_batch(8, 0);
    for ablation in Ablation::ALL {
        let cfg = TrainConfig { ablation, k: 3, ..TrainConfig::default() };
        let mut l = learner(&cfg, 1);
        let w = weights(3, 1);
        let (task0, head0, gen0) = (params_of(&l.model), params_of(&l.head), l.generator.clone());
        l.generator_step(&cfg, &x, &y, &w).unwrap();
        assert_eq!(params_of(&l.model), task0, "{ablation}: generator step moved F/H");
        assert_eq!(params_of(&l.head), head0, "{ablation}: generator step moved q");
        if ablation == Ablation::NoMod {
            assert_eq!(l.generator, gen0, "no_mod must not update the style shifts");
        } else {
            assert_ne!(l.generator, gen0, "{ablation}: generator step did not update the shifts");
        }
        let gen1 = l.generator.clone();
        let x_plus = l.generator.generate(&x, &w).unwrap();
        l.task_step(&cfg, &x, &y, Some(&x_plus), cfg.lr_task).unwrap();
        assert_eq!(l.generator, gen1, "{ablation}: task step moved the generator");
        assert_ne!(params_of(&l.model), task0);
    }
}

pub fn zero_alphas_reduce_to_cross_entropy_on_both_batches() {
    let (x, y) = small_batch(6, 10);
    let cfg = TrainConfig { alpha1: 0.0, alpha2: 0.0, k: 2, grad_clip: None, ..TrainConfig::default() };
    let mut l = learner(&cfg, 2);
    let w = weights(2, 2);
    let x_plus = l.generator.generate(&x, &w).unwrap();
    let mut reference = l.model.clone();

    l.task_step(&cfg, &x, &y, Some(&x_plus), cfg.lr_task).unwrap();

    let both = Tensor::concat_rows(&[&x, &x_plus]).unwrap();
    let labels: Vec<usize> = y.iter().chain(&y).copied().collect();
    let mut tape = Tape::new();
    let f = reference.bind(&mut tape, true);
    let xv = tape.constant(both);
    let z = f.embed(&mut tape, xv).unwrap();
    let logits = f.classify(&mut tape, z).unwrap();
    let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g: Vec<Option<&Tensor>> = f.vars().into_iter().map(|v| grads.get(v)).collect();
    let mut opt = Sgd::new(SgdConfig {
        lr: cfg.lr_task,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        nesterov: cfg.nesterov,
    });
    opt.step(&mut reference.params_mut(), &g, cfg.lr_task);
    let d = max_diff(&params_of(&l.model), &params_of(&reference));
    assert!(d < 1e-10, "parameter difference {d:e}");
}

pub fn zero_beta_generator_step_follows_club_gradient() {
    let (x, y) = small_batch(6, 20);
    let cfg = TrainConfig { beta: 0.0, k: 2, grad_clip: None, ..TrainConfig::default() };
    let mut l = learner(&cfg, 3);
    let w = weights(2, 3);
    let before = l.generator.clone();

    let mut tape = Tape::new();
    let f = l.model.bind(&mut tape, false);
    let q = l.head.bind(&mut tape, false);
    let g = before.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let xp = g.generate(&mut tape, xv, &w).unwrap();
    let z = f.embed(&mut tape, xv).unwrap();
    let zp = f.embed(&mut tape, xp).unwrap();
    let club = club_estimate(&mut tape, z, zp, &q).unwrap();
    let grads = tape.backward(club).unwrap();

    let stats = l.generator_step(&cfg, &x, &y, &w).unwrap();
    assert_eq!(stats.loss, stats.club);
    let after = params_of(&l.generator);
    let expected: Vec<Tensor> = params_of(&before)
        .iter()
        .zip(g.params())
        .map(|(p, v)| {
            let gr = grads.get(v).unwrap();
            Tensor::new(
                p.shape().to_vec(),
                p.data().iter().zip(gr.data()).map(|(a, b)| a - cfg.lr_generator * b).collect(),
            )
            .unwrap()
        })
        .collect();
    let d = max_diff(&after, &expected);
    assert!(d < 1e-10, "{d:e}");
}

pub fn ablations_shape_the_losses() {
    let (x, y) = small_batch(8, 30);
    let w = weights(2, 4);
    let run = |ablation: Ablation| {
        let cfg = TrainConfig { ablation, k: 2, ..TrainConfig::default() };
        let mut l = learner(&cfg, 4);
        let g = l.generator_step(&cfg, &x, &y, &w).unwrap();
        let xp = l.generator.generate(&x, &w).unwrap();
        let t = l.task_step(&cfg, &x, &y, Some(&xp), cfg.lr_task).unwrap();
        (cfg, g, t)
    };
    let (cfg, g, t) = run(Ablation::NoMinMi);
    assert!((g.loss - cfg.beta * g.consistency).abs() < 1e-12);
    assert!(t.supcon.is_some());
    let (_, g, t) = run(Ablation::Full);
    assert!((g.loss - g.club - g.consistency).abs() < 1e-9);
    assert!(t.supcon.is_some() && t.likelihood.is_some());
    let (_, _, t) = run(Ablation::NoMaxMi);
    assert!(t.supcon.is_none() && t.likelihood.is_some());

    let cfg = TrainConfig { ablation: Ablation::NoStyle, ..TrainConfig::default() };
    let mut l = learner(&cfg, 4);
    let t = l.task_step(&cfg, &x, &y, None, cfg.lr_task).unwrap();
    assert_eq!(t.loss, t.cross_entropy);
    assert!(t.supcon.is_none() && t.likelihood.is_none());
}

pub fn small_learning_rate_step_descends() {
    let (x, y) = small_batch(8, 40);
    let cfg = TrainConfig { k: 2, lr_task: 1e-3, momentum: 0.0, ..TrainConfig::default() };
    let mut l = learner(&cfg, 5);
    let w = weights(2, 5);
    let xp = l.generator.generate(&x, &w).unwrap();
    let first = l.task_step(&cfg, &x, &y, Some(&xp), 1e-3).unwrap();
    let second = l.task_step(&cfg, &x, &y, Some(&xp), 1e-3).unwrap();
    assert!(second.loss < first.loss, "{} -> {}", first.loss, second.loss);
}

pub fn single_example_step_lowers_its_cross_entropy() {
    let (x, y) = small_batch(2, 50);
    let cfg = TrainConfig { ablation: Ablation::NoStyle, momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut l = learner(&cfg, 6);
    let a = l.task_step(&cfg, &x, &y, None, 1e-2).unwrap();
    let b = l.task_step(&cfg, &x, &y, None, 1e-2).unwrap();
    assert!(b.cross_entropy < a.cross_entropy);
}

fn subset(n: usize) -> LabeledDataset {
    crate::support::mnist().subset(&spread(n, 0)).unwrap()
}

pub fn training_is_deterministic_and_finite() {
    let ds = subset(96);
    let cfg = TrainConfig { k: 2, epochs: 2, seed: 11, ..TrainConfig::default() };
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert!(a.metrics.all_finite());
    assert_eq!(a.metrics.series("train", "club").len(), 2);
    let other = train(&TrainConfig { seed: 12, ..cfg }, &ds).unwrap();
    assert_ne!(a.metrics.to_csv(), other.metrics.to_csv());
}

pub fn erm_run_logs_no_generator_metrics() {
    let ds = subset(64);
    let cfg = TrainConfig { ablation: Ablation::NoStyle, epochs: 1, ..TrainConfig::default() };
    let out = train(&cfg, &ds).unwrap();
    assert!(out.metrics.series("train", "generator_loss").is_empty());
    assert_eq!(out.metrics.series("train", "cross_entropy").len(), 1);
}

pub fn empty_or_tiny_dataset_rejected() {
    let ds = subset(1);
    assert!(train(&TrainConfig::default(), &ds).is_err());
}

pub fn memorizes_a_small_split() {
    let ds = subset(32);
    let cfg = TrainConfig {
        ablation: Ablation::NoStyle,
        epochs: 60,
        batch_size: 16,
        lr_task: 0.05,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &ds).unwrap();
    let report = evaluate(&out.learner.model, std::slice::from_ref(&ds)).unwrap();
    assert_eq!(report[0].accuracy, 1.0);
    let acc = out.metrics.series("train", "accuracy");
    assert!(acc[2] > acc[0], "accuracy should rise early: {acc:?}");
}

pub fn random_model_is_at_chance_and_accuracy_recounts() {
    let full = crate::support::mnist();
    let mut per_class = [0usize; 10];
    let balanced: Vec<usize> = (0..full.len())
        .filter(|&i| {
            let c = &mut per_class[full.labels()[i]];
            *c += 1;
            *c <= 100
        })
        .collect();
    assert_eq!(balanced.len(), 1000);
    let ds = full.subset(&balanced).unwrap();
    let model = TaskModel::new(10, &mut SeedTree::new(13).stream("init"));
    let rows = evaluate(&model, std::slice::from_ref(&ds)).unwrap();
    assert!((rows[0].accuracy - 0.1).abs() <= 0.03, "{}", rows[0].accuracy);

    let logits = model.logits(ds.images()).unwrap();
    let recount = logits.data().chunks(10).zip(ds.labels()).filter(|(r, &y)| argmax(r) == y).count();
    assert_eq!(rows[0].accuracy, recount as f64 / ds.len() as f64);
    assert_eq!(accuracy(&model.predict(ds.images(), 7).unwrap(), ds.labels()), rows[0].accuracy);
}

pub fn evaluate_rejects_class_mismatch() {
    let model = TaskModel::new(3, &mut SeedTree::new(1).stream("init"));
    assert!(evaluate(&model, &[subset(4)]).is_err());
}

pub fn checkpoint_restores_the_task_model() {
    let cfg = TrainConfig { k: 2, mmd_kernel: MmdKernel::Linear, ..TrainConfig::default() };
    let l = learner(&cfg, 14);
    let ckpt = l.to_checkpoint().unwrap();
    assert_eq!(load_task_model(&ckpt).unwrap(), l.model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = l2d_core::checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(load_task_model(&back).unwrap(), l.model);
}

pub fn average_row_excludes_source() {
    use l2d_core::trainer::DomainAccuracy;
    let row = |d: &str, a: f64| DomainAccuracy { domain: d.into(), n: 10, accuracy: a };
    let report =
        EvalReport { rows: vec![row("mnist", 0.99), row("a", 0.2), row("b", 0.5), row("c", 0.3)], source_rows: 1 };
    assert!((report.average_shifted() - (0.2 + 0.5 + 0.3) / 3.0).abs() < 1e-12);
    assert!(report.to_csv().ends_with(&format!("average,30,{}\n", report.average_shifted())));
}

/// Every check in this file, for harnesses that run them outside libtest.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("steps_touch_only_their_own_parameters", steps_touch_only_their_own_parameters),
    ("zero_alphas_reduce_to_cross_entropy_on_both_batches", zero_alphas_reduce_to_cross_entropy_on_both_batches),
    ("zero_beta_generator_step_follows_club_gradient", zero_beta_generator_step_follows_club_gradient),
    ("ablations_shape_the_losses", ablations_shape_the_losses),
    ("small_learning_rate_step_descends", small_learning_rate_step_descends),
    ("single_example_step_lowers_its_cross_entropy", single_example_step_lowers_its_cross_entropy),
    ("training_is_deterministic_and_finite", training_is_deterministic_and_finite),
    ("erm_run_logs_no_generator_metrics", erm_run_logs_no_generator_metrics),
    ("empty_or_tiny_dataset_rejected", empty_or_tiny_dataset_rejected),
    ("memorizes_a_small_split", memorizes_a_small_split),
    ("random_model_is_at_chance_and_accuracy_recounts", random_model_is_at_chance_and_accuracy_recounts),
    ("evaluate_rejects_class_mismatch", evaluate_rejects_class_mismatch),
    ("checkpoint_restores_the_task_model", checkpoint_restores_the_task_model),
    ("average_row_excludes_source", average_row_excludes_source),
];
