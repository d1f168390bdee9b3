use l2d_core::model::TaskModel;
use l2d_core::objectives::{club_estimate, VariationalGaussianHead};
use l2d_core::rng::{SeedTree, StreamRng};
use l2d_core::style::{
    apply_transformation, style_shift, MixWeights, StyleComplementModule, StyleConfig, DEFAULT_KERNEL_SIZES, MIX_GUARD,
};
use l2d_core::tensor::gradcheck::check_gradients;
use l2d_core::tensor::{instance_mean_var, VAR_EPS};
use l2d_core::{Tape, Tensor};
use rand::Rng;

fn rng(seed: u64) -> StreamRng {
    SeedTree::new(seed).stream("style-tests")
}

fn images(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn module(sizes: &[usize], side: usize, seed: u64) -> StyleComplementModule {
    let cfg = StyleConfig { kernel_sizes: sizes.to_vec(), height: side, width: side, ..StyleConfig::default() };
    StyleComplementModule::new(cfg, &mut rng(seed)).unwrap()
}

/// Set every transformation's shifts to the statistics of `x` (a single image), so
/// the style layer reproduces its input.
fn configure_identity(g: &mut StyleComplementModule, x: &Tensor) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (mean, var) = instance_mean_var(&mut tape, xv).unwrap();
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mean = tape.value(mean).data().to_vec();
    let std: Vec<f64> = tape.value(var).data().iter().map(|v| (v + VAR_EPS).sqrt()).collect();
    for t in g.transformations_mut() {
        t.set_identity_kernels();
        *t.mean_shift_mut() = Tensor::from_fn(vec![c, h, w], |i| mean[i / (h * w)]);
        *t.var_shift_mut() = Tensor::from_fn(vec![c, h, w], |i| std[i / (h * w)]);
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn style_shift_identity_configuration() {
    let f = images(&[1, 3, 6, 6], 2);
    let mut g = module(&[1], 6, 0);
    configure_identity(&mut g, &f);
    let t = &g.transformations()[0];
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let (mu, sigma) = (tape.constant(t.mean_shift().clone()), tape.constant(t.var_shift().clone()));
    let out = style_shift(&mut tape, fv, mu, sigma).unwrap();
    assert!(max_abs_diff(tape.value(out), &f) < 1e-12);

    let wrong = tape.constant(images(&[1, 3, 6, 5], 1));
    assert!(style_shift(&mut tape, wrong, mu, sigma).is_err());
}

pub fn zero_scale_gives_constant_mean_shift() {
    let f = images(&[4, 3, 5, 5], 3);
    let mu = images(&[3, 5, 5], 4);
    let mut tape = Tape::new();
    let fv = tape.constant(f);
    let muv = tape.constant(mu.clone());
    let zero = tape.constant(Tensor::zeros(vec![3, 5, 5]));
    let out = style_shift(&mut tape, fv, muv, zero).unwrap();
    for sample in tape.value(out).data().chunks(75) {
        assert_eq!(sample, mu.data());
    }
}

pub fn transformation_identity_and_shapes() {
    let x = images(&[1, 3, 32, 32], 5);
    let mut g = module(&DEFAULT_KERNEL_SIZES, 32, 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    for tv in g.bind(&mut tape, false).transformations.clone() {
        let y = apply_transformation(&mut tape, xv, &tv, true).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 32, 32]);
    }
    configure_identity(&mut g, &x);
    let vars = g.bind(&mut tape, false);
    for tv in &vars.transformations {
        let y = apply_transformation(&mut tape, xv, tv, true).unwrap();
        assert!(max_abs_diff(tape.value(y), &x) < 1e-12);
    }
}

pub fn single_transformation_identity_generates_tanh() {
    let x = images(&[1, 3, 8, 8], 6);
    let mut g = module(&[3], 8, 2);
    configure_identity(&mut g, &x);
    for raw in [0.3, -2.0, 7.5] {
        let out = g.generate(&x, &MixWeights::from_raw(vec![raw], MIX_GUARD).unwrap()).unwrap();
        assert!(max_abs_diff(&out, &x.map(f64::tanh)) < 1e-12);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

pub fn single_transformation_ignores_weight() {
    let x = images(&[2, 3, 8, 8], 7);
    let g = module(&[5], 8, 3);
    let a = g.generate(&x, &MixWeights::from_raw(vec![0.4], MIX_GUARD).unwrap()).unwrap();
    let b = g.generate(&x, &MixWeights::from_raw(vec![-3.0], MIX_GUARD).unwrap()).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-15);
}

pub fn two_transformations_equal_weights_average() {
    let x = images(&[2, 3, 8, 8], 8);
    let g = module(&[1, 3], 8, 4);
    let both = g.generate(&x, &MixWeights::from_raw(vec![1.0, 1.0], MIX_GUARD).unwrap()).unwrap();
    let only = |k: usize| {
        let mut tape = Tape::new();
        let vars = g.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = apply_transformation(&mut tape, xv, &vars.transformations[k], true).unwrap();
        tape.value(y).map(f64::tanh)
    };
    let (a, b) = (only(0), only(1));
    for ((o, p), q) in both.data().iter().zip(a.data()).zip(b.data()) {
        assert!((o - 0.5 * (p + q)).abs() < 1e-12);
    }
}

pub fn mixing_coefficients_sum_to_one() {
    let mut r = rng(9);
    for k in 1..=8 {
        for _ in 0..500 {
            let w = MixWeights::sample(k, MIX_GUARD, &mut r).unwrap();
            assert!(w.raw().iter().sum::<f64>().abs() >= MIX_GUARD);
            assert!((w.coefficients().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(MixWeights::from_raw(vec![0.05, -0.01], MIX_GUARD).is_err());
}

pub fn reinit_respects_bounds_and_leaves_shifts_alone() {
    let mut g = module(&DEFAULT_KERNEL_SIZES, 32, 5);
    for t in g.transformations_mut() {
        *t.mean_shift_mut() = t.mean_shift().map(|_| 0.25);
    }
    let before: Vec<(Tensor, Tensor)> =
        g.transformations().iter().map(|t| (t.mean_shift().clone(), t.var_shift().clone())).collect();
    let mut a = g.clone();
    let mut b = g.clone();
    a.reinit(&mut rng(77));
    b.reinit(&mut rng(77));
    assert_eq!(a, b);
    g.reinit(&mut rng(78));
    assert_ne!(a, g);
    for (t, (m, s)) in a.transformations().iter().zip(&before) {
        let bound = t.kernel_bound();
        assert!((bound - 1.0 / ((3 * t.kernel_size() * t.kernel_size()) as f64).sqrt()).abs() < 1e-15);
        assert!(t.conv_kernel().data().iter().chain(t.deconv_kernel().data()).all(|v| v.abs() < bound));
        assert_eq!(t.mean_shift(), m);
        assert_eq!(t.var_shift(), s);
    }
}

pub fn module_layout() {
    let g = StyleComplementModule::new(StyleConfig::default(), &mut rng(6)).unwrap();
    assert_eq!(g.k(), 6);
    let sizes: Vec<usize> = g.transformations().iter().map(|t| t.kernel_size()).collect();
    assert_eq!(sizes, DEFAULT_KERNEL_SIZES);
    for t in g.transformations() {
        assert_eq!(t.mean_shift().len(), 3 * 32 * 32);
        assert_eq!(t.var_shift().len(), 3 * 32 * 32);
        assert!(t.mean_shift().data().iter().all(|&v| v == 0.0));
        assert!(t.var_shift().data().iter().all(|&v| v == 1.0));
    }
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, true);
    for t in &vars.transformations {
        assert!(!tape.requires_grad(t.conv_kernel) && !tape.requires_grad(t.deconv_kernel));
    }
    assert_eq!(vars.params().len(), 12);
    assert!(vars.params().iter().all(|&p| tape.requires_grad(p)));
}

pub fn generation_is_deterministic_and_per_sample() {
    let g = module(&[1, 3, 5], 16, 7);
    let x = images(&[3, 3, 16, 16], 10);
    let (a, wa) = g.generate_with_rng(&x, &mut rng(11)).unwrap();
    let (b, wb) = g.generate_with_rng(&x, &mut rng(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.shape(), x.shape());
    for i in 0..3 {
        let single = g.generate(&x.slice_rows(i, i + 1).unwrap(), &wa).unwrap();
        assert!(max_abs_diff(&single, &a.slice_rows(i, i + 1).unwrap()) < 1e-12);
    }
}

pub fn gradient_with_respect_to_shifts() {
    let g = module(&[3], 6, 8);
    let x = images(&[2, 3, 6, 6], 12);
    let t = &g.transformations()[0];
    let inputs = [t.mean_shift().map(|v| v + 0.3), t.var_shift().map(|v| v * 0.7)];
    let proj = images(&[2, 3, 6, 6], 13);
    let report = check_gradients(
        |tape, v| {
            let mut tv = g.bind(tape, false).transformations[0];
            tv.mean_shift = v[0];
            tv.var_shift = v[1];
            let xv = tape.constant(x.clone());
            let y = apply_transformation(tape, xv, &tv, true)?;
            let p = tape.constant(proj.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum(yp))
        },
        &inputs,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

pub fn generator_loss_reaches_style_shifts() {
    let g = StyleComplementModule::new(StyleConfig::default(), &mut rng(9)).unwrap();
    let model = TaskModel::new(10, &mut rng(10));
    let head = VariationalGaussianHead::new(84, &mut rng(11));
    let x = images(&[8, 3, 32, 32], 14);
    let w = g.draw_weights(&mut rng(12)).unwrap();
    let mut tape = Tape::new();
    let f = model.bind(&mut tape, false);
    let q = head.bind(&mut tape, false);
    let gv = g.bind(&mut tape, true);
    let xv = tape.constant(x);
    let xp = gv.generate(&mut tape, xv, &w).unwrap();
    let z = f.embed(&mut tape, xv).unwrap();
    let zp = f.embed(&mut tape, xp).unwrap();
    let club = club_estimate(&mut tape, z, zp, &q).unwrap();
    let grads = tape.backward(club).unwrap();
    let nonzero = gv.params().iter().filter_map(|&p| grads.get(p)).any(|t| t.data().iter().any(|&v| v != 0.0));
    assert!(nonzero);
    for v in f.vars().into_iter().chain(q.vars()) {
        assert!(grads.get(v).is_none());
    }
}

/// Every check in this file, for harnesses that run them outside libtest.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("style_shift_identity_configuration", style_shift_identity_configuration),
    ("zero_scale_gives_constant_mean_shift", zero_scale_gives_constant_mean_shift),
    ("transformation_identity_and_shapes", transformation_identity_and_shapes),
    ("single_transformation_identity_generates_tanh", single_transformation_identity_generates_tanh),
    ("single_transformation_ignores_weight", single_transformation_ignores_weight),
    ("two_transformations_equal_weights_average", two_transformations_equal_weights_average),
    ("mixing_coefficients_sum_to_one", mixing_coefficients_sum_to_one),
    ("reinit_respects_bounds_and_leaves_shifts_alone", reinit_respects_bounds_and_leaves_shifts_alone),
    ("module_layout", module_layout),
    ("generation_is_deterministic_and_per_sample", generation_is_deterministic_and_per_sample),
    ("gradient_with_respect_to_shifts", gradient_with_respect_to_shifts),
    ("generator_loss_reaches_style_shifts", generator_loss_reaches_style_shifts),
];
