use l2d_core::model::{Parameterized, TaskModel};
use l2d_core::objectives::{
    class_conditional_mmd, club_estimate, cross_entropy, cross_entropy_task, likelihood_loss, median_bandwidth,
    supcon_loss, ContrastiveConfig, MmdConfig, MmdKernel, VariationalGaussianHead,
};
use l2d_core::rng::SeedTree;
use l2d_core::style::{style_shift, MixWeights, StyleComplementModule, StyleConfig};
use l2d_core::tensor::gradcheck::check_gradients;
use l2d_core::tensor::{instance_mean_var, VAR_EPS};
use l2d_core::{Result, Tape, Tensor, Var};
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).stream("gradcheck");
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, for kinks and poles.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| if v >= 0.0 { 0.2 + v } else { v - 0.2 })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| 0.5 + v.abs())
}

/// Reduce any output to a scalar with fixed random weights, so every output
/// element contributes a distinct coefficient.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = tape.constant(random(tape.shape(v), 991));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(|t: &mut Tape, v: &[Var]| f(t, v).and_then(|o| project(t, o)), inputs, STEP, FLOOR)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(report.compared > 0, "{name}: nothing compared");
    assert!(report.passes(TOL), "{name}: max relative error {:.3e}", report.max_rel_error);
}

pub fn elementwise_binary() {
    let a = random(&[3, 4], 1);
    let b = away_from_zero(&[3, 4], 2);
    check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("div", &[a, b], |t, v| t.div(v[0], v[1]));
}

pub fn elementwise_unary() {
    let x = away_from_zero(&[2, 5], 3);
    let p = positive(&[2, 5], 4);
    check("neg", &[x.clone()], |t, v| Ok(t.neg(v[0])));
    check("scale", &[x.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    check("add_scalar", &[x.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7)));
    check("tanh", &[x.clone()], |t, v| Ok(t.tanh(v[0])));
    check("relu", &[x.clone()], |t, v| Ok(t.relu(v[0])));
    check("exp", &[x.clone()], |t, v| Ok(t.exp(v[0])));
    check("square", &[x.clone()], |t, v| Ok(t.square(v[0])));
    check("clamp", &[x], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
    check("log", &[p.clone()], |t, v| Ok(t.log(v[0])));
    check("sqrt", &[p], |t, v| Ok(t.sqrt(v[0])));
}

pub fn reductions_and_reshapes() {
    let x = random(&[2, 3, 4], 5);
    check("sum", &[x.clone()], |t, v| Ok(t.sum(v[0])));
    check("mean", &[x.clone()], |t, v| Ok(t.mean(v[0])));
    check("sum_axes", &[x.clone()], |t, v| t.sum_axes(v[0], &[0, 2]));
    check("mean_axes", &[x.clone()], |t, v| t.mean_axes(v[0], &[1]));
    check("reshape", &[x.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    check("broadcast_to", &[random(&[1, 3, 1], 6)], |t, v| t.broadcast_to(v[0], &[2, 3, 4]));
    let m = random(&[4, 3], 7);
    check("transpose", &[m.clone()], |t, v| t.transpose(v[0]));
    check("select_rows", &[m.clone()], |t, v| t.select_rows(v[0], &[2, 0, 2]));
    check("concat_rows", &[m, random(&[2, 3], 8)], |t, v| t.concat_rows(&[v[0], v[1]]));
}

pub fn matrix_products() {
    check("matmul", &[random(&[3, 4], 9), random(&[4, 2], 10)], |t, v| t.matmul(v[0], v[1]));
    check("linear", &[random(&[3, 4], 11), random(&[5, 4], 12), random(&[5], 13)], |t, v| t.linear(v[0], v[1], v[2]));
    check("pairwise_sq_dists", &[random(&[3, 4], 14), random(&[2, 4], 15)], |t, v| t.pairwise_sq_dists(v[0], v[1]));
}

pub fn convolutions() {
    let x = random(&[2, 2, 6, 5], 16);
    check("conv2d 3x3 pad 1", &[x.clone(), random(&[3, 2, 3, 3], 17)], |t, v| t.conv2d(v[0], v[1], 1, 1));
    check("conv2d 3x3 stride 2", &[x.clone(), random(&[2, 2, 3, 3], 18)], |t, v| t.conv2d(v[0], v[1], 2, 0));
    check("conv2d 1x1 direct path", &[x.clone(), random(&[3, 2, 1, 1], 19)], |t, v| t.conv2d(v[0], v[1], 1, 0));
    check("conv2d many channels", &[random(&[1, 5, 5, 5], 20), random(&[6, 5, 3, 3], 21)], |t, v| {
        t.conv2d(v[0], v[1], 1, 1)
    });
    check("conv_transpose2d", &[x.clone(), random(&[2, 3, 3, 3], 22)], |t, v| t.conv_transpose2d(v[0], v[1], 1, 1));
    check("conv_transpose2d stride 2", &[x, random(&[2, 1, 3, 3], 23)], |t, v| t.conv_transpose2d(v[0], v[1], 2, 0));
    check("conv_transpose2d many channels", &[random(&[1, 5, 4, 4], 24), random(&[5, 6, 3, 3], 25)], |t, v| {
        t.conv_transpose2d(v[0], v[1], 1, 1)
    });
}

pub fn pooling_and_normalizations() {
    check("max_pool2", &[random(&[2, 2, 4, 6], 26)], |t, v| t.max_pool2(v[0]));
    let f = random(&[2, 3, 4, 4], 27);
    check("spatial mean", &[f.clone()], |t, v| instance_mean_var(t, v[0]).map(|(m, _)| m));
    check("spatial std", &[f.clone()], |t, v| {
        let (_, var) = instance_mean_var(t, v[0])?;
        let stabilized = t.add_scalar(var, VAR_EPS);
        Ok(t.sqrt(stabilized))
    });
    check("l2_normalize_rows", &[random(&[4, 3], 28)], |t, v| t.l2_normalize_rows(v[0]));
    check("log_softmax", &[random(&[3, 5], 29)], |t, v| t.log_softmax(v[0]));
    check("pick_per_row", &[random(&[3, 5], 30)], |t, v| t.pick_per_row(v[0], &[4, 0, 2]));
}

pub fn style_shift_all_inputs() {
    let f = random(&[2, 3, 4, 4], 31);
    check("style_shift", &[f, random(&[3, 4, 4], 32), random(&[3, 4, 4], 33)], |t, v| style_shift(t, v[0], v[1], v[2]));
}

pub fn objectives_with_respect_to_inputs_and_head() {
    let head = VariationalGaussianHead::new(3, &mut SeedTree::new(2).stream("q"));
    let head_params: Vec<Tensor> = head.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut inputs = vec![random(&[5, 3], 34), random(&[5, 3], 35)];
    inputs.extend(head_params);
    let bind = |v: &[Var]| l2d_core::objectives::HeadVars {
        w1: v[2],
        b1: v[3],
        w_mean: v[4],
        b_mean: v[5],
        w_logvar: v[6],
        b_logvar: v[7],
    };
    check("club_estimate", &inputs, |t, v| club_estimate(t, v[0], v[1], &bind(v)));
    check("likelihood_loss", &inputs, |t, v| likelihood_loss(t, v[0], v[1], &bind(v)));

    let labels = [0, 1, 0, 2, 1, 0];
    let cfg = ContrastiveConfig::new(0.5).unwrap();
    check("supcon_loss", &[random(&[6, 4], 36)], |t, v| {
        let e = t.l2_normalize_rows(v[0])?;
        Ok(supcon_loss(t, e, &labels, &cfg)?.value)
    });
    // The median bandwidth is a constant of the backward pass, so the check pins it
    // at the value the median rule picks for the unperturbed inputs.
    let (s, g) = (random(&[4, 3], 37), random(&[5, 3], 38));
    let rbf = MmdConfig { kernel: MmdKernel::Rbf(median_bandwidth(&[&s, &g])) };
    check("class_conditional_mmd rbf", &[s, g], |t, v| {
        Ok(class_conditional_mmd(t, v[0], &[0, 1, 1, 0], v[1], &[1, 0, 0, 1, 2], &rbf)?.value)
    });
    check("class_conditional_mmd linear", &[random(&[4, 3], 51), random(&[5, 3], 52)], |t, v| {
        let cfg = MmdConfig { kernel: MmdKernel::Linear };
        Ok(class_conditional_mmd(t, v[0], &[0, 1, 1, 0], v[1], &[1, 0, 0, 1, 2], &cfg)?.value)
    });
    check("cross_entropy_task", &[random(&[3, 4], 39), random(&[3, 4], 40)], |t, v| {
        cross_entropy_task(t, v[0], v[1], &[3, 0, 1])
    });
}

/// Composite 1: the LeNet task network and cross-entropy, w.r.t. parameters in
/// every layer (the two large fully connected weight matrices are held fixed to
/// keep the check fast).
pub fn composite_task_network() {
    let model = TaskModel::new(10, &mut SeedTree::new(3).stream("init"));
    let named = model.named_params();
    let pick = ["conv1.weight", "conv2.weight", "conv2.bias", "fc1.bias", "fc2.bias", "head.weight", "head.bias"];
    let inputs: Vec<Tensor> = pick.iter().map(|n| named.iter().find(|(m, _)| m == n).unwrap().1.clone()).collect();
    let x = random(&[2, 3, 32, 32], 41);
    let labels = [7, 2];
    check("task network", &inputs, |t, v| {
        let mut f = model.bind(t, false);
        f.conv1_w = v[0];
        f.conv2_w = v[1];
        f.conv2_b = v[2];
        f.fc1_b = v[3];
        f.fc2_b = v[4];
        f.head_w = v[5];
        f.head_b = v[6];
        let xv = t.constant(x.clone());
        let z = f.embed(t, xv)?;
        let logits = f.classify(t, z)?;
        cross_entropy(t, logits, &labels)
    });
}

/// Composite 2: generator output through a frozen encoder into CLUB + MMD, w.r.t.
/// the style shifts.
pub fn composite_generator_objective() {
    let mut cfg = StyleConfig::with_k(2);
    cfg.kernel_sizes = vec![1, 3];
    cfg.height = 8;
    cfg.width = 8;
    let gen = StyleComplementModule::new(cfg, &mut SeedTree::new(4).stream("g")).unwrap();
    let weights = MixWeights::from_raw(vec![0.7, 1.1], 0.1).unwrap();
    let x = random(&[3, 3, 8, 8], 42);
    let enc_w = random(&[4, 192], 43).map(|v| v * 0.1);
    let head = VariationalGaussianHead::new(4, &mut SeedTree::new(5).stream("q"));
    let shifts: Vec<Tensor> = gen
        .transformations()
        .iter()
        .flat_map(|t| [t.mean_shift().map(|v| v + 0.1), t.var_shift().map(|v| v * 0.9)])
        .collect();
    check("generator -> CLUB + MMD", &shifts, |t, v| {
        let mut g = gen.clone();
        for (k, tr) in g.transformations_mut().iter_mut().enumerate() {
            *tr.mean_shift_mut() = t.value(v[2 * k]).clone();
            *tr.var_shift_mut() = t.value(v[2 * k + 1]).clone();
        }
        let mut bound = g.bind(t, false);
        for (k, tv) in bound.transformations.iter_mut().enumerate() {
            tv.mean_shift = v[2 * k];
            tv.var_shift = v[2 * k + 1];
        }
        let xv = t.constant(x.clone());
        let xp = bound.generate(t, xv, &weights)?;
        let w = t.constant(enc_w.clone());
        let flat_x = t.reshape(xv, &[3, 192])?;
        let flat_xp = t.reshape(xp, &[3, 192])?;
        let wt = t.transpose(w)?;
        let z = t.matmul(flat_x, wt)?;
        let zp = t.matmul(flat_xp, wt)?;
        let q = head.bind(t, false);
        let club = club_estimate(t, z, zp, &q)?;
        let mmd = class_conditional_mmd(t, z, &[0, 1, 0], zp, &[0, 1, 0], &MmdConfig { kernel: MmdKernel::Rbf(2.0) })?;
        t.add(club, mmd.value)
    });
}

/// Composite 3: normalized embeddings through supervised contrastive, likelihood
/// and task losses combined, w.r.t. a shared linear encoder.
pub fn composite_task_objective() {
    let x = random(&[4, 6], 44);
    let xp = random(&[4, 6], 45);
    let labels = [0, 1, 1, 2];
    let head = VariationalGaussianHead::new(5, &mut SeedTree::new(6).stream("q"));
    let cfg = ContrastiveConfig::new(0.3).unwrap();
    check(
        "encoder -> supcon + likelihood + task CE",
        &[random(&[5, 6], 46), random(&[5], 47), random(&[3, 5], 48)],
        |t, v| {
            let xv = t.constant(x.clone());
            let xpv = t.constant(xp.clone());
            let z = t.linear(xv, v[0], v[1])?;
            let z = t.tanh(z);
            let zp = t.linear(xpv, v[0], v[1])?;
            let zp = t.tanh(zp);
            let both = t.concat_rows(&[z, zp])?;
            let e = t.l2_normalize_rows(both)?;
            let lab: Vec<usize> = labels.iter().chain(&labels).copied().collect();
            let s = supcon_loss(t, e, &lab, &cfg)?.value;
            let q = head.bind(t, false);
            let ll = likelihood_loss(t, z, zp, &q)?;
            let zero_b = t.constant(Tensor::zeros(vec![3]));
            let logits = t.linear(z, v[2], zero_b)?;
            let logits_p = t.linear(zp, v[2], zero_b)?;
            let ce = cross_entropy_task(t, logits, logits_p, &labels)?;
            let a = t.add(s, ll)?;
            t.add(a, ce)
        },
    );
}

pub fn conv_hand_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let k = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = t.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(t.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

    let img = random(&[2, 3, 5, 7], 49);
    let xi = t.constant(img.clone());
    let eye = t.constant(Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let c = t.conv2d(xi, eye, 1, 0).unwrap();
    assert_eq!(t.value(c), &img);
    let d = t.conv_transpose2d(xi, eye, 1, 0).unwrap();
    assert_eq!(t.value(d), &img);
}

pub fn conv_round_trip_preserves_shape() {
    for h in 4..=64 {
        for (w, k) in [(h, 1), (4 + (h * 7) % 61, 3), (h.max(5), 5)] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::zeros(vec![1, 3, h, w]));
            let kc = t.constant(Tensor::zeros(vec![3, 3, k, k]));
            let p = (k - 1) / 2;
            let y = t.conv2d(x, kc, 1, p).unwrap();
            let z = t.conv_transpose2d(y, kc, 1, p).unwrap();
            assert_eq!(t.shape(z), &[1, 3, h, w], "k={k}");
        }
    }
}

pub fn linear_and_statistics_hand_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
    let w = t.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[5.0]);

    let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b2 = t.constant(Tensor::zeros(vec![2]));
    let y2 = t.linear(x, eye, b2).unwrap();
    assert_eq!(t.value(y2).data(), &[2.0, 3.0]);

    let f = t.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
    let (m, v) = instance_mean_var(&mut t, f).unwrap();
    assert_eq!(t.value(m).data(), &[0.5]);
    assert_eq!(t.value(v).data(), &[0.25]);

    let c = t.constant(Tensor::full(vec![2, 3, 4, 4], 1.5));
    let (m, v) = instance_mean_var(&mut t, c).unwrap();
    assert!(t.value(m).data().iter().all(|&x| x == 1.5));
    assert!(t.value(v).data().iter().all(|&x| x == 0.0));
}

pub fn forward_is_bit_deterministic() {
    let model = TaskModel::new(10, &mut SeedTree::new(8).stream("init"));
    let x = random(&[3, 3, 32, 32], 50);
    assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
}

/// Every check in this file, for harnesses that run them outside libtest.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions_and_reshapes", reductions_and_reshapes),
    ("matrix_products", matrix_products),
    ("convolutions", convolutions),
    ("pooling_and_normalizations", pooling_and_normalizations),
    ("style_shift_all_inputs", style_shift_all_inputs),
    ("objectives_with_respect_to_inputs_and_head", objectives_with_respect_to_inputs_and_head),
    ("composite_task_network", composite_task_network),
    ("composite_generator_objective", composite_generator_objective),
    ("composite_task_objective", composite_task_objective),
    ("conv_hand_examples", conv_hand_examples),
    ("conv_round_trip_preserves_shape", conv_round_trip_preserves_shape),
    ("linear_and_statistics_hand_examples", linear_and_statistics_hand_examples),
    ("forward_is_bit_deterministic", forward_is_bit_deterministic),
];
