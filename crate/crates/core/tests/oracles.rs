//! Checks against values computed independently of the library code.

use std::collections::{BTreeMap, HashMap};

use sbrush_core::rng::RngStream;
use sbrush_core::schedule::{make_vp_schedule, sample_t, ScheduleKind};
use sbrush_core::tensor::{grad_check, Activation, Graph, Tensor};

/// Two-layer MLP `silu(tanh(x W1 + b1) W2 + b2)` built from graph primitives;
/// with `loss` the output is the sum of its squares.
fn mlp_graph(loss: bool) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x");
    let w1 = g.input("w1");
    let b1 = g.input("b1");
    let w2 = g.input("w2");
    let b2 = g.input("b2");
    let h = g.matmul(x, w1);
    let h = g.add(h, b1);
    let h = g.pointwise(h, Activation::Tanh);
    let o = g.matmul(h, w2);
    let o = g.add(o, b2);
    let o = g.pointwise(o, Activation::Silu);
    if loss {
        let sq = g.mul(o, o);
        let s = g.sum(sq);
        g.output("loss", s);
    } else {
        g.output("y", o);
    }
    g
}

fn mlp_inputs(seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = RngStream::new(seed, "mlp");
    let mut t = |s: &[usize]| rng.normal_tensor(s).with_grad();
    BTreeMap::from([
        ("x".to_string(), t(&[5, 3])),
        ("w1".to_string(), t(&[3, 4])),
        ("b1".to_string(), t(&[4])),
        ("w2".to_string(), t(&[4, 2])),
        ("b2".to_string(), t(&[2])),
    ])
}

fn hand_mlp(inp: &BTreeMap<String, Tensor>) -> Vec<f64> {
    let (x, w1, b1, w2, b2) = (&inp["x"], &inp["w1"], &inp["b1"], &inp["w2"], &inp["b2"]);
    let mut out = Vec::new();
    for i in 0..5 {
        let h: Vec<f64> = (0..4)
            .map(|j| ((0..3).map(|k| x.data()[i * 3 + k] * w1.data()[k * 4 + j]).sum::<f64>() + b1.data()[j]).tanh())
            .collect();
        for j in 0..2 {
            let z = (0..4).map(|k| h[k] * w2.data()[k * 2 + j]).sum::<f64>() + b2.data()[j];
            out.push(z / (1.0 + (-z).exp()));
        }
    }
    out
}

#[test]
fn mlp_forward_matches_a_hand_computation() {
    let inp = mlp_inputs(7);
    let mut g = mlp_graph(false);
    let feed: HashMap<&str, &Tensor> = inp.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let out = g.forward_eval(&feed).unwrap();
    let want = hand_mlp(&inp);
    assert_eq!(out["y"].shape(), &[5, 2]);
    for (a, b) in out["y"].data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in [11, 3] {
        let mut g = mlp_graph(true);
        let report = grad_check(&mut g, &mlp_inputs(seed), 1e-4).unwrap();
        assert!(report.pass, "seed {seed}: {report:?}");
        assert_eq!(report.checked, 15 + 12 + 4 + 8 + 2);
    }
}

#[test]
fn quadratic_form_gradient_is_symmetrized_matrix_times_x() {
    let n = 4;
    let mut rng = RngStream::new(5, "quad");
    let x = rng.normal_tensor(&[1, n]).with_grad();
    let a = rng.normal_tensor(&[n, n]);
    let mut g = Graph::new();
    let xi = g.input("x");
    let ai = g.input("a");
    let xa = g.matmul(xi, ai);
    let p = g.mul(xa, xi);
    let q = g.sum(p);
    g.output("q", q);
    let feed = HashMap::from([("x", &x), ("a", &a)]);
    let out = g.forward_eval(&feed).unwrap();
    let grads = g.backward(&BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))])).unwrap();

    let (xd, ad) = (x.data(), a.data());
    let q_hand: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| xd[i] * ad[i * n + j] * xd[j]).sum();
    assert!((out["q"].data()[0] - q_hand).abs() <= 1e-12);
    for i in 0..n {
        let want: f64 = (0..n).map(|j| (ad[i * n + j] + ad[j * n + i]) * xd[j]).sum();
        assert!((grads["x"].data()[i] - want).abs() <= 1e-4 * want.abs().max(1.0));
    }
    assert!(!grads.contains_key("a"), "a was bound without grad");
    let inputs = BTreeMap::from([("x".to_string(), x.clone()), ("a".to_string(), a.clone())]);
    assert!(grad_check(&mut g, &inputs, 1e-4).unwrap().pass);
}

#[test]
fn terminal_alpha_matches_an_independent_cumulative_product() {
    // numpy: np.prod(1 - np.linspace(lo, hi, T))
    let cases = [
        (1000, 1e-4, 0.02, 4.035829765375676e-05),
        (1000, 8.5e-4, 0.012, 0.0015789629305514416),
        (10, 1e-4, 0.02, 0.9037394161512371),
    ];
    for (steps, lo, hi, want) in cases {
        let s = make_vp_schedule(steps, lo, hi, ScheduleKind::VpLinear).unwrap();
        let got = s.alpha(steps).powi(2);
        assert!((got - want).abs() <= 1e-12 * want, "T={steps} [{lo}, {hi}]: {got} vs {want}");
    }
}

#[test]
fn cosine_schedule_follows_its_closed_form_away_from_the_clip() {
    let steps = 1000;
    let s = make_vp_schedule(steps, 1e-4, 0.02, ScheduleKind::VpCosine).unwrap();
    let f = |t: f64| (((t / steps as f64 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    for t in (1..=steps - 10).step_by(7) {
        let want = f(t as f64) / f(0.0);
        assert!((s.alpha(t).powi(2) - want).abs() <= 1e-10, "t={t}");
    }
}

#[test]
fn sampled_timesteps_are_uniform() {
    let mut rng = RngStream::new(17, "chi2");
    let (lo, hi) = (20usize, 980usize);
    let bins = hi - lo + 1;
    let n = 100_000;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        counts[sample_t(0.02, 0.98, 1000, &mut rng).unwrap() - lo] += 1;
    }
    let e = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let df = (bins - 1) as f64;
    // Mean df, sd sqrt(2 df); four standard deviations.
    assert!(chi2 < df + 4.0 * (2.0 * df).sqrt(), "chi2 {chi2} with {df} dof");
    assert!(counts[0] > 0 && counts[bins - 1] > 0);
}

#[test]
fn two_step_schedule_samples_both_steps_equally() {
    let mut rng = RngStream::new(2, "t2");
    let n = 10_000;
    let ones = (0..n).filter(|_| sample_t(0.0, 1.0, 2, &mut rng).unwrap() == 1).count();
    let frac = ones as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}
