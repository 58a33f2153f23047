//! Finite-difference gradient checks shared by the gradient and acceptance suites.
//!
//! Central differences with h = 1e-5.
//!
//! Each component is checked on 100 seeded random cases. The error measure is
//! |a − n| / max(|a|, |n|, 1e-5); the floor keeps near-zero gradients from
//! turning round-off into huge relative errors. Cases that land within 1e-3
//! of a kink (ReLU, max-pool switch, volume floor) are redrawn, because finite
//! differences are meaningless there.

use phymass::fusion::{GatedFusion, SelfAttention};
use phymass::geometry::{PointCloud, PointEncoder};
use phymass::heads::{alde_loss, DensityActivationConfig, DensityHead, VolumeHead};
use phymass::nn::{Activation, DenseLayer, LayerNorm, Params};
use phymass::pipeline::{DirectRegressor, MassModel, ModelConfig, PreparedSample, Trainable};
use phymass::rng::SplitMix64;
use phymass::semantics::MaterialId;
use phymass::synthbench::Split;
use rand::Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const CASES: u64 = 100;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn vec_in(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error between `analytic` and finite differences of `loss`
/// over every coordinate of `x`.
fn check_vector(x: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + H;
        let up = loss(&p);
        p[i] = x[i] - H;
        let down = loss(&p);
        p[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

/// Same, over every parameter of `model`, with `grads` in the same layout.
fn check_params<M: Params + Clone>(model: &M, grads: &M, loss: impl Fn(&M) -> f64) -> f64 {
    let flat = model.flatten();
    let mut probe = model.clone();
    check_vector(&flat, &grads.flatten(), |p| {
        probe.unflatten(p);
        loss(&probe)
    })
}

/// Component name and worst relative error over all its cases.
pub type Check = (String, f64);

fn near_kink(values: &[f64], at: f64) -> bool {
    values.iter().any(|v| (v - at).abs() < 1e-3)
}

pub fn dense_layer_all_activations() -> Vec<Check> {
    let mut out = Vec::new();
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Softplus,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let mut worst: f64 = 0.0;
        let mut case = 0;
        let mut rng = SplitMix64::new(100);
        while case < CASES {
            let (n_in, n_out) = (rng.random_range(1..6), rng.random_range(1..6));
            let layer = DenseLayer::new(n_in, n_out, act, &mut rng);
            let x = vec_in(&mut rng, n_in, 2.0);
            let r = vec_in(&mut rng, n_out, 1.0);
            if act == Activation::Relu && near_kink(&layer.pre_activation(&x).unwrap(), 0.0) {
                continue;
            }
            let g = layer.backward(&x, &r).unwrap();
            let loss = |l: &DenseLayer, x: &[f64]| dot(&l.forward(x).unwrap(), &r);
            worst = worst.max(check_vector(&x, &g.grad_x, |x| loss(&layer, x)));
            let mut grads = layer.zeros_like();
            grads.weight = g.grad_w.clone();
            grads.bias = g.grad_b.clone();
            worst = worst.max(check_params(&layer, &grads, |l| loss(l, &x)));
            case += 1;
        }
        out.push((format!("dense/{}", act.name()), worst));
    }
    out
}

pub fn layernorm() -> Vec<Check> {
    let mut rng = SplitMix64::new(200);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let d = rng.random_range(2..8);
        let mut ln = LayerNorm::new(d);
        ln.gain = vec_in(&mut rng, d, 2.0);
        ln.shift = vec_in(&mut rng, d, 1.0);
        let x = vec_in(&mut rng, d, 3.0);
        let r = vec_in(&mut rng, d, 1.0);
        let g = ln.backward(&x, &r).unwrap();
        let loss = |l: &LayerNorm, x: &[f64]| dot(&l.forward(x).unwrap(), &r);
        worst = worst.max(check_vector(&x, &g.grad_x, |x| loss(&ln, x)));
        let mut acc = ln.zeros_like();
        ln.backward_accumulate(&x, &r, &mut acc).unwrap();
        assert_eq!(acc.gain, g.grad_gain);
        assert_eq!(acc.shift, g.grad_shift);
        worst = worst.max(check_params(&ln, &acc, |l| loss(l, &x)));
    }
    vec![("layernorm".to_string(), worst)]
}

/// Smallest gap between the winner and the runner-up over pooled channels.
fn pool_margin(enc: &PointEncoder, pc: &PointCloud) -> f64 {
    let mut margin = f64::INFINITY;
    let feats: Vec<Vec<f64>> = pc
        .points()
        .iter()
        .map(|p| {
            let mut cur = p.to_vec();
            for l in &enc.point_layers {
                cur = l.forward(&cur).unwrap();
            }
            cur
        })
        .collect();
    for j in 0..feats[0].len() {
        let mut col: Vec<f64> = feats.iter().map(|f| f[j]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(col[0] - col[1]);
    }
    margin
}

pub fn point_encoder() -> Vec<Check> {
    let mut rng = SplitMix64::new(300);
    let mut worst: f64 = 0.0;
    let mut case = 0;
    while case < CASES {
        let n = rng.random_range(4..10);
        let widths = if case % 2 == 0 { vec![5] } else { vec![4, 6] };
        let enc = PointEncoder::new(&widths, 4, n, &mut rng).unwrap();
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let pc = PointCloud::new(pts).unwrap();
        // Pre-activations of every per-point layer must be away from 0, and
        // every channel needs a clear winner.
        let mut kink = false;
        for p in pc.points() {
            let mut cur = p.to_vec();
            for l in &enc.point_layers {
                kink |= near_kink(&l.pre_activation(&cur).unwrap(), 0.0);
                cur = l.forward(&cur).unwrap();
            }
        }
        if kink || pool_margin(&enc, &pc) < 1e-3 {
            continue;
        }
        let r = vec_in(&mut rng, 4, 1.0);
        let (_, cache) = enc.forward(&pc).unwrap();
        let mut acc = enc.zeros_like();
        enc.backward(&pc, &cache, &r, &mut acc).unwrap();
        worst = worst.max(check_params(&enc, &acc, |e| dot(&e.encode(&pc).unwrap(), &r)));
        case += 1;
    }
    vec![("point encoder".to_string(), worst)]
}

fn tokens(rng: &mut SplitMix64, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| vec_in(rng, d, 1.5)).collect()
}

fn check_tokens_grad(
    toks: &[Vec<f64>],
    analytic: &[Vec<f64>],
    loss: impl Fn(&[Vec<f64>]) -> f64,
) -> f64 {
    let d = toks[0].len();
    let flat: Vec<f64> = toks.concat();
    check_vector(&flat, &analytic.concat(), |p| {
        let t: Vec<Vec<f64>> = p.chunks(d).map(<[f64]>::to_vec).collect();
        loss(&t)
    })
}

pub fn self_attention() -> Vec<Check> {
    let mut rng = SplitMix64::new(400);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (k, d) = (rng.random_range(1..4), rng.random_range(2..6));
        let attn = SelfAttention::new(d, &mut rng);
        let toks = tokens(&mut rng, k, d);
        let r = vec_in(&mut rng, d, 1.0);
        let (_, cache) = attn.forward(&toks).unwrap();
        let mut acc = attn.zeros_like();
        let g = attn.backward(&toks, &cache, &r, &mut acc).unwrap();
        let loss = |a: &SelfAttention, t: &[Vec<f64>]| dot(&a.forward(t).unwrap().0.vector, &r);
        worst = worst.max(check_tokens_grad(&toks, &g, |t| loss(&attn, t)));
        worst = worst.max(check_params(&attn, &acc, |a| loss(a, &toks)));
    }
    vec![("self-attention fusion".to_string(), worst)]
}

pub fn gated_fusion() -> Vec<Check> {
    let mut rng = SplitMix64::new(500);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (k, d) = (rng.random_range(1..4), rng.random_range(2..6));
        let gate = GatedFusion::new(k, d, &mut rng);
        let toks = tokens(&mut rng, k, d);
        let r = vec_in(&mut rng, d, 1.0);
        let (_, cache) = gate.forward(&toks).unwrap();
        let mut acc = gate.zeros_like();
        let g = gate.backward(&toks, &cache, &r, &mut acc).unwrap();
        let loss = |m: &GatedFusion, t: &[Vec<f64>]| dot(&m.forward(t).unwrap().0.vector, &r);
        worst = worst.max(check_tokens_grad(&toks, &g, |t| loss(&gate, t)));
        worst = worst.max(check_params(&gate, &acc, |m| loss(m, &toks)));
    }
    vec![("gated fusion".to_string(), worst)]
}

pub fn volume_head() -> Vec<Check> {
    let mut rng = SplitMix64::new(600);
    let mut worst: f64 = 0.0;
    let mut case = 0;
    while case < CASES {
        let d = rng.random_range(2..6);
        let unit = if case % 2 == 0 { 1.0 } else { 1e-3 };
        let head = VolumeHead::new(d, 5, rng.random_range(0.5..2.0), &mut rng).with_unit(unit);
        let x = vec_in(&mut rng, d, 1.0);
        let (pre, trace) = head.body.forward(&x).unwrap();
        if near_kink(&[pre], 0.0) || near_kink(&[unit * pre], 1e-6) {
            continue;
        }
        // L = ln V̂, which keeps the check scale-free across units.
        let g_pre = head.derivative(pre) / head.activate(pre);
        let mut acc = head.zeros_like();
        let gx = head.body.backward(&trace, g_pre, &mut acc.body).unwrap();
        let loss = |h: &VolumeHead, x: &[f64]| h.predict(x).unwrap().ln();
        worst = worst.max(check_vector(&x, &gx, |x| loss(&head, x)));
        worst = worst.max(check_params(&head, &acc, |h| loss(h, &x)));
        case += 1;
    }
    vec![("volume head".to_string(), worst)]
}

pub fn density_head() -> Vec<Check> {
    let mut rng = SplitMix64::new(700);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let d = rng.random_range(2..6);
        let head = DensityHead::new(d, 5, DensityActivationConfig::default(), &mut rng);
        let x = vec_in(&mut rng, d, 1.0);
        let (pre, trace) = head.body.forward(&x).unwrap();
        let g_pre = head.bounds.derivative(pre) / head.bounds.activate(pre);
        let mut acc = head.zeros_like();
        let gx = head.body.backward(&trace, g_pre, &mut acc.body).unwrap();
        let loss = |h: &DensityHead, x: &[f64]| h.predict(x).unwrap().ln();
        worst = worst.max(check_vector(&x, &gx, |x| loss(&head, x)));
        worst = worst.max(check_params(&head, &acc, |h| loss(h, &x)));
    }
    vec![("density head".to_string(), worst)]
}

pub fn softplus_direct_baseline() -> Vec<Check> {
    let mut rng = SplitMix64::new(800);
    let mut worst: f64 = 0.0;
    let mut case = 0;
    while case < CASES {
        let model = DirectRegressor::new(4, 6, &mut rng);
        let x = vec_in(&mut rng, 4, 1.0);
        let mass = rng.random_range(0.1..10.0);
        let pred = model.mass(&x).unwrap();
        if (pred.ln() - f64::ln(mass)).abs() < 1e-3 {
            continue;
        }
        let mut acc = model.gradient_buffer();
        model.accumulate_appearance(&x, mass, &mut acc, 1.0).unwrap();
        worst = worst.max(check_params(&model, &acc, |m| {
            alde_loss(mass, m.mass(&x).unwrap()).unwrap().0
        }));
        case += 1;
    }
    vec![("softplus direct baseline".to_string(), worst)]
}

pub fn alde_loss_derivative() -> Vec<Check> {
    let mut rng = SplitMix64::new(900);
    let mut worst: f64 = 0.0;
    let mut case = 0;
    while case < CASES {
        let m = f64::exp(rng.random_range(-5.0..5.0));
        let m_hat = f64::exp(rng.random_range(-5.0..5.0));
        if (m.ln() - m_hat.ln()).abs() < 1e-3 {
            continue;
        }
        let (_, g) = alde_loss(m, m_hat).unwrap();
        worst = worst.max(check_vector(&[m_hat], &[g], |p| alde_loss(m, p[0]).unwrap().0));
        case += 1;
    }
    vec![("alde loss".to_string(), worst)]
}

fn tiny_sample(rng: &mut SplitMix64, n_points: usize, materials: usize) -> PreparedSample {
    let pts: Vec<[f64; 3]> = (0..n_points)
        .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1)])
        .collect();
    PreparedSample {
        id: "x".into(),
        split: Split::Train,
        category: "box/steel".into(),
        seen: true,
        mass: f64::exp(rng.random_range(-2.0..3.0)),
        true_volume: 1.0,
        true_density: 1.0,
        appearance: vec_in(rng, 6, 1.0),
        points: PointCloud::new(pts).unwrap(),
        material: MaterialId(rng.random_range(0..=materials)),
        material_text: "steel".into(),
        thickness_volume: 1.0,
    }
}

pub fn end_to_end_factored_model() -> Vec<Check> {
    let mut rng = SplitMix64::new(1000);
    let variants = ["gated", "self_attn", "concat"];
    let mut worst: f64 = 0.0;
    let mut case = 0u64;
    while case < CASES {
        let cfg = ModelConfig {
            feature_dim: 3,
            n_points: 6,
            point_widths: vec![4],
            head_hidden: 4,
            fusion: variants[(case % 3) as usize].parse().unwrap(),
            seed: case + 17 * rng.random_range(0..1000),
            ..Default::default()
        };
        let model = MassModel::new(&cfg, 3).unwrap();
        let s = tiny_sample(&mut rng, 6, 3);
        // Skip samples near any non-differentiable point.
        let geo = model.geometry.as_ref().unwrap();
        let kink = s
            .points
            .points()
            .iter()
            .any(|p| near_kink(&geo.point_layers[0].pre_activation(p).unwrap(), 0.0));
        let pred = model.predict(&s).unwrap();
        if kink
            || pool_margin(geo, &s.points) < 1e-3
            || (pred.mass.ln() - s.mass.ln()).abs() < 1e-3
            || pred.volume < 2e-6
        {
            continue;
        }
        let mut acc = model.gradient_buffer();
        model.accumulate(&s, &mut acc, 1.0).unwrap();
        worst = worst.max(check_params(&model, &acc, |m| {
            alde_loss(s.mass, m.predict(&s).unwrap().mass).unwrap().0
        }));
        case += 1;
    }
    vec![("end-to-end factored model".to_string(), worst)]
}

/// Every component check, in a fixed order.
pub fn all() -> Vec<Check> {
    [
        dense_layer_all_activations(),
        layernorm(),
        point_encoder(),
        self_attention(),
        gated_fusion(),
        volume_head(),
        density_head(),
        softplus_direct_baseline(),
        alde_loss_derivative(),
        end_to_end_factored_model(),
    ]
    .concat()
}
