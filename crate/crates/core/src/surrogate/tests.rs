use super::*;
use crate::autodiff::Real;
use crate::rng::CounterNormal;
use ndarray::array;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn random_case(k: u64) -> (Mlp, f64, Vec<f64>) {
    let mut g = CounterNormal::new(99, k);
    let d = 1 + (k % 3) as usize;
    let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Sine };
    let net = Mlp::new(&[d + 1, 8, 6, 1], act, 1000 + k).unwrap();
    let mut p = net.params_flat();
    p.iter_mut().for_each(|v| *v += 0.3 * g.normal());
    let mut net = net
        .with_scaling(InputScaling::for_problem(d, 2.0, 0.5, 0.8))
        .unwrap();
    net.set_params_flat(&p).unwrap();
    let t = 2.0 * g.uniform();
    let x = (0..d).map(|_| g.normal()).collect();
    (net, t, x)
}

#[test]
fn bias_only_network_outputs_bias() {
    for act in [Activation::Tanh, Activation::Sine] {
        let mut net = Mlp::zeros(&[3, 4, 1], act).unwrap();
        net.biases_mut()[1][0] = 0.7;
        assert_eq!(net.forward(0.3, &[1.0, -2.0]).unwrap(), 0.7);
        let (dt, g) = net.input_gradient(0.3, &[1.0, -2.0]).unwrap();
        assert_eq!(dt, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }
}

#[test]
fn linear_network_is_affine() {
    let w = array![[0.5, -1.0, 2.0]];
    let b = array![0.25];
    let net = Mlp::from_parts(Activation::Identity, vec![w], vec![b], InputScaling::identity(3)).unwrap();
    let y = net.forward(2.0, &[1.0, 3.0]).unwrap();
    assert_eq!(y, 0.5 * 2.0 - 1.0 + 6.0 + 0.25);
    let (dt, g) = net.input_gradient(2.0, &[1.0, 3.0]).unwrap();
    assert_eq!(dt, 0.5);
    assert_eq!(g, vec![-1.0, 2.0]);
    assert!(net.input_hessian(2.0, &[1.0, 3.0]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let net = Mlp::new(&[3, 4, 1], Activation::Tanh, 0).unwrap();
    assert!(net.forward(0.0, &[1.0]).is_err());
    assert!(net.input_gradient(0.0, &[1.0, 2.0, 3.0]).is_err());
    assert!(net.evaluate_batch(&[0.0, 1.0], &[1.0, 2.0, 3.0], Order::Value).is_err());
    assert!(Mlp::new(&[3, 4, 2], Activation::Tanh, 0).is_err());
    assert!(Mlp::new(&[1, 1], Activation::Tanh, 0).is_err());
}

#[test]
fn relu_hessian_is_unsupported() {
    let net = Mlp::new(&[2, 4, 1], Activation::ReLU, 0).unwrap();
    assert!(matches!(net.input_hessian(0.0, &[1.0]), Err(Error::Unsupported(_))));
    assert!(net.evaluate_batch(&[0.0], &[1.0], Order::Hessian).is_err());
    assert!(net.input_gradient(0.0, &[1.0]).is_ok());
}

#[test]
fn relu_kink_uses_right_derivative() {
    let w1 = array![[0.0, 1.0]];
    let w2 = array![[1.0]];
    let net = Mlp::from_parts(
        Activation::ReLU,
        vec![w1, w2],
        vec![array![0.0], array![0.0]],
        InputScaling::identity(2),
    )
    .unwrap();
    assert_eq!(net.input_gradient(0.0, &[0.0]).unwrap().1, vec![1.0]);
}

#[test]
fn input_gradient_matches_finite_differences() {
    for k in 0..120 {
        let (net, t, x) = random_case(k);
        let (dt, g) = net.input_gradient(t, &x).unwrap();
        let mut fd = Vec::new();
        let h = 1e-5 * (1.0 + t.abs());
        fd.push((net.forward(t + h, &x).unwrap() - net.forward(t - h, &x).unwrap()) / (2.0 * h));
        for i in 0..x.len() {
            let h = 1e-5 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            fd.push((net.forward(t, &xp).unwrap() - net.forward(t, &xm).unwrap()) / (2.0 * h));
        }
        let mut ours = vec![dt];
        ours.extend(g);
        assert!(rel_err(&ours, &fd) < 1e-5, "case {k}: {ours:?} vs {fd:?}");
    }
}

#[test]
fn hessian_is_symmetric_and_matches_gradient_differences() {
    for k in 0..120 {
        let (net, t, x) = random_case(k);
        let d = x.len();
        let h = net.input_hessian(t, &x).unwrap();
        for i in 0..d {
            for j in 0..d {
                assert!((h[[i, j]] - h[[j, i]]).abs() <= 1e-12);
            }
        }
        let mut fd = vec![0.0; d * d];
        for j in 0..d {
            let step = 1e-5 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let gp = net.input_gradient(t, &xp).unwrap().1;
            let gm = net.input_gradient(t, &xm).unwrap().1;
            for i in 0..d {
                fd[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        let ours: Vec<f64> = h.iter().copied().collect();
        assert!(rel_err(&ours, &fd) < 1e-4, "case {k}");
    }
}

#[test]
fn hessian_vector_product_matches_directional_gradient() {
    for k in 0..30 {
        let (net, t, x) = random_case(k);
        let d = x.len();
        let dir: Vec<f64> = (0..d).map(|i| 1.0 - 0.3 * i as f64).collect();
        let h = net.input_hessian(t, &x).unwrap();
        let hv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[[i, j]] * dir[j]).sum()).collect();
        let eps = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - eps * b).collect();
        let gp = net.input_gradient(t, &xp).unwrap().1;
        let gm = net.input_gradient(t, &xm).unwrap().1;
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        assert!(rel_err(&hv, &fd) < 1e-4);
    }
}

#[test]
fn batch_agrees_with_single_point_routes() {
    for k in 0..6 {
        let (net, _, _) = random_case(k);
        let d = net.state_dim();
        let mut g = CounterNormal::new(5, k);
        let n = 600;
        let times: Vec<f64> = (0..n).map(|_| 2.0 * g.uniform()).collect();
        let states: Vec<f64> = (0..n * d).map(|_| g.normal()).collect();
        let out = net.evaluate_batch(&times, &states, Order::Hessian).unwrap();
        for p in (0..n).step_by(37) {
            let x = &states[p * d..(p + 1) * d];
            let v = net.forward(times[p], x).unwrap();
            assert!((out.value[p] - v).abs() <= 1e-13 * (1.0 + v.abs()));
            let gr = net.input_gradient(times[p], x).unwrap().1;
            assert!(rel_err(out.gradient(p), &gr) < 1e-12);
            let h = net.input_hessian(times[p], x).unwrap();
            for i in 0..d {
                for j in 0..d {
                    assert!((out.hessian_entry(p, i, j) - h[[i, j]]).abs() < 1e-11 * (1.0 + h[[i, j]].abs()));
                }
            }
        }
        let vals = net.evaluate_batch(&times, &states, Order::Value).unwrap();
        assert_eq!(vals.value, out.value);
        assert!(vals.grad.is_empty());
    }
}

#[test]
fn params_flat_round_trip() {
    let mut net = Mlp::new(&[2, 5, 3, 1], Activation::Tanh, 4).unwrap();
    assert_eq!(net.num_params(), 2 * 5 + 5 + 5 * 3 + 3 + 3 + 1);
    let p = net.params_flat();
    let mut q = p.clone();
    q[3] = 42.0;
    net.set_params_flat(&q).unwrap();
    assert_eq!(net.weights()[0][[1, 1]], 42.0);
    assert!(net.set_params_flat(&p[1..]).is_err());
    q[0] = f64::INFINITY;
    assert!(net.set_params_flat(&q).is_err());
}

#[test]
fn squared_output_gradient_on_linear_net() {
    let net = Mlp::from_parts(
        Activation::Identity,
        vec![array![[0.5, -1.5]]],
        vec![array![0.2]],
        InputScaling::identity(2),
    )
    .unwrap();
    let pt = ParamTape::new(&net);
    let out = pt.evaluate(&[0.4], &[2.0], Order::Value).unwrap();
    let u = out.value[0];
    let loss = u * u;
    let g = pt.parameter_gradient(loss).unwrap();
    let uv = 0.5 * 0.4 - 1.5 * 2.0 + 0.2;
    let want = [2.0 * uv * 0.4, 2.0 * uv * 2.0, 2.0 * uv];
    for (a, b) in g.iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn constant_loss_and_empty_tape() {
    let net = Mlp::new(&[2, 3, 1], Activation::Tanh, 0).unwrap();
    let pt = ParamTape::new(&net);
    let stray = pt.tape().var(1.0);
    assert!(pt.parameter_gradient(stray).is_err());
    let out = pt.evaluate(&[0.1, 0.2], &[1.0, 2.0], Order::Gradient).unwrap();
    let c = out.value[0].lift(3.0);
    let g = pt.parameter_gradient(c).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

/// A loss touching values, gradients and Hessians at several points.
fn composite_loss<S: Real>(u: &[S], grad: &[Vec<S>], hess: &[Vec<S>]) -> S {
    let mut acc = u[0].lift(0.0);
    for p in 0..u.len() {
        acc = acc + u[p] * u[p] + (grad[p][0] * 0.7).sin() + hess[p][0] * u[p];
        if grad[p].len() > 1 {
            acc = acc + grad[p][1] * hess[p][1] * 2.0 + hess[p][grad[p].len()].tanh();
        }
    }
    acc
}

fn f64_loss(net: &Mlp, times: &[f64], states: &[f64]) -> f64 {
    let d = net.state_dim();
    let mut u = Vec::new();
    let mut gr = Vec::new();
    let mut he = Vec::new();
    for p in 0..times.len() {
        let x = &states[p * d..(p + 1) * d];
        u.push(net.forward(times[p], x).unwrap());
        gr.push(net.input_gradient(times[p], x).unwrap().1);
        he.push(net.input_hessian(times[p], x).unwrap().iter().copied().collect());
    }
    composite_loss(&u, &gr, &he)
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    for k in 0..8 {
        let (net, _, _) = random_case(k);
        let d = net.state_dim();
        let mut g = CounterNormal::new(17, k);
        let n = 5;
        let times: Vec<f64> = (0..n).map(|_| 2.0 * g.uniform()).collect();
        let states: Vec<f64> = (0..n * d).map(|_| g.normal()).collect();

        let pt = ParamTape::new(&net);
        let out = pt.evaluate(&times, &states, Order::Hessian).unwrap();
        let grads: Vec<Vec<_>> = (0..n).map(|p| out.gradient(p).to_vec()).collect();
        let hess: Vec<Vec<_>> = (0..n).map(|p| out.hessian(p).to_vec()).collect();
        let loss = composite_loss(&out.value, &grads, &hess);
        assert!((loss.value() - f64_loss(&net, &times, &states)).abs() < 1e-10 * (1.0 + loss.value().abs()));
        let ours = pt.parameter_gradient(loss).unwrap();

        let p0 = net.params_flat();
        let mut fd = vec![0.0; p0.len()];
        let mut probe = net.clone();
        for i in 0..p0.len() {
            let h = 1e-5 * (1.0 + p0[i].abs());
            let mut q = p0.clone();
            q[i] += h;
            probe.set_params_flat(&q).unwrap();
            let lp = f64_loss(&probe, &times, &states);
            q[i] -= 2.0 * h;
            probe.set_params_flat(&q).unwrap();
            let lm = f64_loss(&probe, &times, &states);
            fd[i] = (lp - lm) / (2.0 * h);
        }
        assert!(rel_err(&ours, &fd) < 1e-4, "case {k}: rel {}", rel_err(&ours, &fd));
    }
}

#[test]
fn parameter_gradient_is_chunking_independent() {
    let net = Mlp::new(&[2, 16, 16, 1], Activation::Tanh, 3).unwrap();
    let n = 700;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let states: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let run = || {
        let pt = ParamTape::new(&net);
        let out = pt.evaluate(&times, &states, Order::Gradient).unwrap();
        let mut acc = out.value[0].lift(0.0);
        for p in 0..n {
            acc = acc + out.value[p] * out.gradient(p)[0];
        }
        pt.parameter_gradient(acc).unwrap()
    };
    let a = run();
    let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
    assert_eq!(a, b);
}

#[test]
fn value_parameter_gradient_matches_tape() {
    let net = Mlp::new(&[2, 7, 1], Activation::Sine, 8).unwrap();
    let times = [0.1, 0.5, 0.9];
    let states = [0.3, -1.0, 2.0];
    let w = [1.0, -2.0, 0.5];
    let direct = net.value_parameter_gradient(&times, &states, &w).unwrap();
    let pt = ParamTape::new(&net);
    let out = pt.evaluate(&times, &states, Order::Value).unwrap();
    let loss = out.value[0] * w[0] + out.value[1] * w[1] + out.value[2] * w[2];
    let taped = pt.parameter_gradient(loss).unwrap();
    assert!(rel_err(&direct, &taped) < 1e-14);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = Mlp::new(&[3, 6, 4, 1], Activation::Sine, 12)
        .unwrap()
        .with_scaling(InputScaling::for_problem(2, 3.0, 1.0, 0.5))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    let x = [0.3, -0.2];
    assert_eq!(back.forward(0.5, &x).unwrap().to_bits(), net.forward(0.5, &x).unwrap().to_bits());
}

#[test]
fn checkpoint_rejects_corruption() {
    let net = Mlp::new(&[2, 3, 1], Activation::Tanh, 1).unwrap();
    let bytes = write_checkpoint(&net);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
    assert!(read_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 1;
    assert!(read_checkpoint(&flipped).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(read_checkpoint(&version).is_err());
}

#[test]
fn zero_weight_checkpoint_evaluates_to_bias() {
    let mut net = Mlp::zeros(&[2, 4, 1], Activation::Tanh).unwrap();
    net.biases_mut()[1][0] = -1.25;
    let back = read_checkpoint(&write_checkpoint(&net)).unwrap();
    assert_eq!(back.forward(0.7, &[3.0]).unwrap(), -1.25);
}

#[test]
fn initialisation_is_seeded_and_bounded() {
    let a = Mlp::new(&[2, 32, 32, 1], Activation::Tanh, 5).unwrap();
    let b = Mlp::new(&[2, 32, 32, 1], Activation::Tanh, 5).unwrap();
    let c = Mlp::new(&[2, 32, 32, 1], Activation::Tanh, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bound = (3.0f64 / 32.0).sqrt();
    assert!(a.weights()[1].iter().all(|v| v.abs() <= bound));
    assert!(a.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
}
