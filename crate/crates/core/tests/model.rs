use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cil_core::distill::softmax;
use cil_core::model::{expand_head, init_model, snapshot, ModelParams, TcnConfig};
use cil_core::optim::{Adam, AdamConfig};
use cil_core::CilError;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

#[test]
fn parameter_count_in_closed_form() {
    let (c, b, h, k, n) = (5usize, 6usize, 10usize, 3usize, 4usize);
    let cfg = TcnConfig {
        input_channels: c,
        hidden_channels: h,
        bottleneck_channels: b,
        blocks_per_repeat: 1,
        repeats: 1,
        depthwise_kernel: k,
    };
    let input_norm = 2 * c;
    let bottleneck = b * c + b;
    let block = (h * b + h) + 1 + 2 * h + (h * k + h) + 1 + 2 * h + (b * h + b);
    let output_norm = 2 * b;
    let head = n * b + n;
    let model = init_model(&cfg, &[0, 1, 2, 3], 0).unwrap();
    assert_eq!(model.num_params(), input_norm + bottleneck + block + output_norm + head);
}

#[test]
fn table_defaults_and_head_shape() {
    let cfg = TcnConfig::default();
    assert_eq!(
        (cfg.input_channels, cfg.hidden_channels, cfg.bottleneck_channels, cfg.blocks_per_repeat, cfg.repeats, cfg.depthwise_kernel),
        (40, 128, 64, 5, 2, 3)
    );
    let dilations: Vec<usize> = (0..10).map(|b| cfg.dilation(b)).collect();
    assert_eq!(dilations, vec![1, 2, 4, 8, 16, 1, 2, 4, 8, 16]);
    let m = init_model(&cfg, &[3, 1, 4, 0], 9).unwrap();
    assert_eq!(m.head.weight.dim(), (4, 64));
    let out = m.forward(random(40, 30, 1).view()).unwrap();
    assert_eq!(out.embedding.len(), 64);
    assert!(out.embedding.iter().all(|v| v.is_finite()));
    assert_eq!(m.flatten(), init_model(&cfg, &[3, 1, 4, 0], 9).unwrap().flatten());
}

fn width_one() -> TcnConfig {
    TcnConfig {
        input_channels: 6,
        hidden_channels: 12,
        bottleneck_channels: 8,
        blocks_per_repeat: 3,
        repeats: 2,
        depthwise_kernel: 1,
    }
}

#[test]
fn width_one_encoder_ignores_frame_order_and_repetition() {
    let m = init_model(&width_one(), &[0], 2).unwrap();
    let x = random(6, 9, 3);
    let base = m.encode(x.view()).unwrap();

    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted = Array2::from_shape_fn((6, 9), |(r, c)| x[[r, perm[c]]]);
    let doubled = Array2::from_shape_fn((6, 18), |(r, c)| x[[r, c % 9]]);
    for other in [m.encode(permuted.view()).unwrap(), m.encode(doubled.view()).unwrap()] {
        for (a, b) in base.iter().zip(other.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn wider_kernels_do_see_frame_order() {
    let cfg = TcnConfig {
        depthwise_kernel: 3,
        ..width_one()
    };
    let m = init_model(&cfg, &[0], 2).unwrap();
    let x = random(6, 9, 3);
    let reversed = x.slice(s![.., ..;-1]).to_owned();
    let a = m.encode(x.view()).unwrap();
    let b = m.encode(reversed.view()).unwrap();
    assert!(a.iter().zip(b.iter()).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn hand_set_head() {
    let mut m = init_model(&TcnConfig::default(), &[0], 1).unwrap();
    m.head.weight = Array2::from_shape_fn((1, 64), |(_, j)| (j as f64 - 32.0) * 0.25);
    m.head.bias = Array1::from(vec![0.5]);
    let e = Array1::from_shape_fn(64, |j| if j % 2 == 0 { 1.0 } else { -0.5 });
    let mut want = 0.5;
    for j in 0..64 {
        want += (j as f64 - 32.0) * 0.25 * e[j];
    }
    assert_eq!(m.classify(&e).unwrap()[0], want);

    m.head.weight.fill(0.0);
    m.head.bias.fill(0.0);
    let grown = expand_head(&m, &[5, 6], 0).unwrap();
    let mut zeroed = grown.clone();
    zeroed.head.weight.fill(0.0);
    zeroed.head.bias.fill(0.0);
    let logits = zeroed.classify(&Array1::zeros(64)).unwrap();
    assert_eq!(logits.to_vec(), vec![0.0; 3]);
    let p = softmax(logits.view());
    assert!((p.sum() - 1.0).abs() < 1e-12 && p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    assert!(m.classify(&Array1::zeros(63)).is_err());
}

#[test]
fn expanding_keeps_old_rows() {
    let m = init_model(&TcnConfig::default(), &[10, 11, 12, 13], 4).unwrap();
    let g = expand_head(&m, &[20, 21, 22], 5).unwrap();
    assert_eq!(g.head.weight.nrows(), 7);
    assert_eq!(g.head.weight.slice(s![..4, ..]), m.head.weight);
    assert_eq!(g.head.bias.slice(s![..4]), m.head.bias);
    assert_eq!(g.encoder, m.encoder);
    assert_eq!(g.classes, vec![10, 11, 12, 13, 20, 21, 22]);
    assert_eq!(g.row_of(21), Some(5));
    assert!(expand_head(&m, &[], 5).is_err());
    assert!(expand_head(&m, &[12], 5).is_err());

    let mut all = init_model(&TcnConfig::default(), &[0, 1, 2, 3], 0).unwrap();
    for t in 0..9 {
        let new: Vec<usize> = (4 + 3 * t..7 + 3 * t).collect();
        all = expand_head(&all, &new, t as u64).unwrap();
    }
    assert_eq!(all.num_classes(), 31);
}

fn one_adam_step(m: &mut ModelParams, x: &Array2<f64>) {
    let fwd = m.forward(x.view()).unwrap();
    let mut grad = m.zeros_like();
    let d_logits = Array1::from_elem(m.num_classes(), 1.0);
    m.backward(&fwd, &d_logits, None, &mut grad);
    let mut flat = m.flatten();
    Adam::new(AdamConfig::default(), flat.len()).step(&mut flat, &grad.flatten());
    m.assign_flat(&flat).unwrap();
}

#[test]
fn snapshots_are_frozen_copies() {
    let cfg = TcnConfig {
        input_channels: 4,
        hidden_channels: 8,
        bottleneck_channels: 6,
        blocks_per_repeat: 2,
        repeats: 1,
        depthwise_kernel: 3,
    };
    let x = random(4, 11, 8);
    let mut student = init_model(&cfg, &[0, 1], 3).unwrap();
    let teacher = snapshot(&student);
    let before = teacher.forward(x.view()).unwrap().logits;
    assert_eq!(before, student.forward(x.view()).unwrap().logits);

    student = expand_head(&student, &[2], 1).unwrap();
    let grown = student.forward(x.view()).unwrap().logits;
    assert_eq!(grown.slice(s![..2]), before);

    one_adam_step(&mut student, &x);
    assert_ne!(student.forward(x.view()).unwrap().logits.slice(s![..2]), before);
    assert_eq!(teacher.forward(x.view()).unwrap().logits, before);
    let again = teacher.snapshot();
    assert_eq!(again.forward(x.view()).unwrap().logits, before);
}

#[test]
fn rejects_bad_inputs() {
    let m = init_model(&TcnConfig::default(), &[0], 0).unwrap();
    let mut x = random(40, 5, 0);
    x[[3, 2]] = f64::NAN;
    assert!(matches!(m.forward(x.view()), Err(CilError::NonFinite(_))));
    assert!(m.forward(random(39, 5, 0).view()).is_err());
    assert!(m.forward(Array2::zeros((40, 0)).view()).is_err());
    let even = TcnConfig {
        depthwise_kernel: 4,
        ..TcnConfig::default()
    };
    assert!(init_model(&even, &[0], 0).is_err());
    assert!(init_model(&TcnConfig::default(), &[], 0).is_err());
}
