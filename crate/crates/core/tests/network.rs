use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zipnet::geometry::{BBox, NmsConfig};
use zipnet::tensor::{Parameter, Tensor};
use zipnet::zipnet::{assign_roi_level, level_loss, TrainConfig, ZipConfig, ZipNet};

fn tiny(zoom_in: bool) -> ZipConfig {
    ZipConfig {
        stem_width: 4,
        widths: [4, 6, 8],
        extra_blocks: 1,
        head_channels: 5,
        res_blocks: 1,
        zoom_in,
        ..ZipConfig::default()
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::from_vec(&[1, 3, h, w], data).unwrap()
}

fn projections(like: &[Tensor], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    like.iter()
        .map(|t| {
            let d = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(t.shape(), d).unwrap()
        })
        .collect()
}

fn dot_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Random projection of the head outputs and of the tower outputs for a
/// fixed box set; returns the scalar and leaves gradients in the network.
fn composite(net: &mut ZipNet, image: &Tensor, boxes: &[BBox], seed: u64, backward: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pyr, fcache) = net.features(image, true).unwrap();
    let (heads, hcache) = net.heads_forward(&pyr).unwrap();
    let logits: Vec<Tensor> = heads.iter().map(|h| h.logits.clone()).collect();
    let offsets: Vec<Tensor> = heads.iter().map(|h| h.offsets.clone()).collect();
    let pl = projections(&logits, &mut rng);
    let po = projections(&offsets, &mut rng);
    let (roi, rcache) = net.roi_forward(&pyr, boxes).unwrap();
    let rl = projections(std::slice::from_ref(&roi.logits), &mut rng);
    let ro = projections(std::slice::from_ref(&roi.offsets), &mut rng);
    let value = dot_all(&logits, &pl)
        + dot_all(&offsets, &po)
        + dot_all(std::slice::from_ref(&roi.logits), &rl)
        + dot_all(std::slice::from_ref(&roi.offsets), &ro);
    if backward {
        net.zero_grad();
        let mut dg = net.heads_backward(&pyr, &hcache, &pl, &po).unwrap();
        net.roi_backward(&pyr, &rcache, &rl[0], &ro[0], &mut dg).unwrap();
        net.features_backward(&pyr, &fcache, dg).unwrap();
    }
    value
}

fn fd_check(zoom_in: bool) {
    let mut net: ZipNet = ZipNet::new(tiny(zoom_in), 3).unwrap();
    let image = random_image(64, 96, 4);
    let boxes = vec![
        BBox::new(3.0, 5.0, 30.0, 40.0),
        BBox::new(10.0, 2.0, 90.0, 60.0),
        BBox::new(0.0, 0.0, 96.0, 64.0),
        BBox::new(40.0, 30.0, 52.0, 44.0),
    ];
    composite(&mut net, &image, &boxes, 9, true);
    let analytic: Vec<(String, Vec<f64>)> = net
        .parameters_mut()
        .iter()
        .map(|p: &&mut Parameter| (p.name.clone(), p.grad().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let n_params = analytic.len();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        for _ in 0..2 {
            let k = rng.random_range(0..grad.len());
            let orig = net.parameters_mut()[pi].value().data()[k];
            let eval_at = |v: f64, net: &mut ZipNet| {
                net.parameters_mut()[pi].tensor.data_mut()[k] = v;
                composite(net, &image, &boxes, 9, false)
            };
            let plus = eval_at(orig + eps, &mut net);
            let minus = eval_at(orig - eps, &mut net);
            eval_at(orig, &mut net);
            let num = (plus - minus) / (2.0 * eps);
            let a = grad[k];
            let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
            assert!(err < 1e-3, "{name}[{k}]: analytic {a} numeric {num}");
            worst = worst.max(err);
        }
    }
    assert!(n_params > 20);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    fd_check(true);
}

#[test]
fn zoom_out_only_gradients_match_finite_differences() {
    fd_check(false);
}

#[test]
fn pyramid_extents_and_top_identity() {
    let mut net: ZipNet = ZipNet::new(tiny(true), 0).unwrap();
    for (side, expect) in [(64usize, [8usize, 4, 2]), (192, [24, 12, 6])] {
        let (pyr, _) = net.features(&random_image(side, side, 1), true).unwrap();
        for m in 0..3 {
            assert_eq!(pyr.g[m].shape()[2..], [expect[m], expect[m]]);
            assert_eq!(pyr.f[m].shape()[2..], pyr.g[m].shape()[2..]);
        }
        assert_eq!(pyr.g[2], pyr.f[2]);
        let h = pyr.h.as_ref().unwrap();
        assert_eq!(h[0].shape()[2..], pyr.f[0].shape()[2..]);
        assert_eq!(h[1].shape()[2..], pyr.f[1].shape()[2..]);
    }
    assert!(net.features(&random_image(48, 64, 1), true).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut a: ZipNet = ZipNet::new(tiny(true), 5).unwrap();
    let mut b: ZipNet = ZipNet::new(tiny(true), 5).unwrap();
    let img = random_image(64, 64, 2);
    let (pa, _) = a.features(&img, true).unwrap();
    let (pb, _) = b.features(&img, true).unwrap();
    assert_eq!(pa.g, pb.g);
}

#[test]
fn zeroed_tower_regressor_is_a_fixed_point() {
    let mut net: ZipNet = ZipNet::new(tiny(true), 1).unwrap();
    for p in net.parameters_mut() {
        if p.name.starts_with("tower.reg") {
            let z = vec![0.0; p.value().len()];
            p.set_values(&z).unwrap();
        }
    }
    let (pyr, _) = net.features(&random_image(64, 64, 3), true).unwrap();
    let boxes = vec![BBox::new(5.0, 6.0, 40.0, 33.0), BBox::new(0.0, 0.0, 64.0, 64.0)];
    let mut dg: Vec<Tensor> = pyr.g.iter().map(|g| Tensor::zeros(g.shape())).collect();
    let rec = net
        .roi_recursion_train(&pyr, &boxes, &[], 64, 64, &TrainConfig::default(), &mut dg)
        .unwrap();
    assert_eq!(rec.stages_run, 2);
    assert!(rec.trajectory.iter().all(|r| r == &boxes));
}

#[test]
fn constant_shift_moves_center_by_tenth_width() {
    let mut cfg = tiny(true);
    cfg.q = 3;
    let mut net: ZipNet = ZipNet::new(cfg, 1).unwrap();
    for p in net.parameters_mut() {
        if p.name == "tower.reg.weight" {
            let z = vec![0.0; p.value().len()];
            p.set_values(&z).unwrap();
        }
        if p.name == "tower.reg.bias" {
            p.set_values(&[0.1, 0.0, 0.0, 0.0]).unwrap();
        }
    }
    let (pyr, _) = net.features(&random_image(128, 128, 3), true).unwrap();
    let b0 = BBox::new(10.0, 10.0, 30.0, 40.0);
    let mut dg: Vec<Tensor> = pyr.g.iter().map(|g| Tensor::zeros(g.shape())).collect();
    let rec = net
        .roi_recursion_train(&pyr, &[b0], &[], 128, 128, &TrainConfig::default(), &mut dg)
        .unwrap();
    let mut expect = b0;
    for q in 1..=3 {
        let w = expect.width();
        expect = BBox::new(expect.x1 + 0.1 * w, expect.y1, expect.x2 + 0.1 * w, expect.y2);
        let got = rec.trajectory[q][0];
        for (g, e) in got.as_array().iter().zip(expect.as_array()) {
            assert!((g - e).abs() < 1e-9, "stage {q}: {got:?} vs {expect:?}");
        }
    }
}

#[test]
fn doubling_q_doubles_uniform_roi_loss() {
    let run = |q: usize| {
        let mut cfg = tiny(true);
        cfg.q = q;
        let mut net: ZipNet = ZipNet::new(cfg, 1).unwrap();
        for p in net.parameters_mut() {
            if p.name.starts_with("tower.cls") || p.name.starts_with("tower.reg") {
                let z = vec![0.0; p.value().len()];
                p.set_values(&z).unwrap();
            }
        }
        let (pyr, _) = net.features(&random_image(64, 64, 3), true).unwrap();
        let gts = [BBox::new(8.0, 8.0, 40.0, 40.0)];
        let boxes = [BBox::new(8.0, 8.0, 40.0, 40.0), BBox::new(50.0, 50.0, 60.0, 60.0)];
        let mut dg: Vec<Tensor> = pyr.g.iter().map(|g| Tensor::zeros(g.shape())).collect();
        net.roi_recursion_train(&pyr, &boxes, &gts, 64, 64, &TrainConfig::default(), &mut dg)
            .unwrap()
    };
    let one = run(1);
    let two = run(2);
    assert_eq!(one.stages_run, 1);
    assert_eq!(two.stages_run, 2);
    let l1: f64 = one.stage_losses.iter().sum();
    let l2: f64 = two.stage_losses.iter().sum();
    assert!((l1 - 3f64.ln()).abs() < 1e-12);
    assert!((l2 - 2.0 * l1).abs() < 1e-12);
}

#[test]
fn level_loss_examples() {
    let logits = Tensor::<f64>::zeros(&[4, 3]);
    let pred = Tensor::zeros(&[2, 4]);
    let l = level_loss(&logits, &[0, 1, 2, 1], &pred, &Tensor::zeros(&[2, 4])).unwrap();
    assert!((l.value - 3f64.ln()).abs() < 1e-12);
    let sat = Tensor::<f64>::from_vec(&[1, 3], vec![-30.0, 30.0, -30.0]).unwrap();
    let l = level_loss(&sat, &[1], &Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4])).unwrap();
    assert!(l.value < 1e-6 && l.reg == 0.0);
}

#[test]
fn roi_level_examples() {
    assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 16.0, 16.0)), 0);
    assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 128.0, 128.0)), 1);
    assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 400.0, 300.0)), 2);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut net: ZipNet = ZipNet::new(tiny(true), 7).unwrap();
    let image = random_image(256, 256, 8);
    let gts = [
        BBox::new(84.0, 84.0, 116.0, 116.0),
        BBox::new(56.0, 56.0, 184.0, 184.0),
        BBox::new(0.0, 0.0, 240.0, 240.0),
    ];
    let cfg = TrainConfig {
        min_side: 256.0,
        max_side: 256.0,
        pre_nms_top_n: 100_000,
        post_nms_top_n: 100_000,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let report = net
        .compute_gradients(&image, &gts, &cfg, &NmsConfig::default(), &mut rng)
        .unwrap();
    assert!(report.total.is_finite() && report.total > 0.0);
    assert!(report.first_positives.iter().all(|&p| p > 0), "{:?}", report.first_positives);
    assert_eq!(report.roi.stages_run, 2);
    for p in net.parameters_mut() {
        assert!(p.grad().iter().any(|&g| g != 0.0), "no gradient reaches {}", p.name);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut a: ZipNet<f32> = ZipNet::new(tiny(true), 3).unwrap();
    a.save(&path).unwrap();
    let mut b: ZipNet<f32> = ZipNet::new(tiny(true), 4).unwrap();
    b.load(&path).unwrap();
    assert_eq!(a.parameter_values(), b.parameter_values());
    let mut other: ZipNet<f32> = ZipNet::new(tiny(false), 4).unwrap();
    assert!(other.load(&path).is_err());
}
