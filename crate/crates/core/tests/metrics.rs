mod common;

use common::{bfs_components, nsd_oracle, random_mask, random_tensor, rng, same_partition};
use rand::Rng;
use swinseg::lossmetrics::{dsc_masks, nsd_masks, soft_dice_loss, OneHotTarget};
use swinseg::postprocess::{component_table, connected_components_3d, keep_largest_per_label, Connectivity};
use swinseg::tensor::{gradcheck, Graph, Tensor};
use swinseg::volumeio::{ClassSet, LabelMap};

fn random_onehot(r: &mut rand_chacha::ChaCha8Rng, classes: usize, n: usize) -> Tensor<f64> {
    let mut data = vec![0.0; (classes + 1) * n];
    for i in 0..n {
        data[r.gen_range(0..=classes) * n + i] = 1.0;
    }
    Tensor::new(&[classes + 1, 1, 2, n / 2], data).unwrap()
}

fn random_probs(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor::<f64>(r, shape, 1.0).map(|v| 0.5 + 0.45 * v)
}

#[test]
fn dice_loss_gradient_matches_finite_differences() {
    let mut r = rng(20);
    let gt = random_onehot(&mut r, 3, 12);
    let probs = random_probs(&mut r, gt.shape());
    let target = OneHotTarget {
        onehot: gt,
        channels: vec![1, 3],
    };
    let report = gradcheck::check(
        &[probs],
        |g, v| soft_dice_loss(g, v[0], &target).map_err(|e| match e {
            swinseg::lossmetrics::MetricError::Tensor(t) => t,
            other => panic!("{other}"),
        }),
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn unavailable_channels_get_exactly_zero_gradient() {
    let mut r = rng(21);
    let gt = random_onehot(&mut r, 4, 16);
    let probs = random_probs(&mut r, gt.shape());
    let target = OneHotTarget {
        onehot: gt,
        channels: vec![2, 4],
    };
    let mut g = Graph::new();
    let p = g.leaf(probs);
    let l = soft_dice_loss(&mut g, p, &target).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(p).unwrap();
    for c in [0, 1, 3] {
        assert!(grad.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == 0.0));
    }
    assert!(grad.data()[2 * 16..3 * 16].iter().any(|&v| v != 0.0));
}

#[test]
fn excluding_a_class_equals_the_loss_on_remaining_classes() {
    let mut r = rng(22);
    for _ in 0..20 {
        let gt = random_onehot(&mut r, 3, 10);
        let probs = random_probs(&mut r, gt.shape());
        let mut g = Graph::new();
        let pv = g.constant(probs.clone());
        let full = OneHotTarget {
            onehot: gt.clone(),
            channels: vec![1, 3],
        };
        let a = soft_dice_loss(&mut g, pv, &full).unwrap();
        // Drop channel 2 from both tensors and compute the loss without it.
        let keep = |t: &Tensor<f64>| {
            let d: Vec<f64> = [0, 1, 3].iter().flat_map(|&c| t.data()[c * 10..(c + 1) * 10].to_vec()).collect();
            Tensor::new(&[3, 1, 2, 5], d).unwrap()
        };
        let pv2 = g.constant(keep(&probs));
        let reduced = OneHotTarget {
            onehot: keep(&gt),
            channels: vec![1, 2],
        };
        let b = soft_dice_loss(&mut g, pv2, &reduced).unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
        let l = g.value(a).item();
        assert!((0.0..=1.0).contains(&l));
    }
}

#[test]
fn dice_loss_from_label_maps_uses_availability() {
    let labels = LabelMap::new([1, 1, 4], [1.0; 3], 2, ClassSet::from_classes([2]), vec![0, 2, 2, 0]).unwrap();
    let t = OneHotTarget::<f64>::from_labels(&labels, false).unwrap();
    assert_eq!(t.channels, vec![2]);
    let mut g = Graph::new();
    let p = g.constant(t.onehot.clone());
    let l = soft_dice_loss(&mut g, p, &t).unwrap();
    assert!(g.value(l).item() <= 1e-4);
}

#[test]
fn metrics_are_symmetric_and_nsd_is_monotone_in_tau() {
    let mut r = rng(23);
    let dims = [10, 9, 8];
    let taus = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];
    for _ in 0..100 {
        let a = random_mask(&mut r, dims, 0.05);
        let b = random_mask(&mut r, dims, 0.05);
        let spacing = [r.gen_range(0.5..2.0), 1.0, r.gen_range(0.5..2.0)];
        assert_eq!(dsc_masks(&a, &b), dsc_masks(&b, &a));
        let mut last = 0.0;
        for &tau in &taus {
            let v = nsd_masks(&a, &b, dims, spacing, tau).unwrap();
            assert_eq!(v, nsd_masks(&b, &a, dims, spacing, tau).unwrap());
            assert!(v >= last, "nsd decreased from {last} to {v} at tau {tau}");
            assert_eq!(v, nsd_oracle(&a, &b, dims, spacing, tau));
            last = v;
        }
    }
}

#[test]
fn shifted_unit_cube_nsd_matches_oracle() {
    let dims = [5, 5, 5];
    let mut a = vec![false; 125];
    let mut b = vec![false; 125];
    a[(2 * 5 + 2) * 5 + 2] = true;
    b[(2 * 5 + 2) * 5 + 3] = true;
    let got = nsd_masks(&a, &b, dims, [1.0; 3], 1.0).unwrap();
    assert_eq!(got, nsd_oracle(&a, &b, dims, [1.0; 3], 1.0));
    assert_eq!(got, 1.0);
}

#[test]
fn components_agree_with_flood_fill() {
    let mut r = rng(24);
    let dims = [16, 16, 16];
    for case in 0..100 {
        let density = [0.05, 0.15, 0.3, 0.45][case % 4];
        let mask = random_mask(&mut r, dims, density);
        for (conn, n) in [(Connectivity::Six, 6), (Connectivity::TwentySix, 26)] {
            let got = connected_components_3d(&mask, dims, conn);
            let (want, count) = bfs_components(&mask, dims, n);
            assert_eq!(got.table.len(), count, "case {case}, {n}-connectivity");
            let got_ids: Vec<usize> = got.ids.iter().map(|&i| if i == 0 { usize::MAX } else { i as usize }).collect();
            assert!(same_partition(&got_ids, &want), "case {case}, {n}-connectivity");
            let sizes: Vec<usize> = got.table.iter().map(|c| c.size).collect();
            assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(sizes.iter().sum::<usize>(), mask.iter().filter(|&&m| m).count());
        }
    }
}

#[test]
fn keep_largest_is_idempotent_with_one_component_per_class() {
    let mut r = rng(25);
    let dims = [16, 16, 16];
    for case in 0..100 {
        let labels: Vec<u8> = (0..4096)
            .map(|_| if r.gen_bool(0.3) { r.gen_range(1..=3) } else { 0 })
            .collect();
        let l = LabelMap::new(dims, [1.0; 3], 3, ClassSet::full(3), labels).unwrap();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let once = keep_largest_per_label(&l, conn, 0);
            assert_eq!(keep_largest_per_label(&once, conn, 0), once, "case {case}");
            for (class, comps) in component_table(&once, conn) {
                assert!(comps.len() <= 1, "class {class} keeps {} components", comps.len());
            }
            assert!(once.present().is_subset(&l.present()));
            for (a, b) in once.labels.iter().zip(&l.labels) {
                assert!(*a == *b || *a == 0);
            }
        }
    }
}
