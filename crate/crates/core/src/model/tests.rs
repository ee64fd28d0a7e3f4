use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(c: usize, depths: Vec<usize>, heads: Vec<usize>) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        num_classes: 2,
        embed_dim: c,
        patch_size: 2,
        window: 2,
        depths,
        heads,
        mlp_ratio: 2.0,
        use_rel_pos_bias: true,
    }
}

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut bad = ModelConfig::default();
    bad.heads[1] = 5;
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    let mut bad = ModelConfig::default();
    bad.window = 1;
    assert!(bad.validate().is_err());
    let mut bad = ModelConfig::default();
    bad.heads.pop();
    assert!(bad.validate().is_err());
}

#[test]
fn patch_embed_shapes_and_linearity() {
    let cfg = ModelConfig::default();
    let model = SwinUnetr::<f32>::new(cfg, 0).unwrap();
    for (n, e) in [(32, 16), (33, 17)] {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, n, n, n]));
        let y = patch_embed(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[24, e, e, e]);
    }

    let mut g = Graph::<f64>::new();
    let mut params = BTreeMap::new();
    params.insert("embed.w".to_string(), g.constant(Tensor::full(&[3, 1, 2, 2, 2], 1.0 / 8.0)));
    params.insert("embed.b".to_string(), g.constant(Tensor::zeros(&[3])));
    let p = Params(params);
    let x = g.constant(Tensor::full(&[1, 4, 4, 4], 2.5));
    let y = patch_embed(&mut g, &p, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn window_partition_examples() {
    let geom = WindowGeometry::new([4, 4, 4], 2, 0);
    assert_eq!((geom.num_windows(), geom.window_len()), (8, 8));
    let geom5 = WindowGeometry::new([5, 5, 5], 2, 0);
    assert_eq!(geom5.padded, [6, 6, 6]);
    assert_eq!(geom5.num_windows(), 27);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (dims, m, s) in [([4, 4, 4], 2, 0), ([5, 3, 6], 2, 1), ([7, 5, 4], 3, 1), ([2, 9, 5], 4, 2)] {
        let geom = WindowGeometry::new(dims, m, s);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_tensor(&mut rng, &[dims[0], dims[1], dims[2], 3]));
        let w = window_partition(&mut g, x, &geom).unwrap();
        assert_eq!(g.shape(w), &[geom.num_windows(), geom.window_len(), 3]);
        let back = window_reverse(&mut g, w, &geom).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}

#[test]
fn window_geometry_clamps_short_axes() {
    let geom = WindowGeometry::new([2, 8, 3], 4, 2);
    assert_eq!(geom.window, [2, 4, 3]);
    assert_eq!(geom.shift, [0, 2, 0]);
    assert_eq!(geom.grid, [1, 2, 1]);
}

#[test]
fn shift_mask_examples() {
    let zero = build_shift_mask::<f64>(&WindowGeometry::new([4, 4, 4], 2, 0));
    assert!(zero.data().iter().all(|&v| v == 0.0));

    // A 1D analog along the last axis: windows {0,1} and the wrapped {2,3}.
    let geom = WindowGeometry::new([1, 1, 4], 2, 1);
    let mask = build_shift_mask::<f64>(&geom);
    assert_eq!(mask.shape(), &[2, 2, 2]);
    assert_eq!(mask.data()[..4], [0.0; 4]);
    assert_eq!(mask.data()[4..], [0.0, MASK_NEG, MASK_NEG, 0.0]);
    assert_eq!(geom.source(1, 0), Some(3));
    assert_eq!(geom.source(1, 1), Some(0));

    let geom = WindowGeometry::new([6, 7, 5], 4, 2);
    let mask = build_shift_mask::<f64>(&geom);
    let t = geom.window_len();
    for w in 0..geom.num_windows() {
        for i in 0..t {
            for j in 0..t {
                assert_eq!(mask.get(&[w, i, j]), mask.get(&[w, j, i]));
            }
        }
    }
    assert!(mask.data().iter().any(|&v| v == MASK_NEG));
}

fn block_params(rng: &mut ChaCha8Rng, c: usize, heads: usize, m: usize, zero_out: bool) -> ParamStore<f64> {
    let mut s = BTreeMap::new();
    let put = |name: &str, shape: &[usize], s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng| {
        s.insert(format!("b.{name}"), random_tensor(rng, shape));
    };
    for n in ["norm1", "norm2"] {
        put(&format!("{n}.g"), &[c], &mut s, rng);
        put(&format!("{n}.b"), &[c], &mut s, rng);
    }
    put("attn.qkv.w", &[c, 3 * c], &mut s, rng);
    put("attn.qkv.b", &[3 * c], &mut s, rng);
    put("attn.rpb", &[(2 * m - 1).pow(3), heads], &mut s, rng);
    put("attn.proj.w", &[c, c], &mut s, rng);
    put("attn.proj.b", &[c], &mut s, rng);
    put("mlp.fc1.w", &[c, 2 * c], &mut s, rng);
    put("mlp.fc1.b", &[2 * c], &mut s, rng);
    put("mlp.fc2.w", &[2 * c, c], &mut s, rng);
    put("mlp.fc2.b", &[c], &mut s, rng);
    if zero_out {
        for k in ["attn.proj.w", "attn.proj.b", "mlp.fc2.w", "mlp.fc2.b"] {
            let t = s.get_mut(&format!("b.{k}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    s
}

fn bind(g: &mut Graph<f64>, store: &ParamStore<f64>) -> Params {
    Params(store.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect())
}

#[test]
fn swin_block_residual_identity_with_zero_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = block_params(&mut rng, 4, 2, 2, true);
    for layer in [0, 1] {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let x = g.constant(random_tensor(&mut rng, &[3, 4, 5, 4]));
        let y = swin_block(&mut g, &p, "b", x, 2, 2, layer, true).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}

#[test]
fn single_window_shift_matches_no_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = block_params(&mut rng, 4, 2, 3, false);
    let xt = random_tensor::<f64>(&mut rng, &[3, 3, 3, 4]);
    let run = |layer| {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let x = g.constant(xt.clone());
        let y = swin_block(&mut g, &p, "b", x, 3, 2, layer, true).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(0), run(1));
}

#[test]
fn window_attention_is_equivariant_to_window_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = block_params(&mut rng, 4, 2, 2, false);
    let xt = random_tensor::<f64>(&mut rng, &[2, 2, 4, 4]);
    // Swap the two windows along the last spatial axis.
    let swapped = {
        let mut d = xt.data().to_vec();
        for z in 0..2 {
            for y in 0..2 {
                let row = (z * 2 + y) * 16;
                let (a, b) = d[row..row + 16].split_at_mut(8);
                a.swap_with_slice(b);
            }
        }
        Tensor::new(xt.shape(), d).unwrap()
    };
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let xv = g.constant(x.clone());
        let y = window_attention(&mut g, &p, "b.attn", xv, 2, 2, false, true).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(&xt), run(&swapped));
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..4 {
                for c in 0..4 {
                    assert_eq!(a.get(&[z, y, x, c]), b.get(&[z, y, (x + 2) % 4, c]));
                }
            }
        }
    }
}

#[test]
fn patch_merging_examples() {
    let c = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = BTreeMap::new();
    store.insert("m.norm.g".to_string(), Tensor::ones(&[8 * c]));
    store.insert("m.norm.b".to_string(), Tensor::zeros(&[8 * c]));
    store.insert("m.reduce.w".to_string(), random_tensor::<f64>(&mut rng, &[8 * c, 2 * c]));
    for (n, e) in [(4, 2), (5, 3)] {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let x = g.constant(random_tensor(&mut rng, &[n, n, n, c]));
        let y = patch_merging(&mut g, &p, "m", x).unwrap();
        assert_eq!(g.shape(y), &[e, e, e, 2 * c]);
    }

    // A field that only varies across channels stays spatially constant.
    let per_channel: Vec<f64> = (0..c).map(|i| i as f64 * 0.3 - 1.0).collect();
    let data = (0..4 * 4 * 4).flat_map(|_| per_channel.clone()).collect();
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let x = g.constant(Tensor::new(&[4, 4, 4, c], data).unwrap());
    let y = patch_merging(&mut g, &p, "m", x).unwrap();
    let out = g.value(y).data();
    for tok in out.chunks(2 * c) {
        for (a, b) in tok.iter().zip(&out[..2 * c]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_pyramid_shapes_and_zero_params() {
    let cfg = tiny(4, vec![1, 1, 1], vec![1, 2, 2]);
    let mut model = SwinUnetr::<f32>::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[1, 32, 32, 32]));
    let levels = encoder_forward(&mut g, &p, &cfg, x).unwrap();
    let shapes: Vec<Vec<usize>> = levels.iter().map(|&v| g.shape(v).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 32, 32, 32],
            vec![4, 16, 16, 16],
            vec![8, 8, 8, 8],
            vec![16, 4, 4, 4],
            vec![32, 2, 2, 2]
        ]
    );

    for t in model.params_mut().values_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[1, 32, 32, 32]));
    let levels = encoder_forward(&mut g, &p, &cfg, x).unwrap();
    for &l in &levels[1..] {
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
    }

    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let small = g.constant(Tensor::zeros(&[1, 8, 32, 32]));
    assert!(matches!(encoder_forward(&mut g, &p, &cfg, small), Err(ModelError::Config(_))));
}

#[test]
fn residual_block_zero_weights_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = BTreeMap::new();
    store.insert("r.conv1.w".to_string(), Tensor::zeros(&[3, 3, 3, 3, 3]));
    store.insert("r.conv2.w".to_string(), Tensor::zeros(&[3, 3, 3, 3, 3]));
    for n in ["norm1", "norm2"] {
        store.insert(format!("r.{n}.g"), Tensor::ones(&[3]));
        store.insert(format!("r.{n}.b"), Tensor::zeros(&[3]));
    }
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let x = g.constant(random_tensor(&mut rng, &[3, 4, 5, 6]));
    let y = residual_block(&mut g, &p, "r", x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn forward_output_matches_input_extent() {
    let cfg = tiny(4, vec![1, 1], vec![1, 2]);
    let model = SwinUnetr::<f32>::new(cfg, 2).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[1, 10, 9, 8]);
    let probs = model.predict(&x).unwrap();
    assert_eq!(probs.shape(), &[3, 10, 9, 8]);
    // The freshly initialized head is zero.
    assert!(probs.data().iter().all(|&v| v == 0.5));

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("head") {
            *t = random_tensor(&mut rng, t.shape());
        }
    }
    let probs = model.predict(&x).unwrap();
    assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn predict_labels_examples() {
    let onehot = Tensor::<f32>::from_f64(&[3, 1, 1, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    assert_eq!(predict_labels(&onehot, [1.0; 3]).unwrap().labels, vec![0, 1, 2]);
    let half = Tensor::<f32>::full(&[3, 2, 2, 2], 0.5);
    let l = predict_labels(&half, [1.0; 3]).unwrap();
    assert!(l.labels.iter().all(|&v| v == 0));
    assert_eq!(l.available, ClassSet::full(2));
    let one = Tensor::<f32>::from_f64(&[3, 1, 1, 1], &[0.1, 0.9, 0.2]).unwrap();
    assert_eq!(predict_labels(&one, [1.0; 3]).unwrap().labels, vec![1]);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let cfg = tiny(4, vec![1, 1], vec![1, 2]);
    let mut model = SwinUnetr::<f32>::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in model.params_mut().values_mut() {
        *t = random_tensor(&mut rng, t.shape());
    }
    let m: ParamStore<f32> = model.params().iter().map(|(k, v)| (k.clone(), v.map(|x| x * 0.5))).collect();
    let opt = OptimizerSnapshot {
        t: 7,
        v: m.clone(),
        m,
    };
    let ckpt = Checkpoint::from_model(&model, 7, Some(opt));
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ckpt);
    let x = random_tensor(&mut rng, &[1, 16, 16, 16]);
    let a = model.predict(&x).unwrap();
    let b = back.model().unwrap().predict(&x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());

    let mut missing = ckpt.clone();
    missing.params.remove("head.b");
    let err = decode_checkpoint(&encode_checkpoint(&missing).unwrap()).unwrap_err();
    assert!(err.to_string().contains("head.b"), "{err}");
}
