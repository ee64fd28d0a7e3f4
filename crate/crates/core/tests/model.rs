mod common;

use std::collections::BTreeMap;

use common::{random_tensor, region_attention_oracle, rng, AttnWeights};
use rand::Rng;
use swinseg::model::{
    load_checkpoint, param_specs, save_checkpoint, window_attention, Checkpoint, ModelConfig, Params, SwinUnetr,
};
use swinseg::tensor::{gradcheck, Graph, Tensor, Var};

fn attention_via_library(x: &Tensor<f64>, w: &AttnWeights, m: usize, heads: usize, shifted: bool) -> Tensor<f64> {
    let mut g = Graph::new();
    let p: Params = w
        .store("a")
        .into_iter()
        .map(|(k, v)| (k, g.constant(v)))
        .collect();
    let xv = g.constant(x.clone());
    let y = window_attention(&mut g, &p, "a", xv, m, heads, shifted, w.rpb.is_some()).unwrap();
    g.value(y).clone()
}

#[test]
fn shifted_window_attention_matches_region_oracle() {
    let mut r = rng(100);
    let mut worst = 0.0f64;
    let mut shifted_cases = 0;
    for case in 0..50 {
        let m = r.gen_range(2..=4);
        let dims = [0; 3].map(|_| r.gen_range(1..=3 * m));
        let heads = r.gen_range(1..=3);
        let c = heads * r.gen_range(1..=3);
        let shifted = case % 5 != 0;
        let rel_pos = case % 3 != 0;
        let w = AttnWeights::random(&mut r, c, heads, m, rel_pos);
        let x = random_tensor(&mut r, &[dims[0], dims[1], dims[2], c], 1.0);
        let got = attention_via_library(&x, &w, m, heads, shifted);
        let want = region_attention_oracle(&x, &w, m, heads, shifted);
        let diff = got.max_abs_diff(&want);
        assert!(diff <= 1e-6, "case {case}: dims {dims:?}, M={m}, shifted={shifted}: diff {diff}");
        worst = worst.max(diff);
        shifted_cases += usize::from(shifted && dims.iter().any(|&d| d > m));
    }
    assert!(shifted_cases >= 20, "only {shifted_cases} configurations exercised a real shift");
    assert!(worst <= 1e-6);
}

fn toy_config(depths: Vec<usize>, heads: Vec<usize>) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        num_classes: 2,
        embed_dim: 8,
        patch_size: 2,
        window: 4,
        depths,
        heads,
        mlp_ratio: 2.0,
        use_rel_pos_bias: true,
    }
}

/// Gradient check of every parameter tensor of a randomly perturbed model
/// against central differences of a fixed random projection of the output.
fn model_gradcheck(cfg: ModelConfig, extent: usize, per_tensor: usize, seed: u64) -> gradcheck::GradCheckReport {
    let mut r = rng(seed);
    let mut model = SwinUnetr::<f64>::new(cfg.clone(), seed).unwrap();
    for t in model.params_mut().values_mut() {
        let noise = random_tensor::<f64>(&mut r, t.shape(), 0.3);
        *t = Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
    }
    let x = random_tensor::<f64>(&mut r, &[1, extent, extent, extent], 1.0);
    let weights = random_tensor::<f64>(&mut r, &[cfg.out_channels(), extent, extent, extent], 1.0);
    let names: Vec<String> = model.params().keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = model.params().values().cloned().collect();
    let report = gradcheck::check(
        &inputs,
        |g: &mut Graph<f64>, vars: &[Var]| {
            let p: Params = names.iter().cloned().zip(vars.iter().copied()).collect();
            let xv = g.constant(x.clone());
            let out = model.forward(g, &p, xv).map_err(|e| match e {
                swinseg::model::ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let wv = g.constant(weights.clone());
            let y = g.mul(out.probs, wv)?;
            g.sum(y)
        },
        1e-4,
        Some(per_tensor),
    )
    .unwrap();
    assert_eq!(report.checked, inputs.iter().map(|t| t.numel().min(per_tensor)).sum::<usize>());
    report
}

#[test]
fn full_model_gradient_check_toy_scale() {
    let report = model_gradcheck(toy_config(vec![1, 1], vec![2, 2]), 16, 3, 7);
    eprintln!("max rel error {:e} over {} coordinates", report.max_rel_error, report.checked);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn shifted_block_gradient_check() {
    let report = model_gradcheck(toy_config(vec![2], vec![2]), 16, 2, 8);
    eprintln!("max rel error {:e} over {} coordinates", report.max_rel_error, report.checked);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn every_spec_tensor_is_bound_once() {
    let cfg = toy_config(vec![2, 2, 2, 2], vec![2, 2, 4, 8]);
    let specs = param_specs(&cfg);
    let mut seen = BTreeMap::new();
    for s in &specs {
        assert!(seen.insert(s.name.clone(), ()).is_none(), "duplicate {}", s.name);
    }
    let model = SwinUnetr::<f32>::new(cfg, 0).unwrap();
    assert_eq!(model.params().len(), specs.len());
}

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mckp");
    let cfg = toy_config(vec![1, 1], vec![2, 2]);
    let mut model = SwinUnetr::<f32>::new(cfg, 11).unwrap();
    let mut r = rng(12);
    for t in model.params_mut().values_mut() {
        let noise = random_tensor::<f32>(&mut r, t.shape(), 0.2);
        *t = Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
    }
    let x = random_tensor::<f32>(&mut r, &[1, 16, 16, 16], 1.0);
    let before = model.predict(&x).unwrap();
    save_checkpoint(&Checkpoint::from_model(&model, 3, None), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 3);
    let after = loaded.model().unwrap().predict(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
}
