use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swinseg::model::{load_checkpoint, save_checkpoint, ModelConfig, SwinUnetr};
use swinseg::phantom::{build_dataset, generate_phantom, make_partial, DatasetSpec, PhantomConfig};
use swinseg::training::{
    finetune_mixed, generate_pseudo_labels, load_pool, prepare_case, train, CasePool, InferConfig, RunDir,
    StepRecord, TrainConfig, Trainer, TrainingCase, PSEUDO_DIR,
};
use swinseg::volumeio::{load_manifest, read_labels, ClassSet, DatasetManifest, Split};

fn tiny_phantom(seed: u64) -> PhantomConfig {
    PhantomConfig {
        dims: [24; 3],
        organ_radius: [3.0, 5.0],
        tumor_radius: [1.5, 2.0],
        min_separation: 1,
        seed,
        ..PhantomConfig::with_classes(2)
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        embed_dim: 4,
        window: 2,
        depths: vec![1, 1],
        heads: vec![1, 1],
        ..ModelConfig::default()
    }
}

fn toy_train(steps: u64) -> TrainConfig {
    TrainConfig {
        patch_size: [16; 3],
        lr: 3e-3,
        steps,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn pool(cases: usize, keep: Option<ClassSet>) -> CasePool {
    let cfg = tiny_phantom(1);
    let cases = (0..cases)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let (v, l) = generate_phantom(&cfg, &mut rng).unwrap();
            let l = keep.map_or(l.clone(), |k| make_partial(&l, k).unwrap());
            let p = prepare_case(&v, Some(&l), None).unwrap();
            TrainingCase {
                id: format!("case{i}"),
                split: Split::Labeled,
                image: p.image,
                labels: p.labels.unwrap(),
            }
        })
        .collect();
    CasePool { cases }
}

fn dataset(dir: &std::path::Path, labeled: usize, unlabeled: usize) -> DatasetManifest {
    let spec = DatasetSpec {
        labeled,
        unlabeled,
        val: 1,
        partial_prob: 0.5,
    };
    build_dataset(&tiny_phantom(3), &spec, dir).unwrap()
}

#[test]
fn loss_decreases_on_a_tiny_phantom() {
    let model = SwinUnetr::new(toy_model(), 0).unwrap();
    let mut t = Trainer::new(model, toy_train(200), pool(2, None)).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step().unwrap().loss).collect();
    let first = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn never_available_class_leaves_its_head_channel_untouched() {
    let model = SwinUnetr::new(toy_model(), 0).unwrap();
    let mut t = Trainer::new(model, toy_train(20), pool(2, Some(ClassSet::from_classes([1])))).unwrap();
    let c = toy_model().embed_dim;
    for step in 0..20 {
        let (_, grads) = t.batch_gradients(step).unwrap();
        let w = &grads["head.w"];
        let b = &grads["head.b"];
        assert!(w.data()[2 * c..3 * c].iter().all(|&g| g == 0.0), "step {step}");
        assert_eq!(b.data()[2], 0.0, "step {step}");
        assert!(w.data()[c..2 * c].iter().any(|&g| g != 0.0), "class 1 must learn");
        t.step().unwrap();
    }
    let head = &t.model().params()["head.w"];
    assert!(head.data()[2 * c..3 * c].iter().all(|&v| v == 0.0));
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let model = SwinUnetr::new(toy_model(), 0).unwrap();
    let straight = Trainer::new(model.clone(), toy_train(8), pool(2, None)).unwrap().run(None, false).unwrap();

    let mut first = Trainer::new(model, toy_train(4), pool(2, None)).unwrap();
    let half = first.run(None, false).unwrap();
    let path = dir.path().join("half.mckp");
    save_checkpoint(&half, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let resumed = Trainer::resume(&loaded, toy_train(8), pool(2, None)).unwrap().run(None, false).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn run_directory_gets_logs_and_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path(), 2, 0);
    let run = RunDir::new(out.path());
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..toy_train(4)
    };
    let ckpt = train(&manifest, &toy_model(), &cfg, Some(&run)).unwrap();
    assert_eq!(ckpt.step, 4);
    assert_eq!(load_checkpoint(&run.final_checkpoint()).unwrap(), ckpt);
    assert!(run.checkpoint(2).is_file() && run.checkpoint(4).is_file());
    let logs = std::fs::read_to_string(run.logs()).unwrap();
    let recs: Vec<StepRecord> = logs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(recs.iter().all(|r| r.loss.is_finite() && r.lr == cfg.lr));
}

#[test]
fn mixture_draws_reach_both_splits() {
    // Each draw misses a split with probability 1/2, so 1000 draws miss one
    // entirely with probability 2^-999.
    let mut cases = pool(2, None).cases;
    cases[1].split = Split::Pseudo;
    let pool = CasePool { cases };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pseudo = (0..1000).filter(|_| pool.draw(&mut rng).split == Split::Pseudo).count();
    assert!(pseudo > 0 && pseudo < 1000, "{pseudo}");
}

#[test]
fn empty_pseudo_split_fine_tunes_like_plain_training() {
    let data = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path(), 2, 0);
    let start = train(&manifest, &toy_model(), &toy_train(2), None).unwrap();
    let mixed = finetune_mixed(&start, &manifest, &toy_train(3), None).unwrap();
    let labeled = load_pool(&manifest, &[Split::Labeled], None).unwrap();
    let plain = Trainer::new(start.model().unwrap(), toy_train(3), labeled).unwrap().run(None, false).unwrap();
    assert_eq!(mixed, plain);
}

#[test]
fn empty_splits_are_errors() {
    let data = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        labeled: 0,
        unlabeled: 1,
        val: 1,
        partial_prob: 0.0,
    };
    let manifest = build_dataset(&tiny_phantom(3), &spec, data.path()).unwrap();
    assert!(train(&manifest, &toy_model(), &toy_train(1), None).is_err());
    let ckpt = swinseg::model::Checkpoint::from_model(&SwinUnetr::new(toy_model(), 0).unwrap(), 0, None);
    assert!(finetune_mixed(&ckpt, &manifest, &toy_train(1), None).is_err());
}

#[test]
fn pseudo_labels_are_fully_available_and_extend_the_manifest() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path(), 1, 2);
    let model = SwinUnetr::new(toy_model(), 0).unwrap();
    let cfg = InferConfig {
        patch_size: [16; 3],
        ..InferConfig::default()
    };
    let extended = generate_pseudo_labels(&model, &manifest, out.path(), &cfg).unwrap();
    let reloaded = load_manifest(&out.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded.cases, extended.cases);
    assert_eq!(extended.cases.len(), manifest.cases.len() + 2);
    let pseudo: Vec<_> = extended.split(Split::Pseudo).collect();
    assert_eq!(pseudo.len(), 2);
    for c in pseudo {
        assert!(c.label.as_ref().unwrap().starts_with(PSEUDO_DIR));
        let l = read_labels(&extended.resolve(c.label.as_ref().unwrap())).unwrap();
        assert_eq!(l.available, ClassSet::full(2));
        l.validate().unwrap();
    }
    // The fine-tuning pool sees labeled and pseudo cases.
    let pool = load_pool(&extended, &[Split::Labeled, Split::Pseudo], None).unwrap();
    assert_eq!(pool.len(), 3);
}

#[test]
fn empty_unlabeled_split_leaves_the_manifest_unchanged() {
    let data = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path(), 2, 0);
    let model = SwinUnetr::new(toy_model(), 0).unwrap();
    let cfg = InferConfig {
        patch_size: [16; 3],
        ..InferConfig::default()
    };
    let out = generate_pseudo_labels(&model, &manifest, data.path(), &cfg).unwrap();
    assert_eq!(out.cases, manifest.cases);
}
