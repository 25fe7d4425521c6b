use std::path::PathBuf;

use npcrf::config::RunConfig;
use npcrf::dataset::TypingInstance;
use npcrf::embeddings::random_type_embeddings;
use npcrf::potentials::Dropout;
use npcrf::synth::{generate, SynthBenchmark, SynthConfig};
use npcrf::training::{evaluate, train, AdamW, NpcrfModel, TrainConfig, UnarySource};
use npcrf::Error;

fn preset() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_file(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.cfg"))
        .unwrap();
    cfg
}

fn fresh_model(bench: &SynthBenchmark, cfg: &RunConfig, seed: u64) -> NpcrfModel {
    let emb = random_type_embeddings(bench.vocab.len(), cfg.embedding_dim, seed).unwrap();
    NpcrfModel::init(cfg.model.clone(), emb.matrix, None, seed).unwrap()
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let cfg = preset();
    for seed in 1..=3 {
        let bench = generate(&SynthConfig {
            seed,
            train: 64,
            dev: 1,
            test: 1,
            ..Default::default()
        })
        .unwrap();
        let batch: Vec<&TypingInstance> = bench.train.instances.iter().collect();
        let source = UnarySource::Logits(&bench.train.logits);
        let mut model = fresh_model(&bench, &cfg, seed);
        let mut opt = AdamW::new(cfg.train.optimizer);
        let initial = model.loss(&batch, source, Dropout::Off).unwrap();
        let mut losses = vec![initial];
        for _ in 0..50 {
            let (_, grads) = model.loss_and_grad(&batch, source, Dropout::Off).unwrap();
            let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, g)| g).collect();
            let mut p: Vec<&mut [f64]> = model.params.tensors_mut().into_iter().map(|(_, p)| p).collect();
            opt.step(&mut p, &g);
            losses.push(model.loss(&batch, source, Dropout::Off).unwrap());
        }
        let last = *losses.last().unwrap();
        assert!(last < initial, "seed {seed}: {initial} -> {last}");
        // Mostly downhill: the tail average is below the head average.
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[41..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "seed {seed}");
    }
}

#[test]
fn trained_potentials_reflect_chain_structure() {
    let cfg = preset();
    let bench = generate(&SynthConfig {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let outcome = train(
        fresh_model(&bench, &cfg, 1),
        &bench.train.instances,
        UnarySource::Logits(&bench.train.logits),
        &bench.dev.instances,
        UnarySource::Logits(&bench.dev.logits),
        &TrainConfig { seed: 1, ..cfg.train },
    )
    .unwrap();
    let chain_types: Vec<usize> = bench.structure.chains.iter().flatten().copied().collect();
    let sub = outcome.best.factors().unwrap().recover_submatrices(&chain_types).unwrap();
    let chain_of = |id: usize| bench.structure.chains.iter().position(|c| c.contains(&id)).unwrap();
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for (a, &ja) in chain_types.iter().enumerate() {
        for (b, &jb) in chain_types.iter().enumerate() {
            if a == b {
                continue;
            }
            let v = sub.theta11[[a, b]];
            if chain_of(ja) == chain_of(jb) {
                within.push(v);
            } else {
                cross.push(v);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&within) > mean(&cross),
        "within {} vs cross {}",
        mean(&within),
        mean(&cross)
    );
}

#[test]
fn model_beats_unary_baseline_on_its_training_split() {
    let cfg = preset();
    let bench = generate(&SynthConfig {
        seed: 2,
        train: 500,
        dev: 100,
        test: 1,
        ..Default::default()
    })
    .unwrap();
    let train_cfg = TrainConfig {
        seed: 2,
        epochs: 10,
        ..cfg.train
    };
    let source = UnarySource::Logits(&bench.train.logits);
    let outcome = train(
        fresh_model(&bench, &cfg, 2),
        &bench.train.instances,
        source,
        &bench.dev.instances,
        UnarySource::Logits(&bench.dev.logits),
        &train_cfg,
    )
    .unwrap();
    let report = evaluate(&outcome.best, &bench.train.instances, source).unwrap();
    let baseline = report.per_iteration[0].macro_scores.f1;
    assert!(report.final_row.macro_scores.f1 >= baseline);
}

#[test]
fn divergent_training_is_reported() {
    let mut cfg = preset();
    cfg.set("learning_rate", "1e200").unwrap();
    cfg.set("weight_decay", "0").unwrap();
    let bench = generate(&SynthConfig {
        seed: 3,
        train: 64,
        dev: 8,
        test: 1,
        ..Default::default()
    })
    .unwrap();
    let result = train(
        fresh_model(&bench, &cfg, 3),
        &bench.train.instances,
        UnarySource::Logits(&bench.train.logits),
        &bench.dev.instances,
        UnarySource::Logits(&bench.dev.logits),
        &TrainConfig {
            epochs: 3,
            ..cfg.train
        },
    );
    assert!(matches!(result, Err(Error::NonFiniteLoss { .. })), "{result:?}");
}
