use mtpbias_core::corpus::{generate_corpus, Corpus, CorpusConfig};
use mtpbias_core::model::{Model, ModelConfig};
use mtpbias_core::training::{aed_nll_on, joint_loss_on, mtp_loss_on, train, Objective, TrainingConfig, CURVE_FILE};
use mtpbias_core::Error;
use mtpbias_tensor::{Tape, Tensor};

fn tiny_model(k: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        ffn_expansion: 2,
        mtp_heads: k,
        scorer_hidden: 8,
        ..ModelConfig::default()
    }
}

fn tiny_corpus(train: usize) -> Corpus {
    generate_corpus(&CorpusConfig {
        train_size: train,
        dev_size: 4,
        test_size: 4,
        train_entities: 40,
        heldout_entities: 40,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn quick(alpha: Vec<f32>) -> TrainingConfig {
    TrainingConfig {
        alpha,
        epochs: 2,
        batch_size: 4,
        warmup_steps: 3,
        dev_every: 1,
        dev_list_size: 4,
        max_len: 30,
        ..TrainingConfig::default()
    }
}

fn log_softmax_at(row: &[f32], t: usize) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[t] as f64 - lse
}

#[test]
fn weighted_loss_equals_per_head_cross_entropies() {
    let corpus = tiny_corpus(3);
    let utt = &corpus.train[0];
    let model = Model::new(tiny_model(4)).unwrap();
    let alpha = [1.0f32, 0.2, 0.1, 0.05];
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape);
    let x = tape.leaf(&utt.features);
    let steps = utt.steps();
    let enc = model.encode_on(&mut tape, &b, x).unwrap();
    let h = model.decode_on(&mut tape, &b, utt.decoder_inputs(), enc).unwrap();
    let heads = model.mtp_logits_on(&mut tape, &b, h).unwrap();
    let loss = mtp_loss_on(&mut tape, &heads.iter().map(|v| Some(*v)).collect::<Vec<_>>(), &utt.transcript, &alpha)
        .unwrap();
    let mut expected = 0.0f64;
    for (k, &a) in alpha.iter().enumerate() {
        let logits = tape.value(heads[k]);
        let v = model.config().vocab_size;
        let valid: Vec<usize> = (0..steps).filter(|s| s + k + 1 <= steps).collect();
        let nll: f64 = valid
            .iter()
            .map(|&s| -log_softmax_at(&logits[s * v..(s + 1) * v], utt.transcript[s + k + 1]))
            .sum();
        expected += a as f64 * nll / valid.len() as f64;
    }
    let got = tape.value(loss)[0] as f64;
    assert!((got - expected).abs() < 1e-4 * expected, "{got} vs {expected}");
}

#[test]
fn first_head_only_equals_the_plain_likelihood_exactly() {
    let corpus = tiny_corpus(3);
    let model = Model::new(tiny_model(4)).unwrap();
    for utt in &corpus.train {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        let x = tape.leaf(&utt.features);
        let joint = joint_loss_on(&mut tape, &model, &b, x, &utt.transcript, &[1.0, 0.0, 0.0, 0.0], None).unwrap();
        let x = tape.leaf(&utt.features);
        let plain = aed_nll_on(&mut tape, &model, &b, x, &utt.transcript).unwrap();
        assert_eq!(tape.value(joint.total)[0].to_bits(), tape.value(plain)[0].to_bits());
    }
}

#[test]
fn rows_past_the_end_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let v = 5;
    let transcript = [1usize, 3, 4, 2];
    let steps = 3;
    let leaves: Vec<Tensor<f64>> = (0..3)
        .map(|k| {
            Tensor::new(vec![steps, v], (0..steps * v).map(|i| ((i + k) as f64 * 0.7).sin()).collect())
                .unwrap()
                .with_grad()
        })
        .collect();
    let vars: Vec<_> = leaves.iter().map(|t| Some(tape.leaf(t))).collect();
    let loss = mtp_loss_on(&mut tape, &vars, &transcript, &[1.0, 0.5, 0.25]).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(var.unwrap()).unwrap();
        for s in 0..steps {
            let row = &g[s * v..(s + 1) * v];
            if s + k + 1 > steps {
                assert!(row.iter().all(|x| *x == 0.0), "head {k} row {s}");
            } else {
                assert!(row.iter().any(|x| *x != 0.0));
            }
        }
    }
}

#[test]
fn one_epoch_smoke_run_reduces_the_loss() {
    let corpus = tiny_corpus(10);
    let cfg = TrainingConfig {
        alpha: vec![1.0, 0.2, 0.1, 0.05],
        epochs: 1,
        batch_size: 2,
        warmup_steps: 0,
        dev_every: 0,
        ..TrainingConfig::default()
    };
    let out = train(&corpus, &tiny_model(4), &cfg, None, false).unwrap();
    assert_eq!(out.curve.len(), 5);
    let first = out.curve.first().unwrap();
    let last = out.curve.last().unwrap();
    assert!(
        last.l_mtp + last.l_entity < first.l_mtp + first.l_entity,
        "{first:?} -> {last:?}"
    );
}

#[test]
fn null_list_training_matches_the_plain_objective_bit_for_bit() {
    let corpus = tiny_corpus(12);
    let model = tiny_model(1);
    let joint = TrainingConfig {
        min_positives: 0,
        max_positives: 0,
        ..quick(vec![1.0])
    };
    let plain = TrainingConfig {
        objective: Objective::Baseline,
        ..quick(vec![1.0])
    };
    let no_entity = TrainingConfig {
        entity_loss: false,
        ..quick(vec![1.0])
    };
    let a = train(&corpus, &model, &joint, None, false).unwrap();
    let b = train(&corpus, &model, &plain, None, false).unwrap();
    let c = train(&corpus, &model, &no_entity, None, false).unwrap();
    for other in [&b, &c] {
        assert_eq!(a.curve.len(), other.curve.len());
        for (x, y) in a.curve.iter().zip(&other.curve) {
            assert_eq!(x.l_mtp.to_bits(), y.l_mtp.to_bits());
        }
        for (x, y) in a.last.params().tensors().iter().zip(other.last.params().tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }
    assert!(a.curve.iter().all(|p| p.l_entity == 0.0));
}

#[test]
fn resumed_training_continues_identically() {
    let corpus = tiny_corpus(12);
    let model = tiny_model(2);
    let full_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let cfg = quick(vec![1.0, 0.2]);
    let full = train(&corpus, &model, &cfg, Some(full_dir.path()), false).unwrap();
    let first = TrainingConfig { epochs: 1, ..cfg.clone() };
    train(&corpus, &model, &first, Some(split_dir.path()), false).unwrap();
    let resumed = train(&corpus, &model, &cfg, Some(split_dir.path()), true).unwrap();
    assert_eq!(full.curve, resumed.curve);
    for (x, y) in full.last.params().tensors().iter().zip(resumed.last.params().tensors()) {
        assert_eq!(x.data(), y.data());
    }
    let read = |d: &std::path::Path| std::fs::read(d.join(CURVE_FILE)).unwrap();
    assert_eq!(read(full_dir.path()), read(split_dir.path()));
    let curve = String::from_utf8(read(full_dir.path())).unwrap();
    assert!(curve.starts_with("epoch,step,l_mtp,l_entity,dev_wer,dev_bwer,dev_uwer\n"));
}

#[test]
fn training_is_reproducible() {
    let corpus = tiny_corpus(8);
    let cfg = quick(vec![1.0, 0.2]);
    let a = train(&corpus, &tiny_model(2), &cfg, None, false).unwrap();
    let b = train(&corpus, &tiny_model(2), &cfg, None, false).unwrap();
    assert_eq!(a.curve, b.curve);
}

#[test]
fn divergence_reports_step_and_learning_rate() {
    let corpus = tiny_corpus(8);
    let cfg = TrainingConfig {
        learning_rate: 1e30,
        warmup_steps: 0,
        dev_every: 0,
        ..quick(vec![1.0, 0.2])
    };
    match train(&corpus, &tiny_model(2), &cfg, None, false) {
        Err(Error::NonFinite { step, learning_rate }) => {
            assert!(step >= 2);
            assert_eq!(learning_rate, 1e30);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}
