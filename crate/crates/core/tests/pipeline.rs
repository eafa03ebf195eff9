//! End-to-end behavior of the training stages on small planted data.

use std::time::Instant;

use persona_steer::cf::{cf_loss, embed_unseen, train_cf, CfConfig};
use persona_steer::dataset::{four_way_split, generate_synthetic, ResponseMatrix, SplitSpec, SyntheticSpec};
use persona_steer::lm::{argmax, pretrain_toy_lm, AnswerModel, LmConfig, PretrainConfig, Vocab};
use persona_steer::scalar::cosine;
use persona_steer::spm::{train_spm, SpmConfig};

fn zero_noise() -> ResponseMatrix {
    generate_synthetic(&SyntheticSpec {
        noise: 0.0,
        ..Default::default()
    })
    .unwrap()
    .0
}

#[test]
fn cf_fits_zero_noise_fixture() {
    let m = zero_noise();
    let keys: Vec<_> = m.keys().collect();
    let start = Instant::now();
    let (table, trace) = train_cf::<f64>(&m, &keys, None, &CfConfig::default()).unwrap();
    let mse = cf_loss(&table, &m, &keys).unwrap();
    assert!(trace.epoch_losses.len() <= 200);
    assert!(mse < 1e-3, "training MSE {mse}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn unseen_duplicate_recovers_its_twin() {
    let m = zero_noise();
    let split = four_way_split(&m, &SplitSpec::default()).unwrap();
    let config = CfConfig::default();
    let (table, _) = train_cf::<f64>(&m, &split.r_tr_tr, None, &config).unwrap();
    let questions = table.questions.clone();
    let unseen = embed_unseen(&m, &split.r_val_tr, &table.questions, &config, None).unwrap();
    assert_eq!(questions, table.questions);
    // Individual i belongs to planted cluster i % 3; zero noise makes cluster members identical,
    // so every training member of that cluster is a twin.
    for (id, v) in &unseen.vectors {
        let idx = m.individual_idx(id).unwrap();
        let twins: Vec<&Vec<f64>> = split
            .p_tr
            .iter()
            .filter(|&&p| p % 3 == idx % 3)
            .map(|&p| &table.individuals[&m.individual(p).id])
            .collect();
        let mean: Vec<f64> = (0..config.dim)
            .map(|c| twins.iter().map(|t| t[c]).sum::<f64>() / twins.len() as f64)
            .collect();
        let sim = cosine(v, &mean);
        assert!(sim >= 0.9, "{id}: cosine {sim}");
    }
}

fn small_lm(seed: u64) -> LmConfig {
    LmConfig {
        seed,
        pretrain: PretrainConfig {
            epochs: 8,
            context_samples: 300,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn unanimous_question_is_learned() {
    let (m, _) = generate_synthetic(&SyntheticSpec {
        n_individuals: 40,
        n_questions: 6,
        ..Default::default()
    })
    .unwrap();
    let triples = m.responses().map(|(k, o)| {
        let q = &m.question(k.question).id;
        (
            m.individual(k.individual).id.clone(),
            q.clone(),
            if k.question == 2 { 1 } else { o },
        )
    });
    let m = ResponseMatrix::new(
        m.individuals().to_vec(),
        m.questions().to_vec(),
        triples.collect::<Vec<_>>(),
    )
    .unwrap();
    let keys: Vec<_> = m.keys().collect();
    let (model, trace) = pretrain_toy_lm::<f64>(&m, &keys, &small_lm(1)).unwrap();
    assert!(model.is_frozen());
    assert!(trace.epoch_losses.last() < trace.epoch_losses.first());
    let q = m.question(2);
    let tokens = model.vocab.question_sequence(&q.id).unwrap();
    let logits = model.forward_with_prefix(None, &tokens, q.option_count()).unwrap();
    assert_eq!(argmax(&logits), 1);
    let (again, _) = pretrain_toy_lm::<f64>(&m, &keys, &small_lm(1)).unwrap();
    assert_eq!(again.fingerprint(), model.fingerprint());
}

#[test]
fn spm_training_leaves_the_model_untouched_and_keeps_its_best_epoch() {
    let (m, _) = generate_synthetic(&SyntheticSpec {
        n_individuals: 30,
        n_questions: 8,
        ..Default::default()
    })
    .unwrap();
    let split = four_way_split(&m, &SplitSpec::default()).unwrap();
    let (table, _) = train_cf::<f64>(&m, &split.r_tr_tr, None, &CfConfig::default()).unwrap();
    let (model, _) = pretrain_toy_lm::<f64>(&m, &split.r_tr_tr, &small_lm(2)).unwrap();
    let before = model.parameter_bytes();
    let config = SpmConfig {
        epochs: 6,
        patience: 2,
        ..Default::default()
    };
    let (spm, trace) = train_spm(&model, &table.individuals, &m, &split.r_tr_tr, &split.r_tr_val, &config).unwrap();
    assert_eq!(before, model.parameter_bytes());
    let best = trace.best_epoch.unwrap();
    let min = trace.validation_losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(trace.validation_losses[best], min);
    let kept = spm.loss(&model, &table.individuals, &m, &split.r_tr_val).unwrap();
    assert!((kept - min).abs() < 1e-12);
    let (again, _) = train_spm(&model, &table.individuals, &m, &split.r_tr_tr, &split.r_tr_val, &config).unwrap();
    assert_eq!(again, spm);
}

#[test]
fn mismatched_vocab_model_rejects_foreign_question() {
    let m = zero_noise();
    let vocab = Vocab::new(4, vec![("other".into(), 3)], Vec::new());
    let model = AnswerModel::<f64>::new(LmConfig::default(), vocab).unwrap();
    assert!(model.vocab.question_sequence(&m.question(0).id).is_err());
}
