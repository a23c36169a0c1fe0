use fineprune::checkpoint::{load_checkpoint, save_checkpoint, Archive};
use fineprune::debias::{build_debias_batches, DebiasSpec, Snapshot};
use fineprune::encoder::{generate_corpus, pretrain, CorpusSpec, EncoderConfig, EncoderModel, MatrixKind, NoGate, PretrainConfig, Tokenizer};
use fineprune::pruning::{attach_scores, fineprune_step, BlockGeometry, PruneOptimizer, ScoreSet, ThresholdSchedule};
use fineprune::rng::{rng, Stream};
use fineprune::tensor::Tensor;
use proptest::prelude::*;

fn tiny_corpus() -> CorpusSpec {
    CorpusSpec {
        size: 120,
        ..CorpusSpec::default()
    }
}

fn tiny_model(tokenizer: &Tokenizer, seed: u64) -> EncoderModel {
    let config = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_size: 8,
        ffn_size: 16,
        vocab_size: tokenizer.vocab_size(),
        ..EncoderConfig::default()
    };
    EncoderModel::init(&config, &mut rng(seed, Stream::Init)).unwrap()
}

fn flat(states: &[Tensor]) -> Vec<u64> {
    states.iter().flat_map(|s| s.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn pretrained_checkpoint_round_trips_bit_exactly() {
    let spec = tiny_corpus();
    let tokenizer = Tokenizer::from_words(spec.vocabulary());
    let sentences = generate_corpus(&spec, &mut rng(3, Stream::Corpus)).unwrap();
    let tokens: Vec<Vec<usize>> = sentences.iter().map(|s| tokenizer.encode(s).unwrap()).collect();
    let mut model = tiny_model(&tokenizer, 3);
    let config = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let report = pretrain(&mut model, &tokens, &config, &mut rng(3, Stream::Masking)).unwrap();
    assert!(report.final_loss().is_finite());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &tokenizer, &path).unwrap();
    let (loaded, loaded_tok) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_tok.words(), tokenizer.words());
    assert_eq!(loaded.weights_checksum(), model.weights_checksum());
    for t in tokens.iter().take(5) {
        assert_eq!(flat(&model.forward(t, &NoGate).unwrap()), flat(&loaded.forward(t, &NoGate).unwrap()));
    }
}

#[test]
fn scores_round_trip_through_an_archive() {
    let tokenizer = Tokenizer::from_words(tiny_corpus().vocabulary());
    let model = tiny_model(&tokenizer, 1);
    let mut scores = attach_scores(&model.config, BlockGeometry::square(4), 0.0, None, true).unwrap();
    for (k, e) in scores.entries.iter_mut().enumerate() {
        let n = e.scores.numel();
        e.scores = Tensor::param((0..n).map(|i| (i + k) as f64 * 0.3 - 1.0).collect(), e.scores.shape()).unwrap();
    }
    let bytes = scores.to_archive().to_bytes();
    let restored = ScoreSet::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(restored.geometry, scores.geometry);
    assert_eq!(restored.entries.len(), scores.entries.len());
    for (a, b) in restored.entries.iter().zip(&scores.entries) {
        assert_eq!(a.site, b.site);
        assert_eq!(a.scores.to_vec(), b.scores.to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn frozen_fine_pruning_never_moves_weights(seed in 0u64..1000, steps in 1usize..4, square in any::<bool>()) {
        let corpus = tiny_corpus();
        let tokenizer = Tokenizer::from_words(corpus.vocabulary());
        let mut model = tiny_model(&tokenizer, seed);
        let spec = DebiasSpec::from_corpus(&corpus);
        let sentences = generate_corpus(&corpus, &mut rng(seed, Stream::Corpus)).unwrap();
        let batches = build_debias_batches(&sentences[..40], &spec, &tokenizer, 8, &mut rng(seed, Stream::Shuffle)).unwrap();
        let geometry = if square { BlockGeometry::square(4) } else { BlockGeometry::value_head(&model.config) };
        let mut scores = attach_scores(&model.config, geometry, 0.0, None, true).unwrap();
        let before: Vec<u64> = model.named_params().iter().flat_map(|(_, t)| t.to_vec()).map(f64::to_bits).collect();
        let snapshot = Snapshot::new(&model);
        let mut opt = PruneOptimizer::new(&scores, &model, 0.05, 1e-3);
        let schedule = ThresholdSchedule::new(0.1, steps).unwrap();
        for step in 0..steps {
            fineprune_step(&mut model, &mut scores, &snapshot, &batches[step % batches.len()], &spec, &mut opt, &schedule, step).unwrap();
        }
        let after: Vec<u64> = model.named_params().iter().flat_map(|(_, t)| t.to_vec()).map(f64::to_bits).collect();
        prop_assert_eq!(before, after);
        prop_assert!(scores.score_tensors().iter().flat_map(|t| t.to_vec()).any(|s| s != 0.0));
    }

    #[test]
    fn pruned_value_heads_ignore_their_weights(
        seed in 0u64..1000,
        head_scores in prop::collection::vec(-4.0f64..4.0, 4),
        tau in 0.0f64..0.9,
        noise in -3.0f64..3.0,
    ) {
        let tokenizer = Tokenizer::from_words(tiny_corpus().vocabulary());
        let model = tiny_model(&tokenizer, seed);
        let cfg = model.config.clone();
        let mut scores = attach_scores(&cfg, BlockGeometry::value_head(&cfg), 0.0, None, true).unwrap();
        for (layer, e) in scores.entries.iter_mut().enumerate() {
            let values = head_scores[layer * cfg.num_heads..(layer + 1) * cfg.num_heads].to_vec();
            e.scores = Tensor::param(values, &[1, cfg.num_heads]).unwrap();
        }
        let heads = scores.count_pruned_heads(tau, &cfg).unwrap();

        // Overwrite every pruned head's value columns.
        let mut perturbed = model.clone();
        let (d, dh) = (cfg.hidden_size, cfg.head_size());
        for (layer, row) in heads.pruned.iter().enumerate() {
            let w = perturbed.layers[layer].matrix_mut(MatrixKind::Value);
            let mut data = w.to_vec();
            for (head, _) in row.iter().enumerate().filter(|(_, &p)| p) {
                for i in 0..d {
                    for j in head * dh..(head + 1) * dh {
                        data[i * d + j] += noise;
                    }
                }
            }
            *w = Tensor::new(data, &[d, d]).unwrap();
        }
        let sentence = format!("{} is a {}", tiny_corpus().attributes_a[0], tiny_corpus().targets_b[0]);
        let tokens = tokenizer.encode(&sentence).unwrap();
        let gate = scores.gate(tau);
        prop_assert_eq!(flat(&model.forward(&tokens, &gate).unwrap()), flat(&perturbed.forward(&tokens, &gate).unwrap()));
    }

    #[test]
    fn density_is_non_increasing_in_tau(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let tokenizer = Tokenizer::from_words(tiny_corpus().vocabulary());
        let model = tiny_model(&tokenizer, seed);
        let mut scores = attach_scores(&model.config, BlockGeometry::square(2), 0.0, None, true).unwrap();
        for (k, e) in scores.entries.iter_mut().enumerate() {
            let n = e.scores.numel();
            let values = (0..n).map(|i| (((i * 7919 + k * 104_729) as u64 ^ seed) % 97) as f64 / 12.0 - 4.0).collect();
            e.scores = Tensor::param(values, e.scores.shape()).unwrap();
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(scores.overall_density(hi) <= scores.overall_density(lo));
        for layer in 0..model.config.num_layers {
            prop_assert!(scores.layer_density(hi, layer) <= scores.layer_density(lo, layer));
        }
    }
}
