use fewshot_persona::checkpoint::Checkpoint;
use fewshot_persona::corpus::{build_episode, Episode, Split, SynthConfig};
use fewshot_persona::harness::{self, RunConfig};
use fewshot_persona::meta::{policy_graph, test_adapt_generate, Mode};
use fewshot_persona::metrics::{bleu_n, BleuSmoothing};
use rand::Rng;
use std::collections::BTreeMap;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.data = SynthConfig {
        num_train: 60,
        num_test: 8,
        num_valid: 4,
        samples_per_train: 12,
        samples_per_heldout: 8,
        vocab_size: 100,
        k: 4,
        ..SynthConfig::default()
    };
    c.meta.k = 4;
    c.meta.meta_batch = 4;
    c.steps = 60;
    c
}

#[test]
fn own_support_bleu_beats_random_decode() {
    let cfg = small();
    let corpus = cfg.data.generate(1).unwrap().corpus;
    let (state, summary) = harness::train(&corpus, &cfg, &mut |_, _| Ok(())).unwrap();
    assert!(summary.last_window < summary.first_window);
    let mut rng = harness::stream(9, 0);
    let (mut hyps, mut refs, mut random) = (Vec::new(), Vec::new(), Vec::new());
    let g = corpus.test.graph();
    for &s in corpus.test.speakers() {
        let ep = build_episode(&corpus.test, s, cfg.meta.k, &mut rng).unwrap();
        let own = Episode {
            query: ep.support.clone(),
            query_positions: ep.support_positions.clone(),
            ..ep
        };
        let policy = policy_graph(g, &corpus.train, s, cfg.meta.neighbor_policy);
        let out = test_adapt_generate(&state, &own, &policy, &BTreeMap::new(), &cfg.meta, cfg.eval.decode, &mut rng).unwrap();
        for (q, gen) in own.query.iter().zip(&out.generations) {
            refs.push(q.response.tokens().to_vec());
            hyps.push(gen.tokens().to_vec());
            random.push((0..gen.len().max(1)).map(|_| rng.gen_range(4..cfg.data.vocab_size as u32)).collect::<Vec<_>>());
        }
    }
    let model = bleu_n(&hyps, &refs, 1, BleuSmoothing::AddOne).unwrap();
    let base = bleu_n(&random, &refs, 1, BleuSmoothing::AddOne).unwrap();
    assert!(model > base, "bleu-1 {model} vs random {base}");
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let mut cfg = small();
    cfg.steps = 10;
    let corpus = cfg.data.generate(2).unwrap().corpus;
    let hash = corpus.content_hash().unwrap();
    let (state, _) = harness::train(&corpus, &cfg, &mut |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    harness::checkpoint(&state, &cfg, &hash).save(&p).unwrap();
    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.config_hash, cfg.hash());
    assert_eq!(ck.seed, cfg.seed);
    let stored: RunConfig = serde_json::from_value(ck.config.clone()).unwrap();
    assert_eq!(stored, cfg);
    let a = harness::evaluate(&state, &corpus, &cfg, Split::Test).unwrap();
    let b = harness::evaluate(&ck.to_state().unwrap(), &corpus, &stored, Split::Test).unwrap();
    assert_eq!(a.mean_post_loss, b.mean_post_loss);
    assert_eq!(a.dataset_hash, hash);

    let other = cfg.data.generate(3).unwrap().corpus;
    assert!(harness::check_dataset(&ck, &other.content_hash().unwrap()).is_err());
}

#[test]
fn no_ta_mode_never_reads_aggregator() {
    let mut cfg = small();
    cfg.steps = 3;
    cfg.meta.mode = Mode::NoTa;
    let corpus = cfg.data.generate(4).unwrap().corpus;
    let (mut state, _) = harness::train(&corpus, &cfg, &mut |_, _| Ok(())).unwrap();
    for m in state.aggregator.0 .0.iter_mut() {
        m.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    }
    let ev = harness::evaluate(&state, &corpus, &cfg, Split::Test).unwrap();
    assert!(ev.gamma.is_none());
    assert!(ev.mean_post_loss.is_finite());
}
