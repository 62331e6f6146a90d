use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ctxbias::fusion::{beam_search, BeamConfig};
use ctxbias::matcher::{build_table, step, MatchState};
use ctxbias::scorer::score_batch;
use ctxbias::synth::{gen_corpus_in, SynthWorld, ToyBaseScorer};
use ctxbias::{DecoderConfig, DecoderParams, Phrase, SynthConfig};

fn setup() -> (SynthWorld, ctxbias::SynthCorpus) {
    let cfg = SynthConfig {
        train_utterances: 0,
        test_utterances: 4,
        distractor_counts: vec![1000],
        ..SynthConfig::default()
    };
    let world = SynthWorld::new(&cfg).unwrap();
    let corpus = gen_corpus_in(&world).unwrap();
    (world, corpus)
}

fn phrases(corpus: &ctxbias::SynthCorpus, n: usize) -> Vec<Phrase> {
    corpus
        .biasing_phrases(0, n, 1)
        .unwrap()
}

fn matcher(c: &mut Criterion) {
    let (_, corpus) = setup();
    let tables: Vec<_> = phrases(&corpus, 100).iter().map(|p| build_table(p).unwrap()).collect();
    let tokens = corpus.test[0].tokens.clone();
    c.bench_function("matcher step x100 phrases", |b| {
        b.iter(|| {
            let mut s = MatchState::zero(tables.len());
            for &t in &tokens {
                s = step(&s, &tables, t).state;
            }
            black_box(s)
        })
    });
}

fn scorer(c: &mut Criterion) {
    let (world, corpus) = setup();
    let cfg = DecoderConfig::desk(world.vocab.len(), world.config.feature_dim);
    let params = DecoderParams::init(cfg, 0, 0.1).unwrap();
    let list = phrases(&corpus, 1000);
    let x = &corpus.test[0].features;
    c.bench_function("score 1000 phrases", |b| {
        b.iter(|| black_box(score_batch(&params, x, &list).unwrap()))
    });
}

fn search(c: &mut Criterion) {
    let (world, corpus) = setup();
    let utt = &corpus.test[0];
    let base = ToyBaseScorer::new(&world, utt).unwrap();
    let tables: Vec<_> = phrases(&corpus, 10).iter().map(|p| build_table(p).unwrap()).collect();
    let cfg = BeamConfig {
        max_len: utt.tokens.len() + 3,
        ..BeamConfig::default()
    };
    c.bench_function("beam search, 10 phrases", |b| {
        b.iter(|| black_box(beam_search(&base, 0.5, &tables, &cfg).unwrap()))
    });
}

criterion_group!(benches, matcher, scorer, search);
criterion_main!(benches);
