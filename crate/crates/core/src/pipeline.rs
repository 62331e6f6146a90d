//! File-to-file pipeline stages behind the command-line tool.
//!
//! Each stage is configured from flat `key = value` settings (a config file
//! merged with command-line overrides), checks its input paths before doing
//! any work, and writes its outputs with a single writer in input order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluate::{bias_word_set, corpus_report, CorpusReport};
use crate::fusion::{decode_utterance, filter_phrases, BeamConfig, DecodeResult};
use crate::io::{
    read_checkpoint, read_checkpoint_for, read_corpus, read_jsonl, read_vocab, render_key_values,
    write_checkpoint, write_corpus, write_json, write_jsonl, write_scores, write_trace,
    write_vocab, CorpusRecord, DecodeRecord, KeyValues, PhraseList, ScoreRow,
    EMPTY_PHRASE_LABEL,
};
use crate::scorer::{score_batch, DecoderParams};
use crate::synth::{gen_corpus_in, SynthConfig, SynthWorld, ToyBaseScorer};
use crate::trainer::{train_with_progress, EpochLoss, TrainConfig, TrainOutcome};
use crate::types::{Phrase, Utterance, Vocab};

pub const SYNTH_CONFIG_FILE: &str = "synth.conf";

macro_rules! take_fields {
    ($kv:expr, $target:expr, $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = $kv.take(stringify!($field))? {
                $target.$field = v;
            }
        )*
    };
}

macro_rules! render_fields {
    ($src:expr, $($field:ident),* $(,)?) => {
        vec![$((stringify!($field), $src.$field.to_string())),*]
    };
}

/// Reads every [`SynthConfig`] key present in `kv`; absent keys keep their
/// defaults.
pub fn synth_config_from(kv: &mut KeyValues) -> Result<SynthConfig> {
    let mut c = SynthConfig::default();
    take_fields!(
        kv, c, seed, alphabet_size, frequent_pool, rare_pool, frequent_mass, frequent_min_len,
        frequent_max_len, rare_min_len, rare_max_len, min_words, max_words, feature_dim,
        frames_per_token, noise_sigma, confusion_rate, frequent_confusion_scale, clean_ref_mass,
        misheard_ref_mass, misheard_partner_mass, end_mass, train_utterances, test_utterances,
    );
    if let Some(v) = kv.take_list("distractor_counts")? {
        c.distractor_counts = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn render_synth_config(c: &SynthConfig) -> String {
    let mut pairs = render_fields!(
        c, seed, alphabet_size, frequent_pool, rare_pool, frequent_mass, frequent_min_len,
        frequent_max_len, rare_min_len, rare_max_len, min_words, max_words, feature_dim,
        frames_per_token, noise_sigma, confusion_rate, frequent_confusion_scale, clean_ref_mass,
        misheard_ref_mass, misheard_partner_mass, end_mass, train_utterances, test_utterances,
    );
    let counts: Vec<String> = c.distractor_counts.iter().map(|n| n.to_string()).collect();
    pairs.push(("distractor_counts", counts.join(",")));
    render_key_values(pairs)
}

pub fn train_config_from(kv: &mut KeyValues) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    take_fields!(
        kv, c, beta, phrases_per_utterance, negative_batch_rate, epochs, learning_rate, seed,
        minibatch, adam_beta1, adam_beta2, adam_eps, init_scale, model_dim, layers, heads, ff_dim,
        memory_context,
    );
    c.validate()?;
    Ok(c)
}

fn beam_config_from(kv: &mut KeyValues) -> Result<BeamConfig> {
    let mut c = BeamConfig::default();
    take_fields!(kv, c, beam, expansions, max_len);
    Ok(c)
}

fn required_path(kv: &mut KeyValues, key: &str) -> Result<PathBuf> {
    kv.take::<PathBuf>(key)?
        .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

pub struct SynthStage {
    pub config: SynthConfig,
    pub out_dir: PathBuf,
}

impl SynthStage {
    pub fn from_settings(mut kv: KeyValues) -> Result<Self> {
        let out_dir = required_path(&mut kv, "out_dir")?;
        let config = synth_config_from(&mut kv)?;
        kv.finish()?;
        Ok(SynthStage { config, out_dir })
    }

    /// Writes `vocab.txt`, `train.jsonl`, `test.jsonl` with feature files
    /// under `features/`, `rare_words.txt`, `ground_truth.txt`, and for every
    /// distractor count N `distractors_n<N>.txt` plus the full biasing lists
    /// `biasing_n<N>.txt`. The config is echoed to `synth.conf`.
    pub fn run(&self) -> Result<()> {
        let world = SynthWorld::new(&self.config)?;
        let corpus = gen_corpus_in(&world)?;
        let dir = &self.out_dir;
        write_vocab(&dir.join("vocab.txt"), &corpus.vocab)?;
        write_corpus(&dir.join("train.jsonl"), "features", &corpus.train)?;
        write_corpus(&dir.join("test.jsonl"), "features", &corpus.test)?;
        let mut rare = corpus.rare_words.join("\n");
        rare.push('\n');
        std::fs::write(dir.join("rare_words.txt"), rare).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join(SYNTH_CONFIG_FILE), render_synth_config(&self.config))
            .map_err(|e| Error::io(dir, e))?;

        let sections = |f: &dyn Fn(usize) -> Vec<String>| PhraseList {
            global: Vec::new(),
            sections: corpus
                .test
                .iter()
                .enumerate()
                .map(|(i, u)| (u.id.clone(), f(i).into_iter().map(|w| vec![w]).collect()))
                .collect(),
        };
        sections(&|i| corpus.ground_truth[i].clone()).write(&dir.join("ground_truth.txt"))?;
        for &n in &self.config.distractor_counts {
            sections(&|i| corpus.distractors[i].iter().take(n).cloned().collect())
                .write(&dir.join(format!("distractors_n{n}.txt")))?;
            sections(&|i| corpus.biasing_words(i, n, self.config.seed))
                .write(&dir.join(format!("biasing_n{n}.txt")))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- train

pub struct TrainStage {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub config: TrainConfig,
}

impl TrainStage {
    pub fn from_settings(mut kv: KeyValues) -> Result<Self> {
        let corpus = required_path(&mut kv, "corpus")?;
        let vocab = required_path(&mut kv, "vocab")?;
        let checkpoint = required_path(&mut kv, "checkpoint")?;
        let trace = required_path(&mut kv, "trace")?;
        let config = train_config_from(&mut kv)?;
        kv.finish()?;
        check_inputs(&[&corpus, &vocab])?;
        Ok(TrainStage {
            corpus,
            vocab,
            checkpoint,
            trace,
            config,
        })
    }

    pub fn run(&self, on_epoch: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
        let vocab = read_vocab(&self.vocab)?;
        let corpus = read_corpus(&self.corpus, &vocab)?;
        let out = match train_with_progress(&corpus, &vocab, &self.config, on_epoch) {
            Err(Error::Diverged { epoch, trace }) => {
                write_trace(&self.trace, &trace)?;
                return Err(Error::Diverged { epoch, trace });
            }
            other => other?,
        };
        write_checkpoint(&self.checkpoint, &out.params, &vocab)?;
        write_trace(&self.trace, &out.trace)?;
        Ok(out)
    }
}

// ---------------------------------------------------------------- score / decode

/// Inputs shared by scoring and decoding.
struct Scoring {
    params: DecoderParams,
    vocab: Vocab,
    utterances: Vec<Utterance>,
    phrases: PhraseList,
}

fn load_scoring(corpus: &Path, phrases: &Path, checkpoint: &Path, vocab: Option<&Path>) -> Result<Scoring> {
    let (params, vocab) = match vocab {
        Some(v) => {
            let vocab = read_vocab(v)?;
            (read_checkpoint_for(checkpoint, &vocab)?, vocab)
        }
        None => read_checkpoint(checkpoint)?,
    };
    let utterances = read_corpus(corpus, &vocab).map_err(|e| match e {
        Error::UnknownSymbol { symbol, word } => Error::ConfigMismatch(format!(
            "corpus word {word:?} has symbol {symbol:?} outside the checkpoint vocabulary"
        )),
        e => e,
    })?;
    Ok(Scoring {
        params,
        vocab,
        utterances,
        phrases: PhraseList::read(phrases)?,
    })
}

fn utterance_phrases(list: &PhraseList, id: &str, vocab: &Vocab) -> Result<Vec<Phrase>> {
    list.for_utterance(id)
        .iter()
        .map(|words| {
            Phrase::new(words, vocab).map_err(|e| match e {
                Error::UnknownSymbol { symbol, word } => Error::ConfigMismatch(format!(
                    "phrase word {word:?} has symbol {symbol:?} outside the checkpoint vocabulary"
                )),
                e => e,
            })
        })
        .collect()
}

pub struct ScoreStage {
    pub corpus: PathBuf,
    pub phrases: PathBuf,
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub tol: f64,
    pub out: PathBuf,
}

impl ScoreStage {
    pub fn from_settings(mut kv: KeyValues) -> Result<Self> {
        let corpus = required_path(&mut kv, "corpus")?;
        let phrases = required_path(&mut kv, "phrases")?;
        let checkpoint = required_path(&mut kv, "checkpoint")?;
        let vocab = kv.take::<PathBuf>("vocab")?;
        let out = required_path(&mut kv, "out")?;
        let tol = kv.take("tol")?.unwrap_or(0.0);
        kv.finish()?;
        check_inputs(&[&corpus, &phrases, &checkpoint])?;
        if let Some(v) = &vocab {
            check_inputs(&[v])?;
        }
        Ok(ScoreStage {
            corpus,
            phrases,
            checkpoint,
            vocab,
            tol,
            out,
        })
    }

    /// One row for the empty phrase and one per listed phrase, per utterance.
    pub fn run(&self) -> Result<Vec<ScoreRow>> {
        let s = load_scoring(&self.corpus, &self.phrases, &self.checkpoint, self.vocab.as_deref())?;
        let mut rows = Vec::new();
        for utt in &s.utterances {
            let phrases = utterance_phrases(&s.phrases, &utt.id, &s.vocab)?;
            let mut all = Vec::with_capacity(phrases.len() + 1);
            all.push(Phrase::empty(&s.vocab));
            all.extend(phrases);
            let scored = score_batch(&s.params, &utt.features, &all)?;
            let s0 = scored[0].per_token;
            let filter = filter_phrases(&scored[1..], s0, self.tol)?;
            for (i, sc) in scored.iter().enumerate() {
                rows.push(ScoreRow {
                    utt_id: utt.id.clone(),
                    phrase: if i == 0 {
                        EMPTY_PHRASE_LABEL.to_string()
                    } else {
                        sc.phrase.text()
                    },
                    log_prob: sc.log_prob,
                    per_token: sc.per_token,
                    kept: i == 0 || filter.kept.contains(&(i - 1)),
                });
            }
        }
        write_scores(&self.out, self.tol, &rows)?;
        Ok(rows)
    }
}

pub struct DecodeStage {
    pub corpus: PathBuf,
    pub phrases: PathBuf,
    pub checkpoint: PathBuf,
    pub synth_config: PathBuf,
    pub vocab: Option<PathBuf>,
    pub tol: f64,
    pub beam: BeamConfig,
    pub out: PathBuf,
}

impl DecodeStage {
    /// `synth_config` defaults to `synth.conf` next to the corpus file; the
    /// toy base scorer is rebuilt from it.
    pub fn from_settings(mut kv: KeyValues) -> Result<Self> {
        let corpus = required_path(&mut kv, "corpus")?;
        let phrases = required_path(&mut kv, "phrases")?;
        let checkpoint = required_path(&mut kv, "checkpoint")?;
        let out = required_path(&mut kv, "out")?;
        let vocab = kv.take::<PathBuf>("vocab")?;
        let synth_config = match kv.take::<PathBuf>("synth_config")? {
            Some(p) => p,
            None => corpus
                .parent()
                .unwrap_or(Path::new("."))
                .join(SYNTH_CONFIG_FILE),
        };
        let tol = kv.take("tol")?.unwrap_or(0.0);
        let beam = beam_config_from(&mut kv)?;
        kv.finish()?;
        check_inputs(&[&corpus, &phrases, &checkpoint, &synth_config])?;
        if let Some(v) = &vocab {
            check_inputs(&[v])?;
        }
        Ok(DecodeStage {
            corpus,
            phrases,
            checkpoint,
            synth_config,
            vocab,
            tol,
            beam,
            out,
        })
    }

    pub fn run(&self) -> Result<Vec<DecodeResult>> {
        let s = load_scoring(&self.corpus, &self.phrases, &self.checkpoint, self.vocab.as_deref())?;
        let mut kv = KeyValues::read(&self.synth_config)?;
        let synth = synth_config_from(&mut kv)?;
        kv.finish()?;
        let world = SynthWorld::new(&synth)?;
        if world.vocab != s.vocab {
            return Err(Error::ConfigMismatch(
                "synthetic config and checkpoint use different vocabularies".into(),
            ));
        }
        let mut results = Vec::with_capacity(s.utterances.len());
        for utt in &s.utterances {
            let phrases = utterance_phrases(&s.phrases, &utt.id, &s.vocab)?;
            let base = ToyBaseScorer::new(&world, utt)?;
            results.push(decode_utterance(
                utt, &phrases, &s.params, &base, self.tol, &self.beam, &s.vocab,
            )?);
        }
        let records: Vec<DecodeRecord> = results.iter().map(DecodeRecord::from).collect();
        write_jsonl(&self.out, &records)?;
        Ok(results)
    }
}

// ---------------------------------------------------------------- evaluate

pub struct EvaluateStage {
    pub reference: PathBuf,
    pub hypotheses: PathBuf,
    pub phrases: PathBuf,
    pub out: PathBuf,
}

impl EvaluateStage {
    pub fn from_settings(mut kv: KeyValues) -> Result<Self> {
        let reference = required_path(&mut kv, "ref")?;
        let hypotheses = required_path(&mut kv, "hyp")?;
        let phrases = required_path(&mut kv, "phrases")?;
        let out = required_path(&mut kv, "out")?;
        kv.finish()?;
        check_inputs(&[&reference, &hypotheses, &phrases])?;
        Ok(EvaluateStage {
            reference,
            hypotheses,
            phrases,
            out,
        })
    }

    /// Reference utterances without a hypothesis line are scored against an
    /// empty hypothesis.
    pub fn run(&self) -> Result<CorpusReport> {
        let refs: Vec<CorpusRecord> = read_jsonl(&self.reference)?;
        let hyps: HashMap<String, DecodeRecord> = read_jsonl::<DecodeRecord>(&self.hypotheses)?
            .into_iter()
            .map(|h| (h.id.clone(), h))
            .collect();
        let list = PhraseList::read(&self.phrases)?;
        let lower = |ws: &[String]| ws.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>();
        let items: Vec<(String, Vec<String>, Vec<String>, _)> = refs
            .iter()
            .map(|r| {
                let hyp = hyps
                    .get(&r.id)
                    .map(|h| lower(&h.hypothesis_words))
                    .unwrap_or_default();
                let bias = bias_word_set(list.for_utterance(&r.id).iter());
                (r.id.clone(), lower(&r.words), hyp, bias)
            })
            .collect();
        let report = corpus_report(
            items
                .iter()
                .map(|(id, r, h, b)| (id.as_str(), &r[..], &h[..], b)),
        );
        write_json(&self.out, &report)?;
        Ok(report)
    }
}
