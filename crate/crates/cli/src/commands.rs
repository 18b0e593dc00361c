use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use serde_json::json;

use voken::baselines::{
    ablation_labels, build_tf, propagate, sentence_label, tf_labels, AblationKind,
};
use voken::corpus::{load_corpus, Corpus};
use voken::features::{FeatureMatrix, FeatureRole};
use voken::index::{split_by_sentence, vokenize_corpus, Index, VokenAssignment, VokenVocabulary};
use voken::matcher::{train, MatcherMode, MatcherModel, TrainConfig, TrainingData};
use voken::revokenize::{revokenize_corpus, SENTINEL_VOKEN};
use voken::stats::{build_grounded_set, report_with_stopwords, GroundedTokenSet, StopWords};
use voken::storage::{self, FeatureReader, VokenRecord};
use voken::supervision::{mask_tokens, mlm_loss, vlm_loss, voken_cls_loss};
use voken::tokenizer::{TokenizerRegistry, TokenizerSpec};

use crate::dump::{self, DumpToken};
use crate::{
    BaselineArgs, BaselineKind, BuildIndexArgs, Command, DumpArgs, DumpFormat, EvalLossArgs, Mode,
    RevokenizeArgs, StatsArgs, TrainArgs, VokenizeArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats(a) => stats(a),
        Command::TrainMatcher(a) => train_matcher(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Vokenize(a) => vokenize(a),
        Command::Revokenize(a) => revokenize(a),
        Command::Baseline(a) => baseline(a),
        Command::EvalLoss(a) => eval_loss(a),
        Command::Dump(a) => dump(a),
    }
}

fn registry(wordpiece: &[String]) -> Result<TokenizerRegistry> {
    let mut reg = TokenizerRegistry::with_defaults();
    for spec in wordpiece {
        let Some((id, path)) = spec.split_once('=') else {
            bail!("--wordpiece expects ID=PATH, got `{spec}`");
        };
        reg.register(
            id,
            TokenizerSpec::WordPiece {
                vocab: path.into(),
                lowercase: true,
            },
        )?;
    }
    Ok(reg)
}

fn load(path: &Path, tokenizer: &str, reg: &TokenizerRegistry) -> Result<Corpus> {
    let corpus = load_corpus(path, tokenizer, reg)?;
    eprintln!(
        "loaded {}: {} sentences, {} tokens",
        path.display(),
        corpus.sentences.len(),
        corpus.token_count()
    );
    Ok(corpus)
}

fn read_features(path: &Path) -> Result<FeatureMatrix> {
    Ok(storage::read_features(path)?)
}

fn read_index(path: &Path) -> Result<Index> {
    let m = read_features(path)?;
    Index::from_matrix(&m).with_context(|| format!("loading index {}", path.display()))
}

fn require<'a, T>(value: &'a Option<T>, flag: &str, kind: BaselineKind) -> Result<&'a T> {
    let name = kind
        .to_possible_value()
        .map(|v| v.get_name().to_string())
        .unwrap_or_default();
    value
        .as_ref()
        .with_context(|| format!("--{flag} is required for --kind {name}"))
}

fn to_assignments(records: Vec<VokenRecord>) -> Vec<VokenAssignment> {
    records
        .into_iter()
        .map(|r| VokenAssignment {
            scores: vec![f64::NAN; r.voken_ids.len()],
            sentence_id: r.sentence_id,
            voken_ids: r.voken_ids,
        })
        .collect()
}

fn to_records(assignments: &[VokenAssignment]) -> Vec<VokenRecord> {
    assignments.iter().map(VokenRecord::from).collect()
}

fn check_alignment(records: &[VokenRecord], corpus: &Corpus) -> Result<()> {
    ensure!(
        records.len() == corpus.sentences.len(),
        "voken file has {} records, corpus has {} sentences",
        records.len(),
        corpus.sentences.len()
    );
    for (r, s) in records.iter().zip(&corpus.sentences) {
        ensure!(
            r.sentence_id == s.sentence_id && r.voken_ids.len() == s.len(),
            "sentence {}: voken record ({} vokens, id {}) does not match the corpus tokenization ({} tokens)",
            s.sentence_id,
            r.voken_ids.len(),
            r.sentence_id,
            s.len()
        );
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let reg = registry(&a.tok.wordpiece)?;
    let corpus = load(&a.corpus, &a.tok.tokenizer, &reg)?;
    let reference = load(&a.reference, &a.tok.tokenizer, &reg)?;
    let stop = match &a.stopwords {
        Some(p) => StopWords::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => StopWords::english(),
    };
    let grounded = match (&a.grounded, &a.captions) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            GroundedTokenSet::from_lines(&text, &path.display().to_string())
        }
        (None, Some(path)) => {
            let captions = load(path, &a.tok.tokenizer, &reg)?;
            let set = build_grounded_set(&captions, &stop, a.threshold)?;
            if let Some(out) = &a.write_grounded {
                storage::write_atomic(out, |w| {
                    w.write_all(set.to_lines().as_bytes()).map_err(|source| {
                        storage::StorageError::Io {
                            path: out.clone(),
                            source,
                        }
                    })
                })?;
            }
            set
        }
        (None, None) => bail!("one of --grounded or --captions is required"),
    };
    let report = report_with_stopwords(&corpus, &reference, &grounded, &stop)?;
    println!("{}", report.to_json_line());
    Ok(())
}

fn train_matcher(a: TrainArgs) -> Result<()> {
    let reg = registry(&a.tok.wordpiece)?;
    let captions = load(&a.captions, &a.tok.tokenizer, &reg)?;
    let manifest = storage::read_manifest(&a.manifest)?;
    let pairs = storage::read_caption_pairs(&a.pairs, &manifest)?;
    let text = read_features(&a.text_features)?;
    let images = read_features(&a.image_features)?;
    ensure!(
        images.rows() == manifest.len(),
        "{} image feature rows for {} manifest entries",
        images.rows(),
        manifest.len()
    );
    let (mode, data) = match a.mode {
        Mode::Token => {
            ensure!(
                text.rows() == captions.token_count(),
                "{} text feature rows for {} caption tokens",
                text.rows(),
                captions.token_count()
            );
            (
                MatcherMode::TokenLevel,
                TrainingData::token_level(&pairs, &captions, &text, &images),
            )
        }
        Mode::Sentence => {
            ensure!(
                text.rows() == captions.sentences.len(),
                "{} text feature rows for {} captions",
                text.rows(),
                captions.sentences.len()
            );
            (
                MatcherMode::SentenceLevel,
                TrainingData::sentence_level(&pairs, &text, &images),
            )
        }
    };
    let model = MatcherModel::new(text.dim(), images.dim(), a.margin, mode, a.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        margin: a.margin,
    };
    eprintln!(
        "training on {} caption pairs for {} epochs",
        pairs.len(),
        a.epochs
    );
    let (trained, report) = train(&model, &data, &config)?;
    storage::write_checkpoint(&a.out, &trained)?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "steps": report.steps,
            "epoch_losses": report.epoch_losses,
        })
    );
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let model = storage::read_checkpoint(&a.checkpoint)?;
    let images = read_features(&a.image_features)?;
    let manifest = storage::read_manifest(&a.manifest)?;
    let vocab = VokenVocabulary::from_features(&model, &images, manifest.image_ids())?;
    storage::write_features(&a.out, &vocab.embeddings)?;
    println!(
        "{}",
        json!({ "size": vocab.size(), "dim": vocab.embeddings.dim() })
    );
    Ok(())
}

fn vokenize(a: VokenizeArgs) -> Result<()> {
    let reg = registry(&a.tok.wordpiece)?;
    let corpus = load(&a.corpus, &a.tok.tokenizer, &reg)?;
    let feats = read_features(&a.token_features)?;
    let model = storage::read_checkpoint(&a.checkpoint)?;
    model.require_mode(MatcherMode::TokenLevel)?;
    let index = read_index(&a.index)?;
    let per_sentence = split_by_sentence(&corpus, &feats)?;
    let assigned = vokenize_corpus(&corpus, &per_sentence, &model, &index)?;
    storage::write_vokens(
        &a.out,
        &to_records(&assigned),
        index.len() as u32,
        "contextual",
    )?;
    let scores: Vec<f64> = assigned
        .iter()
        .flat_map(|x| x.scores.iter().copied())
        .collect();
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    println!(
        "{}",
        json!({
            "sentences": assigned.len(),
            "tokens": scores.len(),
            "vocab_size": index.len(),
            "mean_score": mean,
        })
    );
    Ok(())
}

fn revokenize(a: RevokenizeArgs) -> Result<()> {
    let reg = registry(&a.wordpiece)?;
    let (header, records) = storage::read_vokens(&a.vokens)?;
    let source = load(&a.corpus, &a.from, &reg)?;
    let target = load(&a.corpus, &a.to, &reg)?;
    check_alignment(&records, &source)?;
    let (moved, summary) = revokenize_corpus(&source, &target, &to_assignments(records))?;
    storage::write_vokens(
        &a.out,
        &to_records(&moved),
        header.vocab_size,
        &header.strategy,
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let reg = registry(&a.tok.wordpiece)?;
    let corpus = load(&a.corpus, &a.tok.tokenizer, &reg)?;
    let kind = a.kind;
    let vocab_from_manifest = || -> Result<usize> {
        Ok(storage::read_manifest(require(&a.manifest, "manifest", kind)?)?.len())
    };
    let (assignments, vocab_size, strategy) = match kind {
        BaselineKind::Tf => {
            let manifest = storage::read_manifest(require(&a.manifest, "manifest", kind)?)?;
            let captions = load(
                require(&a.captions, "captions", kind)?,
                &a.tok.tokenizer,
                &reg,
            )?;
            let pairs = storage::read_caption_pairs(require(&a.pairs, "pairs", kind)?, &manifest)?;
            let tfm = build_tf(&pairs, &captions, manifest.len())?.with_gamma(a.gamma)?;
            (tf_labels(&corpus, &tfm, a.seed), manifest.len(), "tf")
        }
        BaselineKind::Sentence | BaselineKind::Propagated => {
            let cls = read_features(require(&a.sentence_features, "sentence-features", kind)?)?;
            let model = storage::read_checkpoint(require(&a.checkpoint, "checkpoint", kind)?)?;
            let index = read_index(require(&a.index, "index", kind)?)?;
            let labels = sentence_label(&corpus, &cls, &model, &index)?;
            if kind == BaselineKind::Sentence {
                let per_sentence = labels
                    .iter()
                    .map(|l| VokenAssignment {
                        sentence_id: l.sentence_id,
                        voken_ids: vec![l.voken_id],
                        scores: vec![l.score],
                    })
                    .collect();
                (per_sentence, index.len(), "sentence")
            } else {
                (propagate(&corpus, &labels)?, index.len(), "propagated")
            }
        }
        BaselineKind::Random => {
            let n = vocab_from_manifest()?;
            (
                ablation_labels(AblationKind::Random, &corpus, n, None, a.seed)?,
                n,
                "random",
            )
        }
        BaselineKind::Tokens => {
            let n = vocab_from_manifest()?;
            (
                ablation_labels(AblationKind::Tokens, &corpus, n, None, a.seed)?,
                n,
                "tokens",
            )
        }
        BaselineKind::Shuffle => {
            let (header, records) = storage::read_vokens(require(&a.vokens, "vokens", kind)?)?;
            check_alignment(&records, &corpus)?;
            let input = to_assignments(records);
            let n = header.vocab_size as usize;
            (
                ablation_labels(AblationKind::Shuffle, &corpus, n, Some(&input), a.seed)?,
                n,
                "shuffle",
            )
        }
    };
    storage::write_vokens(
        &a.out,
        &to_records(&assignments),
        vocab_size as u32,
        strategy,
    )?;
    println!(
        "{}",
        json!({
            "strategy": strategy,
            "sentences": assignments.len(),
            "vocab_size": vocab_size,
        })
    );
    Ok(())
}

fn open_probabilities(
    path: &Path,
    rows: usize,
    dim: usize,
) -> Result<FeatureReader<BufReader<File>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = FeatureReader::new(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    let h = reader.header();
    ensure!(
        h.role == FeatureRole::Probability,
        "{}: expected a probability file, found {:?}",
        path.display(),
        h.role
    );
    ensure!(
        h.rows == rows as u64 && h.dim as usize == dim,
        "{}: expected {rows} rows of width {dim}, found {} rows of width {}",
        path.display(),
        h.rows,
        h.dim
    );
    Ok(reader)
}

fn next_row(reader: &mut FeatureReader<BufReader<File>>) -> Result<Vec<f32>> {
    reader.next_row()?.context("probability file ended early")
}

fn eval_loss(a: EvalLossArgs) -> Result<()> {
    let (header, records) = storage::read_vokens(&a.vokens)?;
    let vocab = header.vocab_size as usize;
    let total_rows: usize = records.iter().map(|r| r.voken_ids.len()).sum();
    let mut reader = open_probabilities(&a.voken_probs, total_rows, vocab)?;
    let mut l_voken_cls = 0.0;
    let mut voken_positions = 0usize;
    for r in &records {
        let rows = (0..r.voken_ids.len())
            .map(|_| Ok(next_row(&mut reader)?.into_iter().map(f64::from).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let assignment = VokenAssignment {
            sentence_id: r.sentence_id,
            voken_ids: r.voken_ids.clone(),
            scores: Vec::new(),
        };
        l_voken_cls += voken_cls_loss(&rows, &assignment, vocab)
            .with_context(|| format!("sentence {}", r.sentence_id))?;
        voken_positions += r.voken_ids.iter().filter(|&&v| v != SENTINEL_VOKEN).count();
    }

    let mut l_mlm = 0.0;
    let mut masked_positions = 0usize;
    if let (Some(path), Some(corpus_path), Some(seed)) = (&a.mlm_probs, &a.corpus, a.seed) {
        let reg = registry(&a.tok.wordpiece)?;
        let corpus = load(corpus_path, &a.tok.tokenizer, &reg)?;
        let mut reader = open_probabilities(path, corpus.token_count(), corpus.type_count)?;
        for s in &corpus.sentences {
            let mask = mask_tokens(s, a.mask_ratio, seed)?;
            // Only masked rows are scored; the rest are skipped unconverted.
            let mut rows = Vec::with_capacity(s.len());
            for i in 0..s.len() {
                let row = next_row(&mut reader)?;
                rows.push(if mask.contains(i) {
                    row.into_iter().map(f64::from).collect()
                } else {
                    Vec::new()
                });
            }
            let targets: Vec<u32> = s.tokens.iter().map(|t| t.type_id).collect();
            l_mlm += mlm_loss(&rows, &targets, &mask)
                .with_context(|| format!("sentence {}", s.sentence_id))?;
            masked_positions += mask.len();
        }
    }

    let report = vlm_loss(l_voken_cls, l_mlm, a.lambda);
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    println!(
        "{}",
        json!({
            "l_mlm": report.l_mlm,
            "l_voken_cls": report.l_voken_cls,
            "lambda": report.lambda,
            "l_vlm": report.l_vlm,
            "masked_positions": masked_positions,
            "voken_positions": voken_positions,
            "mean_mlm": mean(report.l_mlm, masked_positions),
            "mean_voken_cls": mean(report.l_voken_cls, voken_positions),
        })
    );
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let reg = registry(&a.tok.wordpiece)?;
    let corpus = load(&a.corpus, &a.tok.tokenizer, &reg)?;
    let manifest = storage::read_manifest(&a.manifest)?;
    let (header, records) = storage::read_vokens(&a.vokens)?;
    check_alignment(&records, &corpus)?;

    let scores: Option<Vec<Vec<f64>>> = match (&a.token_features, &a.checkpoint, &a.index) {
        (Some(f), Some(c), Some(i)) => {
            let feats = read_features(f)?;
            let model = storage::read_checkpoint(c)?;
            let index = read_index(i)?;
            let per_sentence = split_by_sentence(&corpus, &feats)?;
            let mut all = Vec::with_capacity(records.len());
            for (r, m) in records.iter().zip(&per_sentence) {
                let mut s = Vec::with_capacity(r.voken_ids.len());
                for (row, &v) in r.voken_ids.iter().enumerate() {
                    if v < 0 || v as usize >= index.len() {
                        s.push(f64::NAN);
                        continue;
                    }
                    let q = model.project_token(&m.row_f64(row))?;
                    s.push(voken::matcher::dot(&q, index.row(v as usize)));
                }
                all.push(s);
            }
            Some(all)
        }
        _ => None,
    };

    let limit = a.limit.unwrap_or(usize::MAX);
    let sentences: Vec<Vec<DumpToken<'_>>> = corpus
        .sentences
        .iter()
        .zip(&records)
        .enumerate()
        .take(limit)
        .map(|(k, (s, r))| {
            s.tokens
                .iter()
                .zip(&r.voken_ids)
                .enumerate()
                .map(|(i, (t, &v))| DumpToken {
                    token: &t.text,
                    voken_id: v,
                    uri: usize::try_from(v)
                        .ok()
                        .and_then(|v| manifest.entries.get(v))
                        .map(|e| e.uri.as_str()),
                    score: scores.as_ref().map_or(f64::NAN, |s| s[k][i]),
                })
                .collect()
        })
        .collect();

    let text = match a.format {
        DumpFormat::Tsv => dump::tsv(&sentences),
        DumpFormat::Html => dump::html(&sentences, &header.strategy),
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
