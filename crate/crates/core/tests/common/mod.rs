//! Checks shared by the acceptance report and the focused integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voken::baselines::boltzmann;
use voken::corpus::{CaptionPair, Corpus};
use voken::features::{FeatureMatrix, FeatureRole};
use voken::index::{
    build_index, split_by_sentence, vokenize_corpus, Index, VokenAssignment, VokenVocabulary,
};
use voken::matcher::{
    dot, train, MatcherMode, MatcherModel, MlpParams, TrainConfig, TrainingData, Triplet,
    OUTPUT_DIM,
};
use voken::revokenize::{align, revokenize_corpus};
use voken::stats::{build_grounded_set, build_ngram_distribution, grounding_ratio, jsd, StopWords};
use voken::storage;
use voken::supervision::{mlm_loss, vlm_loss, voken_cls_loss, MaskAction, MaskSet};
use voken::synthetic::{generate, precision_at_1, SyntheticConfig};
use voken::tokenizer::{TokenizerRegistry, WordPieceTokenizer};

pub enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        if ok {
            Outcome::Pass(detail)
        } else {
            Outcome::Fail(detail)
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Outcome::Pass(_))
    }

    pub fn detail(&self) -> &str {
        match self {
            Outcome::Pass(d) | Outcome::Fail(d) | Outcome::Skip(d) => d,
        }
    }
}

fn fail(e: impl std::fmt::Display) -> Outcome {
    Outcome::Fail(e.to_string())
}

macro_rules! attempt {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return fail(e),
        }
    };
}

pub fn unit_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

// ---------------------------------------------------------------- retrieval

pub fn mips_equals_nn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = unit_rows(&mut rng, 4096, 64);
    let queries = unit_rows(&mut rng, 1000, 64);
    let start = Instant::now();
    let m = attempt!(FeatureMatrix::from_rows_f64(
        &rows,
        FeatureRole::ImageEmbedding
    ));
    let index = attempt!(Index::from_matrix(&m));
    let by_ip = attempt!(index.query_batch(&queries));
    let mut agree = 0;
    for (q, &(id, _)) in queries.iter().zip(&by_ip) {
        let (nn, _) = attempt!(index.nearest_by_distance(q));
        agree += usize::from(nn == id);
    }
    let elapsed = start.elapsed().as_secs_f64();
    Outcome::check(
        agree == queries.len() && elapsed < 5.0,
        format!(
            "{agree}/{} queries agree, {elapsed:.2}s (limit 5s)",
            queries.len()
        ),
    )
}

fn brute_force(query: &[f64], vocab: &FeatureMatrix) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..vocab.rows() {
        let s = dot(query, &vocab.row_f64(i));
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

pub fn vokenization_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let text: String = (0..50)
        .map(|i| {
            let n = rng.gen_range(1..20);
            (0..n)
                .map(|j| format!("t{i}x{j}"))
                .collect::<Vec<_>>()
                .join(" ")
                + "\n"
        })
        .collect();
    let corpus = attempt!(Corpus::from_text(
        "exact",
        &text,
        "whitespace",
        &TokenizerRegistry::with_defaults()
    ));
    let model = attempt!(MatcherModel::new(24, 16, 0.5, MatcherMode::TokenLevel, 5));
    let token_rows = random_rows(&mut rng, corpus.token_count(), 24);
    let mut image_rows = random_rows(&mut rng, 512, 16);
    // Exact duplicates force ties that must resolve to the lower id.
    for (dup, orig) in [(300, 7), (301, 7), (450, 120), (511, 0)] {
        image_rows[dup] = image_rows[orig].clone();
    }
    let token_feats = attempt!(FeatureMatrix::from_rows_f64(
        &token_rows,
        FeatureRole::TokenHidden
    ));
    let image_feats = attempt!(FeatureMatrix::from_rows_f64(
        &image_rows,
        FeatureRole::ImageEmbedding
    ));
    let ids = (0..512).map(|i| i.to_string()).collect();
    let vocab = attempt!(VokenVocabulary::from_features(&model, &image_feats, ids));
    let index = attempt!(build_index(&vocab));
    let per_sentence = attempt!(split_by_sentence(&corpus, &token_feats));
    let got = attempt!(vokenize_corpus(&corpus, &per_sentence, &model, &index));

    let mut total = 0;
    let mut agree = 0;
    let mut tie_tokens = 0;
    let mut row = 0;
    for a in &got {
        for (&v, &s) in a.voken_ids.iter().zip(&a.scores) {
            let q = attempt!(model.project_token(&token_feats.row_f64(row)));
            let (id, score) = brute_force(&q, &vocab.embeddings);
            total += 1;
            agree += usize::from(v as usize == id && s == score);
            tie_tokens += usize::from([7, 120, 0].contains(&id));
            row += 1;
        }
    }
    Outcome::check(
        agree == total && total > 0,
        format!(
            "{agree}/{total} tokens match brute force ({tie_tokens} resolved a duplicated row)"
        ),
    )
}

// ---------------------------------------------------------------- matcher

/// Pre-activations of the hidden layer, to keep draws away from ReLU kinks.
fn hidden_preactivations(p: &MlpParams, x: &[f64]) -> Vec<f64> {
    (0..p.hidden)
        .map(|j| {
            p.b1[j]
                + (0..p.input)
                    .map(|i| x[i] * p.w1[i * p.hidden + j])
                    .sum::<f64>()
        })
        .collect()
}

fn randomize<R: Rng>(p: &mut MlpParams, rng: &mut R) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Maximum over tensors of `|analytic - numeric| / max(|analytic|, |numeric|)`
/// (Euclidean norms), checking `coords` coordinates per tensor (all if `None`).
fn gradient_error<R: Rng>(
    model: &MatcherModel,
    triplets: &[Triplet<'_>],
    coords: Option<usize>,
    rng: &mut R,
) -> Result<f64, String> {
    const STEP: f64 = 1e-5;
    let (_, grads) = model
        .hinge_loss_and_grad(triplets)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for head in 0..2 {
        let analytic = if head == 0 {
            &grads.w_mlp
        } else {
            &grads.x_mlp
        };
        for t in 0..4 {
            let len = analytic.tensors()[t].len();
            let picks: Vec<usize> = match coords {
                Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
                _ => (0..len).collect(),
            };
            let mut diff = 0.0;
            let mut a_norm = 0.0;
            let mut n_norm = 0.0;
            for &c in &picks {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let p = if head == 0 {
                        &mut m.w_mlp
                    } else {
                        &mut m.x_mlp
                    };
                    p.tensors_mut()[t][c] += delta;
                    m.hinge_loss(triplets).map_err(|e| e.to_string())
                };
                let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
                let a = analytic.tensors()[t][c];
                diff += (a - numeric) * (a - numeric);
                a_norm += a * a;
                n_norm += numeric * numeric;
            }
            let scale = a_norm.sqrt().max(n_norm.sqrt());
            if scale > 0.0 {
                worst = worst.max(diff.sqrt() / scale);
            }
        }
    }
    Ok(worst)
}

/// One random draw of weights and a 4-token batch, redrawn until no hidden
/// unit and no hinge term sits within `1e-3` of its kink.
fn gradient_draw(
    seed: u64,
    dims: (usize, usize, usize, usize),
    coords: Option<usize>,
) -> Result<f64, String> {
    let (td, id, hidden, out) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut model =
            MatcherModel::with_widths(td, id, hidden, out, 0.5, MatcherMode::TokenLevel, rng.gen())
                .map_err(|e| e.to_string())?;
        randomize(&mut model.w_mlp, &mut rng);
        randomize(&mut model.x_mlp, &mut rng);
        let tokens = random_rows(&mut rng, 4, td);
        let images = random_rows(&mut rng, 4, id);
        let triplets: Vec<Triplet<'_>> = (0..4)
            .map(|k| Triplet {
                token: &tokens[k],
                positive: &images[k],
                negative: &images[(k + 1) % 4],
            })
            .collect();
        let near_relu = tokens
            .iter()
            .flat_map(|x| hidden_preactivations(&model.w_mlp, x))
            .chain(
                images
                    .iter()
                    .flat_map(|x| hidden_preactivations(&model.x_mlp, x)),
            )
            .any(|z| z.abs() < 1e-3);
        let mut near_hinge = false;
        let mut active = 0;
        for t in &triplets {
            let pos = model
                .relevance(t.token, t.positive)
                .map_err(|e| e.to_string())?;
            let neg = model
                .relevance(t.token, t.negative)
                .map_err(|e| e.to_string())?;
            let term = model.margin - pos + neg;
            near_hinge |= term.abs() < 1e-3;
            active += usize::from(term > 0.0);
        }
        if near_relu || near_hinge || active == 0 {
            continue;
        }
        return gradient_error(&model, &triplets, coords, &mut rng);
    }
}

pub fn gradient_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    // Every coordinate at small widths, then sampled coordinates at full width.
    for draw in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let dims = (
            rng.gen_range(2..7),
            rng.gen_range(2..7),
            rng.gen_range(4..12),
            rng.gen_range(2..6),
        );
        worst = worst.max(attempt!(gradient_draw(draw, dims, None)));
    }
    for draw in 0..20u64 {
        worst = worst.max(attempt!(gradient_draw(
            500 + draw,
            (32, 48, 256, OUTPUT_DIM),
            Some(48)
        )));
    }
    Outcome::check(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 40 draws (limit 1e-4)"),
    )
}

pub fn learnability() -> Outcome {
    let pool = attempt!(rayon::ThreadPoolBuilder::new().num_threads(1).build());
    pool.install(|| {
        let start = Instant::now();
        let config = SyntheticConfig::default();
        let data = attempt!(generate(&config));
        let model = attempt!(MatcherModel::new(config.token_dim, config.image_dim, 0.5, MatcherMode::TokenLevel, 3));
        let train_data = TrainingData::token_level(&data.train.pairs, &data.train.captions, &data.train.token_feats, &data.image_feats);
        let train_config = TrainConfig {
            epochs: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, report) = attempt!(train(&model, &train_data, &train_config));
        let vocab = attempt!(VokenVocabulary::from_features(&trained, &data.image_feats, data.image_ids()));
        let index = attempt!(build_index(&vocab));
        let eval_feats = attempt!(split_by_sentence(&data.eval.captions, &data.eval.token_feats));
        let assigned = attempt!(vokenize_corpus(&data.eval.captions, &eval_feats, &trained, &index));
        let p = precision_at_1(&assigned, &data.eval.token_clusters, &data.image_clusters);
        let elapsed = start.elapsed().as_secs_f64();
        Outcome::check(
            p > 0.9 && elapsed < 120.0,
            format!(
                "held-out precision@1 {p:.3} (> 0.9), {} training tokens, final loss {:.4}, {elapsed:.1}s single-threaded (limit 120s)",
                data.train.captions.token_count(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            ),
        )
    })
}

// ---------------------------------------------------------------- revokenization

const WORDS: &[&str] = &[
    "play",
    "playing",
    "played",
    "player",
    "the",
    "a",
    "dog",
    "dogs",
    "runs",
    "running",
    "on",
    "grass",
    "skyscraper",
    "bananas",
    "softball",
    "cat.",
    "big,",
    "zebra",
    "unhappily",
    "tennis",
];

pub fn subword_tokenizer() -> WordPieceTokenizer {
    let mut vocab: Vec<String> = [
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "play", "##ing", "##ed", "##er", "the", "a", "dog",
        "##s", "run", "##n",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    vocab.extend(('a'..='z').map(|c| c.to_string()));
    vocab.extend(('a'..='z').map(|c| format!("##{c}")));
    vocab.extend([".", ","].map(String::from));
    WordPieceTokenizer::from_entries(vocab, true)
}

pub fn revokenization() -> Outcome {
    let mut registry = TokenizerRegistry::with_defaults();
    attempt!(registry.insert("subword", std::sync::Arc::new(subword_tokenizer())));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let text: String = (0..200)
        .map(|_| {
            let n = rng.gen_range(1..12);
            (0..n)
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
                + "\n"
        })
        .collect();
    let words = attempt!(Corpus::from_text("rev", &text, "whitespace", &registry));
    let pieces = attempt!(Corpus::from_text("rev", &text, "subword", &registry));
    let source: Vec<VokenAssignment> = words
        .sentences
        .iter()
        .map(|s| VokenAssignment {
            sentence_id: s.sentence_id,
            voken_ids: (0..s.len()).map(|_| rng.gen_range(0..50000)).collect(),
            scores: (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();

    let (moved, summary) = attempt!(revokenize_corpus(&words, &pieces, &source));
    let mut one_each = moved.len() == pieces.sentences.len();
    let mut contained = true;
    for ((a, t), (src, w)) in moved
        .iter()
        .zip(&pieces.sentences)
        .zip(source.iter().zip(&words.sentences))
    {
        one_each &= a.voken_ids.len() == t.len() && a.voken_ids.iter().all(|&v| v >= 0);
        // Each piece lies inside one word, which must be the source of its voken.
        for (tok, &v) in t.tokens.iter().zip(&a.voken_ids) {
            let owner = w
                .tokens
                .iter()
                .position(|x| x.span_start <= tok.span_start && tok.span_end <= x.span_end);
            contained &= owner.map(|o| src.voken_ids[o]) == Some(v);
        }
    }

    let (same, _) = attempt!(revokenize_corpus(&words, &words, &source));
    let records = |a: &[VokenAssignment]| -> Result<Vec<u8>, storage::StorageError> {
        let recs: Vec<storage::VokenRecord> = a.iter().map(storage::VokenRecord::from).collect();
        let mut buf = Vec::new();
        storage::encode_vokens(&recs, 50000, "contextual", &mut buf)?;
        Ok(buf)
    };
    let identical = attempt!(records(&source)) == attempt!(records(&same));

    let play = attempt!(play_ing_example());
    Outcome::check(
        one_each && contained && identical && play,
        format!(
            "{} sentences, {} subword tokens, one voken each: {one_each}, inherited from containing word: {contained}, identity transfer byte-identical: {identical}, play/##ing example: {play}",
            summary.sentences, summary.target_tokens
        ),
    )
}

fn play_ing_example() -> Result<bool, String> {
    let mut registry = TokenizerRegistry::with_defaults();
    registry
        .insert("subword", std::sync::Arc::new(subword_tokenizer()))
        .map_err(|e| e.to_string())?;
    let a =
        Corpus::from_text("p", "playing\n", "whitespace", &registry).map_err(|e| e.to_string())?;
    let b = Corpus::from_text("p", "playing\n", "subword", &registry).map_err(|e| e.to_string())?;
    let pieces: Vec<&str> = b.sentences[0]
        .tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect();
    let map = align(&a.sentences[0], &b.sentences[0]).map_err(|e| e.to_string())?;
    Ok(pieces == ["play", "##ing"]
        && map.ind == [0, 0]
        && (map.iou[0] - 4.0 / 7.0).abs() <= 1e-9
        && (map.iou[1] - 3.0 / 7.0).abs() <= 1e-9)
}

// ---------------------------------------------------------------- losses

pub fn loss_arithmetic() -> Outcome {
    let tol = 1e-6;
    let mask = MaskSet {
        sentence_id: 0,
        masked_positions: vec![0, 2],
        replacement: vec![MaskAction::MaskSymbol; 2],
    };
    let mlm = attempt!(mlm_loss(
        &[
            vec![0.25, 0.5, 0.25],
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.25, 0.25]
        ],
        &[1, 0, 2],
        &mask
    ));
    let vokens = VokenAssignment {
        sentence_id: 0,
        voken_ids: vec![0, 1, 2],
        scores: vec![0.0; 3],
    };
    let cls = attempt!(voken_cls_loss(
        &[
            vec![0.1, 0.9, 0.0],
            vec![0.8, 0.2, 0.0],
            vec![0.0, 0.0, 1.0]
        ],
        &vokens,
        3
    ));
    let vlm = vlm_loss(cls, mlm, 1.0).l_vlm;
    let mlm_exact = -(0.5f64.ln() + 0.25f64.ln());
    let cls_exact = -(0.1f64.ln() + 0.2f64.ln() + 1.0f64.ln());
    let hand_ok = (mlm - mlm_exact).abs() <= tol
        && (cls - cls_exact).abs() <= tol
        && (vlm - (mlm_exact + cls_exact)).abs() <= tol
        && (mlm - 2.0794).abs() < 1e-4
        && (cls - 3.912).abs() < 1e-3
        && (vlm - 5.9914).abs() < 1e-4;

    let uniform = |v: usize| vec![1.0 / v as f64; v];
    let mlm_uniform = attempt!(mlm_loss(
        &[uniform(30000), uniform(30000), uniform(30000)],
        &[5, 17, 29999],
        &MaskSet {
            sentence_id: 0,
            masked_positions: vec![0, 2],
            replacement: vec![MaskAction::MaskSymbol; 2],
        }
    ));
    let cls_uniform = attempt!(voken_cls_loss(
        &[uniform(50000), uniform(50000)],
        &VokenAssignment {
            sentence_id: 0,
            voken_ids: vec![3, 49999],
            scores: vec![0.0; 2],
        },
        50000
    ));
    let uniform_ok = (mlm_uniform - 2.0 * 30000f64.ln()).abs() <= 1e-9
        && (cls_uniform - 2.0 * 50000f64.ln()).abs() <= 1e-9;
    Outcome::check(
        hand_ok && uniform_ok,
        format!(
            "mlm {mlm:.7}, voken_cls {cls:.7}, vlm {vlm:.7}; uniform mlm {mlm_uniform:.9} (2 ln 30000), uniform voken_cls {cls_uniform:.9} (2 ln 50000)"
        ),
    )
}

// ---------------------------------------------------------------- statistics

pub const PROPERTY_CASES: u32 = 256;

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases: PROPERTY_CASES,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn corpus_text(alphabet: &'static str) -> impl Strategy<Value = String> {
    let word =
        proptest::string::string_regex(&format!("[{alphabet}]{{1,2}}")).expect("valid regex");
    proptest::collection::vec(
        proptest::collection::vec(word, 2..10).prop_map(|w| w.join(" ")),
        1..20,
    )
    .prop_map(|lines| lines.join("\n") + "\n")
}

fn corpus(text: &str) -> Corpus {
    Corpus::from_text("p", text, "whitespace", &TokenizerRegistry::with_defaults())
        .expect("generated corpus parses")
}

pub fn stats_properties() -> Outcome {
    let mut results = Vec::new();
    let symmetric = runner().run(
        &(corpus_text("a-e"), corpus_text("a-e"), 1usize..3),
        |(a, b, n)| {
            let p = build_ngram_distribution(&corpus(&a), n).unwrap();
            let q = build_ngram_distribution(&corpus(&b), n).unwrap();
            let (pq, qp) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
            prop_assert!(
                (pq - qp).abs() <= 1e-12 && (0.0..=1.0).contains(&pq),
                "{pq} vs {qp}"
            );
            Ok(())
        },
    );
    results.push(("symmetry", symmetric.map_err(|e| e.to_string())));
    let self_zero = runner().run(&(corpus_text("a-e"), 1usize..3), |(a, n)| {
        let p = build_ngram_distribution(&corpus(&a), n).unwrap();
        let d = jsd(&p, &p).unwrap();
        prop_assert!(d.abs() <= 1e-12, "{d}");
        Ok(())
    });
    results.push(("self-divergence zero", self_zero.map_err(|e| e.to_string())));
    let disjoint = runner().run(
        &(corpus_text("a-e"), corpus_text("f-j"), 1usize..3),
        |(a, b, n)| {
            let p = build_ngram_distribution(&corpus(&a), n).unwrap();
            let q = build_ngram_distribution(&corpus(&b), n).unwrap();
            let d = jsd(&p, &q).unwrap();
            prop_assert!((d - 1.0).abs() <= 1e-12, "{d}");
            Ok(())
        },
    );
    results.push(("disjoint support one", disjoint.map_err(|e| e.to_string())));
    let monotone = runner().run(&(corpus_text("a-f"), 0u64..8, 0u64..8), |(a, t1, t2)| {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let c = corpus(&a);
        let stop: StopWords = ["a", "b"].into_iter().collect();
        let low = build_grounded_set(&c, &stop, lo).unwrap();
        let high = build_grounded_set(&c, &stop, hi).unwrap();
        prop_assert!(high.token_types.is_subset(&low.token_types));
        Ok(())
    });
    results.push(("grounded set monotone", monotone.map_err(|e| e.to_string())));

    let failures: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    let names: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
    if failures.is_empty() {
        Outcome::Pass(format!(
            "{} ({PROPERTY_CASES} cases each)",
            names.join(", ")
        ))
    } else {
        Outcome::Fail(failures.join("; "))
    }
}

pub fn dataset_grounding() -> Outcome {
    let (Some(coco), Some(wiki)) = (
        std::env::var_os("VOKEN_COCO_CAPTIONS"),
        std::env::var_os("VOKEN_WIKI103"),
    ) else {
        return Outcome::Skip(
            "set VOKEN_COCO_CAPTIONS and VOKEN_WIKI103 to caption and article text files".into(),
        );
    };
    let registry = TokenizerRegistry::with_defaults();
    let coco = attempt!(voken::corpus::load_corpus(
        &PathBuf::from(coco),
        "basic",
        &registry
    ));
    let wiki = attempt!(voken::corpus::load_corpus(
        &PathBuf::from(wiki),
        "basic",
        &registry
    ));
    let stop = StopWords::english();
    let grounded = attempt!(build_grounded_set(&coco, &stop, 100));
    let r_wiki = attempt!(grounding_ratio(&wiki, &grounded, &stop));
    let r_coco = attempt!(grounding_ratio(&coco, &grounded, &stop));
    let samples = ["skyscraper", "bananas", "softball"];
    let present: Vec<bool> = samples.iter().map(|t| grounded.contains(t)).collect();
    Outcome::check(
        (r_wiki - 0.266).abs() <= 0.03 && (r_coco - 0.548).abs() <= 0.04 && present.iter().all(|&p| p),
        format!(
            "Wiki103 {r_wiki:.3} (0.266 ± 0.03), COCO {r_coco:.3} (0.548 ± 0.04), {} grounded types, samples present {present:?}",
            grounded.len()
        ),
    )
}

// ---------------------------------------------------------------- baselines

pub fn boltzmann_retrieval() -> Outcome {
    let hand = boltzmann(&[0.2, 0.1], 0.1);
    let hand_ok = (hand[0] - 0.7311).abs() <= 1e-4 && (hand[1] - 0.2689).abs() <= 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_sum: f64 = 0.0;
    let mut sharpening = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..600);
        let tf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = boltzmann(&tf, 0.01);
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        let mut previous = 0.0;
        for gamma in [1.0, 0.1, 0.01, 0.001] {
            let max = boltzmann(&tf, gamma).into_iter().fold(0.0, f64::max);
            sharpening &= max >= previous - 1e-12;
            previous = max;
        }
    }
    Outcome::check(
        hand_ok && worst_sum <= 1e-9 && sharpening,
        format!(
            "hand case ({:.4}, {:.4}), worst |sum - 1| {worst_sum:.1e} over 1000 tables, max probability non-decreasing as gamma falls: {sharpening}",
            hand[0], hand[1]
        ),
    )
}

// ---------------------------------------------------------------- storage

pub fn storage_round_trips() -> Outcome {
    let dir = attempt!(tempfile::tempdir());
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut checks = Vec::new();

    for (role, (rows, dim)) in [
        (FeatureRole::TokenHidden, (37, 3072)),
        (FeatureRole::ImageEmbedding, (5, 2048)),
        (FeatureRole::SentenceCls, (0, 768)),
        (FeatureRole::Probability, (3, 7)),
    ] {
        let mut values: Vec<f32> = (0..rows * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        if let Some(v) = values.first_mut() {
            *v = -0.0;
        }
        let m = attempt!(FeatureMatrix::new(rows, dim, role, values));
        let path = dir.path().join(format!("f{}.bin", role as u8));
        attempt!(storage::write_features(&path, &m));
        let bytes = attempt!(std::fs::read(&path));
        let back = attempt!(storage::read_features(&path));
        let same_bits = back
            .values()
            .iter()
            .zip(m.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let mut again = Vec::new();
        attempt!(storage::encode_features(&back, &mut again));
        checks.push(
            bytes.len() == 21 + rows * dim * 4
                && back.role() == role
                && same_bits
                && again == bytes,
        );
    }

    let records: Vec<storage::VokenRecord> = (0..40u64)
        .map(|i| storage::VokenRecord {
            sentence_id: i,
            voken_ids: (0..i % 7).map(|_| rng.gen_range(-1..1000)).collect(),
        })
        .collect();
    let path = dir.path().join("v.bin");
    attempt!(storage::write_vokens(&path, &records, 1000, "contextual"));
    let bytes = attempt!(std::fs::read(&path));
    let (header, back) = attempt!(storage::read_vokens(&path));
    let mut again = Vec::new();
    attempt!(storage::encode_vokens(
        &back,
        header.vocab_size,
        &header.strategy,
        &mut again
    ));
    checks.push(back == records && again == bytes);

    let model = attempt!(MatcherModel::with_widths(
        5,
        4,
        8,
        3,
        0.5,
        MatcherMode::SentenceLevel,
        2
    ));
    let path = dir.path().join("m.ckpt");
    attempt!(storage::write_checkpoint(&path, &model));
    let bytes = attempt!(std::fs::read(&path));
    let back = attempt!(storage::read_checkpoint(&path));
    let mut again = Vec::new();
    attempt!(storage::encode_checkpoint(&back, &mut again));
    checks.push(back == model && again == bytes);

    let entries = (0..6)
        .map(|i| storage::ManifestEntry {
            image_id: format!("vg{i}"),
            uri: format!("images/{i}.jpg"),
        })
        .collect();
    let manifest = attempt!(storage::ImageManifest::from_entries(entries));
    let path = dir.path().join("manifest.tsv");
    attempt!(storage::write_manifest(&path, &manifest));
    let back = attempt!(storage::read_manifest(&path));
    checks.push(back == manifest && attempt!(std::fs::read_to_string(&path)) == manifest.to_tsv());

    let pairs: Vec<CaptionPair> = (0..10)
        .map(|i| CaptionPair {
            sentence_id: i,
            image_id: (i % 6) as usize,
        })
        .collect();
    let path = dir.path().join("pairs.tsv");
    attempt!(storage::write_caption_pairs(&path, &pairs, &manifest));
    let bytes = attempt!(std::fs::read(&path));
    let back = attempt!(storage::read_caption_pairs(&path, &manifest));
    attempt!(storage::write_caption_pairs(&path, &back, &manifest));
    checks.push(back == pairs && attempt!(std::fs::read(&path)) == bytes);

    let names = [
        "features (4 roles)",
        "vokens",
        "checkpoint",
        "manifest",
        "caption pairs",
    ];
    let failed: Vec<&str> = names
        .iter()
        .zip(&checks)
        .filter(|(_, &ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    Outcome::check(
        failed.is_empty(),
        if failed.is_empty() {
            format!(
                "{} bitwise identical, feature length 21 + rows*dim*4",
                names.join(", ")
            )
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    )
}
