//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Run with `cargo test -p nepqa-cli --test acceptance`.

#[path = "../../core/tests/common/grad_cases.rs"]
mod grad_cases;
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nepqa_cli::commands::{self, AnyModel, Cell};
use nepqa_core::corpus::{self, DatasetSplit, QAPair};
use nepqa_core::generative::train_seq2seq;
use nepqa_core::metrics::{accuracy, bleu, micro_f1, BleuInputs};
use nepqa_core::nn::gradcheck::check_gradients;
use nepqa_core::retrieval::train_classifier;
use nepqa_core::textkit::{encode, Token, Vocabulary, END, PAD, START};
use nepqa_core::{
    DialogueManager, EncoderClassifierConfig, ModelKind, PipelineConfig, RulesFile, Seq2SeqConfig, TrainingSpec,
    Verdict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CAUSAL_CORRUPTIONS: usize = 10;
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(120);
const RETRIEVAL_CONFIDENCE: f64 = 0.9;
const GENERATIVE_BUDGET: Duration = Duration::from_secs(300);
const GENERATIVE_MIN_EXACT: usize = 6;
const GENERATIVE_MIN_BLEU1: f64 = 0.9;
const BLEU_TOL: f64 = 1e-9;
const MICRO_CASES: usize = 1000;
const ENCODE_BOUND: usize = 250;
const GREETING_REPLY: &str = "नमस्ते, म हजुरलाई कसरी सहयोग गर्न सक्छु?";
const FALLBACK: &str = "माफ गर्नुहोला, मैले तपाईंको प्रश्न बुझ्न सकिन";

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy() -> Vec<QAPair> {
    corpus::parse_dataset(include_str!("../../../data/toy_faq.jsonl")).unwrap().pairs
}

fn train_only(pairs: Vec<QAPair>) -> DatasetSplit {
    DatasetSplit {
        train: pairs,
        validation: vec![],
        test: vec![],
        seed: 0,
    }
}

fn pipeline(stem: bool) -> PipelineConfig {
    PipelineConfig {
        max_len: 32,
        ..Default::default()
    }
    .with_stemming(stem)
}

fn spec(lr: f64, epochs: usize, seed: u64) -> TrainingSpec {
    TrainingSpec {
        learning_rate: lr,
        epochs,
        seed,
        ..Default::default()
    }
}

fn tiny_seq2seq() -> Seq2SeqConfig {
    Seq2SeqConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        dropout_rate: 0.0,
        max_decode_len: 20,
        ..Default::default()
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut n_cases = 0;
    for seed in 0..GRAD_SEEDS {
        for case in grad_cases::cases(seed) {
            let report = check_gradients(&case.store, &case.loss, GRAD_STEP).map_err(|e| e.to_string())?;
            let err = report.max_relative_error();
            ensure(err < GRAD_TOL, || format!("seed {seed} {}: rel err {err:e}", case.name))?;
            if err > worst.1 {
                worst = (format!("{} seed {seed}", case.name), err);
            }
            n_cases += 1;
        }
    }
    let took = t0.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{n_cases} checks over {GRAD_SEEDS} seeds, worst {:.2e} ({}) < {GRAD_TOL:e}, {:.1}s < {}s",
        worst.1,
        worst.0,
        took.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    ))
}

fn causality() -> Outcome {
    let pairs: Vec<QAPair> = toy().into_iter().take(8).collect();
    let m = train_seq2seq(&train_only(pairs.clone()), &tiny_seq2seq(), &spec(1e-3, 3, 3), &pipeline(false))
        .map_err(|e| e.to_string())?
        .model;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = m.vocab().len();
    let q = &pairs[0].question_raw;
    let base: Vec<usize> = std::iter::once(START).chain((0..11).map(|_| rng.gen_range(4..v))).collect();
    let reference = m.teacher_forced_logits(q, &base).map_err(|e| e.to_string())?;
    for k in 0..CAUSAL_CORRUPTIONS {
        let t = rng.gen_range(0..base.len() - 1);
        let mut corrupt = base.clone();
        for id in corrupt.iter_mut().skip(t + 1) {
            *id = rng.gen_range(0..v);
        }
        let z = m.teacher_forced_logits(q, &corrupt).map_err(|e| e.to_string())?;
        for pos in 0..=t {
            let same = z.row(pos).iter().zip(reference.row(pos)).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("corruption {k}: position {pos} changed after corrupting > {t}"))?;
        }
    }
    Ok(format!("{CAUSAL_CORRUPTIONS} corruptions, prefix logits bit-identical"))
}

fn retrieval_overfit() -> Outcome {
    let pairs: Vec<QAPair> = toy().into_iter().take(16).collect();
    let n_cat = pairs.iter().map(|p| p.category_id).collect::<std::collections::BTreeSet<_>>().len();
    ensure(n_cat == 4, || format!("toy slice has {n_cat} categories"))?;
    let cfg = EncoderClassifierConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ff: 64,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let m = train_classifier(&train_only(pairs.clone()), &cfg, &spec(1e-3, 200, 7), &pipeline(false))
        .map_err(|e| e.to_string())?
        .model;
    let took = t0.elapsed();
    let acc = m.evaluate(&pairs).map_err(|e| e.to_string())?.accuracy.unwrap_or(0.0);
    ensure(acc == 1.0, || format!("train accuracy {acc}"))?;
    let mut min_conf = 1.0f64;
    for p in &pairs {
        let c = m.classify(&p.question_raw).map_err(|e| e.to_string())?;
        ensure(c.category_id == p.category_id, || format!("{} misclassified", p.question_raw))?;
        min_conf = min_conf.min(c.confidence);
    }
    ensure(min_conf > RETRIEVAL_CONFIDENCE, || format!("min confidence {min_conf:.4}"))?;
    ensure(took < RETRIEVAL_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "16 questions, accuracy 1.0, min confidence {min_conf:.4} > {RETRIEVAL_CONFIDENCE}, {:.1}s < {}s",
        took.as_secs_f64(),
        RETRIEVAL_BUDGET.as_secs()
    ))
}

fn eight_pairs() -> Vec<QAPair> {
    let qa = [
        ("गर्भावस्थामा के खानुपर्छ", "फलफूल र दाल खानुपर्छ"),
        ("गर्भावस्थामा व्यायाम गर्न हुन्छ", "हल्का हिँडडुल गर्न हुन्छ"),
        ("गर्भावस्थाका लक्षण के हुन्", "वाकवाकी र थकान हुन्छ"),
        ("गर्भ जाँच कति पटक गराउने", "कम्तीमा चार पटक गराउने"),
        ("सुत्केरी पछि के खाने", "झोल र पोषिलो खाना खाने"),
        ("बच्चालाई दूध कति पटक खुवाउने", "दिनमा आठ देखि बाह्र पटक"),
        ("गर्भावस्थामा निद्रा कति चाहिन्छ", "राति आठ घण्टा सुत्नुपर्छ"),
        ("खोप कहिले लगाउने", "स्वास्थ्यकर्मीको सल्लाह अनुसार लगाउने"),
    ];
    qa.iter()
        .enumerate()
        .map(|(i, (q, a))| QAPair {
            id: i,
            question_raw: q.to_string(),
            answer: a.to_string(),
            category_id: i,
        })
        .collect()
}

fn generative_overfit() -> Outcome {
    let pairs = eight_pairs();
    let cfg = Seq2SeqConfig {
        d_model: 32,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 64,
        dropout_rate: 0.0,
        max_decode_len: 16,
        ..Default::default()
    };
    let t0 = Instant::now();
    let m = train_seq2seq(&train_only(pairs.clone()), &cfg, &spec(1e-3, 500, 7), &pipeline(false))
        .map_err(|e| e.to_string())?
        .model;
    let took = t0.elapsed();
    let mut exact = 0;
    for p in &pairs {
        if m.generate(&p.question_raw).map_err(|e| e.to_string())?.0 == p.answer {
            exact += 1;
        }
    }
    let b1 = m.evaluate(&pairs, 1).map_err(|e| e.to_string())?.bleu_at(1).unwrap_or(0.0);
    ensure(exact >= GENERATIVE_MIN_EXACT, || format!("exact {exact}/8"))?;
    ensure(b1 >= GENERATIVE_MIN_BLEU1, || format!("BLEU-1 {b1:.4}"))?;
    ensure(took < GENERATIVE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "exact {exact}/8 >= {GENERATIVE_MIN_EXACT}/8, BLEU-1 {b1:.4} >= {GENERATIVE_MIN_BLEU1}, {:.1}s < {}s",
        took.as_secs_f64(),
        GENERATIVE_BUDGET.as_secs()
    ))
}

fn metrics_oracles() -> Outcome {
    let score = |c: &str, r: &str, n: usize| -> Result<f64, String> {
        let m = bleu(&BleuInputs::from_text(&[c], &[r], n)).map_err(|e| e.to_string())?;
        Ok(m[&n])
    };
    let hand = [
        ("क ख ग", "क ख घ", 1, 2.0 / 3.0),
        ("क ख ग", "क ख घ", 2, ((2.0 / 3.0) * 0.5f64).sqrt()),
        ("क", "क ख ग ग", 1, (1.0f64 - 4.0).exp()),
    ];
    for (c, r, n, want) in hand {
        let got = score(c, r, n)?;
        ensure((got - want).abs() <= BLEU_TOL, || format!("BLEU-{n}({c} | {r}) = {got}, want {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..MICRO_CASES {
        let len = rng.gen_range(1..40);
        let k = rng.gen_range(1..7);
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let a = accuracy(&gold, &pred).map_err(|e| e.to_string())?;
        let f = micro_f1(&gold, &pred).map_err(|e| e.to_string())?;
        ensure(a == f, || format!("case {i}: accuracy {a} != micro_f1 {f}"))?;
    }
    let words = ["क", "ख", "ग", "घ", "ङ", "च"];
    for i in 0..50 {
        let corpus: Vec<Vec<String>> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(4..12)).map(|_| words[rng.gen_range(0..words.len())].to_owned()).collect())
            .collect();
        let m = bleu(&BleuInputs::single(corpus.clone(), corpus, 4)).map_err(|e| e.to_string())?;
        ensure(m.values().all(|&v| v == 1.0), || format!("identical corpus {i}: {m:?}"))?;
    }
    Ok(format!(
        "3 hand BLEU values within {BLEU_TOL:e}, micro_f1 == accuracy on {MICRO_CASES} cases, identical corpora BLEU-1..4 = 1"
    ))
}

fn stemming(work: &Path) -> Outcome {
    let stats = corpus::stats(&toy(), &pipeline(false));
    ensure(stats.vocab_size_stemmed < stats.vocab_size_raw, || format!("{stats:?}"))?;
    let cfg = common::tiny_config(ModelKind::Retrieval, 3);
    let data = work.join("ablate-data");
    commands::prepare(&common::toy_dataset(), &data, &cfg).map_err(|e| e.to_string())?;
    let cells: Vec<Cell> = [ModelKind::Retrieval, ModelKind::Generative]
        .into_iter()
        .flat_map(|model_kind| [false, true].map(|stemming| Cell { model_kind, stemming }))
        .collect();
    let report = commands::ablate(&data, &work.join("ablate"), &cfg, &cells).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 4, || format!("{} rows", report.rows.len()))?;
    for row in &report.rows {
        ensure(row.status == "ok" && row.report.is_some(), || format!("{:?}: {:?}", row.cell, row.error))?;
        let r = row.report.as_ref().unwrap();
        let filled = match row.cell.model_kind {
            ModelKind::Retrieval => r.accuracy.is_some() && r.micro_f1.is_some(),
            ModelKind::Generative => r.bleu_at(1).is_some() && r.per_token_accuracy.is_some(),
        };
        ensure(filled, || format!("{:?} has empty metrics", row.cell))?;
    }
    Ok(format!(
        "vocab stemmed {} < raw {}, ablation grid 4/4 cells populated",
        stats.vocab_size_stemmed, stats.vocab_size_raw
    ))
}

fn dialogue() -> Outcome {
    let rules = RulesFile::default();
    let pairs: Vec<QAPair> = toy().into_iter().take(16).collect();
    let cls = EncoderClassifierConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let mut checked = 0;
    for stem in [false, true] {
        let split = train_only(pairs.clone());
        let r = train_classifier(&split, &cls, &spec(1e-3, 2, 1), &pipeline(stem)).map_err(|e| e.to_string())?;
        let g = train_seq2seq(&split, &tiny_seq2seq(), &spec(1e-3, 2, 1), &pipeline(stem)).map_err(|e| e.to_string())?;
        let backends: [Arc<dyn nepqa_core::Backend>; 2] = [Arc::new(r.model), Arc::new(g.model)];
        for backend in backends {
            let kind = backend.kind();
            let dm = DialogueManager::new(&rules, backend).map_err(|e| e.to_string())?;
            let t = dm.handle("acceptance", "नमस्ते");
            ensure(t.verdict == Verdict::Greeting && t.reply == GREETING_REPLY, || {
                format!("{kind} stem={stem}: greeting got {:?}", t.reply)
            })?;
            for oov in ["झ्याल ढोका", "qwerty zzz"] {
                let t = dm.handle("acceptance", oov);
                ensure(t.verdict == Verdict::OutOfScope && t.reply == FALLBACK, || {
                    format!("{kind} stem={stem}: {oov:?} got {:?}", t.reply)
                })?;
            }
            checked += 1;
        }
    }
    Ok(format!("greeting and fallback verbatim for {checked} backend/pipeline combinations"))
}

fn determinism(work: &Path) -> Outcome {
    let mut out = Vec::new();
    for kind in [ModelKind::Retrieval, ModelKind::Generative] {
        let cfg = common::tiny_config(kind, 3);
        let mut files = Vec::new();
        for run in ["a", "b"] {
            let data = work.join(format!("det-{kind}-{run}-data"));
            let model = work.join(format!("det-{kind}-{run}-model"));
            commands::prepare(&common::toy_dataset(), &data, &cfg).map_err(|e| e.to_string())?;
            commands::train(&data, &model, &cfg).map_err(|e| e.to_string())?;
            files.push((data, model));
        }
        let (a, b) = (&files[0], &files[1]);
        for f in [commands::TRAIN_FILE, commands::VAL_FILE, commands::TEST_FILE, commands::STATS_FILE] {
            let same = std::fs::read(a.0.join(f)).ok() == std::fs::read(b.0.join(f)).ok();
            ensure(same, || format!("{kind}: {f} differs"))?;
        }
        let ckpt_a = std::fs::read(a.1.join(commands::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
        let ckpt_b = std::fs::read(b.1.join(commands::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
        ensure(ckpt_a == ckpt_b, || format!("{kind}: checkpoints differ"))?;
        let ma = AnyModel::load(&a.1.join(commands::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
        let mb = AnyModel::load(&b.1.join(commands::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
        let same_params = match (&ma, &mb) {
            (AnyModel::Retrieval(x), AnyModel::Retrieval(y)) => x.params() == y.params(),
            (AnyModel::Generative(x), AnyModel::Generative(y)) => x.params() == y.params(),
            _ => false,
        };
        ensure(same_params, || format!("{kind}: weights differ"))?;
        out.push(format!("{kind} {} bytes", ckpt_a.len()));
    }
    Ok(format!("splits byte-identical, weights bit-identical ({})", out.join(", ")))
}

fn pipeline_contract() -> Outcome {
    let words: Vec<Token> = (0..50).map(|i| Token::new(format!("शब्द{i}")).unwrap()).collect();
    let vocab = Vocabulary::build([words.as_slice()], 1).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    ensure(cfg.max_len == ENCODE_BOUND, || format!("default max_len {}", cfg.max_len))?;
    let mut rng = ChaCha8Rng::seed_from_u64(250);
    let mut lengths: Vec<usize> = vec![0, 1, 247, 248, 249, 250, 251, 600];
    lengths.extend((0..300).map(|_| rng.gen_range(0..=600)));
    let total = lengths.len();
    for n in lengths {
        let tokens: Vec<Token> = (0..n).map(|_| words[rng.gen_range(0..words.len())].clone()).collect();
        for bounds in [false, true] {
            let ids = encode(&tokens, &vocab, &cfg, bounds);
            ensure(ids.len() == ENCODE_BOUND, || format!("n={n} bounds={bounds}: length {}", ids.len()))?;
            if bounds {
                let content = n.min(ENCODE_BOUND - 2);
                ensure(ids[0] == START && ids[content + 1] == END, || format!("n={n}: START/END misplaced"))?;
                ensure(ids[content + 2..].iter().all(|&i| i == PAD), || format!("n={n}: padding"))?;
            } else {
                let content = n.min(ENCODE_BOUND);
                ensure(ids[content..].iter().all(|&i| i == PAD), || format!("n={n}: padding"))?;
            }
        }
    }
    Ok(format!("{} lengths in 0..=600 encode to exactly {ENCODE_BOUND} ids, END kept on truncation", total))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("causality", Box::new(causality)),
        ("retrieval overfit oracle", Box::new(retrieval_overfit)),
        ("generative overfit oracle", Box::new(generative_overfit)),
        ("metrics oracles", Box::new(metrics_oracles)),
        ("stemming mechanism", Box::new(|| stemming(w))),
        ("dialogue rules", Box::new(dialogue)),
        ("determinism", Box::new(|| determinism(w))),
        ("pipeline contract", Box::new(pipeline_contract)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
