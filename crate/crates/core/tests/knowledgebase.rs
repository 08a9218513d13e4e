use mmtl::app::{ingest_and_classify, KnowledgeBase, LabelNames, NewRecord, Query};
use mmtl::data::InputFormat;
use mmtl::encoder::{Model, ModelConfig};
use mmtl::tokenizer::Vocabulary;
use proptest::prelude::*;

fn new_record() -> impl Strategy<Value = NewRecord> {
    ("[a-zA-Z \"\\\\é\t]{0,24}", 0usize..3, 0.0f64..=1.0).prop_map(|(text, label, confidence)| NewRecord {
        text,
        predicted_label: label,
        confidence,
        source: "prop".into(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stored_records_read_back_exactly(
        batches in prop::collection::vec(prop::collection::vec(new_record(), 0..6), 1..4),
        keyword in prop::option::of("[a-e]"),
        label in prop::option::of(0usize..3),
        limit in prop::option::of(0usize..8),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let kb = KnowledgeBase::open(dir.path().join("kb.jsonl"));
        let labels = LabelNames::default();
        let mut written = Vec::new();
        for batch in batches {
            written.extend(kb.append(batch, &labels).unwrap());
        }
        let ids: Vec<u64> = written.iter().map(|r| r.id).collect();
        prop_assert_eq!(ids, (1..=written.len() as u64).collect::<Vec<_>>());
        let reopened = KnowledgeBase::open(kb.path()).records().unwrap();
        prop_assert_eq!(&reopened, &written);

        let q = Query { label, keyword, limit };
        let mut expect: Vec<_> = written.iter().rev().filter(|r| q.matches(r)).cloned().collect();
        if let Some(l) = limit {
            expect.truncate(l);
        }
        prop_assert_eq!(kb.query(&q).unwrap(), expect);
    }
}

#[test]
fn ingest_skips_bad_lines_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build(&["the cat sat", "a dog ran"], 50).unwrap();
    let config = ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        ff_size: 8,
        max_positions: 12,
        ..ModelConfig::mini(vocab.len())
    };
    let model = Model::init(config, 5).unwrap();
    let input = dir.path().join("in.tsv");
    std::fs::write(&input, "src\t1\t\tthe cat sat\nbroken line\nsrc\t0\t*\tran a dog\n").unwrap();
    let kb = KnowledgeBase::open(dir.path().join("kb.jsonl"));
    let labels = LabelNames::parse("0=bad,1=good").unwrap();

    let first = ingest_and_classify(&model, &vocab, &input, InputFormat::Cola, &kb, &labels, 12).unwrap();
    assert_eq!(first.stored.len(), 2);
    assert_eq!(first.errors.len(), 1);
    assert_eq!(first.errors[0].line, 2);
    let second = ingest_and_classify(&model, &vocab, &input, InputFormat::Cola, &kb, &labels, 12).unwrap();
    for (a, b) in first.stored.iter().zip(&second.stored) {
        assert_eq!(a.predicted_label, b.predicted_label);
        assert_eq!(a.confidence, b.confidence);
        assert!(["bad", "good"].contains(&a.label_name.as_str()));
        assert!(a.confidence >= 0.5 && a.confidence <= 1.0);
    }
    assert_eq!(kb.records().unwrap().len(), 4);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let none = ingest_and_classify(&model, &vocab, &empty, InputFormat::Text, &kb, &labels, 12).unwrap();
    assert!(none.stored.is_empty() && none.errors.is_empty());
    assert_eq!(kb.records().unwrap().len(), 4);
}
