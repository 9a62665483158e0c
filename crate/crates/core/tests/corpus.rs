use proptest::prelude::*;
use rlcp::data::{self, generate_corpus, make_batches, Corpus, PromptBatch, TokenKind};

fn default_corpus(seed: u64) -> Corpus {
    generate_corpus(
        data::DEFAULT_FACTS,
        data::DEFAULT_ATTRIBUTES,
        data::DEFAULT_DISTRACTORS,
        data::DEFAULT_READERS,
        seed,
    )
    .unwrap()
}

#[test]
fn default_corpus_has_fifteen_facts() {
    // 15 facts, as in the controlled study this replicates
    let c = default_corpus(0);
    assert_eq!(c.n_facts(), 15);
    let classes: Vec<usize> = c.facts.iter().map(|f| f.probe_class).collect();
    assert_eq!(classes, (0..15).collect::<Vec<_>>());
}

#[test]
fn two_fact_corpus_is_the_minimum() {
    let c = generate_corpus(2, 2, 0, 0, 4).unwrap();
    assert_eq!(c.n_facts(), 2);
    assert_ne!(c.facts[0].entity, c.facts[1].entity);
    assert!(generate_corpus(1, 1, 0, 0, 4).is_err());
    assert!(generate_corpus(3, 4, 0, 0, 4).is_err());
}

#[test]
fn export_is_byte_identical_for_the_same_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    default_corpus(7).export(a.path()).unwrap();
    default_corpus(7).export(b.path()).unwrap();
    for f in ["corpus.tsv", "vocab.tsv", "auxiliary.tsv", "templates.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let back = Corpus::import(a.path()).unwrap();
    assert_eq!(back, default_corpus(7));
}

#[test]
fn corpus_tsv_is_entity_attribute_class() {
    let c = default_corpus(0);
    let tsv = c.to_tsv();
    let first = tsv.lines().next().unwrap();
    let f = &c.facts[0];
    assert_eq!(first, format!("{}\t{}\t0", f.entity, f.attribute));
}

#[test]
fn tampered_vocab_is_rejected_on_import() {
    let dir = tempfile::tempdir().unwrap();
    let c = default_corpus(0);
    c.export(dir.path()).unwrap();
    let vocab = std::fs::read_to_string(dir.path().join("vocab.tsv")).unwrap();
    std::fs::write(dir.path().join("vocab.tsv"), vocab.replacen("is\t", "was\t", 1)).unwrap();
    assert!(Corpus::import(dir.path()).is_err());
}

#[test]
fn every_epoch_covers_each_fact_once() {
    let c = default_corpus(1);
    let stream = make_batches(&c, 4, 1).unwrap();
    assert_eq!(stream.batches_per_epoch(), 4);
    for e in 0..3 {
        let mut seen: Vec<usize> = stream.epoch(e).unwrap().iter().flat_map(|b| b.fact_ids.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..15).collect::<Vec<_>>());
    }
    assert_ne!(stream.epoch(0).unwrap()[0].fact_ids, stream.epoch(1).unwrap()[0].fact_ids);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prompts_are_well_formed(n_facts in 2usize..20, attr_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let n_attr = 2 + ((n_facts - 2) as f64 * attr_frac) as usize;
        let c = generate_corpus(n_facts, n_attr, 2, 2, seed).unwrap();
        prop_assert_eq!(c.attributes().len(), n_attr);
        let ids: Vec<usize> = (0..n_facts).collect();
        let b = PromptBatch::build(&c, &ids, None).unwrap();
        for r in 0..n_facts {
            let attr = b.y_lm[r];
            prop_assert_eq!(c.vocab.kind(attr), &TokenKind::Attribute);
            // the fact is absent without context
            prop_assert!(!b.x_no[r].contains(&attr));
            let before_q = &b.x_rag[r][..b.context_span(r, &c.vocab).unwrap().1];
            prop_assert_eq!(before_q.iter().filter(|&&t| t == attr).count(), 1);
            let ev = b.evidence_position(r, &c.vocab).unwrap();
            prop_assert_eq!(b.x_rag[r][ev], attr);
            prop_assert_eq!(b.answer_mask_no[r].iter().filter(|&&m| m).count(), 1);
            prop_assert_eq!(b.answer_mask_rag[r].iter().filter(|&&m| m).count(), 1);
            prop_assert_eq!(b.y_probe[r], r);
        }
    }

    #[test]
    fn decode_inverts_encode(seed in 0u64..500, i in 0usize..15) {
        let c = default_corpus(seed);
        let f = &c.facts[i];
        let text = Corpus::rag_text(&f.entity, &f.attribute);
        let ids = c.vocab.encode(&text).unwrap();
        prop_assert_eq!(c.vocab.decode(&ids), text);
    }
}
