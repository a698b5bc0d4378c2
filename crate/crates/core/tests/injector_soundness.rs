//! Every forged dispreference contradicts its scene in the targeted
//! dimension only.

use std::collections::HashMap;

use proptest::prelude::*;

use povid_core::dispref::{
    audit_pair, forge_pairs, inject_attribute_error, inject_cooccurrence, inject_relation_error, AnnotatorConfig,
    PreferencePair, Provenance, Rule,
};
use povid_core::lexicon::Vocabulary;
use povid_core::scenegen::{caption, generate_corpus, make_qa, sample_scene, CooccurrencePrior, CorpusRecord, QaKind, Scene};

fn forged(n: usize, corpus_seed: u64, forge_seed: u64) -> (Vec<CorpusRecord>, Vec<PreferencePair>) {
    let prior = CooccurrencePrior::standard();
    let corpus = generate_corpus(&prior, n, corpus_seed);
    let pairs = forge_pairs(Vocabulary::standard(), &corpus, &prior, &AnnotatorConfig::default(), forge_seed)
        .unwrap()
        .pairs;
    (corpus, pairs)
}

#[test]
fn thousand_pairs_per_rule_are_sound() {
    let vocab = Vocabulary::standard();
    let (corpus, pairs) = forged(16_000, 77, 5);
    assert_eq!(pairs.len(), corpus.len());
    let mut seen: HashMap<Rule, usize> = HashMap::new();
    for (rec, pair) in corpus.iter().zip(&pairs) {
        assert_eq!(pair.provenance, Provenance::Oracle);
        let n = seen.entry(pair.rule).or_default();
        if *n >= 1000 {
            continue;
        }
        *n += 1;
        if let Err(e) = audit_pair(vocab, &rec.scene(), pair) {
            panic!(
                "record {} ({:?}): {e}\n  preferred:    {}\n  dispreferred: {}",
                rec.id,
                pair.rule,
                vocab.detokenize(&pair.preferred).unwrap(),
                vocab.detokenize(&pair.dispreferred_text).unwrap()
            );
        }
    }
    for rule in [Rule::Cooccurrence, Rule::Relation, Rule::Attribute, Rule::Reasoning] {
        assert_eq!(seen.get(&rule), Some(&1000), "{rule:?}");
    }
}

#[test]
fn audit_rejects_unsound_pairs() {
    let vocab = Vocabulary::standard();
    let (corpus, pairs) = forged(400, 3, 1);
    let by_rule = |rule: Rule| pairs.iter().zip(&corpus).find(|(p, _)| p.rule == rule).unwrap();

    // identical texts
    let (p, rec) = by_rule(Rule::Attribute);
    let mut same = p.clone();
    same.dispreferred_text = same.preferred.clone();
    assert!(audit_pair(vocab, &rec.scene(), &same).is_err());

    // a second edit anywhere breaks locality
    let mut two = p.clone();
    two.dispreferred_text[0] = vocab.expect_id("there");
    assert!(audit_pair(vocab, &rec.scene(), &two).is_err());

    // the relation flipped back is true again
    let (p, rec) = by_rule(Rule::Relation);
    let mut back = p.clone();
    back.rule = Rule::Relation;
    back.dispreferred_text = back.preferred.clone();
    assert!(audit_pair(vocab, &rec.scene(), &back).is_err());

    // a rule label that does not match the edit
    let (p, rec) = by_rule(Rule::Cooccurrence);
    let mut relabeled = p.clone();
    relabeled.rule = Rule::Attribute;
    assert!(audit_pair(vocab, &rec.scene(), &relabeled).is_err());
}

fn caption_pair(scene: &Scene, text: Vec<u32>, rule: Rule) -> PreferencePair {
    let vocab = Vocabulary::standard();
    PreferencePair {
        scene_id: 0,
        image: povid_core::scenegen::render_features(scene),
        prompt: vocab.tokenize("describe the image .").unwrap(),
        preferred: caption(scene, vocab),
        dispreferred_text: text,
        rule,
        provenance: Provenance::Oracle,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cooccurrence_injection_is_sound(scene_seed in any::<u64>(), seed in any::<u64>()) {
        let vocab = Vocabulary::standard();
        let prior = CooccurrencePrior::standard();
        let scene = sample_scene(&prior, scene_seed);
        let answer = caption(&scene, vocab);
        if let Ok(out) = inject_cooccurrence(vocab, &scene, &answer, &prior, seed) {
            prop_assert_eq!(inject_cooccurrence(vocab, &scene, &answer, &prior, seed).unwrap(), out.clone());
            let pair = caption_pair(&scene, out, Rule::Cooccurrence);
            prop_assert!(audit_pair(vocab, &scene, &pair).is_ok(), "{:?}", audit_pair(vocab, &scene, &pair));
        }
    }

    #[test]
    fn attribute_injection_is_sound(scene_seed in any::<u64>(), seed in any::<u64>()) {
        let vocab = Vocabulary::standard();
        let scene = sample_scene(&CooccurrencePrior::standard(), scene_seed);
        let answer = caption(&scene, vocab);
        let out = inject_attribute_error(vocab, &scene, &answer, seed).unwrap();
        let pair = caption_pair(&scene, out, Rule::Attribute);
        prop_assert!(audit_pair(vocab, &scene, &pair).is_ok(), "{:?}", audit_pair(vocab, &scene, &pair));
    }

    #[test]
    fn relation_injection_is_sound(scene_seed in any::<u64>(), seed in any::<u64>()) {
        let vocab = Vocabulary::standard();
        let scene = sample_scene(&CooccurrencePrior::independent(0.4), scene_seed);
        if let Ok(qa) = make_qa(&scene, QaKind::Relation, scene_seed) {
            let (prompt, answer) = qa.tokens(vocab);
            let out = inject_relation_error(vocab, &scene, &answer, seed).unwrap();
            let pair = PreferencePair {
                prompt,
                preferred: answer,
                ..caption_pair(&scene, out, Rule::Relation)
            };
            prop_assert!(audit_pair(vocab, &scene, &pair).is_ok(), "{:?}", audit_pair(vocab, &scene, &pair));
        }
    }

    #[test]
    fn forged_pairs_are_sound(corpus_seed in 0u64..1_000_000, forge_seed in any::<u64>()) {
        let vocab = Vocabulary::standard();
        let (corpus, pairs) = forged(24, corpus_seed, forge_seed);
        for (rec, pair) in corpus.iter().zip(&pairs) {
            prop_assert!(audit_pair(vocab, &rec.scene(), pair).is_ok(), "{:?}", audit_pair(vocab, &rec.scene(), pair));
        }
    }
}
