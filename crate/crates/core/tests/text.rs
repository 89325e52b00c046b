use std::collections::HashMap;

use adsorbtext::synthetic::synthetic_structures;
use adsorbtext::textgen::{convert_all, group_duplicates, merge_datasets, ConvertOptions, TextualRecord};
use adsorbtext::tokenizer::{apply_dynamic_mask, build_vocab, decode, encode, SectionCode, Vocabulary, BOS, PAD, SEP};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> Vec<TextualRecord> {
    convert_all(&synthetic_structures(n, seed).unwrap(), ConvertOptions::default()).unwrap()
}

/// Records with repeated texts: each text appears 1 to 3 times.
fn with_repeats(seed: u64) -> Vec<TextualRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = corpus(12, seed);
    let mut out = Vec::new();
    for (i, r) in base.iter().enumerate() {
        for k in 0..rand::Rng::gen_range(&mut rng, 1..=3) {
            let mut c = r.clone();
            c.system_id = format!("{}-{i}-{k}", r.system_id);
            out.push(c);
        }
    }
    out
}

proptest! {
    #[test]
    fn spans_are_ordered_and_cover_payload(seed in 0u64..500) {
        for r in corpus(4, seed) {
            let chars: Vec<char> = r.text.chars().collect();
            let mut prev = 0;
            for (s, e) in r.spans {
                prop_assert!(prev <= s && s <= e && e <= chars.len());
                prev = e;
            }
            let covered = |k: usize| r.spans.iter().any(|&(s, e)| s <= k && k < e);
            let seps: Vec<usize> = r.text.match_indices(" </s> ").map(|(b, _)| r.text[..b].chars().count()).collect();
            for (k, ch) in chars.iter().enumerate() {
                let in_sep = seps.iter().any(|&s| k >= s && k < s + 6);
                if !in_sep && !ch.is_whitespace() {
                    prop_assert!(covered(k), "char {} `{}` of `{}` uncovered", k, ch, r.text);
                }
            }
        }
    }

    #[test]
    fn grouping_follows_permutation(seed in 0u64..200, shuffle in any::<u64>()) {
        let records = with_repeats(seed);
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let shuffled: Vec<TextualRecord> = order.iter().map(|&i| records[i].clone()).collect();
        let a = group_duplicates(&records);
        let b = group_duplicates(&shuffled);
        // same membership by system id, regardless of order
        let members = |g: &adsorbtext::textgen::DuplicateGroups, recs: &[TextualRecord]| {
            let mut m: HashMap<String, Vec<String>> = HashMap::new();
            for grp in &g.groups {
                let mut ids: Vec<String> = grp.members.iter().map(|&i| recs[i].system_id.clone()).collect();
                ids.sort();
                m.insert(grp.text.clone(), ids);
            }
            m
        };
        prop_assert_eq!(members(&a, &records), members(&b, &shuffled));
        let total: usize = a.groups.iter().map(|g| g.size()).sum();
        prop_assert_eq!(total, records.len());
    }

    #[test]
    fn merge_keeps_every_record_once(seed in 0u64..200, mix in any::<u64>()) {
        let main = corpus(10, seed);
        let aug = corpus(4, seed + 10_000);
        let merged = merge_datasets(&main, &aug, mix);
        prop_assert_eq!(merged.len(), 14);
        let mut want: Vec<String> = main.iter().chain(&aug).map(|r| format!("{r:?}")).collect();
        let mut got: Vec<String> = merged.iter().map(|r| format!("{r:?}")).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn encoding_invariants(seed in 0u64..500, max_len in 4usize..40) {
        let records = corpus(3, seed);
        let vocab = build_vocab(&records).unwrap();
        for r in &records {
            let t = encode(r, &vocab, max_len).unwrap();
            prop_assert_eq!(t.ids.len(), max_len);
            prop_assert_eq!(t.ids[0], BOS);
            prop_assert_eq!(t.sections[0], SectionCode::SelfToken);
            prop_assert_eq!(t.sections.iter().filter(|&&s| s == SectionCode::SelfToken).count(), 1);
            for k in 1..max_len {
                let content = matches!(t.sections[k], SectionCode::Adsorbate | SectionCode::Catalyst | SectionCode::Configuration);
                prop_assert_eq!(content, t.attention_mask[k]);
                prop_assert_eq!(t.ids[k] == PAD, !t.attention_mask[k]);
            }
            prop_assert_eq!(encode(r, &vocab, max_len).unwrap(), t.clone());
            if !t.truncated {
                prop_assert_eq!(decode(&t, &vocab).unwrap(), r.text.clone());
            }
        }
    }

    #[test]
    fn masking_skips_specials(seed in 0u64..300, rate in 0.05f64..0.95, epoch in 0u64..10) {
        let records = corpus(3, seed);
        let vocab = build_vocab(&records).unwrap();
        for r in &records {
            let t = encode(r, &vocab, 48).unwrap();
            let m = apply_dynamic_mask(&t, vocab.len(), rate, seed, epoch).unwrap();
            for k in m.masked_positions() {
                prop_assert!(t.attention_mask[k]);
                prop_assert!(![BOS, SEP, PAD].contains(&t.ids[k]) && !Vocabulary::is_special(t.ids[k]));
                prop_assert_eq!(m.labels[k], Some(t.ids[k]));
            }
            for k in 0..t.len() {
                if m.labels[k].is_none() {
                    prop_assert_eq!(m.input.ids[k], t.ids[k]);
                }
            }
        }
    }
}
