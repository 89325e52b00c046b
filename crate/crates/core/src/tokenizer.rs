//! Word-level vocabulary, section-aware encoding and dynamic MLM masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textgen::{Section, TextualRecord};

pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid("vocabulary", format!("expected `{s}` at id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// One token per line, LF-terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        numerics::write_atomic(path, self.to_file_string().as_bytes())?;
        Ok(())
    }
}

/// Specials followed by every whitespace token in first-occurrence order.
pub fn build_vocab(corpus: &[TextualRecord]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Precondition(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for r in corpus {
        for t in r.text.split_whitespace() {
            if seen.insert(t.to_owned()) {
                tokens.push(t.to_owned());
            }
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// Section assignment of one token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionCode {
    SelfToken,
    Adsorbate,
    Catalyst,
    Configuration,
    Pad,
}

impl From<Section> for SectionCode {
    fn from(s: Section) -> Self {
        match s {
            Section::Adsorbate => Self::Adsorbate,
            Section::Catalyst => Self::Catalyst,
            Section::Configuration => Self::Configuration,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub system_id: String,
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub sections: Vec<SectionCode>,
    pub label: Option<f64>,
    /// Set when the record did not fit in `max_len`.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn unmasked_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Whitespace tokens with their starting character offsets.
fn tokens_with_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (chars, (b, c)) in text.char_indices().enumerate() {
        if c.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                out.push((cs, &text[bs..b]));
            }
        } else if start.is_none() {
            start = Some((chars, b));
        }
    }
    if let Some((cs, bs)) = start {
        out.push((cs, &text[bs..]));
    }
    out
}

fn section_at(spans: &[(usize, usize); 3], offset: usize) -> Section {
    if let Some(k) = spans.iter().position(|&(s, e)| s <= offset && offset < e) {
        return Section::ALL[k];
    }
    // A separator closes the last section that ended before it.
    spans
        .iter()
        .rposition(|&(_, e)| e <= offset)
        .map_or(Section::Adsorbate, |k| Section::ALL[k])
}

/// Encode with a leading `<s>`, truncate to `max_len`, then pad.
pub fn encode(r: &TextualRecord, v: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 4 {
        return Err(Error::Precondition(format!(
            "max_len must be at least 4, got {max_len}"
        )));
    }
    let mut ids = vec![BOS];
    let mut sections = vec![SectionCode::SelfToken];
    let toks = tokens_with_offsets(&r.text);
    let truncated = toks.len() + 1 > max_len;
    for (offset, tok) in toks.into_iter().take(max_len - 1) {
        ids.push(v.id(tok).unwrap_or(UNK));
        sections.push(section_at(&r.spans, offset).into());
    }
    let used = ids.len();
    ids.resize(max_len, PAD);
    sections.resize(max_len, SectionCode::Pad);
    let attention_mask = (0..max_len).map(|i| i < used).collect();
    Ok(TokenSequence {
        system_id: r.system_id.clone(),
        ids,
        attention_mask,
        sections,
        label: r.energy_label,
        truncated,
    })
}

pub fn encode_all(records: &[TextualRecord], v: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    records.iter().map(|r| encode(r, v, max_len)).collect()
}

/// Tokens at non-pad positions joined by single spaces, leading `<s>` dropped.
pub fn decode(t: &TokenSequence, v: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for (pos, &id) in t.ids.iter().enumerate() {
        let tok = v.token(id).ok_or_else(|| Error::TokenOutOfRange(id, v.len()))?;
        if id == PAD || (pos == 0 && id == BOS) {
            continue;
        }
        words.push(tok);
    }
    Ok(words.join(" "))
}

/// MLM input with per-position targets (`None` = not scored).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input: TokenSequence,
    pub labels: Vec<Option<usize>>,
}

impl MaskedBatch {
    pub fn masked_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
            .collect()
    }
}

/// Seed of the masking stream for one `(seed, epoch, system)` triple.
pub fn mask_stream_seed(rng_seed: u64, epoch: u64, system_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(system_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Select non-special, non-pad positions independently with probability
/// `rate`; selected tokens become `<mask>` 80% of the time, a random
/// non-special token 10%, and stay unchanged 10%.
pub fn apply_dynamic_mask(
    t: &TokenSequence,
    vocab_size: usize,
    rate: f64,
    rng_seed: u64,
    epoch: u64,
) -> Result<MaskedBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Precondition(format!("mask rate must be in (0, 1), got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mask_stream_seed(rng_seed, epoch, &t.system_id));
    let mut input = t.clone();
    let mut labels = vec![None; t.len()];
    let n_regular = vocab_size.saturating_sub(SPECIALS.len());
    for (i, &id) in t.ids.iter().enumerate() {
        if !t.attention_mask[i] || Vocabulary::is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        labels[i] = Some(id);
        let r: f64 = rng.gen();
        if r < 0.8 {
            input.ids[i] = MASK;
        } else if r < 0.9 && n_regular > 0 {
            input.ids[i] = SPECIALS.len() + rng.gen_range(0..n_regular);
        }
    }
    Ok(MaskedBatch { input, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(text: &str) -> TextualRecord {
        // spans from the grammar's separators
        let parts: Vec<&str> = text.split(" </s> ").collect();
        let a = parts[0].chars().count();
        let c0 = a + 6;
        let c1 = c0 + parts[1].chars().count();
        let g0 = c1 + 6;
        let g1 = g0 + parts[2].chars().count();
        TextualRecord {
            system_id: "r".into(),
            text: text.into(),
            spans: [(0, a), (c0, c1), (g0, g1)],
            energy_label: Some(-0.5),
            relaxer: None,
        }
    }

    const TEXT: &str = "*CO </s> Pt ( 1 1 1 ) </s> primary Pt secondary Pt";

    #[test]
    fn vocabulary_by_first_occurrence() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let rest: Vec<&str> = v.tokens()[5..].iter().map(String::as_str).collect();
        assert_eq!(rest, ["*CO", "Pt", "(", "1", ")", "primary", "secondary"]);
        assert_eq!(v.id("</s>"), Some(SEP));
        assert_eq!(build_vocab(&[record(TEXT), record(TEXT)]).unwrap(), v);
        assert!(build_vocab(&[]).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::parse("<pad>\n<s>\n").is_err());
    }

    #[test]
    fn hand_encoding() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let t = encode(&record(TEXT), &v, 16).unwrap();
        let id = |s: &str| v.id(s).unwrap();
        assert_eq!(&t.ids[..5], &[0, id("*CO"), 2, id("Pt"), id("(")]);
        use SectionCode::*;
        assert_eq!(
            t.sections,
            vec![
                SelfToken,
                Adsorbate,
                Adsorbate,
                Catalyst,
                Catalyst,
                Catalyst,
                Catalyst,
                Catalyst,
                Catalyst,
                Catalyst,
                Configuration,
                Configuration,
                Configuration,
                Configuration,
                Pad,
                Pad
            ]
        );
        assert_eq!(t.unmasked_len(), 14);
        assert!(!t.truncated);
        assert_eq!(decode(&t, &v).unwrap(), TEXT);
    }

    #[test]
    fn unknown_token_and_truncation() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let other = record("*OH </s> Pt ( 1 1 1 ) </s> primary Pt secondary Pt");
        let t = encode(&other, &v, 16).unwrap();
        assert_eq!(t.ids[1], UNK);
        let short = encode(&record(TEXT), &v, 6).unwrap();
        assert!(short.truncated);
        assert_eq!(short.len(), 6);
        assert!(encode(&record(TEXT), &v, 3).is_err());
    }

    #[test]
    fn decode_edge_cases() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let mut t = encode(&record(TEXT), &v, 16).unwrap();
        t.ids = vec![0, 3, 1, 1];
        assert_eq!(decode(&t, &v).unwrap(), "<unk>");
        t.ids = vec![0, 999];
        assert!(decode(&t, &v).is_err());
    }

    #[test]
    fn masking_is_seeded_and_varies_by_epoch() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let mut t = encode(&record(TEXT), &v, 16).unwrap();
        t.ids = (0..100).map(|i| 5 + i % 7).collect();
        t.attention_mask = vec![true; 100];
        t.sections = vec![SectionCode::Configuration; 100];
        let a = apply_dynamic_mask(&t, v.len(), 0.15, 11, 1).unwrap();
        let b = apply_dynamic_mask(&t, v.len(), 0.15, 11, 1).unwrap();
        let c = apply_dynamic_mask(&t, v.len(), 0.15, 11, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.masked_positions(), c.masked_positions());
        assert!(apply_dynamic_mask(&t, v.len(), 0.0, 1, 1).is_err());
        assert!(apply_dynamic_mask(&t, v.len(), 1.0, 1, 1).is_err());
    }

    #[test]
    fn selection_rate_within_three_sigma() {
        let n = 100_000;
        let t = TokenSequence {
            system_id: "long".into(),
            ids: (0..n).map(|i| 5 + i % 50).collect(),
            attention_mask: vec![true; n],
            sections: vec![SectionCode::Configuration; n],
            label: None,
            truncated: false,
        };
        let m = apply_dynamic_mask(&t, 55, 0.15, 3, 0).unwrap();
        let k = m.masked_positions().len() as f64;
        let sd = (n as f64 * 0.15 * 0.85).sqrt();
        assert!((k - 15_000.0).abs() <= 3.0 * sd, "{k}");
    }

    #[test]
    fn specials_and_pad_never_masked() {
        let v = build_vocab(&[record(TEXT)]).unwrap();
        let t = encode(&record(TEXT), &v, 24).unwrap();
        for seed in 0..200 {
            let m = apply_dynamic_mask(&t, v.len(), 0.5, seed, 0).unwrap();
            for p in m.masked_positions() {
                assert!(!Vocabulary::is_special(t.ids[p]));
                assert!(t.attention_mask[p]);
            }
        }
    }
}
