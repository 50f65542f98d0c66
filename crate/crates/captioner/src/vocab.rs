//! Word-level vocabulary and caption encoding. Captions are framed with
//! begin/end markers; positions whose word matches scene text are recorded so
//! training can mask them on the visual route and supervise copying on the
//! refined route.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::scene::DataError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: usize = 4;

pub const PAD_TEXT: &str = "<pad>";
pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";
pub const UNK_TEXT: &str = "<unk>";

/// Lowercase, replace every non-alphanumeric character with a space, split on
/// whitespace. "Stop!" and "stop" therefore tokenize identically.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from captions: words with frequency >= min_freq, ordered by
    /// frequency descending then lexicographically, after the four specials.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for cap in captions {
            for w in tokenize(cap) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_words(entries.into_iter().map(|(w, _)| w))
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Vocabulary {
        let words: Vec<String> = words.into_iter().collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), (SPECIALS + i) as u32);
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        Vocabulary { words, index }
    }

    /// Total id count, specials included.
    pub fn len(&self) -> usize {
        SPECIALS + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.lookup(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        match id {
            PAD => PAD_TEXT,
            BOS => BOS_TEXT,
            EOS => EOS_TEXT,
            UNK => UNK_TEXT,
            _ => &self.words[id as usize - SPECIALS],
        }
    }

    /// Render generated word ids: framing and padding drop out, unknowns stay
    /// visible as a literal marker.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS => {}
                EOS => break,
                other => words.push(self.word(other).to_string()),
            }
        }
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::new();
        for w in &self.words {
            writeln!(buf, "{w}").expect("write to vec");
        }
        std::fs::write(path, buf)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Ok(Vocabulary::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string)))
    }
}

/// One reference caption prepared for training.
///
/// `ids_full` and `ids_masked` both frame the (possibly truncated) words as
/// [BOS, w1..wk, EOS] and always have equal length. In `ids_masked`, every
/// position covered by a scene-text match is replaced by UNK regardless of
/// vocabulary membership; `copy_flags[p]` lists the OCR token indices whose
/// tokenization starts a match at position p.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCaption {
    pub ids_full: Vec<u32>,
    pub ids_masked: Vec<u32>,
    pub copy_flags: Vec<Vec<usize>>,
}

impl EncodedCaption {
    pub fn len(&self) -> usize {
        self.ids_full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids_full.is_empty()
    }
}

/// Match OCR token word sequences inside caption words. An OCR entry matches at
/// position p when its full tokenization appears contiguously starting at p.
/// Returns, per caption word, (covered_by_any_match, ocr indices starting here).
pub fn match_ocr_spans(words: &[String], ocr_texts: &[Vec<String>]) -> Vec<(bool, Vec<usize>)> {
    let mut out: Vec<(bool, Vec<usize>)> = vec![(false, Vec::new()); words.len()];
    for (k, toks) in ocr_texts.iter().enumerate() {
        if toks.is_empty() {
            continue;
        }
        for p in 0..words.len().saturating_sub(toks.len() - 1) {
            if words[p..p + toks.len()] == toks[..] {
                out[p].1.push(k);
                for cover in out.iter_mut().skip(p).take(toks.len()) {
                    cover.0 = true;
                }
            }
        }
    }
    out
}

/// Encode one reference caption against a vocabulary and a scene's OCR texts.
/// Words beyond `max_words` are dropped before framing.
pub fn encode_with_vocab(
    vocab: &Vocabulary,
    caption: &str,
    ocr_texts: &[String],
    max_words: usize,
) -> EncodedCaption {
    let mut words = tokenize(caption);
    words.truncate(max_words);
    let ocr_tok: Vec<Vec<String>> = ocr_texts.iter().map(|t| tokenize(t)).collect();
    let spans = match_ocr_spans(&words, &ocr_tok);

    let mut ids_full = Vec::with_capacity(words.len() + 2);
    let mut ids_masked = Vec::with_capacity(words.len() + 2);
    let mut copy_flags: Vec<Vec<usize>> = Vec::with_capacity(words.len() + 2);
    ids_full.push(BOS);
    ids_masked.push(BOS);
    copy_flags.push(Vec::new());
    for (p, w) in words.iter().enumerate() {
        let id = vocab.id_or_unk(w);
        ids_full.push(id);
        ids_masked.push(if spans[p].0 { UNK } else { id });
        copy_flags.push(spans[p].1.clone());
    }
    ids_full.push(EOS);
    ids_masked.push(EOS);
    copy_flags.push(Vec::new());
    EncodedCaption { ids_full, ids_masked, copy_flags }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_folds_case_and_punctuation() {
        assert_eq!(tokenize("Stop! NOW."), vec!["stop", "now"]);
        assert_eq!(tokenize("it's a co-op"), vec!["it", "s", "a", "co", "op"]);
        assert_eq!(tokenize("  spaced\tout\n"), vec!["spaced", "out"]);
        assert_eq!(tokenize("!!!"), Vec::<String>::new());
        assert_eq!(tokenize("route 66"), vec!["route", "66"]);
    }

    #[test]
    fn build_orders_by_frequency_then_lexicographic() {
        let caps = ["b b b", "c c", "a a", "d"];
        let v = Vocabulary::build(caps, 1);
        assert_eq!(v.word(4), "b");
        assert_eq!(v.word(5), "a"); // ties broken lexicographically
        assert_eq!(v.word(6), "c");
        assert_eq!(v.word(7), "d");
        assert_eq!(v.len(), 8);
        let pruned = Vocabulary::build(caps, 2);
        assert_eq!(pruned.len(), SPECIALS + 3);
        assert_eq!(pruned.lookup("d"), None);
        assert_eq!(pruned.id_or_unk("d"), UNK);
    }

    #[test]
    fn save_load_round_trip_preserves_ids() {
        let v = Vocabulary::build(["a sign that says stop", "a red sign"], 1);
        let dir = std::env::temp_dir().join("captioner-vocab-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(v, back);
    }

    /// Oracle for span matching: slow direct scan written independently of the
    /// implementation, comparing every position and every OCR entry.
    fn match_oracle(words: &[String], ocr: &[Vec<String>]) -> Vec<(bool, Vec<usize>)> {
        let mut res: Vec<(bool, Vec<usize>)> = vec![(false, vec![]); words.len()];
        for p in 0..words.len() {
            for (k, toks) in ocr.iter().enumerate() {
                if toks.is_empty() || p + toks.len() > words.len() {
                    continue;
                }
                let mut ok = true;
                for (off, t) in toks.iter().enumerate() {
                    if &words[p + off] != t {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    res[p].1.push(k);
                    for q in p..p + toks.len() {
                        res[q].0 = true;
                    }
                }
            }
        }
        res
    }

    #[test]
    fn span_matching_agrees_with_oracle() {
        let cases: Vec<(&str, Vec<&str>)> = vec![
            ("a sign that says stop", vec!["stop"]),
            ("the stop stop sign", vec!["stop", "stop sign"]),
            ("no matches here", vec!["exit"]),
            ("bus stop ahead bus stop", vec!["bus stop", "stop", "ahead"]),
            ("one", vec![""]),
            ("overlap overlap overlap", vec!["overlap overlap"]),
        ];
        for (cap, ocr) in cases {
            let words = tokenize(cap);
            let ocr_tok: Vec<Vec<String>> = ocr.iter().map(|t| tokenize(t)).collect();
            assert_eq!(
                match_ocr_spans(&words, &ocr_tok),
                match_oracle(&words, &ocr_tok),
                "caption {cap:?} ocr {ocr:?}"
            );
        }
    }

    #[test]
    fn encode_masks_scene_text_and_flags_copies() {
        let v = Vocabulary::build(["a sign that says stop"], 1);
        let enc = encode_with_vocab(&v, "a sign that says stop", &["stop".into()], 30);
        assert_eq!(enc.ids_full.len(), 7); // BOS + 5 words + EOS
        assert_eq!(enc.ids_masked.len(), 7);
        assert_eq!(enc.copy_flags.len(), 7);
        assert_eq!(enc.ids_full[0], BOS);
        assert_eq!(*enc.ids_full.last().unwrap(), EOS);
        // "stop" is in the vocabulary, yet the masked stream hides it
        assert_ne!(enc.ids_full[5], UNK);
        assert_eq!(enc.ids_masked[5], UNK);
        assert_eq!(enc.copy_flags[5], vec![0]);
        // non-text positions identical across streams, no flags
        for p in 1..5 {
            assert_eq!(enc.ids_full[p], enc.ids_masked[p]);
            assert!(enc.copy_flags[p].is_empty());
        }
    }

    #[test]
    fn multiword_ocr_masks_whole_span_and_flags_first_position() {
        let v = Vocabulary::build(["the bus stop is near"], 1);
        let enc = encode_with_vocab(&v, "the bus stop is near", &["bus stop".into()], 30);
        // words: the bus stop is near -> ids index 1..=5
        assert_eq!(enc.ids_masked[2], UNK);
        assert_eq!(enc.ids_masked[3], UNK);
        assert_eq!(enc.copy_flags[2], vec![0]);
        assert!(enc.copy_flags[3].is_empty(), "continuation positions carry no flag");
        assert_eq!(enc.ids_masked[1], enc.ids_full[1]);
    }

    #[test]
    fn truncation_applies_before_framing() {
        let v = Vocabulary::build(["a b c d e f"], 1);
        let enc = encode_with_vocab(&v, "a b c d e f", &[], 3);
        assert_eq!(enc.ids_full.len(), 5); // BOS + 3 + EOS
        assert_eq!(v.word(enc.ids_full[3]), "c");
    }

    #[test]
    fn oov_words_become_unk_in_both_streams() {
        let v = Vocabulary::build(["a cat"], 1);
        let enc = encode_with_vocab(&v, "a zebra", &[], 30);
        assert_eq!(enc.ids_full[2], UNK);
        assert_eq!(enc.ids_masked[2], UNK);
        assert!(enc.copy_flags[2].is_empty());
    }

    #[test]
    fn decode_skips_framing_and_stops_at_eos() {
        let v = Vocabulary::build(["red sign"], 1);
        let red = v.id_or_unk("red");
        let sign = v.id_or_unk("sign");
        assert_eq!(v.decode(&[BOS, red, sign, EOS, red]), "red sign");
        assert_eq!(v.decode(&[BOS, UNK, EOS]), "<unk>");
        assert_eq!(v.decode(&[BOS, EOS]), "");
    }
}
