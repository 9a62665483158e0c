//! Synthetic entity→attribute corpus, word-level vocabulary and the
//! four-field training batches.
//!
//! Every entity and attribute is a single token, so answer positions,
//! evidence positions and probe labels are exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;

/// Template words in vocabulary order.
pub const TEMPLATE_WORDS: [&str; 7] = ["Context", ":", "is", "located", "in", ".", "Question"];

/// Context-free prompt. `{E}` is the entity.
pub const TEMPLATE_NO_CONTEXT: &str = "{E} is located in";
/// Context-prefixed prompt. `{A}` is the evidence attribute.
pub const TEMPLATE_RAG: &str = "Context: {E} is located in {A}. Question: {E} is located in";

pub const DEFAULT_FACTS: usize = 15;
pub const DEFAULT_ATTRIBUTES: usize = 8;
pub const DEFAULT_DISTRACTORS: usize = 5;
pub const DEFAULT_READERS: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactRecord {
    pub entity: String,
    pub attribute: String,
    pub probe_class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TokenKind {
    Special,
    Template,
    Entity,
    Attribute,
    Distractor,
    /// Entity used only by the context-reading curriculum.
    Reader,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Deterministic vocabulary: specials, template words, then entities,
    /// attributes, distractors and reader entities in corpus order.
    pub fn build(facts: &[FactRecord], distractors: &[String], readers: &[String]) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            kinds: Vec::new(),
            ids: BTreeMap::new(),
        };
        v.push(PAD, TokenKind::Special)?;
        v.push(BOS, TokenKind::Special)?;
        for w in TEMPLATE_WORDS {
            v.push(w, TokenKind::Template)?;
        }
        for f in facts {
            v.push(&f.entity, TokenKind::Entity)?;
        }
        for f in facts {
            if !v.ids.contains_key(&f.attribute) {
                v.push(&f.attribute, TokenKind::Attribute)?;
            }
        }
        for d in distractors {
            v.push(d, TokenKind::Distractor)?;
        }
        for r in readers {
            v.push(r, TokenKind::Reader)?;
        }
        Ok(v)
    }

    fn push(&mut self, token: &str, kind: TokenKind) -> Result<()> {
        if self.ids.contains_key(token) {
            return Err(Error::Contract(format!("duplicate vocabulary token {token:?}")));
        }
        self.ids.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.kinds.push(kind);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn kind(&self, id: usize) -> &TokenKind {
        &self.kinds[id]
    }

    pub fn ids_of_kind(&self, kind: TokenKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kinds[i] == kind).collect()
    }

    /// Splits on whitespace and detaches trailing `:` / `.` into their own tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let (stem, punct) = match word.char_indices().last() {
                Some((i, c)) if (c == ':' || c == '.') && i > 0 => (&word[..i], Some(&word[i..])),
                _ => (word, None),
            };
            out.push(self.id(stem)?);
            if let Some(p) = punct {
                out.push(self.id(p)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode); special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if *self.kind(id) == TokenKind::Special {
                continue;
            }
            let tok = self.token(id);
            if !(out.is_empty() || tok == ":" || tok == ".") {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }
}

/// The fact set, distractor words and reader entities, with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub facts: Vec<FactRecord>,
    pub distractors: Vec<String>,
    /// Entities with no fixed attribute, used to pretrain reading from context.
    pub readers: Vec<String>,
    pub vocab: Vocab,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "dr",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ae"];
const CITY_SUFFIX: [&str; 5] = ["ton", "burg", "dale", "mouth", "ford"];
const LAND_SUFFIX: [&str; 4] = ["ia", "land", "stan", "ora"];
const FRUIT_SUFFIX: [&str; 3] = ["berry", "melon", "fig"];

fn pseudo_word(rng: &mut impl Rng, suffixes: &[&str], capitalize: bool) -> String {
    let mut w = String::new();
    for _ in 0..2 {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
    }
    w.push_str(suffixes[rng.random_range(0..suffixes.len())]);
    if capitalize {
        let mut c = w.chars();
        let first = c.next().unwrap().to_ascii_uppercase();
        w = std::iter::once(first).chain(c).collect();
    }
    w
}

fn unique_words(
    rng: &mut impl Rng,
    n: usize,
    suffixes: &[&str],
    capitalize: bool,
    taken: &mut BTreeSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, suffixes, capitalize);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Generates `n_facts` entity→attribute records over `n_attributes` distinct
/// attributes. Every attribute is used at least once; the rest are drawn with
/// replacement.
pub fn generate_facts(n_facts: usize, n_attributes: usize, seed: u64) -> Result<Vec<FactRecord>> {
    Ok(generate_corpus(n_facts, n_attributes, 0, 0, seed)?.facts)
}

pub fn generate_corpus(
    n_facts: usize,
    n_attributes: usize,
    n_distractors: usize,
    n_readers: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_facts < 2 || n_attributes < 2 || n_attributes > n_facts {
        return Err(Error::Config(format!(
            "need n_facts >= 2 and 2 <= n_attributes <= n_facts, got {n_facts} / {n_attributes}"
        )));
    }
    let mut rng = rng::stream(seed, "data");
    let mut taken: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    let entities = unique_words(&mut rng, n_facts, &CITY_SUFFIX, true, &mut taken);
    let attributes = unique_words(&mut rng, n_attributes, &LAND_SUFFIX, true, &mut taken);
    let distractors = unique_words(&mut rng, n_distractors, &FRUIT_SUFFIX, false, &mut taken);
    let readers = unique_words(&mut rng, n_readers, &CITY_SUFFIX, true, &mut taken);

    let mut assignment: Vec<usize> = (0..n_attributes).collect();
    assignment.extend((n_attributes..n_facts).map(|_| rng.random_range(0..n_attributes)));
    assignment.shuffle(&mut rng);

    let facts: Vec<FactRecord> = entities
        .into_iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (entity, a))| FactRecord {
            entity,
            attribute: attributes[a].clone(),
            probe_class: i,
        })
        .collect();
    let vocab = Vocab::build(&facts, &distractors, &readers)?;
    Ok(Corpus {
        facts,
        distractors,
        readers,
        vocab,
    })
}

impl Corpus {
    pub fn from_facts(facts: Vec<FactRecord>, distractors: Vec<String>, readers: Vec<String>) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::Contract("empty fact list".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, f) in facts.iter().enumerate() {
            if !seen.insert(&f.entity) {
                return Err(Error::Contract(format!("duplicate entity {}", f.entity)));
            }
            if f.probe_class != i {
                return Err(Error::Contract(format!(
                    "probe class {} of {} must equal its row {i}",
                    f.probe_class, f.entity
                )));
            }
        }
        let vocab = Vocab::build(&facts, &distractors, &readers)?;
        Ok(Self {
            facts,
            distractors,
            readers,
            vocab,
        })
    }

    pub fn n_facts(&self) -> usize {
        self.facts.len()
    }

    /// Distinct attributes in order of first appearance.
    pub fn attributes(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.facts
            .iter()
            .filter(|f| seen.insert(f.attribute.clone()))
            .map(|f| f.attribute.clone())
            .collect()
    }

    pub fn no_context_text(entity: &str) -> String {
        TEMPLATE_NO_CONTEXT.replace("{E}", entity)
    }

    pub fn rag_text(entity: &str, attribute: &str) -> String {
        TEMPLATE_RAG.replace("{E}", entity).replace("{A}", attribute)
    }

    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.vocab.encode(text)?);
        Ok(ids)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for f in &self.facts {
            let _ = writeln!(s, "{}\t{}\t{}", f.entity, f.attribute, f.probe_class);
        }
        s
    }

    pub fn templates_text() -> String {
        format!("no_context={TEMPLATE_NO_CONTEXT}\nrag={TEMPLATE_RAG}\n")
    }

    /// SHA-256 of the corpus and vocabulary exports.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_tsv().as_bytes());
        h.update(self.vocab.to_tsv().as_bytes());
        h.update(self.auxiliary_tsv().as_bytes());
        hex::encode(h.finalize())
    }

    /// `kind<TAB>token` lines for the distractor and reader words.
    pub fn auxiliary_tsv(&self) -> String {
        let mut s = String::new();
        for d in &self.distractors {
            let _ = writeln!(s, "distractor\t{d}");
        }
        for r in &self.readers {
            let _ = writeln!(s, "reader\t{r}");
        }
        s
    }

    /// Writes `corpus.tsv`, `vocab.tsv`, `auxiliary.tsv` and `templates.txt`
    /// into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("corpus.tsv"), self.to_tsv())?;
        fs::write(dir.join("vocab.tsv"), self.vocab.to_tsv())?;
        fs::write(dir.join("auxiliary.tsv"), self.auxiliary_tsv())?;
        fs::write(dir.join("templates.txt"), Self::templates_text())?;
        Ok(())
    }

    /// Reads a directory written by [`export`](Self::export). `auxiliary.tsv`
    /// and `vocab.tsv` are optional; when the vocabulary is present it must
    /// match the rebuilt one exactly.
    pub fn import(dir: &Path) -> Result<Self> {
        let facts = parse_corpus_tsv(&fs::read_to_string(dir.join("corpus.tsv"))?)?;
        let mut distractors = Vec::new();
        let mut readers = Vec::new();
        let aux = dir.join("auxiliary.tsv");
        if aux.exists() {
            for (i, line) in fs::read_to_string(aux)?.lines().filter(|l| !l.is_empty()).enumerate() {
                match line.split_once('\t') {
                    Some(("distractor", w)) => distractors.push(w.to_string()),
                    Some(("reader", w)) => readers.push(w.to_string()),
                    _ => return Err(Error::Parse(format!("auxiliary line {}: expected kind<TAB>token", i + 1))),
                }
            }
        }
        let corpus = Self::from_facts(facts, distractors, readers)?;
        let vocab_path = dir.join("vocab.tsv");
        if vocab_path.exists() {
            let tokens = parse_vocab_tsv(&fs::read_to_string(vocab_path)?)?;
            if tokens.len() != corpus.vocab.len() || tokens.iter().enumerate().any(|(i, t)| corpus.vocab.token(i) != t) {
                return Err(Error::Parse("vocab.tsv does not match the corpus".into()));
            }
        }
        Ok(corpus)
    }
}

pub fn parse_corpus_tsv(text: &str) -> Result<Vec<FactRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("corpus line {}: expected 3 columns", i + 1)));
            }
            Ok(FactRecord {
                entity: cols[0].to_string(),
                attribute: cols[1].to_string(),
                probe_class: cols[2]
                    .parse()
                    .map_err(|_| Error::Parse(format!("corpus line {}: bad class id", i + 1)))?,
            })
        })
        .collect()
}

/// Tokens of a `token<TAB>id` file, in id order.
pub fn parse_vocab_tsv(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let (tok, id) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("vocab line {}: expected token<TAB>id", i + 1)))?;
        let id: usize = id
            .parse()
            .map_err(|_| Error::Parse(format!("vocab line {}: bad id", i + 1)))?;
        if id != i {
            return Err(Error::Parse(format!("vocab line {}: id {id} out of order", i + 1)));
        }
        out.push(tok.to_string());
    }
    Ok(out)
}

/// One batch as consumed by a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    pub fact_ids: Vec<usize>,
    /// Context-free prompts, right-padded.
    pub x_no: Vec<Vec<usize>>,
    /// Context-prefixed prompts, right-padded.
    pub x_rag: Vec<Vec<usize>>,
    /// Answer (attribute) token per row.
    pub y_lm: Vec<usize>,
    pub y_probe: Vec<usize>,
    pub answer_mask_no: Vec<Vec<bool>>,
    pub answer_mask_rag: Vec<Vec<bool>>,
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut masks = Vec::with_capacity(rows.len());
    let padded = rows
        .into_iter()
        .map(|mut r| {
            let mut m = vec![false; t];
            m[r.len() - 1] = true;
            masks.push(m);
            r.resize(t, PAD_ID);
            r
        })
        .collect();
    (padded, masks)
}

impl PromptBatch {
    /// Builds a batch for `fact_ids`. `context_attributes`, when given, replaces
    /// the evidence attribute of each row (the answer target is unchanged).
    pub fn build(corpus: &Corpus, fact_ids: &[usize], context_attributes: Option<&[String]>) -> Result<Self> {
        let mut rows = Vec::with_capacity(fact_ids.len());
        for (row, &i) in fact_ids.iter().enumerate() {
            let f = corpus.facts.get(i).ok_or(Error::Index {
                what: "fact id",
                index: i,
                bound: corpus.n_facts(),
            })?;
            let evidence = context_attributes.map_or(f.attribute.as_str(), |a| a[row].as_str());
            rows.push((f.entity.as_str(), evidence, f.attribute.as_str(), i, f.probe_class));
        }
        Self::from_rows(corpus, &rows)
    }

    /// `n` context-reading rows: a random reader entity with a random
    /// attribute as evidence, answered by that same attribute.
    pub fn reading(corpus: &Corpus, rng: &mut impl Rng, n: usize) -> Result<Self> {
        if corpus.readers.is_empty() {
            return Err(Error::Contract("corpus has no reader entities".into()));
        }
        let attrs = corpus.attributes();
        let picks: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..corpus.readers.len()), rng.random_range(0..attrs.len())))
            .collect();
        let rows: Vec<_> = picks
            .iter()
            .map(|&(e, a)| (corpus.readers[e].as_str(), attrs[a].as_str(), attrs[a].as_str(), e, e))
            .collect();
        Self::from_rows(corpus, &rows)
    }

    /// Every reader entity paired with every attribute, in order.
    pub fn reading_eval(corpus: &Corpus) -> Result<Self> {
        let attrs = corpus.attributes();
        let rows: Vec<_> = corpus
            .readers
            .iter()
            .enumerate()
            .flat_map(|(e, r)| attrs.iter().map(move |a| (r.as_str(), a.as_str(), a.as_str(), e, e)))
            .collect();
        Self::from_rows(corpus, &rows)
    }

    /// Rows of `(entity, evidence, answer, fact_id, probe_class)`.
    fn from_rows(corpus: &Corpus, rows: &[(&str, &str, &str, usize, usize)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut x_no = Vec::new();
        let mut x_rag = Vec::new();
        let mut y_lm = Vec::new();
        for &(entity, evidence, answer, _, _) in rows {
            x_no.push(corpus.encode_prompt(&Corpus::no_context_text(entity))?);
            x_rag.push(corpus.encode_prompt(&Corpus::rag_text(entity, evidence))?);
            y_lm.push(corpus.vocab.id(answer)?);
        }
        let (x_no, answer_mask_no) = pad_rows(x_no);
        let (x_rag, answer_mask_rag) = pad_rows(x_rag);
        Ok(Self {
            fact_ids: rows.iter().map(|r| r.3).collect(),
            x_no,
            x_rag,
            y_lm,
            y_probe: rows.iter().map(|r| r.4).collect(),
            answer_mask_no,
            answer_mask_rag,
        })
    }

    pub fn len(&self) -> usize {
        self.fact_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fact_ids.is_empty()
    }

    pub fn answer_position_no(&self, row: usize) -> usize {
        self.answer_mask_no[row].iter().position(|&m| m).expect("one answer")
    }

    pub fn answer_position_rag(&self, row: usize) -> usize {
        self.answer_mask_rag[row].iter().position(|&m| m).expect("one answer")
    }

    /// Per-token targets and mask for the answer positions of `x_no`, flattened
    /// sequence-major to match the model's logits rows.
    pub fn answer_targets_no(&self) -> (Vec<usize>, Vec<bool>) {
        flat_targets(&self.answer_mask_no, &self.y_lm)
    }

    pub fn answer_targets_rag(&self) -> (Vec<usize>, Vec<bool>) {
        flat_targets(&self.answer_mask_rag, &self.y_lm)
    }

    /// Flattened mask of the non-pad positions of `x_no`.
    pub fn nonpad_mask_no(&self) -> Vec<bool> {
        self.x_no.iter().flatten().map(|&t| t != PAD_ID).collect()
    }

    /// Flat row indices (into `batch × seq_len`) of the final prompt token of
    /// each `x_no` row.
    pub fn last_rows_no(&self) -> Vec<usize> {
        let t = self.x_no[0].len();
        (0..self.len()).map(|r| r * t + self.answer_position_no(r)).collect()
    }

    /// Index of the evidence token in the context segment of `x_rag[row]`.
    pub fn evidence_position(&self, row: usize, vocab: &Vocab) -> Result<usize> {
        evidence_position(&self.x_rag[row], self.y_lm[row], vocab)
    }

    /// `[start, end)` of the context segment of `x_rag[row]`: from the token
    /// after `<bos>` up to, not including, `Question`.
    pub fn context_span(&self, row: usize, vocab: &Vocab) -> Result<(usize, usize)> {
        let q = question_index(&self.x_rag[row], vocab)?;
        Ok((1, q))
    }

    /// Same batch with rows reordered by `perm` (row `i` of the result is row
    /// `perm[i]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<usize>>| perm.iter().map(|&i| v[i].clone()).collect();
        let pickb = |v: &Vec<Vec<bool>>| perm.iter().map(|&i| v[i].clone()).collect();
        Self {
            fact_ids: perm.iter().map(|&i| self.fact_ids[i]).collect(),
            x_no: pick(&self.x_no),
            x_rag: pick(&self.x_rag),
            y_lm: perm.iter().map(|&i| self.y_lm[i]).collect(),
            y_probe: perm.iter().map(|&i| self.y_probe[i]).collect(),
            answer_mask_no: pickb(&self.answer_mask_no),
            answer_mask_rag: pickb(&self.answer_mask_rag),
        }
    }
}

fn flat_targets(masks: &[Vec<bool>], answers: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (m, &a) in masks.iter().zip(answers) {
        for &on in m {
            targets.push(if on { a } else { PAD_ID });
            mask.push(on);
        }
    }
    (targets, mask)
}

fn question_index(tokens: &[usize], vocab: &Vocab) -> Result<usize> {
    let q = vocab.id("Question")?;
    tokens
        .iter()
        .position(|&t| t == q)
        .ok_or_else(|| Error::Contract("prompt has no question segment".into()))
}

/// Index of `attribute` inside the context segment of a context-prefixed
/// prompt. The attribute must occur exactly once before `Question`.
pub fn evidence_position(tokens: &[usize], attribute: usize, vocab: &Vocab) -> Result<usize> {
    let end = tokens
        .iter()
        .position(|&t| vocab.id("Question").is_ok_and(|q| q == t))
        .unwrap_or(tokens.len());
    let hits: Vec<usize> = tokens[..end]
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == attribute)
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::Contract("evidence token absent from context".into())),
        _ => Err(Error::Contract("evidence token appears more than once".into())),
    }
}

/// Seeded per-epoch shuffling of the fact set into batches.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seed: u64,
}

pub fn make_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if corpus.facts.is_empty() {
        return Err(Error::Contract("empty fact list".into()));
    }
    Ok(BatchStream {
        corpus,
        batch_size,
        seed,
    })
}

impl BatchStream<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.corpus.n_facts().div_ceil(self.batch_size)
    }

    /// Batches of epoch `epoch` (0-based). Every fact appears exactly once.
    pub fn epoch(&self, epoch: usize) -> Result<Vec<PromptBatch>> {
        let mut order: Vec<usize> = (0..self.corpus.n_facts()).collect();
        order.shuffle(&mut rng::stream(self.seed, &format!("shuffle/{epoch}")));
        order
            .chunks(self.batch_size)
            .map(|ids| PromptBatch::build(self.corpus, ids, None))
            .collect()
    }
}
