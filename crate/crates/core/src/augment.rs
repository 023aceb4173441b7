//! Query understanding and augmentation.
//!
//! `augment` runs four steps in order: decompose the query, extract key
//! entities, detect intent cues, and rewrite one enhanced query. Every step
//! goes through the [`Gateway`]; when the model's output is unusable (as with
//! the mock backend's echo) a rule-based path produces the same shape of
//! result, so the contracts below hold for every backend:
//!
//! * the enhanced text has at most [`MAX_QUERY_TOKENS`] whitespace tokens;
//! * every entity canonical appears verbatim in the enhanced text;
//! * alias groups resolve to their longest surface form.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::text::whitespace_len;

pub const MAX_QUERY_TOKENS: usize = 40;

/// Fixed temporal lexicon. Multi-word entries are matched as phrases.
pub const TEMPORAL_LEXICON: &[&str] = &[
    "today",
    "currently",
    "lately",
    "latest",
    "now",
    "recent",
    "recently",
    "this week",
    "this month",
    "this year",
    "trending",
    "breaking",
];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("entities need {needed} tokens, more than the {budget}-token budget")]
    TokenBudgetUnsatisfiable { needed: usize, budget: usize },
    #[error("{path}:{line}: {message}")]
    TableFormat {
        path: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQuery {
    pub id: String,
    pub text: String,
}

impl RawQuery {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, AugmentError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(AugmentError::InvalidQuery("query text is empty".into()));
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Person,
    Organization,
    Location,
    Date,
    Concept,
    Other,
}

impl std::str::FromStr for EntityKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "person" | "per" | "people" => Self::Person,
            "organization" | "organisation" | "org" => Self::Organization,
            "location" | "loc" | "gpe" | "place" => Self::Location,
            "date" | "time" => Self::Date,
            "concept" => Self::Concept,
            "other" | "misc" => Self::Other,
            other => return Err(format!("unknown entity kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub canonical: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhIntent {
    Who,
    What,
    When,
    Where,
    How,
    Why,
    None,
}

impl WhIntent {
    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "who" | "whom" | "whose" => Self::Who,
            "what" | "which" => Self::What,
            "when" => Self::When,
            "where" => Self::Where,
            "how" => Self::How,
            "why" => Self::Why,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Who => "who",
            Self::What => "what",
            Self::When => "when",
            Self::Where => "where",
            Self::How => "how",
            Self::Why => "why",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentCues {
    pub wh_intent: WhIntent,
    pub temporal: bool,
    pub factual: bool,
}

impl IntentCues {
    /// No temporal cue and no interrogative: the query does not pin down
    /// which timeline it is about.
    pub fn timeline_ambiguous(&self) -> bool {
        !self.temporal && self.wh_intent == WhIntent::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    pub original: RawQuery,
    pub text: String,
    pub entities: Vec<Entity>,
    pub cues: IntentCues,
}

// ---------------------------------------------------------------------------
// Lookup tables

/// Word tokens: letters/digits with internal hyphens. Apostrophes split.
static WORD_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[\p{L}\p{N}]+(?:-[\p{L}\p{N}]+)*").unwrap());

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    WORD_RE
        .find_iter(text)
        .map(|m| (m.start(), m.end()))
        .collect()
}

/// Lowercased tokens joined by single spaces; the matching key for aliases.
fn phrase_key(text: &str) -> String {
    WORD_RE
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

struct TableLine {
    line: usize,
    left: String,
    right: String,
    extra: Option<String>,
}

fn read_table(path: &Path) -> Result<Vec<TableLine>, AugmentError> {
    let raw = fs::read_to_string(path).map_err(|source| AugmentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let left = cols.next().unwrap_or("").trim();
        let right = cols.next().map(str::trim).unwrap_or("");
        if left.is_empty() || right.is_empty() {
            return Err(AugmentError::TableFormat {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected two tab-separated columns".into(),
            });
        }
        out.push(TableLine {
            line: i + 1,
            left: left.to_string(),
            right: right.to_string(),
            extra: cols.next().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

/// Surface form → canonical form. Every alias group (connected through
/// surface/canonical pairs) resolves to its longest member, ties broken by
/// lexicographic order; canonicals map to themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasStore {
    canonical: HashMap<String, String>,
    kinds: HashMap<String, EntityKind>,
    max_phrase_tokens: usize,
}

impl AliasStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from `(surface, canonical, kind)` triples.
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, Option<EntityKind>)>,
    {
        // Union-find over phrase keys; first-seen spelling is kept per key.
        let mut display: BTreeMap<String, String> = BTreeMap::new();
        let mut parent: HashMap<String, String> = HashMap::new();
        let mut kinds: HashMap<String, EntityKind> = HashMap::new();

        fn find(parent: &mut HashMap<String, String>, k: &str) -> String {
            let mut root = k.to_string();
            while let Some(p) = parent.get(&root) {
                if *p == root {
                    break;
                }
                root = p.clone();
            }
            let mut cur = k.to_string();
            while cur != root {
                let next = parent.insert(cur.clone(), root.clone()).unwrap_or(root.clone());
                cur = next;
            }
            root
        }

        for (surface, canonical, kind) in pairs {
            let (sk, ck) = (phrase_key(surface), phrase_key(canonical));
            if sk.is_empty() || ck.is_empty() {
                continue;
            }
            display.entry(sk.clone()).or_insert_with(|| surface.trim().to_string());
            display.entry(ck.clone()).or_insert_with(|| canonical.trim().to_string());
            parent.entry(sk.clone()).or_insert_with(|| sk.clone());
            parent.entry(ck.clone()).or_insert_with(|| ck.clone());
            let (rs, rc) = (find(&mut parent, &sk), find(&mut parent, &ck));
            if rs != rc {
                parent.insert(rs, rc);
            }
            if let Some(kind) = kind {
                kinds.insert(ck, kind);
            }
        }

        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let keys: Vec<String> = display.keys().cloned().collect();
        for k in keys {
            let root = find(&mut parent, &k);
            groups.entry(root).or_default().push(k);
        }

        let mut store = AliasStore::default();
        for members in groups.values() {
            let best = members
                .iter()
                .map(|k| display[k].clone())
                .max_by(|a, b| {
                    a.chars()
                        .count()
                        .cmp(&b.chars().count())
                        .then_with(|| b.cmp(a))
                })
                .expect("group is non-empty");
            let kind = members.iter().find_map(|k| kinds.get(k).copied());
            for k in members {
                store.max_phrase_tokens = store.max_phrase_tokens.max(k.split(' ').count());
                store.canonical.insert(k.clone(), best.clone());
            }
            if let Some(kind) = kind {
                store.kinds.insert(phrase_key(&best), kind);
            }
        }
        store
    }

    /// Tab-separated `surface<TAB>canonical[<TAB>kind]`, one pair per line.
    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let lines = read_table(path)?;
        let mut triples = Vec::with_capacity(lines.len());
        for l in &lines {
            let kind = match &l.extra {
                Some(k) => Some(k.parse::<EntityKind>().map_err(|message| {
                    AugmentError::TableFormat {
                        path: path.display().to_string(),
                        line: l.line,
                        message,
                    }
                })?),
                None => None,
            };
            triples.push((l.left.as_str(), l.right.as_str(), kind));
        }
        Ok(Self::from_pairs(triples))
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    pub fn canonicalize(&self, surface: &str) -> Option<&str> {
        self.canonical.get(&phrase_key(surface)).map(String::as_str)
    }

    pub fn kind_of(&self, canonical: &str) -> Option<EntityKind> {
        self.kinds.get(&phrase_key(canonical)).copied()
    }

    /// Every known surface (display-cased keys are not kept, so these are
    /// the phrase keys) whose canonical is `canonical`.
    fn surface_keys_for(&self, canonical: &str) -> Vec<&str> {
        self.canonical
            .iter()
            .filter(|(_, c)| c.as_str() == canonical)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Greedy longest-first alias matches in `text`: `(byte_start, byte_end, canonical)`.
    pub fn find_matches(&self, text: &str) -> Vec<(usize, usize, String)> {
        if self.canonical.is_empty() {
            return Vec::new();
        }
        let spans = word_spans(text);
        let lowered: Vec<String> = spans.iter().map(|&(s, e)| text[s..e].to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < spans.len() {
            let mut matched = false;
            let max_n = self.max_phrase_tokens.min(spans.len() - i);
            for n in (1..=max_n).rev() {
                let key = lowered[i..i + n].join(" ");
                if let Some(c) = self.canonical.get(&key) {
                    out.push((spans[i].0, spans[i + n - 1].1, c.clone()));
                    i += n;
                    matched = true;
                    break;
                }
            }
            if !matched {
                i += 1;
            }
        }
        out
    }
}

/// Acronym → expansion, case-sensitive on the acronym.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcronymTable {
    entries: BTreeMap<String, String>,
}

impl AcronymTable {
    pub fn from_pairs<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(pairs: I) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(a, e)| (a.trim().to_string(), e.trim().to_string()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let lines = read_table(path)?;
        Ok(Self::from_pairs(
            lines.iter().map(|l| (l.left.as_str(), l.right.as_str())),
        ))
    }

    pub fn expansion(&self, acronym: &str) -> Option<&str> {
        self.entries.get(acronym).map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Prompts

pub const DECOMPOSE_SYSTEM: &str = "Decompose the user query into its independent sub-questions. \
Return one sub-question per line. If the query has a single clause, return it unchanged.";

pub const ENTITY_SYSTEM: &str = "Return a list of named entities (people, organizations, \
geographic locations, dates, etc.) mentioned in the text. Respond with a JSON array of objects \
with fields \"surface\" (exact text span) and \"kind\" (person, organization, location, date, \
concept or other).";

pub fn enhance_system_prompt(entities: &[Entity], time_hints: &[String], intent: WhIntent) -> String {
    let ents = entities
        .iter()
        .map(|e| format!("\"{}\"", e.canonical))
        .collect::<Vec<_>>()
        .join(", ");
    let hints = time_hints
        .iter()
        .map(|h| format!("\"{h}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "Given entities=[{ents}], time hints=[{hints}], intent=[{}]. Rewrite a single augmented \
query that: (1) Expands acronyms on first mention in parentheses, (2) Preserves named entities \
verbatim, (3) Uses <= {MAX_QUERY_TOKENS} tokens. Return only the rewritten query.",
        intent.as_str()
    )
}

// ---------------------------------------------------------------------------
// Rule-based entity spotting

pub(crate) const SPAN_STOPWORDS: &[&str] = &[
    "a", "about", "after", "an", "and", "are", "as", "at", "before", "but", "by", "can", "could",
    "define", "describe", "did", "do", "does", "during", "explain", "for", "from", "give", "he",
    "her", "his", "how", "i", "if", "in", "is", "it", "its", "list", "me", "my", "name", "of",
    "on", "or", "our", "she", "should", "since", "tell", "that", "the", "their", "these", "they",
    "this", "those", "to", "was", "we", "were", "what", "when", "where", "which", "who", "whom",
    "whose", "why", "will", "with", "would", "you", "latest", "recent", "today", "currently",
    "lately", "now", "trending", "breaking", "recently",
];

const HONORIFICS: &[&str] = &[
    "sir", "dr", "mr", "mrs", "ms", "lady", "lord", "president", "king", "queen", "prince",
    "princess", "saint", "st", "prime",
];

const ORG_SUFFIXES: &[&str] = &[
    "inc", "corp", "corporation", "university", "institute", "company", "ltd", "foundation",
    "agency", "organization", "association", "bank", "group", "college", "society",
];

fn is_year(tok: &str) -> bool {
    tok.len() == 4
        && tok.chars().all(|c| c.is_ascii_digit())
        && matches!(tok.parse::<u32>(), Ok(1000..=2999))
}

pub(crate) fn guess_kind(surface: &str) -> EntityKind {
    let toks: Vec<String> = WORD_RE
        .find_iter(surface)
        .map(|m| m.as_str().to_lowercase())
        .collect();
    if toks.len() == 1 && is_year(&toks[0]) {
        return EntityKind::Date;
    }
    if toks.first().is_some_and(|t| HONORIFICS.contains(&t.as_str())) {
        return EntityKind::Person;
    }
    if toks.iter().any(|t| ORG_SUFFIXES.contains(&t.as_str())) {
        return EntityKind::Organization;
    }
    EntityKind::Other
}

/// Spot candidate entities in `text`: alias-store phrases first, then
/// capitalized word runs and years outside those spans.
/// Returns `(byte_start, byte_end)` sorted by start.
pub(crate) fn spot_entity_spans(text: &str, aliases: &AliasStore) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = aliases
        .find_matches(text)
        .into_iter()
        .map(|(s, e, _)| (s, e))
        .collect();
    let covered = |s: usize, e: usize, spans: &[(usize, usize)]| {
        spans.iter().any(|&(a, b)| s < b && a < e)
    };

    let words = word_spans(text);
    let mut run: Vec<(usize, usize)> = Vec::new();
    let flush = |run: &mut Vec<(usize, usize)>, spans: &mut Vec<(usize, usize)>| {
        // Drop leading stopwords ("What", "The", ...).
        while let Some(&(s, e)) = run.first() {
            if SPAN_STOPWORDS.contains(&text[s..e].to_lowercase().as_str()) {
                run.remove(0);
            } else {
                break;
            }
        }
        if let (Some(&(s, _)), Some(&(_, e))) = (run.first(), run.last()) {
            if !covered(s, e, spans) {
                spans.push((s, e));
            }
        }
        run.clear();
    };
    for &(s, e) in &words {
        let w = &text[s..e];
        if is_year(w) {
            flush(&mut run, &mut spans);
            if !covered(s, e, &spans) {
                spans.push((s, e));
            }
            continue;
        }
        let capitalized = w.chars().next().is_some_and(char::is_uppercase);
        let contiguous = run
            .last()
            .is_none_or(|&(_, prev_end)| text[prev_end..s].chars().all(char::is_whitespace));
        if capitalized && !covered(s, e, &spans) {
            if !contiguous {
                flush(&mut run, &mut spans);
            }
            run.push((s, e));
        } else {
            flush(&mut run, &mut spans);
        }
    }
    flush(&mut run, &mut spans);
    spans.sort();
    spans
}

#[derive(Deserialize)]
struct LlmEntity {
    surface: String,
    #[serde(default)]
    kind: Option<String>,
}

fn parse_llm_entities(raw: &str) -> Option<Vec<LlmEntity>> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    serde_json::from_str(raw.get(start..=end)?).ok()
}

// ---------------------------------------------------------------------------
// Augmenter

/// Runs the augmentation steps against a gateway.
#[derive(Debug, Clone, Default)]
pub struct Augmenter {
    pub aliases: AliasStore,
    pub acronyms: AcronymTable,
    /// Years at or after `current_year - 1` count as temporal cues.
    pub current_year: i32,
}

static LIST_MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s*").unwrap());

static DEFINITION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:what|who)\s+(?:is|are|was|were)\b|\bdefine\b|\bdefinition of\b|\bmeaning of\b|\bwhat does\b.*\bmean\b").unwrap()
});

impl Augmenter {
    pub fn new(aliases: AliasStore, acronyms: AcronymTable, current_year: i32) -> Self {
        Self {
            aliases,
            acronyms,
            current_year,
        }
    }

    /// Full augmentation: decompose → extract entities → detect intent → enhance.
    pub fn augment(&self, q: &RawQuery, gateway: &dyn Gateway) -> Result<AugmentedQuery, AugmentError> {
        let parts = self.decompose_query(q, gateway)?;
        let entities = self.extract_entities(&parts, gateway)?;
        let cues = self.detect_intent(&parts, &entities);
        self.enhance_query(q, cues, &entities, gateway)
    }

    pub fn decompose_query(
        &self,
        q: &RawQuery,
        gateway: &dyn Gateway,
    ) -> Result<Vec<String>, AugmentError> {
        if q.text.trim().is_empty() {
            return Err(AugmentError::InvalidQuery("query text is empty".into()));
        }
        let raw = gateway.complete(&CompletionRequest::new(DECOMPOSE_SYSTEM, q.text.clone()))?;
        let parts: Vec<String> = raw
            .lines()
            .map(|l| LIST_MARKER_RE.replace(l, "").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if parts.is_empty() {
            return Ok(vec![q.text.clone()]);
        }
        Ok(parts)
    }

    pub fn extract_entities(
        &self,
        parts: &[String],
        gateway: &dyn Gateway,
    ) -> Result<Vec<Entity>, AugmentError> {
        if parts.is_empty() {
            return Err(AugmentError::InvalidQuery("no query parts".into()));
        }
        let mut out: Vec<Entity> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for part in parts {
            let raw = gateway.complete(&CompletionRequest::new(ENTITY_SYSTEM, part.clone()))?;
            let found: Vec<(String, Option<EntityKind>)> = match parse_llm_entities(&raw) {
                Some(list) => {
                    let mut v: Vec<(usize, String, Option<EntityKind>)> = list
                        .into_iter()
                        .filter_map(|e| {
                            let surface = e.surface.trim().to_string();
                            let pos = part.find(&surface)?;
                            (!surface.is_empty()).then_some(())?;
                            Some((pos, surface, e.kind.and_then(|k| k.parse().ok())))
                        })
                        .collect();
                    v.sort_by_key(|(p, _, _)| *p);
                    v.into_iter().map(|(_, s, k)| (s, k)).collect()
                }
                None => spot_entity_spans(part, &self.aliases)
                    .into_iter()
                    .map(|(s, e)| (part[s..e].to_string(), None))
                    .collect(),
            };
            for (surface, kind) in found {
                let canonical = self
                    .aliases
                    .canonicalize(&surface)
                    .map(str::to_string)
                    .unwrap_or_else(|| surface.clone());
                if !seen.insert(canonical.to_lowercase()) {
                    continue;
                }
                let kind = self
                    .aliases
                    .kind_of(&canonical)
                    .or(kind)
                    .unwrap_or_else(|| guess_kind(&surface));
                out.push(Entity {
                    surface,
                    canonical,
                    kind,
                });
            }
        }
        Ok(out)
    }

    /// Temporal words/phrases and recent years found in `text`, in order.
    pub fn temporal_hints(&self, text: &str) -> Vec<String> {
        let toks: Vec<String> = WORD_RE
            .find_iter(text)
            .map(|m| m.as_str().to_lowercase())
            .collect();
        let mut hints = Vec::new();
        for (i, t) in toks.iter().enumerate() {
            if let Some(next) = toks.get(i + 1) {
                let phrase = format!("{t} {next}");
                if TEMPORAL_LEXICON.contains(&phrase.as_str()) {
                    hints.push(phrase);
                    continue;
                }
            }
            let recent_year = is_year(t) && t.parse::<i32>().is_ok_and(|y| y >= self.current_year - 1);
            if recent_year || TEMPORAL_LEXICON.contains(&t.as_str()) {
                hints.push(t.clone());
            }
        }
        hints
    }

    pub fn detect_intent(&self, parts: &[String], entities: &[Entity]) -> IntentCues {
        let joined = parts.join(" ");
        let temporal = !self.temporal_hints(&joined).is_empty();
        let definition = parts.iter().any(|p| DEFINITION_RE.is_match(p));
        let factual = !temporal && (!entities.is_empty() || definition);
        let wh_intent = WORD_RE
            .find_iter(&joined)
            .find_map(|m| WhIntent::from_token(&m.as_str().to_lowercase()))
            .unwrap_or(WhIntent::None);
        IntentCues {
            wh_intent,
            temporal,
            factual,
        }
    }

    /// The request sent to the model for the rewrite step.
    pub fn enhance_request(
        &self,
        q: &RawQuery,
        cues: IntentCues,
        entities: &[Entity],
    ) -> CompletionRequest {
        let hints = self.temporal_hints(&q.text);
        CompletionRequest::new(
            enhance_system_prompt(entities, &hints, cues.wh_intent),
            q.text.clone(),
        )
        .with_max_tokens(96)
    }

    pub fn enhance_query(
        &self,
        q: &RawQuery,
        cues: IntentCues,
        entities: &[Entity],
        gateway: &dyn Gateway,
    ) -> Result<AugmentedQuery, AugmentError> {
        let needed: usize = entities.iter().map(|e| whitespace_len(&e.canonical)).sum();
        if needed > MAX_QUERY_TOKENS {
            return Err(AugmentError::TokenBudgetUnsatisfiable {
                needed,
                budget: MAX_QUERY_TOKENS,
            });
        }
        let raw = gateway.complete(&self.enhance_request(q, cues, entities))?;
        let draft = raw
            .lines()
            .map(|l| l.trim().trim_matches('"').trim())
            .find(|l| !l.is_empty())
            .unwrap_or(q.text.trim())
            .to_string();
        let text = self.enforce_contracts(&draft, entities)?;
        Ok(AugmentedQuery {
            original: q.clone(),
            text,
            entities: entities.to_vec(),
            cues,
        })
    }

    /// Deterministic post-pass applied to whatever the model produced.
    fn enforce_contracts(&self, draft: &str, entities: &[Entity]) -> Result<String, AugmentError> {
        let mut text = self.replace_aliases(draft, entities);
        text = self.expand_acronyms(&text, entities);
        let has_wh = WORD_RE
            .find_iter(&text)
            .any(|m| WhIntent::from_token(&m.as_str().to_lowercase()).is_some());
        if !has_wh {
            text = format!("What about {}", text.trim_end_matches(['?', '.', '!']).trim());
            text.push('?');
        }
        for e in entities {
            if !text.contains(&e.canonical) {
                text = insert_before_question_mark(&text, &e.canonical);
            }
        }
        truncate_preserving(&text, entities)
    }

    /// Replace alias surfaces of the given entities with their canonical form.
    fn replace_aliases(&self, text: &str, entities: &[Entity]) -> String {
        let wanted: HashMap<String, &str> = entities
            .iter()
            .flat_map(|e| {
                let mut keys: Vec<String> = self
                    .aliases
                    .surface_keys_for(&e.canonical)
                    .into_iter()
                    .map(str::to_string)
                    .collect();
                keys.push(phrase_key(&e.surface));
                keys.push(phrase_key(&e.canonical));
                keys.into_iter().map(move |k| (k, e.canonical.as_str()))
            })
            .filter(|(k, _)| !k.is_empty())
            .collect();
        let max_n = wanted.keys().map(|k| k.split(' ').count()).max().unwrap_or(0);
        let spans = word_spans(text);
        let lowered: Vec<String> = spans.iter().map(|&(s, e)| text[s..e].to_lowercase()).collect();
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        let mut i = 0;
        while i < spans.len() {
            let mut step = 1;
            for n in (1..=max_n.min(spans.len() - i)).rev() {
                if let Some(canon) = wanted.get(&lowered[i..i + n].join(" ")) {
                    let (s, e) = (spans[i].0, spans[i + n - 1].1);
                    out.push_str(&text[cursor..s]);
                    out.push_str(canon);
                    cursor = e;
                    step = n;
                    break;
                }
            }
            i += step;
        }
        out.push_str(&text[cursor..]);
        out
    }

    /// Expand the first mention of each known acronym as "expansion (ACR)".
    fn expand_acronyms(&self, text: &str, entities: &[Entity]) -> String {
        let protected: Vec<(usize, usize)> = entities
            .iter()
            .flat_map(|e| {
                text.match_indices(&e.canonical)
                    .map(|(s, m)| (s, s + m.len()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut edits: Vec<(usize, usize, String)> = Vec::new();
        let mut done: HashSet<&str> = HashSet::new();
        for (s, e) in word_spans(text) {
            let word = &text[s..e];
            let Some(exp) = self.acronyms.expansion(word) else {
                continue;
            };
            if !done.insert(word) {
                continue;
            }
            let lower = text.to_lowercase();
            if lower.contains(&exp.to_lowercase()) {
                continue;
            }
            let inside_longer_entity = protected
                .iter()
                .any(|&(ps, pe)| ps <= s && e <= pe && (pe - ps) > (e - s));
            if inside_longer_entity {
                continue;
            }
            edits.push((s, e, format!("{exp} ({word})")));
        }
        let mut out = text.to_string();
        for (s, e, rep) in edits.into_iter().rev() {
            out.replace_range(s..e, &rep);
        }
        out
    }
}

fn insert_before_question_mark(text: &str, phrase: &str) -> String {
    match text.strip_suffix('?') {
        Some(head) => format!("{} {phrase}?", head.trim_end()),
        None => format!("{} {phrase}", text.trim_end()),
    }
}

/// Cut to the token budget at a word boundary, re-appending any canonical the
/// cut removed.
fn truncate_preserving(text: &str, entities: &[Entity]) -> Result<String, AugmentError> {
    if whitespace_len(text) <= MAX_QUERY_TOKENS {
        return Ok(text.to_string());
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut missing: Vec<&Entity> = Vec::new();
    loop {
        let reserve: usize = missing.iter().map(|e| whitespace_len(&e.canonical)).sum();
        if reserve > MAX_QUERY_TOKENS {
            return Err(AugmentError::TokenBudgetUnsatisfiable {
                needed: reserve,
                budget: MAX_QUERY_TOKENS,
            });
        }
        let head = words[..MAX_QUERY_TOKENS - reserve].join(" ");
        let newly: Vec<&Entity> = entities
            .iter()
            .filter(|e| !head.contains(&e.canonical) && !missing.iter().any(|m| m.canonical == e.canonical))
            .collect();
        if newly.is_empty() {
            let mut out = head;
            for e in &missing {
                out.push(' ');
                out.push_str(&e.canonical);
            }
            return Ok(out);
        }
        missing.extend(newly);
    }
}
