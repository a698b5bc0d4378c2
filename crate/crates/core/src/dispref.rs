//! Textual dispreferred responses.
//!
//! Ground-truth answers are corrupted by one of four rules: an absent but
//! co-occurring object is inserted, a spatial relation is flipped, a color is
//! changed, or a reason/result answer is perturbed with the result
//! recomputed. A remote annotator can supply the corrupted text instead; its
//! output is validated and replaced by the rule oracle when unusable.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DisprefError;
use crate::lexicon::{Color, ObjectKind, TokenId, Vocabulary, EOS};
use crate::rng::{mix, purpose, stream};
use crate::scenegen::{
    render_features, relation_between, relation_holds, CooccurrencePrior, CorpusRecord, ImageFeatures, Scene,
    Task,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Cooccurrence,
    Relation,
    Attribute,
    Reasoning,
    /// Text supplied by the remote annotator.
    Annotator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    Remote,
    Fallback,
}

/// A ground-truth answer and its textual corruption for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub scene_id: u64,
    pub image: ImageFeatures,
    pub prompt: Vec<TokenId>,
    pub preferred: Vec<TokenId>,
    pub dispreferred_text: Vec<TokenId>,
    pub rule: Rule,
    pub provenance: Provenance,
}

impl PreferencePair {
    /// Preferred response with the terminating EOS the policy is trained on.
    pub fn preferred_response(&self) -> Vec<TokenId> {
        with_eos(&self.preferred)
    }

    pub fn dispreferred_response(&self) -> Vec<TokenId> {
        with_eos(&self.dispreferred_text)
    }
}

pub fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut v = tokens.to_vec();
    v.push(EOS);
    v
}

/// Mention of an object in templated text: `a [color] kind [at cell]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    /// Index of the leading `a`.
    pub start: usize,
    /// One past the last token of the mention.
    pub end: usize,
    pub color: Option<usize>,
    pub kind: usize,
    pub cell: Option<usize>,
}

pub fn parse_mentions(vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<Mention> {
    let a = vocab.expect_id("a");
    let at = vocab.expect_id("at");
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] != a {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        let color = (j < tokens.len() && vocab.color(tokens[j]).is_some()).then(|| {
            j += 1;
            j - 1
        });
        if j < tokens.len() && vocab.object_kind(tokens[j]).is_some() {
            let kind = j;
            j += 1;
            let cell = if j + 1 < tokens.len() && tokens[j] == at && vocab.cell(tokens[j + 1]).is_some() {
                j += 2;
                Some(j - 1)
            } else {
                None
            };
            out.push(Mention {
                start: i,
                end: j,
                color,
                kind,
                cell,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

fn mention_tokens(
    vocab: &Vocabulary,
    color: Option<Color>,
    kind: ObjectKind,
    cell: Option<(u8, u8)>,
) -> Vec<TokenId> {
    let mut t = vec![vocab.expect_id("a")];
    if let Some(c) = color {
        t.push(vocab.color_id(c));
    }
    t.push(vocab.object_id(kind));
    if let Some((r, c)) = cell {
        t.push(vocab.expect_id("at"));
        t.push(vocab.cell_id(r, c));
    }
    t
}

/// Absent kinds with positive boost from a present kind, weighted by the
/// summed boost they receive.
pub fn cooccurrence_candidates(scene: &Scene, prior: &CooccurrencePrior) -> Vec<(ObjectKind, f64)> {
    let present = scene.kinds();
    ObjectKind::all()
        .filter(|&b| !scene.contains(b))
        .map(|b| (b, present.iter().map(|&a| prior.boost(a, b)).sum::<f64>()))
        .filter(|&(_, w)| w > 0.0)
        .collect()
}

/// Inserts `and a <color> <kind> [at <cell>]` for an absent kind that a
/// present kind pulls in, right after a seed-chosen mention.
pub fn inject_cooccurrence(
    vocab: &Vocabulary,
    scene: &Scene,
    answer: &[TokenId],
    prior: &CooccurrencePrior,
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    let candidates = cooccurrence_candidates(scene, prior);
    if candidates.is_empty() {
        return Err(DisprefError::NoCandidate);
    }
    let mentions = parse_mentions(vocab, answer);
    if mentions.is_empty() {
        return Err(DisprefError::MalformedAnswer(
            "no object mention to attach an insertion to".into(),
        ));
    }
    let mut rng = stream(seed, purpose::DISPREF);
    let kind = candidates
        .choose_weighted(&mut rng, |&(_, w)| w)
        .expect("weights are positive")
        .0;
    let anchor = *mentions.choose(&mut rng).unwrap();
    let color = anchor
        .color
        .map(|_| Color(rng.random_range(0..Color::COUNT as u8)));
    let cell = match anchor.cell {
        Some(_) => {
            let used: Vec<(u8, u8)> = mentions
                .iter()
                .filter_map(|m| m.cell.and_then(|c| vocab.cell(answer[c])))
                .collect();
            let free: Vec<(u8, u8)> = scene
                .empty_cells()
                .into_iter()
                .filter(|c| !used.contains(c))
                .collect();
            Some(*free.choose(&mut rng).ok_or(DisprefError::NoCandidate)?)
        }
        None => None,
    };
    let mut out = answer[..anchor.end].to_vec();
    out.push(vocab.expect_id("and"));
    out.extend(mention_tokens(vocab, color, kind, cell));
    out.extend_from_slice(&answer[anchor.end..]);
    Ok(out)
}

pub fn antonym(word: &str) -> Option<&'static str> {
    match word {
        "left" => Some("right"),
        "right" => Some("left"),
        "above" => Some("below"),
        "below" => Some("above"),
        _ => None,
    }
}

fn relation_positions(vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&i| vocab.word(tokens[i]).and_then(antonym).is_some())
        .collect()
}

/// Swaps one relation word for its antonym.
pub fn inject_relation_error(
    vocab: &Vocabulary,
    _scene: &Scene,
    answer: &[TokenId],
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    let sites = relation_positions(vocab, answer);
    let mut rng = stream(seed, purpose::DISPREF);
    let &site = sites.choose(&mut rng).ok_or(DisprefError::NoRelation)?;
    let mut out = answer.to_vec();
    let flipped = antonym(vocab.word(answer[site]).unwrap()).unwrap();
    out[site] = vocab.expect_id(flipped);
    Ok(out)
}

/// Replaces one color token with a different color.
pub fn inject_attribute_error(
    vocab: &Vocabulary,
    _scene: &Scene,
    answer: &[TokenId],
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    let sites: Vec<usize> = (0..answer.len())
        .filter(|&i| vocab.color(answer[i]).is_some())
        .collect();
    let mut rng = stream(seed, purpose::DISPREF);
    let &site = sites.choose(&mut rng).ok_or(DisprefError::NoAttribute)?;
    let old = vocab.color(answer[site]).unwrap();
    let others: Vec<Color> = Color::all().filter(|&c| c != old).collect();
    let mut out = answer.to_vec();
    out[site] = vocab.color_id(*others.choose(&mut rng).unwrap());
    Ok(out)
}

/// What a reason/result question counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CountTarget {
    Kind(ObjectKind),
    Color(Color),
}

fn count_target(vocab: &Vocabulary, question: &[TokenId]) -> Option<CountTarget> {
    question.iter().find_map(|&t| {
        vocab
            .object_kind(t)
            .map(CountTarget::Kind)
            .or_else(|| vocab.color(t).map(CountTarget::Color))
    })
}

/// Parsed `reason: there is M and M ... . result: N`.
struct ReasonAnswer {
    mentions: Vec<Vec<TokenId>>,
    result: u32,
}

fn parse_reason_answer(vocab: &Vocabulary, answer: &[TokenId]) -> Option<ReasonAnswer> {
    let w = |i: usize| answer.get(i).and_then(|&t| vocab.word(t));
    if w(0)? != "reason" || w(1)? != ":" || w(2)? != "there" || w(3)? != "is" {
        return None;
    }
    let n = answer.len();
    if n < 8 || w(n - 4)? != "." || w(n - 3)? != "result" || w(n - 2)? != ":" {
        return None;
    }
    let result = vocab.number(answer[n - 1])?;
    let body = &answer[4..n - 4];
    let mentions = parse_mentions(vocab, body);
    if mentions.is_empty() {
        return None;
    }
    // the body must be exactly mentions joined by "and"
    let and = vocab.expect_id("and");
    let mut expect = 0;
    for (k, m) in mentions.iter().enumerate() {
        if k > 0 {
            if body.get(expect) != Some(&and) {
                return None;
            }
            expect += 1;
        }
        if m.start != expect || m.cell.is_none() {
            return None;
        }
        expect = m.end;
    }
    if expect != body.len() {
        return None;
    }
    Some(ReasonAnswer {
        mentions: mentions.iter().map(|m| body[m.start..m.end].to_vec()).collect(),
        result,
    })
}

fn render_reason_answer(vocab: &Vocabulary, mentions: &[Vec<TokenId>], result: u32) -> Result<Vec<TokenId>, DisprefError> {
    let mut out = vocab.tokenize("reason: there is")?;
    for (k, m) in mentions.iter().enumerate() {
        if k > 0 {
            out.push(vocab.expect_id("and"));
        }
        out.extend_from_slice(m);
    }
    out.extend(vocab.tokenize(". result:")?);
    out.push(
        vocab
            .number_id(result)
            .ok_or_else(|| DisprefError::MalformedAnswer(format!("result {result} out of range")))?,
    );
    Ok(out)
}

fn mention_matches(vocab: &Vocabulary, mention: &[TokenId], target: CountTarget) -> bool {
    mention.iter().any(|&t| match target {
        CountTarget::Kind(k) => vocab.object_kind(t) == Some(k),
        CountTarget::Color(c) => vocab.color(t) == Some(c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReasonCorruption {
    Drop,
    Duplicate,
    /// Moves a mention to another cell; counting logic is untouched.
    Relocate,
    /// Changes the color of a colored mention.
    Recolor,
}

/// Corrupts a reason/result or short answer.
///
/// Short answers: yes/no flips, a number moves by one, a relation word is
/// flipped. Reason/result answers get one of [`ReasonCorruption`] applied to
/// the reason; the result is recomputed from the corrupted reason, which
/// leaves it untouched whenever the corruption does not affect the count.
pub fn hallucinate_reasoning(
    vocab: &Vocabulary,
    scene: &Scene,
    question: &[TokenId],
    answer: &[TokenId],
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    let mut rng = stream(seed, purpose::DISPREF);
    if answer.first().and_then(|&t| vocab.word(t)) == Some("reason") {
        let parsed = parse_reason_answer(vocab, answer)
            .ok_or_else(|| DisprefError::MalformedAnswer("unparseable reason/result answer".into()))?;
        let mut options = vec![ReasonCorruption::Duplicate, ReasonCorruption::Relocate];
        if parsed.mentions.len() >= 2 {
            options.push(ReasonCorruption::Drop);
        }
        if parsed
            .mentions
            .iter()
            .any(|m| m.iter().any(|&t| vocab.color(t).is_some()))
        {
            options.push(ReasonCorruption::Recolor);
        }
        let choice = *options.choose(&mut rng).unwrap();
        return corrupt_reason(vocab, scene, question, &parsed, choice, &mut rng);
    }
    short_answer_error(vocab, scene, answer, seed)
}

/// Applies a specific corruption to a reason/result answer.
pub fn corrupt_reason_answer(
    vocab: &Vocabulary,
    scene: &Scene,
    question: &[TokenId],
    answer: &[TokenId],
    corruption: ReasonCorruption,
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    let parsed = parse_reason_answer(vocab, answer)
        .ok_or_else(|| DisprefError::MalformedAnswer("unparseable reason/result answer".into()))?;
    let mut rng = stream(seed, purpose::DISPREF);
    corrupt_reason(vocab, scene, question, &parsed, corruption, &mut rng)
}

fn corrupt_reason(
    vocab: &Vocabulary,
    scene: &Scene,
    question: &[TokenId],
    parsed: &ReasonAnswer,
    corruption: ReasonCorruption,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>, DisprefError> {
    let mut mentions = parsed.mentions.clone();
    let used: Vec<(u8, u8)> = mentions
        .iter()
        .filter_map(|m| m.iter().find_map(|&t| vocab.cell(t)))
        .collect();
    let mut free: Vec<(u8, u8)> = scene
        .empty_cells()
        .into_iter()
        .filter(|c| !used.contains(c))
        .collect();
    free.shuffle(rng);
    let pick = rng.random_range(0..mentions.len());
    let with_cell = |m: &[TokenId], cell: (u8, u8)| -> Vec<TokenId> {
        m.iter()
            .map(|&t| if vocab.cell(t).is_some() { vocab.cell_id(cell.0, cell.1) } else { t })
            .collect()
    };
    match corruption {
        ReasonCorruption::Drop => {
            if mentions.len() < 2 {
                return Err(DisprefError::MalformedAnswer("nothing left to drop".into()));
            }
            mentions.remove(pick);
        }
        ReasonCorruption::Duplicate => {
            let cell = *free.first().ok_or(DisprefError::NoCandidate)?;
            let copy = with_cell(&mentions[pick], cell);
            mentions.insert(pick + 1, copy);
        }
        ReasonCorruption::Relocate => {
            let cell = *free.first().ok_or(DisprefError::NoCandidate)?;
            mentions[pick] = with_cell(&mentions[pick], cell);
        }
        ReasonCorruption::Recolor => {
            let colored: Vec<usize> = (0..mentions.len())
                .filter(|&i| mentions[i].iter().any(|&t| vocab.color(t).is_some()))
                .collect();
            let &i = colored.choose(rng).ok_or(DisprefError::NoAttribute)?;
            let pos = mentions[i].iter().position(|&t| vocab.color(t).is_some()).unwrap();
            let old = vocab.color(mentions[i][pos]).unwrap();
            let others: Vec<Color> = Color::all().filter(|&c| c != old).collect();
            mentions[i][pos] = vocab.color_id(*others.choose(rng).unwrap());
        }
    }
    let result = match count_target(vocab, question) {
        Some(target) => {
            let recomputed = mentions
                .iter()
                .filter(|m| mention_matches(vocab, m, target))
                .count() as u32;
            if recomputed != parsed.result {
                recomputed
            } else {
                parsed.result
            }
        }
        None => parsed.result,
    };
    render_reason_answer(vocab, &mentions, result)
}

fn short_answer_error(
    vocab: &Vocabulary,
    scene: &Scene,
    answer: &[TokenId],
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    if let [only] = answer {
        let word = vocab.word(*only).unwrap_or_default();
        let flipped = match word {
            "yes" => Some("no".to_string()),
            "no" => Some("yes".to_string()),
            _ => vocab
                .number(*only)
                .map(|n| if n < 9 { n + 1 } else { n - 1 }.to_string()),
        };
        if let Some(w) = flipped {
            return Ok(vec![vocab.expect_id(&w)]);
        }
    }
    if !relation_positions(vocab, answer).is_empty() {
        return inject_relation_error(vocab, scene, answer, seed);
    }
    if answer.iter().any(|&t| vocab.color(t).is_some()) {
        return inject_attribute_error(vocab, scene, answer, seed);
    }
    Err(DisprefError::MalformedAnswer(
        "short answer has no quantity, polarity, relation or attribute to corrupt".into(),
    ))
}

pub const CAPTION_ANNOTATOR_PROMPT: &str = "Help me generate one highly confusing response based on the image and the standard caption in the Question-Answer Pair.
*****************************************
Question-answer Pair:
Q: {question}
A: {answer}
Requirements:
(1) The generated caption is generally similar to the given A, with the same main meaning; (2) You can refer to the following errors to generate the wrong caption (1. The wrong caption can contain some co-occurring objects, which are prone to appear in such scenarios but do not appear in the image; 2. The wrong caption can be an error in the number of entities or the logical relationships between entities; 3. The attributes of entities in the caption can also be modified, such as color, appearance, etc.) (3) Compared to the original caption A, the caption you modified is incorrect based on the provided image.
*****************************************
Output Format:
Answer: your answer";

pub const REASONING_ANNOTATOR_PROMPT: &str = "Now, please help me generate new answers with hallucination errors based on the image, question, and answer provided. There are two cases now:
1. If the given question and answer are short and do not require logical reasoning, then modify the answer to a hallucination error answer, such as some quantity errors or entity and property errors.
2. If the entire question requires logical reasoning, then help me reorganize the answers based on the given image, questions, and answers into the format \"Reason: xxx, Result: xxx\" (Answer 1). Modify the reasons by introducing errors related to logical relationships, entity information, entity attributes, etc. If the error in the reason would lead to a new result, modify the result accordingly. If the error does not lead to a new result, keep the original result. Similarly, organize it in the format \"Reason: xxx, Result: xxx\" (Answer 2).
*****************************************
Question-answer Pair:
Q: {question}
A: {answer}

Requirements:
(1) The generated wrong answer and reasoning process should be combined with the image and be misleading..
*****************************************
Output Format:
Answer: your answer";

pub fn annotator_prompt(task: Task, question: &str, answer: &str) -> String {
    let template = match task {
        Task::Caption => CAPTION_ANNOTATOR_PROMPT,
        _ => REASONING_ANNOTATOR_PROMPT,
    };
    template
        .replace("{question}", question)
        .replace("{answer}", answer)
}

/// Text after the first line starting with `Answer:`.
pub fn parse_annotator_reply(reply: &str) -> Option<String> {
    reply
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("Answer:"))
        .map(|s| s.trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Oracle,
    Remote,
}

pub const ENDPOINT_ENV: &str = "POVID_ANNOTATOR_URL";
pub const KEY_ENV: &str = "POVID_ANNOTATOR_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub backend: Backend,
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    pub key_env: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    /// Use the oracle when the endpoint keeps failing instead of aborting.
    pub fallback_on_error: bool,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Oracle,
            endpoint: None,
            key_env: KEY_ENV.to_string(),
            timeout_secs: 30.0,
            retries: 2,
            cache_dir: None,
            max_in_flight: 4,
            fallback_on_error: false,
        }
    }
}

impl AnnotatorConfig {
    /// Remote backend with the endpoint taken from `POVID_ANNOTATOR_URL`.
    pub fn remote_from_env() -> Self {
        Self {
            backend: Backend::Remote,
            endpoint: std::env::var(ENDPOINT_ENV).ok(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DisprefError> {
        if self.backend == Backend::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(DisprefError::Config(format!(
                "remote backend needs an endpoint (set {ENDPOINT_ENV})"
            )));
        }
        if self.max_in_flight == 0 {
            return Err(DisprefError::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that turns a prompt into raw reply text.
pub trait Annotator: Sync {
    fn complete(&self, prompt: &str) -> Result<String, DisprefError>;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
}

#[derive(Serialize, Deserialize)]
struct WireReply {
    text: String,
}

/// HTTP client: `POST {"prompt": ...}` expecting `{"text": ...}`, with an
/// on-disk cache keyed by the SHA-256 of the request body.
pub struct RemoteAnnotator {
    endpoint: String,
    key: Option<String>,
    retries: u32,
    cache_dir: Option<PathBuf>,
    agent: ureq::Agent,
}

impl RemoteAnnotator {
    pub fn new(config: &AnnotatorConfig) -> Result<Self, DisprefError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        if let Some(dir) = &config.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| DisprefError::Config(e.to_string()))?;
        }
        Ok(Self {
            endpoint,
            key: std::env::var(&config.key_env).ok().filter(|k| !k.is_empty()),
            retries: config.retries,
            cache_dir: config.cache_dir.clone(),
            agent,
        })
    }

    pub fn request_hash(body: &str) -> String {
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    fn post(&self, body: &str) -> Result<String, String> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        let reply: WireReply = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok(reply.text)
    }
}

impl Annotator for RemoteAnnotator {
    fn complete(&self, prompt: &str) -> Result<String, DisprefError> {
        let body = serde_json::to_string(&WireRequest { prompt }).expect("request serializes");
        let cache_file = self
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", Self::request_hash(&body))));
        if let Some(path) = &cache_file {
            if let Ok(bytes) = std::fs::read(path) {
                if let Ok(reply) = serde_json::from_slice::<WireReply>(&bytes) {
                    return Ok(reply.text);
                }
            }
        }
        let mut last = String::new();
        let attempts = self.retries + 1;
        for attempt in 0..attempts {
            match self.post(&body) {
                Ok(text) => {
                    if let Some(path) = &cache_file {
                        let json = serde_json::to_vec(&WireReply { text: text.clone() })
                            .expect("reply serializes");
                        // cache write failures only cost a repeated request
                        let _ = std::fs::write(path, json);
                    }
                    return Ok(text);
                }
                Err(e) => {
                    last = e;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(5)));
                    }
                }
            }
        }
        Err(DisprefError::Annotator {
            endpoint: self.endpoint.clone(),
            attempts,
            message: last,
        })
    }
}

/// Rule-oracle corruption for one corpus record.
pub fn oracle_dispref(
    vocab: &Vocabulary,
    record: &CorpusRecord,
    prior: &CooccurrencePrior,
    seed: u64,
) -> Result<(Vec<TokenId>, Rule), DisprefError> {
    let scene = record.scene();
    let prompt = vocab.tokenize(&record.prompt)?;
    let answer = vocab.tokenize(&record.answer)?;
    match record.task {
        Task::Caption => {
            let mut rules = Vec::new();
            if !cooccurrence_candidates(&scene, prior).is_empty()
                && !parse_mentions(vocab, &answer).is_empty()
            {
                rules.push(Rule::Cooccurrence);
            }
            if !relation_positions(vocab, &answer).is_empty() {
                rules.push(Rule::Relation);
            }
            if answer.iter().any(|&t| vocab.color(t).is_some()) {
                rules.push(Rule::Attribute);
            }
            let mut rng = stream(seed, purpose::TASK);
            let rule = *rules.choose(&mut rng).ok_or(DisprefError::NoCandidate)?;
            apply_rule(vocab, &scene, &prompt, &answer, prior, rule, seed).map(|t| (t, rule))
        }
        Task::Relation => inject_relation_error(vocab, &scene, &answer, seed).map(|t| (t, Rule::Relation)),
        Task::Existence | Task::Count | Task::Reasoning => {
            hallucinate_reasoning(vocab, &scene, &prompt, &answer, seed).map(|t| (t, Rule::Reasoning))
        }
    }
}

pub fn apply_rule(
    vocab: &Vocabulary,
    scene: &Scene,
    question: &[TokenId],
    answer: &[TokenId],
    prior: &CooccurrencePrior,
    rule: Rule,
    seed: u64,
) -> Result<Vec<TokenId>, DisprefError> {
    match rule {
        Rule::Cooccurrence => inject_cooccurrence(vocab, scene, answer, prior, seed),
        Rule::Relation => inject_relation_error(vocab, scene, answer, seed),
        Rule::Attribute => inject_attribute_error(vocab, scene, answer, seed),
        Rule::Reasoning => hallucinate_reasoning(vocab, scene, question, answer, seed),
        Rule::Annotator => Err(DisprefError::Config("annotator is not an oracle rule".into())),
    }
}

/// Why a remote reply was replaced by the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackNote {
    pub id: u64,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ForgeOutcome {
    pub pairs: Vec<PreferencePair>,
    pub fallbacks: Vec<FallbackNote>,
}

/// Builds one preference pair per record.
///
/// Each record's rule draw uses a seed mixed from `seed` and the record id,
/// so results do not depend on processing order.
pub fn forge_pairs(
    vocab: &Vocabulary,
    corpus: &[CorpusRecord],
    prior: &CooccurrencePrior,
    annotator: &AnnotatorConfig,
    seed: u64,
) -> Result<ForgeOutcome, DisprefError> {
    match annotator.backend {
        Backend::Oracle => forge_with(vocab, corpus, prior, None, annotator, seed),
        Backend::Remote => {
            let remote = RemoteAnnotator::new(annotator)?;
            forge_with(vocab, corpus, prior, Some(&remote), annotator, seed)
        }
    }
}

/// [`forge_pairs`] with an explicit annotator implementation.
pub fn forge_with(
    vocab: &Vocabulary,
    corpus: &[CorpusRecord],
    prior: &CooccurrencePrior,
    remote: Option<&dyn Annotator>,
    config: &AnnotatorConfig,
    seed: u64,
) -> Result<ForgeOutcome, DisprefError> {
    let build = |rec: &CorpusRecord| -> Result<(PreferencePair, Option<FallbackNote>), DisprefError> {
        let record_seed = mix(seed, rec.id);
        let prompt = vocab.tokenize(&rec.prompt)?;
        let preferred = vocab.tokenize(&rec.answer)?;
        let image = render_features(&rec.scene());
        let (oracle_text, rule) = oracle_dispref(vocab, rec, prior, record_seed)?;
        let mut pair = PreferencePair {
            scene_id: rec.id,
            image,
            prompt,
            preferred,
            dispreferred_text: oracle_text,
            rule,
            provenance: Provenance::Oracle,
        };
        let Some(remote) = remote else {
            return Ok((pair, None));
        };
        let reply = match remote.complete(&annotator_prompt(rec.task, &rec.prompt, &rec.answer)) {
            Ok(r) => r,
            Err(e) if config.fallback_on_error => {
                pair.provenance = Provenance::Fallback;
                return Ok((pair, Some(FallbackNote { id: rec.id, reason: e.to_string() })));
            }
            Err(e) => return Err(e),
        };
        let verdict = parse_annotator_reply(&reply)
            .ok_or_else(|| "reply has no `Answer:` line".to_string())
            .and_then(|text| vocab.tokenize(&text.to_lowercase()).map_err(|e| e.to_string()))
            .and_then(|toks| {
                if toks.is_empty() {
                    Err("empty answer".to_string())
                } else if toks == pair.preferred {
                    Err("answer equals the preferred response".to_string())
                } else {
                    Ok(toks)
                }
            });
        match verdict {
            Ok(toks) => {
                pair.dispreferred_text = toks;
                pair.rule = Rule::Annotator;
                pair.provenance = Provenance::Remote;
                Ok((pair, None))
            }
            Err(reason) => {
                pair.provenance = Provenance::Fallback;
                Ok((pair, Some(FallbackNote { id: rec.id, reason })))
            }
        }
    };

    let results: Vec<Result<(PreferencePair, Option<FallbackNote>), DisprefError>> = if remote.is_some() {
        bounded_map(corpus, config.max_in_flight.max(1), build)
    } else {
        corpus.iter().map(build).collect()
    };

    let mut out = ForgeOutcome::default();
    for r in results {
        let (pair, note) = r?;
        if let Some(n) = note {
            eprintln!("annotator fallback for record {}: {}", n.id, n.reason);
            out.fallbacks.push(n);
        }
        out.pairs.push(pair);
    }
    Ok(out)
}

/// Maps `f` over `items` with at most `workers` threads, keeping order.
fn bounded_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// One line of the pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: u64,
    pub prompt: String,
    pub preferred: String,
    pub dispreferred_text: String,
    pub rule: Rule,
    pub provenance: Provenance,
}

impl PairRecord {
    pub fn from_pair(vocab: &Vocabulary, pair: &PreferencePair) -> Self {
        let text = |t: &[TokenId]| vocab.detokenize(t).expect("pair tokens are in the lexicon");
        Self {
            id: pair.scene_id,
            prompt: text(&pair.prompt),
            preferred: text(&pair.preferred),
            dispreferred_text: text(&pair.dispreferred_text),
            rule: pair.rule,
            provenance: pair.provenance,
        }
    }

    /// Rebuilds the in-memory pair; the image comes from the corpus record
    /// with the same id.
    pub fn to_pair(&self, vocab: &Vocabulary, record: &CorpusRecord) -> Result<PreferencePair, DisprefError> {
        if record.id != self.id {
            return Err(DisprefError::MalformedAnswer(format!(
                "pair {} joined with corpus record {}",
                self.id, record.id
            )));
        }
        Ok(PreferencePair {
            scene_id: self.id,
            image: render_features(&record.scene()),
            prompt: vocab.tokenize(&self.prompt)?,
            preferred: vocab.tokenize(&self.preferred)?,
            dispreferred_text: vocab.tokenize(&self.dispreferred_text)?,
            rule: self.rule,
            provenance: self.provenance,
        })
    }
}

pub fn write_pairs<W: Write>(vocab: &Vocabulary, mut out: W, pairs: &[PreferencePair]) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, &PairRecord::from_pair(vocab, p))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_pair_records<R: BufRead>(input: R) -> Result<Vec<PairRecord>, DisprefError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DisprefError::MalformedAnswer(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DisprefError::MalformedAnswer(format!("pair line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Joins pair records with their corpus records by id.
pub fn join_pairs(
    vocab: &Vocabulary,
    records: &[PairRecord],
    corpus: &[CorpusRecord],
) -> Result<Vec<PreferencePair>, DisprefError> {
    let by_id: std::collections::HashMap<u64, &CorpusRecord> = corpus.iter().map(|r| (r.id, r)).collect();
    records
        .iter()
        .map(|p| {
            let rec = by_id
                .get(&p.id)
                .ok_or_else(|| DisprefError::MalformedAnswer(format!("no corpus record {}", p.id)))?;
            p.to_pair(vocab, rec)
        })
        .collect()
}

/// Relation of the first two objects named in a relation answer, for
/// ground-truth checks: `(a, relation word, b)`.
pub fn parse_relation_answer(vocab: &Vocabulary, answer: &[TokenId]) -> Option<(ObjectKind, String, ObjectKind)> {
    let kinds: Vec<ObjectKind> = answer.iter().filter_map(|&t| vocab.object_kind(t)).collect();
    let rel = answer
        .iter()
        .filter_map(|&t| vocab.word(t))
        .find(|w| antonym(w).is_some())?;
    match kinds.as_slice() {
        [a, b] => Some((*a, rel.to_string(), *b)),
        _ => None,
    }
}

/// True relation word between two singly-occurring kinds of a scene.
pub fn true_relation(scene: &Scene, a: ObjectKind, b: ObjectKind) -> Option<&'static str> {
    let ia = scene.instances.iter().find(|i| i.kind == a)?;
    let ib = scene.instances.iter().find(|i| i.kind == b)?;
    Some(relation_between(ia, ib))
}

/// A mention resolved to values: kind, optional color, optional cell.
type Grounding = (ObjectKind, Option<Color>, Option<(u8, u8)>);

fn resolve(vocab: &Vocabulary, tokens: &[TokenId], m: &Mention) -> Grounding {
    (
        vocab.object_kind(tokens[m.kind]).expect("mention kind"),
        m.color.and_then(|i| vocab.color(tokens[i])),
        m.cell.and_then(|i| vocab.cell(tokens[i])),
    )
}

fn grounded(scene: &Scene, (kind, color, cell): Grounding) -> bool {
    scene.instances.iter().any(|i| {
        i.kind == kind && color.is_none_or(|c| c == i.color) && cell.is_none_or(|c| c == (i.row, i.col))
    })
}

fn single_substitution(a: &[TokenId], b: &[TokenId]) -> Result<usize, String> {
    if a.len() != b.len() {
        return Err(format!("length changed {} -> {}", a.len(), b.len()));
    }
    let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    match diffs.as_slice() {
        [i] => Ok(*i),
        d => Err(format!("{} positions differ, expected 1", d.len())),
    }
}

/// Checks that a pair's textual dispreference contradicts the scene in
/// exactly the dimension its rule targets and leaves everything else as in
/// the preferred answer. Returns a description of the first violation.
///
/// Independent of the injectors: it only parses the two token sequences and
/// compares them with the scene.
pub fn audit_pair(vocab: &Vocabulary, scene: &Scene, pair: &PreferencePair) -> Result<(), String> {
    let (pref, dis) = (&pair.preferred, &pair.dispreferred_text);
    if dis.is_empty() || dis == pref {
        return Err("dispreferred text is empty or equals the preferred answer".into());
    }
    match pair.rule {
        Rule::Cooccurrence => {
            let and = vocab.expect_id("and");
            let extra = dis
                .len()
                .checked_sub(pref.len())
                .ok_or("insertion shortened the answer")?;
            let ok = (0..=pref.len()).any(|i| {
                if dis[..i] != pref[..i] || dis[i + extra..] != pref[i..] || dis[i] != and {
                    return false;
                }
                let span = &dis[i + 1..i + extra];
                match parse_mentions(vocab, span).as_slice() {
                    [m] if m.start == 0 && m.end == span.len() => {
                        let g = resolve(vocab, span, m);
                        !scene.contains(g.0) && g.2.is_none_or(|(r, c)| scene.at(r, c).is_none())
                    }
                    _ => false,
                }
            });
            if ok {
                Ok(())
            } else {
                Err("no `and <mention>` insertion of an absent object found".into())
            }
        }
        Rule::Relation => {
            let i = single_substitution(pref, dis)?;
            let (old, new) = (vocab.word(pref[i]).unwrap_or(""), vocab.word(dis[i]).unwrap_or(""));
            if antonym(old) != Some(new) {
                return Err(format!("`{old}` -> `{new}` is not an antonym swap"));
            }
            let (a, rel, b) = parse_relation_answer(vocab, dis).ok_or("unparseable relation answer")?;
            let ia = scene.instances.iter().find(|x| x.kind == a).ok_or("subject not in scene")?;
            let ib = scene.instances.iter().find(|x| x.kind == b).ok_or("object not in scene")?;
            if relation_holds(ia, ib, &rel) {
                return Err(format!("`{rel}` is true in the scene"));
            }
            Ok(())
        }
        Rule::Attribute => {
            let i = single_substitution(pref, dis)?;
            let (old, new) = (vocab.color(pref[i]), vocab.color(dis[i]));
            if old.is_none() || new.is_none() || old == new {
                return Err("substitution is not a color change".into());
            }
            let m = parse_mentions(vocab, dis)
                .into_iter()
                .find(|m| m.color == Some(i))
                .ok_or("changed color is not part of a mention")?;
            if grounded(scene, resolve(vocab, dis, &m)) {
                return Err("recolored mention still matches the scene".into());
            }
            Ok(())
        }
        Rule::Reasoning => audit_reasoning(vocab, scene, &pair.prompt, pref, dis),
        Rule::Annotator => Err("annotator text has no rule to audit against".into()),
    }
}

fn audit_reasoning(
    vocab: &Vocabulary,
    scene: &Scene,
    question: &[TokenId],
    pref: &[TokenId],
    dis: &[TokenId],
) -> Result<(), String> {
    if let ([_], [d]) = (pref, dis) {
        // short existence answers: the flipped polarity must be false
        let kind = question
            .iter()
            .find_map(|&t| vocab.object_kind(t))
            .ok_or("short answer without an object in the question")?;
        let claims = match vocab.word(*d) {
            Some("yes") => true,
            Some("no") => false,
            w => return Err(format!("unexpected short answer {w:?}")),
        };
        return if claims == scene.contains(kind) {
            Err("short answer agrees with the scene".into())
        } else {
            Ok(())
        };
    }
    let p = parse_reason_answer(vocab, pref).ok_or("preferred is not a reason/result answer")?;
    let d = parse_reason_answer(vocab, dis).ok_or("dispreferred is not a reason/result answer")?;
    let ground = |m: &[TokenId]| -> Grounding {
        let ms = parse_mentions(vocab, m);
        resolve(vocab, m, &ms[0])
    };
    let pm: Vec<Grounding> = p.mentions.iter().map(|m| ground(m)).collect();
    let dm: Vec<Grounding> = d.mentions.iter().map(|m| ground(m)).collect();

    // exactly one mention dropped, duplicated to a new cell, moved, or recolored
    let minus_one = |long: &[Grounding], short: &[Grounding]| {
        (0..long.len()).find(|&k| long[..k] == short[..k] && long[k + 1..] == short[k..])
    };
    let shape_ok = if dm.len() + 1 == pm.len() {
        minus_one(&pm, &dm).is_some()
    } else if dm.len() == pm.len() + 1 {
        minus_one(&dm, &pm).is_some_and(|k| {
            let (kind, color, _) = dm[k];
            let copy_of = pm.iter().any(|&(pk, pc, _)| pk == kind && pc == color);
            copy_of && !grounded(scene, dm[k])
        })
    } else if dm.len() == pm.len() {
        let diffs: Vec<usize> = (0..pm.len()).filter(|&k| pm[k] != dm[k]).collect();
        match diffs.as_slice() {
            [k] => {
                let (a, b) = (pm[*k], dm[*k]);
                let moved = a.0 == b.0 && a.1 == b.1 && a.2 != b.2;
                let recolored = a.0 == b.0 && a.1 != b.1 && a.2 == b.2;
                (moved || recolored) && !grounded(scene, b)
            }
            _ => false,
        }
    } else {
        false
    };
    if !shape_ok {
        return Err("reason differs by more than one mention-level corruption".into());
    }
    let target = count_target(vocab, question).ok_or("question has no count target")?;
    let recount = d.mentions.iter().filter(|m| mention_matches(vocab, m, target)).count() as u32;
    if d.result != recount {
        return Err(format!("result {} does not follow from the corrupted reason ({recount})", d.result));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::extract_objects;
    use crate::scenegen::{make_qa, ObjectInstance, QaKind};

    fn v() -> &'static Vocabulary {
        Vocabulary::standard()
    }

    fn kind(n: &str) -> ObjectKind {
        ObjectKind::from_name(n).unwrap()
    }

    fn inst(k: &str, c: &str, row: u8, col: u8) -> ObjectInstance {
        ObjectInstance {
            kind: kind(k),
            color: Color::from_name(c).unwrap(),
            row,
            col,
        }
    }

    fn toks(s: &str) -> Vec<TokenId> {
        v().tokenize(s).unwrap()
    }

    fn text(t: &[TokenId]) -> String {
        v().detokenize(t).unwrap()
    }

    #[test]
    fn cooccurrence_forced_single_candidate() {
        let mut prior = CooccurrencePrior::independent(0.1);
        prior.boost[kind("plate").index()][kind("fork").index()] = 0.9;
        let scene = Scene::new(vec![inst("plate", "white", 1, 1)], 0).unwrap();
        let answer = toks("in the image there is a white plate");
        for seed in 0..20 {
            let out = inject_cooccurrence(v(), &scene, &answer, &prior, seed).unwrap();
            let s = text(&out);
            assert!(s.starts_with("in the image there is a white plate and a "), "{s}");
            assert!(s.ends_with(" fork"), "{s}");
        }
    }

    #[test]
    fn cooccurrence_with_cells_uses_free_cell() {
        let prior = CooccurrencePrior::standard();
        let scene = Scene::new(vec![inst("plate", "white", 0, 0), inst("cup", "red", 0, 1)], 0).unwrap();
        let answer = toks("in the image there are a white plate at (0,0) and a red cup at (0,1)");
        for seed in 0..50 {
            let out = inject_cooccurrence(v(), &scene, &answer, &prior, seed).unwrap();
            let ms = parse_mentions(v(), &out);
            assert_eq!(ms.len(), 3);
            let cells: Vec<_> = ms.iter().map(|m| out[m.cell.unwrap()]).collect();
            assert!(cells[0] != cells[1] && cells[1] != cells[2] && cells[0] != cells[2]);
            let added: Vec<_> = extract_objects(v(), &out)
                .into_iter()
                .filter(|k| !scene.contains(*k))
                .collect();
            assert_eq!(added.len(), 1);
        }
    }

    #[test]
    fn cooccurrence_without_absent_kinds() {
        let prior = CooccurrencePrior::standard();
        // every boosted kind present
        let names = ["fork", "knife", "spoon", "banana", "ball", "plate"];
        let scene = Scene::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| inst(n, "red", (i / 4) as u8, (i % 4) as u8))
                .collect(),
            0,
        )
        .unwrap();
        let answer = toks(&crate::scenegen::caption_text(&scene));
        assert!(matches!(
            inject_cooccurrence(v(), &scene, &answer, &prior, 0),
            Err(DisprefError::NoCandidate)
        ));
    }

    #[test]
    fn relation_swap() {
        let scene = Scene::empty(0);
        let out = inject_relation_error(v(), &scene, &toks("the cup is left of the plate"), 3).unwrap();
        assert_eq!(text(&out), "the cup is right of the plate");
        let again = inject_relation_error(v(), &scene, &toks("the cup is left of the plate"), 3).unwrap();
        assert_eq!(out, again);
        assert!(matches!(
            inject_relation_error(v(), &scene, &toks("a red cup"), 0),
            Err(DisprefError::NoRelation)
        ));
    }

    #[test]
    fn attribute_change_is_local() {
        let scene = Scene::empty(0);
        let src = toks("in the image there are a red apple at (0,0) and a blue cup at (1,2)");
        for seed in 0..30 {
            let out = inject_attribute_error(v(), &scene, &src, seed).unwrap();
            assert_eq!(out.len(), src.len());
            let diffs: Vec<usize> = (0..src.len()).filter(|&i| src[i] != out[i]).collect();
            assert_eq!(diffs.len(), 1);
            let i = diffs[0];
            assert!(v().color(src[i]).is_some() && v().color(out[i]).is_some());
        }
        assert!(matches!(
            inject_attribute_error(v(), &scene, &toks("the image is empty"), 0),
            Err(DisprefError::NoAttribute)
        ));
    }

    #[test]
    fn reasoning_drop_recomputes_count() {
        let scene = Scene::new(vec![inst("cup", "blue", 0, 1), inst("cup", "red", 2, 3)], 0).unwrap();
        let q = toks("how many cup objects are there ?");
        let a = toks("reason: there is a cup at (0,1) and a cup at (2,3). result: 2");
        let out = corrupt_reason_answer(v(), &scene, &q, &a, ReasonCorruption::Drop, 0).unwrap();
        let s = text(&out);
        assert!(
            s == "reason: there is a cup at (0,1). result: 1"
                || s == "reason: there is a cup at (2,3). result: 1",
            "{s}"
        );
    }

    #[test]
    fn reasoning_relocation_keeps_result() {
        let scene = Scene::new(vec![inst("cup", "blue", 0, 1), inst("cup", "red", 2, 3)], 0).unwrap();
        let q = toks("how many cup objects are there ?");
        let a = toks("reason: there is a cup at (0,1) and a cup at (2,3). result: 2");
        for seed in 0..10 {
            let out = corrupt_reason_answer(v(), &scene, &q, &a, ReasonCorruption::Relocate, seed).unwrap();
            assert_ne!(out, a);
            assert!(text(&out).ends_with("result: 2"));
        }
    }

    #[test]
    fn reasoning_recolor_changes_color_count() {
        let scene = Scene::new(vec![inst("cup", "red", 0, 1), inst("fork", "red", 2, 3)], 0).unwrap();
        let q = toks("how many red objects are there ?");
        let a = toks("reason: there is a red cup at (0,1) and a red fork at (2,3). result: 2");
        let out = corrupt_reason_answer(v(), &scene, &q, &a, ReasonCorruption::Recolor, 4).unwrap();
        assert!(text(&out).ends_with("result: 1"), "{}", text(&out));
        let dup = corrupt_reason_answer(v(), &scene, &q, &a, ReasonCorruption::Duplicate, 4).unwrap();
        assert!(text(&dup).ends_with("result: 3"), "{}", text(&dup));
    }

    #[test]
    fn short_answers() {
        let scene = Scene::empty(0);
        let q = toks("how many cup objects are there ?");
        let out = hallucinate_reasoning(v(), &scene, &q, &toks("2"), 0).unwrap();
        assert_eq!(text(&out), "3");
        let out = hallucinate_reasoning(v(), &scene, &q, &toks("yes"), 0).unwrap();
        assert_eq!(text(&out), "no");
        assert!(matches!(
            hallucinate_reasoning(v(), &scene, &q, &toks("the image"), 0),
            Err(DisprefError::MalformedAnswer(_))
        ));
        assert!(matches!(
            hallucinate_reasoning(v(), &scene, &q, &toks("reason: the image"), 0),
            Err(DisprefError::MalformedAnswer(_))
        ));
    }

    #[test]
    fn reasoning_output_always_differs() {
        let prior = CooccurrencePrior::standard();
        for seed in 0..300 {
            let scene = crate::scenegen::sample_scene(&prior, seed);
            for kind in [QaKind::Count, QaKind::Reasoning, QaKind::Existence] {
                let qa = make_qa(&scene, kind, seed).unwrap();
                let (q, a) = qa.tokens(v());
                let out = hallucinate_reasoning(v(), &scene, &q, &a, seed).unwrap();
                assert_ne!(out, a, "{}", qa.answer);
            }
        }
    }

    #[test]
    fn annotator_prompt_substitution() {
        let p = annotator_prompt(Task::Caption, "describe the image .", "in the image there is a red cup");
        assert!(p.contains("Q: describe the image .\nA: in the image there is a red cup\n"));
        assert!(p.starts_with("Help me generate one highly confusing response"));
        let p = annotator_prompt(Task::Count, "q", "a");
        assert!(p.contains("\"Reason: xxx, Result: xxx\""));
        assert!(p.ends_with("Answer: your answer"));
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(
            parse_annotator_reply("Sure!\nAnswer: a red fork\nextra").as_deref(),
            Some("a red fork")
        );
        assert_eq!(parse_annotator_reply("no marker"), None);
    }

    #[test]
    fn remote_requires_endpoint() {
        let cfg = AnnotatorConfig {
            backend: Backend::Remote,
            endpoint: None,
            ..AnnotatorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(DisprefError::Config(_))));
    }
}
