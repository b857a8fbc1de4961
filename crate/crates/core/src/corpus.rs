//! Synthetic personalized-search corpus and dataset I/O.
//!
//! Every user has a persistent long-term attribute that shows up in all of
//! their older queries, and every sample has a session topic that shows up in
//! the user's most recent queries. Golden queries follow the grammar
//!
//! ```text
//! <head> <topic> <attribute>
//! ```
//!
//! so a short prefix (which only reveals the head) can be completed only by a
//! model that reads both interest levels. Heads have pairwise distinct first
//! letters, and typos never touch the first character, so the golden query is
//! a function of `(prefix[0], recent topic, user attribute)`.
//!
//! Toxic samples replace the head with a token from the toxic manifest and
//! always cut the prefix after the whole toxic token.

use crate::error::{LadError, Result};
use crate::expert::{is_toxic, QualityScorer};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSample {
    pub user_id: String,
    /// Older queries, oldest first.
    pub long_term: Vec<String>,
    /// Most recent queries, oldest first.
    pub short_term: Vec<String>,
    pub prefix: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_users: usize,
    pub samples_per_user: usize,
    pub alphabet_size: usize,
    pub topic_count: usize,
    pub attribute_count: usize,
    pub toxic_token_count: usize,
    pub toxic_prefix_fraction: f64,
    pub typo_fraction: f64,
    pub seed: u64,
    /// Number of generic head words.
    pub head_count: usize,
    /// Long-term behaviors kept per user (before the encoder's own cap).
    pub long_term_len: usize,
    /// Recent queries per sample.
    pub short_term_len: usize,
    /// Fraction of each user's samples (their latest ones) held out for test.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_users: 5000,
            samples_per_user: 10,
            alphabet_size: 20,
            topic_count: 16,
            attribute_count: 8,
            toxic_token_count: 4,
            toxic_prefix_fraction: 0.15,
            typo_fraction: 0.1,
            seed: 42,
            head_count: 4,
            long_term_len: 9,
            short_term_len: 3,
            test_fraction: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("samples_per_user", self.samples_per_user),
            ("alphabet_size", self.alphabet_size),
            ("topic_count", self.topic_count),
            ("attribute_count", self.attribute_count),
            ("toxic_token_count", self.toxic_token_count),
            ("head_count", self.head_count),
            ("long_term_len", self.long_term_len),
            ("short_term_len", self.short_term_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LadError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("toxic_prefix_fraction", self.toxic_prefix_fraction),
            ("typo_fraction", self.typo_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LadError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.alphabet_size > 26 {
            return Err(LadError::Config("alphabet_size is limited to 26 letters".into()));
        }
        // Heads and toxic tokens each need their own initial letter.
        if self.alphabet_size < self.head_count + self.toxic_token_count + 1 {
            return Err(LadError::Config(format!(
                "alphabet of {} letters cannot give distinct initials to {} heads and {} toxic tokens",
                self.alphabet_size, self.head_count, self.toxic_token_count
            )));
        }
        // 4-letter words must comfortably outnumber what we draw.
        let words = self.topic_count + self.attribute_count + self.toxic_token_count + self.head_count;
        if self.alphabet_size.pow(3) < 4 * words {
            return Err(LadError::Config(format!(
                "alphabet of {} letters is too small for {} distinct words",
                self.alphabet_size, words
            )));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Vec<char> {
        (0..self.alphabet_size)
            .map(|i| (b'a' + i as u8) as char)
            .collect()
    }
}

/// The closed word lists of one generated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub heads: Vec<String>,
    pub topics: Vec<String>,
    pub attributes: Vec<String>,
    pub toxic: Vec<String>,
}

impl Lexicon {
    /// The golden query implied by a prefix, a session topic and a user
    /// attribute. `None` if the prefix's first letter matches no head.
    pub fn complete(&self, prefix: &str, topic: &str, attribute: &str) -> Option<String> {
        let first = prefix.chars().next()?;
        self.heads
            .iter()
            .chain(&self.toxic)
            .find(|w| w.starts_with(first))
            .map(|head| format!("{head} {topic} {attribute}"))
    }

    /// Topic word of a well-formed query (its second word).
    pub fn topic_of<'a>(&self, query: &'a str) -> Option<&'a str> {
        query.split(' ').nth(1)
    }

    pub fn attribute_of<'a>(&self, query: &'a str) -> Option<&'a str> {
        query.split(' ').nth(2)
    }
}

/// Everything `generate_corpus` produces, before it is written out.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<UserSample>,
    pub test: Vec<UserSample>,
    pub lexicon: Lexicon,
    /// Per-user long-term behavior log, in user order.
    pub behaviors: Vec<BehaviorRecord>,
    pub alphabet: Vec<char>,
}

/// One user's long-term behavior log entry, as consumed by the memory bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub user_id: String,
    pub queries: Vec<String>,
}

/// File names inside a dataset directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TOXIC_MANIFEST_FILE: &str = "toxic_tokens.txt";
pub const BEHAVIOR_FILE: &str = "behaviors.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";

/// Build the corpus in memory. Pure function of `cfg`.
pub fn build_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let alphabet = cfg.alphabet();
    let mut rng = SeededRng::new(cfg.seed);
    let lexicon = draw_lexicon(cfg, &alphabet, &mut rng);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut behaviors = Vec::with_capacity(cfg.num_users);
    let n_test = ((cfg.samples_per_user as f64) * cfg.test_fraction).round() as usize;
    let width = cfg.num_users.to_string().len();

    for u in 0..cfg.num_users {
        let user_id = format!("u{u:0width$}");
        let mut urng = SeededRng::derive(cfg.seed, &user_id);
        let attribute = &lexicon.attributes[urng.below(lexicon.attributes.len())];
        let long_term: Vec<String> = (0..cfg.long_term_len)
            .map(|_| {
                let head = &lexicon.heads[urng.below(lexicon.heads.len())];
                let topic = &lexicon.topics[urng.below(lexicon.topics.len())];
                format!("{head} {topic} {attribute}")
            })
            .collect();
        behaviors.push(BehaviorRecord {
            user_id: user_id.clone(),
            queries: long_term.clone(),
        });

        for s in 0..cfg.samples_per_user {
            let topic = &lexicon.topics[urng.below(lexicon.topics.len())];
            let short_term: Vec<String> = (0..cfg.short_term_len)
                .map(|_| {
                    let head = &lexicon.heads[urng.below(lexicon.heads.len())];
                    format!("{head} {topic}")
                })
                .collect();
            let toxic = urng.chance(cfg.toxic_prefix_fraction);
            let head = if toxic {
                &lexicon.toxic[urng.below(lexicon.toxic.len())]
            } else {
                &lexicon.heads[urng.below(lexicon.heads.len())]
            };
            let target = format!("{head} {topic} {attribute}");
            let prefix = if toxic {
                let n = target.chars().count();
                let k = urng.range_inclusive(head.chars().count(), n - 1);
                target.chars().take(k).collect()
            } else {
                let p = sample_prefix(&target, &mut urng)?;
                if urng.chance(cfg.typo_fraction) {
                    inject_typo(&p, &alphabet, &lexicon.toxic, &mut urng)
                } else {
                    p
                }
            };
            let sample = UserSample {
                user_id: user_id.clone(),
                long_term: long_term.clone(),
                short_term,
                prefix,
                target,
            };
            if s >= cfg.samples_per_user - n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(Corpus {
        train,
        test,
        lexicon,
        behaviors,
        alphabet,
    })
}

fn draw_lexicon(cfg: &GenConfig, alphabet: &[char], rng: &mut SeededRng) -> Lexicon {
    let mut used: HashSet<String> = HashSet::new();
    // Initials for heads and toxic tokens, drawn without replacement.
    let mut initials = alphabet.to_vec();
    rng.shuffle(&mut initials);
    let mut next_initial = initials.into_iter();

    let word = |rng: &mut SeededRng, first: Option<char>, len: usize, used: &mut HashSet<String>| loop {
        let mut w = String::with_capacity(len);
        if let Some(c) = first {
            w.push(c);
        }
        while w.chars().count() < len {
            w.push(alphabet[rng.below(alphabet.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    };

    let heads: Vec<String> = (0..cfg.head_count)
        .map(|_| word(rng, next_initial.next(), 3, &mut used))
        .collect();
    let toxic_initials: Vec<char> = (0..cfg.toxic_token_count)
        .map(|_| next_initial.next().expect("validated initial count"))
        .collect();
    let topics: Vec<String> = (0..cfg.topic_count)
        .map(|_| {
            let len = 4 + rng.below(2);
            word(rng, None, len, &mut used)
        })
        .collect();
    let attributes: Vec<String> = (0..cfg.attribute_count)
        .map(|_| {
            let len = 4 + rng.below(2);
            word(rng, None, len, &mut used)
        })
        .collect();
    let clean: Vec<&String> = heads.iter().chain(&topics).chain(&attributes).collect();
    let toxic = toxic_initials
        .into_iter()
        .map(|c| loop {
            let w = word(rng, Some(c), 4, &mut used);
            if !clean.iter().any(|cw| cw.contains(w.as_str()) || w.contains(cw.as_str())) {
                break w;
            }
        })
        .collect();
    Lexicon {
        heads,
        topics,
        attributes,
        toxic,
    }
}

/// Cut a training prefix from a golden query: `target[..k]` with `k`
/// uniform in `1..len`, or the whole target when it has one character.
pub fn sample_prefix(target: &str, rng: &mut SeededRng) -> Result<String> {
    let n = target.chars().count();
    match n {
        0 => Err(LadError::InvalidInput("cannot cut a prefix from an empty target".into())),
        1 => Ok(target.to_string()),
        _ => {
            let k = rng.range_inclusive(1, n - 1);
            Ok(target.chars().take(k).collect())
        }
    }
}

/// Substitute one non-initial, non-space character of `prefix` with a
/// different alphabet letter, never creating a toxic token.
fn inject_typo(prefix: &str, alphabet: &[char], toxic: &[String], rng: &mut SeededRng) -> String {
    let chars: Vec<char> = prefix.chars().collect();
    let slots: Vec<usize> = (1..chars.len()).filter(|&i| chars[i] != ' ').collect();
    if slots.is_empty() {
        return prefix.to_string();
    }
    for _ in 0..16 {
        let pos = slots[rng.below(slots.len())];
        let mut c = alphabet[rng.below(alphabet.len())];
        if c == chars[pos] {
            c = alphabet[(alphabet.iter().position(|&a| a == c).unwrap() + 1) % alphabet.len()];
        }
        let mut out = chars.clone();
        out[pos] = c;
        let s: String = out.into_iter().collect();
        if !toxic.iter().any(|t| s.contains(t.as_str())) {
            return s;
        }
    }
    prefix.to_string()
}

/// Partition samples by whether their prefix is toxic under `scorer`.
/// Returns `(toxic, non_toxic)`.
pub fn split_by_toxicity<S: QualityScorer + ?Sized>(
    samples: &[UserSample],
    scorer: &S,
) -> (Vec<UserSample>, Vec<UserSample>) {
    samples
        .iter()
        .cloned()
        .partition(|s| is_toxic(scorer, &s.prefix))
}

/// Write the corpus into `dir` (created if needed). Each file is written to a
/// temporary sibling and renamed into place.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LadError::io(dir, e))?;
    write_atomic(&dir.join(TRAIN_FILE), &samples_to_jsonl(&corpus.train)?)?;
    write_atomic(&dir.join(TEST_FILE), &samples_to_jsonl(&corpus.test)?)?;
    let mut manifest = String::new();
    for t in &corpus.lexicon.toxic {
        manifest.push_str(t);
        manifest.push('\n');
    }
    write_atomic(&dir.join(TOXIC_MANIFEST_FILE), manifest.as_bytes())?;
    let mut beh = Vec::new();
    for b in &corpus.behaviors {
        serde_json::to_writer(&mut beh, b)?;
        beh.push(b'\n');
    }
    write_atomic(&dir.join(BEHAVIOR_FILE), &beh)?;
    let mut lex = serde_json::to_vec_pretty(&corpus.lexicon)?;
    lex.push(b'\n');
    write_atomic(&dir.join(LEXICON_FILE), &lex)?;
    Ok(())
}

/// Generate a corpus from `cfg` and write it into `dir`.
pub fn generate_corpus(cfg: &GenConfig, dir: &Path) -> Result<Corpus> {
    let corpus = build_corpus(cfg)?;
    write_corpus(&corpus, dir)?;
    Ok(corpus)
}

fn samples_to_jsonl(samples: &[UserSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| LadError::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| LadError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LadError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LadError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LadError::io(path, e))?;
    Ok(())
}

/// Read a JSON-lines dataset, preserving file order.
pub fn load_samples(path: &Path) -> Result<Vec<UserSample>> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    parse_samples(&text, path)
}

pub fn parse_samples(text: &str, path: &Path) -> Result<Vec<UserSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| LadError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let schema = |message: String| LadError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("record is not a JSON object".into()))?;
        for field in ["user_id", "long_term", "short_term", "prefix", "target"] {
            if !obj.contains_key(field) {
                return Err(schema(format!("missing required field \"{field}\"")));
            }
        }
        let sample: UserSample = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_toxic_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn load_behaviors(path: &Path) -> Result<Vec<BehaviorRecord>> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BehaviorRecord = serde_json::from_str(line).map_err(|e| LadError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Behavior log derived from a sample set: the long-term list of the last
/// sample seen for each user.
pub fn behaviors_from_samples(samples: &[UserSample]) -> Vec<BehaviorRecord> {
    let mut map: BTreeMap<&str, &Vec<String>> = BTreeMap::new();
    for s in samples {
        map.insert(&s.user_id, &s.long_term);
    }
    map.into_iter()
        .map(|(u, q)| BehaviorRecord {
            user_id: u.to_string(),
            queries: q.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::RuleExpert;

    fn small() -> GenConfig {
        GenConfig {
            num_users: 100,
            samples_per_user: 10,
            ..GenConfig::default()
        }
    }

    #[test]
    fn emits_exact_sample_count() {
        let c = build_corpus(&small()).unwrap();
        assert_eq!(c.train.len() + c.test.len(), 1000);
        assert_eq!(c.test.len(), 100);
    }

    #[test]
    fn writes_identical_bytes_for_same_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small(), a.path()).unwrap();
        generate_corpus(&small(), b.path()).unwrap();
        for f in [TRAIN_FILE, TEST_FILE, TOXIC_MANIFEST_FILE, BEHAVIOR_FILE, LEXICON_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn different_seed_changes_output() {
        let a = build_corpus(&small()).unwrap();
        let b = build_corpus(&GenConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn zero_toxic_fraction_gives_empty_toxic_split() {
        let cfg = GenConfig {
            toxic_prefix_fraction: 0.0,
            ..small()
        };
        let c = build_corpus(&cfg).unwrap();
        let expert = RuleExpert::new(c.lexicon.toxic.clone());
        let (toxic, clean) = split_by_toxicity(&c.test, &expert);
        assert!(toxic.is_empty());
        assert_eq!(clean.len(), c.test.len());
    }

    #[test]
    fn toxic_samples_carry_whole_toxic_token() {
        let c = build_corpus(&small()).unwrap();
        let toxic: Vec<_> = c
            .test
            .iter()
            .chain(&c.train)
            .filter(|s| c.lexicon.toxic.iter().any(|t| s.target.starts_with(t.as_str())))
            .collect();
        assert!(!toxic.is_empty());
        for s in toxic {
            assert!(c.lexicon.toxic.iter().any(|t| s.prefix.contains(t.as_str())));
        }
    }

    #[test]
    fn golden_is_determined_by_prefix_topic_attribute() {
        let c = build_corpus(&small()).unwrap();
        for s in c.train.iter().chain(&c.test) {
            let topic = c.lexicon.topic_of(s.short_term.last().unwrap()).unwrap();
            let attr = c.lexicon.attribute_of(&s.long_term[0]).unwrap();
            assert_eq!(
                c.lexicon.complete(&s.prefix, topic, attr).as_deref(),
                Some(s.target.as_str())
            );
        }
    }

    #[test]
    fn prefixes_are_strict_and_nonempty() {
        let c = build_corpus(&small()).unwrap();
        for s in c.train.iter().chain(&c.test) {
            let (p, t) = (s.prefix.chars().count(), s.target.chars().count());
            assert!(p >= 1 && p < t, "{s:?}");
        }
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = GenConfig {
            alphabet_size: 4,
            ..small()
        };
        assert!(matches!(build_corpus(&cfg), Err(LadError::Config(_))));
        let cfg = GenConfig {
            typo_fraction: 1.5,
            ..small()
        };
        assert!(build_corpus(&cfg).is_err());
        let cfg = GenConfig {
            topic_count: 0,
            ..small()
        };
        assert!(build_corpus(&cfg).is_err());
    }

    #[test]
    fn unwritable_output_path_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        let err = generate_corpus(&small(), &file.join("sub")).unwrap_err();
        assert!(matches!(err, LadError::Io { .. }));
    }

    #[test]
    fn sample_prefix_cases() {
        let mut rng = SeededRng::new(0);
        assert_eq!(sample_prefix("x", &mut rng).unwrap(), "x");
        assert!(sample_prefix("", &mut rng).is_err());
        for _ in 0..100 {
            let p = sample_prefix("abcd", &mut rng).unwrap();
            assert!("abcd".starts_with(&p) && !p.is_empty() && p.len() < 4);
        }
    }

    #[test]
    fn sample_prefix_is_uniform_over_cut_points() {
        // Chi-square against the uniform law over k in {1, 2, 3}.
        let mut rng = SeededRng::new(11);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let k = sample_prefix("abcd", &mut rng).unwrap().len();
            counts[k - 1] += 1;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.05);
        }
    }

    #[test]
    fn load_preserves_order_and_reports_lines() {
        let p = Path::new("mem.jsonl");
        assert!(parse_samples("", p).unwrap().is_empty());
        let rec = |t: &str| {
            format!(
                r#"{{"user_id":"u","long_term":[],"short_term":["a"],"prefix":"a","target":"{t}"}}"#
            )
        };
        let text = format!("{}\n{}\n{}\n", rec("ab"), rec("ac"), rec("ad"));
        let got = parse_samples(&text, p).unwrap();
        assert_eq!(
            got.iter().map(|s| s.target.as_str()).collect::<Vec<_>>(),
            ["ab", "ac", "ad"]
        );

        let missing = format!(
            "{}\n{}\n",
            rec("ab"),
            r#"{"user_id":"u","long_term":[],"short_term":[],"prefix":"a"}"#
        );
        match parse_samples(&missing, p) {
            Err(LadError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("target"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        match parse_samples("{not json\n", p) {
            Err(LadError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn typo_fraction_is_roughly_respected() {
        let cfg = GenConfig {
            num_users: 200,
            toxic_prefix_fraction: 0.0,
            typo_fraction: 0.3,
            ..small()
        };
        let c = build_corpus(&cfg).unwrap();
        let all: Vec<_> = c.train.iter().chain(&c.test).collect();
        let typos = all.iter().filter(|s| !s.target.starts_with(&s.prefix)).count();
        let frac = typos as f64 / all.len() as f64;
        // Single-letter prefixes cannot carry a typo, so the rate sits a little below 0.3.
        assert!(frac > 0.2 && frac <= 0.3, "typo rate {frac}");
    }
}
