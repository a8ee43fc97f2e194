//! Subclass descriptor generation: prompting a language model for subclass
//! names of each segmentation class, parsing its reply, and caching the
//! result so reruns never hit the service twice.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::llm::{class_slug, ChatCompletion, PromptRequest};

/// Prompt phrasing for subclass generation. `P1` asks the bare question;
/// `P2` prefixes two worked question/answer examples, which keeps models on
/// the comma-separated format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    P1,
    P2,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::P1 => "p1",
            PromptMode::P2 => "p2",
        })
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(PromptMode::P1),
            "p2" => Ok(PromptMode::P2),
            other => Err(Error::InvalidParam(format!(
                "unknown prompt mode {other:?}"
            ))),
        }
    }
}

/// Build the generation prompt for `class_name`. The text is fixed
/// verbatim — downstream caches key on it, so even whitespace is load-bearing.
pub fn build_prompt(class_name: &str, n: usize, mode: PromptMode) -> Result<String> {
    let class_name = class_name.trim();
    if class_name.is_empty() {
        return Err(Error::EmptyClassName);
    }
    if n == 0 {
        return Err(Error::ZeroSubclasses);
    }
    Ok(match mode {
        PromptMode::P1 => format!(
            "Q: List {n} subclasses of the following: {class_name}\n\
             A: Here are {n} commonly seen subclasses of {class_name}:"
        ),
        PromptMode::P2 => format!(
            "Q1:List 3 subclasses of the person:\n\
             A1:female, male, child\n\
             Q2:List 3 subclasses of the boat:\n\
             A2:fishing boat, cruise ship, ship\n\
             Q:List {n} subclasses of the following: {class_name}\n\
             A:Here are {n} commonly seen subclasses of {class_name}:"
        ),
    })
}

/// One entry of a model reply, cleaned: list markers and surrounding quotes
/// stripped, whitespace trimmed, lowercased. `None` if nothing is left.
fn clean_entry(raw: &str) -> Option<String> {
    let mut s = raw;
    loop {
        s = s.trim();
        if let Some(rest) = s.strip_prefix(['-', '•', '*']) {
            s = rest;
            continue;
        }
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
                s = rest;
                continue;
            }
        }
        if s.len() >= 2
            && ((s.starts_with('"') && s.ends_with('"'))
                || (s.starts_with('\'') && s.ends_with('\'')))
        {
            s = &s[1..s.len() - 1];
            continue;
        }
        break;
    }
    let cleaned = s.to_lowercase();
    (!cleaned.is_empty()).then_some(cleaned)
}

/// All distinct cleaned entries of `response_text`, split on commas and
/// newlines, in order of first appearance.
fn normalized_entries(response_text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for piece in response_text.split(['\n', ',']) {
        if let Some(entry) = clean_entry(piece) {
            if seen.insert(entry.clone()) {
                out.push(entry);
            }
        }
    }
    out
}

/// Parse a model reply into exactly `n` distinct subclass names.
///
/// Fewer than `n` distinct entries is an error carrying the partial list, so
/// callers can surface what the model actually said.
pub fn parse_subclasses(response_text: &str, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::ZeroSubclasses);
    }
    let mut entries = normalized_entries(response_text);
    if entries.len() < n {
        return Err(Error::GenerationIncomplete {
            wanted: n,
            partial: entries,
        });
    }
    entries.truncate(n);
    Ok(entries)
}

/// A generated descriptor set for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassSet {
    pub superclass: String,
    pub subclasses: Vec<String>,
    pub n: usize,
    pub prompt_mode: PromptMode,
    pub model_id: String,
    pub cache_key: String,
}

impl SubclassSet {
    pub fn validate(&self) -> Result<()> {
        if self.superclass.trim().is_empty() {
            return Err(Error::EmptyClassName);
        }
        if self.n == 0 {
            return Err(Error::ZeroSubclasses);
        }
        if self.subclasses.len() != self.n {
            return Err(Error::InvalidSubclassSet(format!(
                "expected {} subclasses, found {}",
                self.n,
                self.subclasses.len()
            )));
        }
        let superclass = self.superclass.trim().to_lowercase();
        let mut seen = HashSet::new();
        for s in &self.subclasses {
            if s.trim().is_empty() {
                return Err(Error::InvalidSubclassSet("empty subclass name".into()));
            }
            if *s == superclass {
                return Err(Error::InvalidSubclassSet(format!(
                    "subclass {s:?} repeats the superclass"
                )));
            }
            if !seen.insert(s) {
                return Err(Error::InvalidSubclassSet(format!(
                    "duplicate subclass {s:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic cache key: same model, prompt mode, class, and count always
/// hit the same file.
pub fn cache_key(model_id: &str, mode: PromptMode, class_name: &str, n: usize) -> String {
    let class = class_name.trim().to_lowercase();
    let mut hasher = Sha256::new();
    hasher.update(format!("{model_id}|{mode}|{class}|{n}"));
    hex::encode(hasher.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    set: SubclassSet,
    raw_response: String,
}

/// File cache of generation results, one JSON file per cache key.
pub struct SubclassCache {
    dir: PathBuf,
}

impl SubclassCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn load(&self, key: &str) -> Result<Option<SubclassSet>> {
        let path = self.path(key);
        if !path.is_file() {
            return Ok(None);
        }
        let entry: CacheEntry = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        entry.set.validate()?;
        Ok(Some(entry.set))
    }

    fn store(&self, set: &SubclassSet, raw_response: &str) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let entry = CacheEntry {
            set: set.clone(),
            raw_response: raw_response.to_owned(),
        };
        let path = self.path(&set.cache_key);
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub model_id: String,
    pub max_tokens: u32,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".to_owned(),
            max_tokens: 256,
        }
    }
}

/// Produce `n` distinct subclasses of `class_name`, consulting `cache` first.
///
/// Replies that merely repeat the superclass are dropped before counting, so
/// a reply of "cat, tabby, siamese" for class "cat" yields tabby and siamese.
pub fn generate_subclasses(
    class_name: &str,
    n: usize,
    mode: PromptMode,
    client: &dyn ChatCompletion,
    cache: &SubclassCache,
    options: &GenOptions,
) -> Result<SubclassSet> {
    let prompt = build_prompt(class_name, n, mode)?;
    let key = cache_key(&options.model_id, mode, class_name, n);
    if let Some(set) = cache.load(&key)? {
        return Ok(set);
    }

    let raw = client.complete(&PromptRequest {
        model_id: options.model_id.clone(),
        prompt_text: prompt,
        temperature: 0.0,
        max_tokens: options.max_tokens,
    })?;

    let superclass_norm = class_name.trim().to_lowercase();
    let mut entries = normalized_entries(&raw);
    entries.retain(|e| *e != superclass_norm);
    if entries.len() < n {
        return Err(Error::GenerationIncomplete {
            wanted: n,
            partial: entries,
        });
    }
    entries.truncate(n);

    let set = SubclassSet {
        superclass: class_name.trim().to_owned(),
        subclasses: entries,
        n,
        prompt_mode: mode,
        model_id: options.model_id.clone(),
        cache_key: key,
    };
    set.validate()?;
    cache.store(&set, &raw)?;
    Ok(set)
}

/// Write a set to `{dir}/{class_slug}.json` for later runs to pick up.
pub fn save_set(dir: &Path, set: &SubclassSet) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", class_slug(&set.superclass)));
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, serde_json::to_vec_pretty(set)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Load the saved set for `class_name` from `dir`, if present.
pub fn load_set(dir: &Path, class_name: &str) -> Result<Option<SubclassSet>> {
    let path = dir.join(format!("{}.json", class_slug(class_name)));
    if !path.is_file() {
        return Ok(None);
    }
    let set: SubclassSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    set.validate()?;
    Ok(Some(set))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comma_separated_reply() {
        let got = parse_subclasses("female, male, child", 3).unwrap();
        assert_eq!(got, vec!["female", "male", "child"]);
    }

    #[test]
    fn parses_numbered_and_bulleted_lines() {
        let reply = "1. Tabby\n2) Siamese\n- Persian\n• Sphynx\n* \"Maine Coon\"";
        let got = parse_subclasses(reply, 5).unwrap();
        assert_eq!(
            got,
            vec!["tabby", "siamese", "persian", "sphynx", "maine coon"]
        );
    }

    #[test]
    fn keeps_leading_counts_that_are_part_of_the_name() {
        // "3 cats" is a name, "3." is a list marker.
        let got = parse_subclasses("3 wheeler, 3. trike", 2).unwrap();
        assert_eq!(got, vec!["3 wheeler", "trike"]);
    }

    #[test]
    fn dedupes_case_insensitively_preserving_order() {
        let got = parse_subclasses("Tabby, tabby, TABBY, cat", 2).unwrap();
        assert_eq!(got, vec!["tabby", "cat"]);
    }

    #[test]
    fn incomplete_reply_reports_partial_list() {
        match parse_subclasses("tabby, siamese", 5) {
            Err(Error::GenerationIncomplete { wanted, partial }) => {
                assert_eq!(wanted, 5);
                assert_eq!(partial, vec!["tabby", "siamese"]);
            }
            other => panic!("expected GenerationIncomplete, got {other:?}"),
        }
    }

    #[test]
    fn empty_class_and_zero_n_are_rejected() {
        assert!(matches!(
            build_prompt("  ", 3, PromptMode::P1),
            Err(Error::EmptyClassName)
        ));
        assert!(matches!(
            build_prompt("cat", 0, PromptMode::P1),
            Err(Error::ZeroSubclasses)
        ));
    }

    #[test]
    fn cache_key_is_stable_and_input_sensitive() {
        let a = cache_key("m1", PromptMode::P2, "Cat", 10);
        assert_eq!(a, cache_key("m1", PromptMode::P2, "  cat ", 10));
        assert_ne!(a, cache_key("m1", PromptMode::P1, "cat", 10));
        assert_ne!(a, cache_key("m2", PromptMode::P2, "cat", 10));
        assert_ne!(a, cache_key("m1", PromptMode::P2, "cat", 9));
        assert_eq!(a.len(), 64);
    }

    struct StubClient {
        reply: String,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl StubClient {
        fn new(reply: &str) -> Self {
            Self {
                reply: reply.to_owned(),
                calls: std::sync::atomic::AtomicUsize::new(0),
            }
        }
    }

    impl ChatCompletion for StubClient {
        fn complete(&self, _req: &PromptRequest) -> Result<String> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.reply.clone())
        }
    }

    fn tmp_cache(name: &str) -> SubclassCache {
        let dir =
            std::env::temp_dir().join(format!("subclass-cache-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        SubclassCache::new(dir)
    }

    #[test]
    fn generation_filters_superclass_echo_and_caches() {
        let client = StubClient::new("cat, tabby, siamese, persian");
        let cache = tmp_cache("filter");
        let set = generate_subclasses(
            "cat",
            3,
            PromptMode::P2,
            &client,
            &cache,
            &GenOptions::default(),
        )
        .unwrap();
        assert_eq!(set.subclasses, vec!["tabby", "siamese", "persian"]);
        assert_eq!(set.n, 3);
        set.validate().unwrap();

        // Second call is served from the cache: the stub is not consulted.
        let again = generate_subclasses(
            "cat",
            3,
            PromptMode::P2,
            &client,
            &cache,
            &GenOptions::default(),
        )
        .unwrap();
        assert_eq!(again, set);
        assert_eq!(client.calls.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn generation_fails_when_too_few_names_survive() {
        let client = StubClient::new("cat, tabby");
        let cache = tmp_cache("short");
        match generate_subclasses(
            "cat",
            3,
            PromptMode::P1,
            &client,
            &cache,
            &GenOptions::default(),
        ) {
            Err(Error::GenerationIncomplete { wanted: 3, partial }) => {
                assert_eq!(partial, vec!["tabby"]);
            }
            other => panic!("expected GenerationIncomplete, got {other:?}"),
        }
    }

    #[test]
    fn set_files_round_trip_by_slug() {
        let dir = std::env::temp_dir().join(format!("subclass-sets-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let set = SubclassSet {
            superclass: "dining table".into(),
            subclasses: vec!["desk".into(), "counter".into()],
            n: 2,
            prompt_mode: PromptMode::P2,
            model_id: "m".into(),
            cache_key: cache_key("m", PromptMode::P2, "dining table", 2),
        };
        let path = save_set(&dir, &set).unwrap();
        assert!(path.ends_with("dining_table.json"));
        assert_eq!(load_set(&dir, "dining table").unwrap().unwrap(), set);
        assert!(load_set(&dir, "zebra").unwrap().is_none());
    }

    #[test]
    fn validate_rejects_duplicates_and_superclass_repeats() {
        let mut set = SubclassSet {
            superclass: "cat".into(),
            subclasses: vec!["tabby".into(), "tabby".into()],
            n: 2,
            prompt_mode: PromptMode::P1,
            model_id: "m".into(),
            cache_key: String::new(),
        };
        assert!(matches!(set.validate(), Err(Error::InvalidSubclassSet(_))));
        set.subclasses = vec!["tabby".into(), "cat".into()];
        assert!(matches!(set.validate(), Err(Error::InvalidSubclassSet(_))));
        set.subclasses = vec!["tabby".into(), "siamese".into()];
        set.validate().unwrap();
    }
}
