//! Dataset ingestion, conversation-aware splitting, context windowing, and
//! synthetic corpus generation.
//!
//! Records follow the four-column dialogue schema
//! `chat, fetch_context, chat_id, topic`; CSV files use RFC-4180 quoting and
//! JSON-lines files carry one object with exactly those keys per line.

use crate::error::{Error, Result};
use crate::tokenizer::tokenize;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One annotated chat turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRecord {
    pub chat: String,
    pub fetch_context: u8,
    pub chat_id: String,
    pub topic: String,
}

/// A classification example: up to K prior turns of the same conversation
/// plus the current turn, which carries the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub turns: Vec<String>,
    pub label: u8,
    pub chat_id: String,
    /// Position of the labeled turn within its conversation (0-based).
    pub turn_index: usize,
}

/// Exact corpus counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub label_counts: [usize; 2],
    pub topic_counts: BTreeMap<String, usize>,
    pub conversations: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records:       {}", self.total)?;
        writeln!(f, "label 0:       {}", self.label_counts[0])?;
        writeln!(f, "label 1:       {}", self.label_counts[1])?;
        writeln!(f, "conversations: {}", self.conversations)?;
        writeln!(f, "topics:")?;
        for (topic, count) in &self.topic_counts {
            writeln!(f, "  {topic}: {count}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Jsonl,
}

const EXPECTED_HEADER: [&str; 4] = ["chat", "fetch_context", "chat_id", "topic"];

fn validate_record(record: &ChatRecord, line: usize) -> Result<()> {
    if record.fetch_context > 1 {
        return Err(Error::Parse {
            line,
            msg: format!(
                "fetch_context must be 0 or 1, got {}",
                record.fetch_context
            ),
        });
    }
    if record.chat.trim().is_empty() {
        return Err(Error::Parse {
            line,
            msg: "chat text is empty".into(),
        });
    }
    Ok(())
}

/// Loads a dataset file. Records come back in file order; `fetch_context`
/// is parsed strictly as 0 or 1 and empty chat text is rejected, both with
/// the offending line number.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<ChatRecord>> {
    match format {
        DataFormat::Csv => load_csv(path),
        DataFormat::Jsonl => load_jsonl(path),
    }
}

fn load_csv(path: &Path) -> Result<Vec<ChatRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != EXPECTED_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {EXPECTED_HEADER:?}, found {got:?}"),
        });
    }

    let mut records = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let fetch_context = row[1].trim().parse::<u8>().map_err(|_| Error::Parse {
            line,
            msg: format!("fetch_context must be 0 or 1, got {:?}", &row[1]),
        })?;
        let record = ChatRecord {
            chat: row[0].to_string(),
            fetch_context,
            chat_id: row[2].to_string(),
            topic: row[3].to_string(),
        };
        validate_record(&record, line)?;
        records.push(record);
    }
    Ok(records)
}

fn load_jsonl(path: &Path) -> Result<Vec<ChatRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "blank line in JSON-lines file".into(),
            });
        }
        let record: ChatRecord =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        validate_record(&record, line_no)?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as CSV with the canonical header and RFC-4180 quoting.
pub fn save_dataset_csv(records: &[ChatRecord], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(EXPECTED_HEADER).map_err(csv_err)?;
    for r in records {
        writer
            .write_record([
                r.chat.as_str(),
                if r.fetch_context == 1 { "1" } else { "0" },
                r.chat_id.as_str(),
                r.topic.as_str(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(Error::Io)?;
    Ok(())
}

/// Splits records into train/validation folds by whole conversations.
///
/// Conversations are shuffled deterministically by `seed` and a prefix is
/// assigned to the train fold, choosing the cut whose train record count is
/// closest to `train_fraction * total` (first such cut on ties). No chat_id
/// ever spans both folds and both folds are non-empty; records keep their
/// file order within each fold.
pub fn split(
    records: &[ChatRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ChatRecord>, Vec<ChatRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut conv_order: Vec<&str> = Vec::new();
    let mut conv_sizes: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let entry = conv_sizes.entry(r.chat_id.as_str()).or_insert(0);
        if *entry == 0 {
            conv_order.push(r.chat_id.as_str());
        }
        *entry += 1;
    }
    if conv_order.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 conversations to split, found {}",
            conv_order.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    conv_order.shuffle(&mut rng);

    let target = train_fraction * records.len() as f64;
    let mut best_cut = 1;
    let mut best_dist = f64::INFINITY;
    let mut cumulative = 0usize;
    for (i, id) in conv_order.iter().enumerate() {
        cumulative += conv_sizes[id];
        let cut = i + 1;
        if cut == conv_order.len() {
            break; // validation fold must keep at least one conversation
        }
        let dist = (cumulative as f64 - target).abs();
        if dist < best_dist {
            best_dist = dist;
            best_cut = cut;
        }
    }

    let train_ids: HashSet<&str> = conv_order[..best_cut].iter().copied().collect();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for r in records {
        if train_ids.contains(r.chat_id.as_str()) {
            train.push(r.clone());
        } else {
            validation.push(r.clone());
        }
    }
    Ok((train, validation))
}

/// Builds one example per record: up to `k` immediately preceding turns of
/// the same conversation (in file order) plus the current turn. Windows
/// never cross chat_id boundaries.
pub fn window(records: &[ChatRecord], k: usize) -> Vec<Example> {
    let mut history: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut examples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let prior = history.entry(r.chat_id.as_str()).or_default();
        let start = prior.len().saturating_sub(k);
        let mut turns: Vec<String> = prior[start..]
            .iter()
            .map(|&j| records[j].chat.clone())
            .collect();
        turns.push(r.chat.clone());
        examples.push(Example {
            turns,
            label: r.fetch_context,
            chat_id: r.chat_id.clone(),
            turn_index: prior.len(),
        });
        prior.push(i);
    }
    examples
}

/// Exact counts over a record list.
pub fn class_stats(records: &[ChatRecord]) -> DatasetStats {
    let mut label_counts = [0usize; 2];
    let mut topic_counts = BTreeMap::new();
    let mut conversations = HashSet::new();
    for r in records {
        label_counts[r.fetch_context as usize] += 1;
        *topic_counts.entry(r.topic.clone()).or_insert(0) += 1;
        conversations.insert(r.chat_id.as_str());
    }
    DatasetStats {
        total: records.len(),
        label_counts,
        topic_counts,
        conversations: conversations.len(),
    }
}

/// Single-word anaphor markers. A synthetic turn is context-dependent
/// exactly when it contains at least one of these tokens, so a rules-based
/// check recovers the synthetic labels perfectly.
pub const MARKER_TOKENS: [&str; 13] = [
    "it", "that", "this", "they", "them", "those", "these", "one", "ones", "he", "she", "him",
    "her",
];

/// True when the text contains any marker token after tokenization.
pub fn contains_marker(text: &str) -> bool {
    tokenize(text)
        .iter()
        .any(|t| MARKER_TOKENS.contains(&t.as_str()))
}

const TOPICS: [&str; 6] = [
    "chit-chat",
    "shopping",
    "travel",
    "cooking",
    "tech-support",
    "sports",
];
const NOUNS: [&str; 10] = [
    "charger", "blender", "backpack", "monitor", "keyboard", "jacket", "kettle", "router",
    "mattress", "umbrella",
];
const CITIES: [&str; 10] = [
    "paris", "tokyo", "denver", "oslo", "madrid", "cairo", "sydney", "lima", "boston", "dublin",
];
const FOODS: [&str; 8] = [
    "risotto", "pancakes", "dumplings", "falafel", "lasagna", "chowder", "paella", "brownies",
];
const COUNTRIES: [&str; 8] = [
    "france", "japan", "norway", "canada", "brazil", "kenya", "vietnam", "portugal",
];
const DAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const COLORS: [&str; 6] = ["red", "blue", "green", "black", "silver", "orange"];

fn pick<'a>(pool: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Self-contained question; never contains a marker token.
fn self_contained_turn(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..12u32) {
        0 => format!("What is the capital of {}?", pick(&COUNTRIES, rng)),
        1 => format!("How do I cook {}?", pick(&FOODS, rng)),
        2 => format!("Recommend a good {} for beginners.", pick(&NOUNS, rng)),
        3 => format!(
            "How far is {} from {}?",
            pick(&CITIES, rng),
            pick(&CITIES, rng)
        ),
        4 => format!("What time does the market open on {}?", pick(&DAYS, rng)),
        5 => format!("How many calories are in {}?", pick(&FOODS, rng)),
        6 => format!("What is the weather forecast for {}?", pick(&CITIES, rng)),
        7 => format!("How much does a {} usually cost?", pick(&NOUNS, rng)),
        8 => format!("List three facts about {}.", pick(&COUNTRIES, rng)),
        9 => "When was the telephone invented?".to_string(),
        10 => "What is a synonym for the word happy?".to_string(),
        _ => format!("Where can I buy a {} in {}?", pick(&NOUNS, rng), pick(&CITIES, rng)),
    }
}

/// Context-dependent question built around an unresolved anaphor; always
/// contains at least one marker token.
fn context_dependent_turn(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..12u32) {
        0 => format!("What about that {}?", pick(&NOUNS, rng)),
        1 => "And how much does it cost?".to_string(),
        2 => format!("Is it available in {}?", pick(&COLORS, rng)),
        3 => format!("Do they ship to {}?", pick(&CITIES, rng)),
        4 => "Can you compare them for me?".to_string(),
        5 => "Is this one faster?".to_string(),
        6 => "Why did he cancel the order?".to_string(),
        7 => "Does she still want those?".to_string(),
        8 => "When will they arrive?".to_string(),
        9 => format!("And does it work on {}?", pick(&DAYS, rng)),
        10 => format!("Is that one cheaper than the {}?", pick(&NOUNS, rng)),
        _ => format!("Can you ask him about the {}?", pick(&NOUNS, rng)),
    }
}

fn random_chat_id(rng: &mut ChaCha8Rng) -> String {
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "{}-{}-{}-{}-{}",
        &hex[0..8],
        &hex[8..12],
        &hex[12..16],
        &hex[16..20],
        &hex[20..32]
    )
}

/// Generates `n` labeled records in conversations of 2-6 turns.
///
/// Each turn is independently made context-dependent with probability
/// `context_rate` (label 1, contains a marker token) or self-contained
/// (label 0, contains none). Deterministic in `seed`. The labels are
/// lexically decidable by design — a desk-scale verification corpus, not a
/// claim about real context necessity.
pub fn synthesize(n: usize, seed: u64, context_rate: f64) -> Result<Vec<ChatRecord>> {
    if n < 1 {
        return Err(Error::InvalidArgument("synthesize needs n >= 1".into()));
    }
    if !(context_rate > 0.0 && context_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "context_rate must be in (0, 1), got {context_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    while records.len() < n {
        let len = (rng.gen_range(2..=6usize)).min(n - records.len());
        let chat_id = random_chat_id(&mut rng);
        let topic = pick(&TOPICS, &mut rng).to_string();
        for _ in 0..len {
            let context_needed = rng.gen::<f64>() < context_rate;
            let chat = if context_needed {
                context_dependent_turn(&mut rng)
            } else {
                self_contained_turn(&mut rng)
            };
            debug_assert_eq!(contains_marker(&chat), context_needed, "template leaked a marker: {chat}");
            records.push(ChatRecord {
                chat,
                fetch_context: u8::from(context_needed),
                chat_id: chat_id.clone(),
                topic: topic.clone(),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    const TABLE1_ID: &str = "2c1b9c3e-67ab-42b5-aa23-47e3b564f1ac";

    fn table1_csv() -> String {
        format!(
            "chat,fetch_context,chat_id,topic\n\
             Do you sleep?,0,{TABLE1_ID},chit-chat\n\
             Do you dream?,0,{TABLE1_ID},chit-chat\n\
             Can you feel emotions?,0,{TABLE1_ID},chit-chat\n\
             Do you have a favorite color?,0,{TABLE1_ID},chit-chat\n"
        )
    }

    fn write_temp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn load_csv_dialogue_rows() {
        let (_dir, path) = write_temp(&table1_csv());
        let records = load_dataset(&path, DataFormat::Csv).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.fetch_context == 0));
        assert!(records.iter().all(|r| r.chat_id == TABLE1_ID));
        assert!(records.iter().all(|r| r.topic == "chit-chat"));
        assert_eq!(records[0].chat, "Do you sleep?");
    }

    #[test]
    fn load_csv_rejects_non_binary_label_with_line() {
        let csv = format!(
            "chat,fetch_context,chat_id,topic\nhi there,0,{TABLE1_ID},x\nbad row,2,{TABLE1_ID},x\n"
        );
        let (_dir, path) = write_temp(&csv);
        let err = load_dataset(&path, DataFormat::Csv).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_empty_file_with_header() {
        let (_dir, path) = write_temp("chat,fetch_context,chat_id,topic\n");
        assert!(load_dataset(&path, DataFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn load_csv_rejects_wrong_header_and_empty_chat() {
        let (_dir, path) = write_temp("chat,label,chat_id,topic\nhi,0,a,b\n");
        assert!(matches!(
            load_dataset(&path, DataFormat::Csv),
            Err(Error::Parse { line: 1, .. })
        ));
        let (_dir2, path2) = write_temp("chat,fetch_context,chat_id,topic\n   ,0,a,b\n");
        assert!(matches!(
            load_dataset(&path2, DataFormat::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn load_jsonl_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            "{\"chat\":\"Do you sleep?\",\"fetch_context\":0,\"chat_id\":\"c1\",\"topic\":\"chit-chat\"}\n",
        )
        .unwrap();
        let records = load_dataset(&path, DataFormat::Jsonl).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].chat, "Do you sleep?");

        std::fs::write(&path, "{\"chat\":\"x\",\"fetch_context\":0,\"chat_id\":\"c\",\"topic\":\"t\",\"extra\":1}\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DataFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
        std::fs::write(&path, "{\"chat\":\"x\",\"fetch_context\":2,\"chat_id\":\"c\",\"topic\":\"t\"}\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DataFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn equal_conversations(conversations: usize, turns_each: usize) -> Vec<ChatRecord> {
        let mut records = Vec::new();
        for c in 0..conversations {
            for t in 0..turns_each {
                records.push(ChatRecord {
                    chat: format!("turn {t} of conversation {c}"),
                    fetch_context: 0,
                    chat_id: format!("conv-{c:05}"),
                    topic: "chit-chat".into(),
                });
            }
        }
        records
    }

    #[test]
    fn split_is_exact_on_equal_conversations() {
        let records = equal_conversations(2500, 4);
        let (train, val) = split(&records, 0.8, 17).unwrap();
        assert_eq!(train.len(), 8000);
        assert_eq!(val.len(), 2000);
    }

    #[test]
    fn split_never_leaks_conversations_and_is_deterministic() {
        let records = synthesize(500, 3, 0.44).unwrap();
        let (train, val) = split(&records, 0.8, 9).unwrap();
        let train_ids: HashSet<_> = train.iter().map(|r| r.chat_id.clone()).collect();
        let val_ids: HashSet<_> = val.iter().map(|r| r.chat_id.clone()).collect();
        assert!(train_ids.is_disjoint(&val_ids));
        assert_eq!(train.len() + val.len(), records.len());

        let (train2, val2) = split(&records, 0.8, 9).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn split_needs_two_conversations() {
        let records = equal_conversations(1, 10);
        assert!(matches!(split(&records, 0.8, 1), Err(Error::Split(_))));
    }

    #[test]
    fn window_zero_keeps_single_turns() {
        let records = equal_conversations(2, 3);
        let examples = window(&records, 0);
        assert_eq!(examples.len(), records.len());
        assert!(examples.iter().all(|e| e.turns.len() == 1));
        assert_eq!(examples[4].turn_index, 1);
    }

    #[test]
    fn window_carries_prior_turns_within_conversation() {
        let mut records = equal_conversations(1, 4);
        records.push(ChatRecord {
            chat: "other conversation".into(),
            fetch_context: 0,
            chat_id: "conv-other".into(),
            topic: "chit-chat".into(),
        });
        let examples = window(&records, 2);
        // third example carries turns 1-3
        assert_eq!(
            examples[2].turns,
            vec![
                "turn 0 of conversation 0".to_string(),
                "turn 1 of conversation 0".to_string(),
                "turn 2 of conversation 0".to_string(),
            ]
        );
        // first turn of any conversation has no prior turns
        assert_eq!(examples[0].turns.len(), 1);
        assert_eq!(examples[4].turns, vec!["other conversation".to_string()]);
    }

    #[test]
    fn synthesize_rate_and_markers() {
        let records = synthesize(1000, 7, 0.44).unwrap();
        assert_eq!(records.len(), 1000);
        let ones = records.iter().filter(|r| r.fetch_context == 1).count() as f64 / 1000.0;
        assert!((ones - 0.44).abs() <= 0.03, "label-1 share {ones}");
        for r in &records {
            assert_eq!(
                contains_marker(&r.chat),
                r.fetch_context == 1,
                "marker rule violated for {:?}",
                r.chat
            );
        }
    }

    #[test]
    fn synthesize_is_deterministic() {
        let a = synthesize(200, 11, 0.44).unwrap();
        let b = synthesize(200, 11, 0.44).unwrap();
        assert_eq!(a, b);
        let c = synthesize(200, 12, 0.44).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesize_validates_arguments() {
        assert!(synthesize(0, 1, 0.44).is_err());
        assert!(synthesize(10, 1, 0.0).is_err());
        assert!(synthesize(10, 1, 1.0).is_err());
    }

    #[test]
    fn class_stats_counts() {
        let (_dir, path) = write_temp(&table1_csv());
        let records = load_dataset(&path, DataFormat::Csv).unwrap();
        let stats = class_stats(&records);
        assert_eq!(stats.total, 4);
        assert_eq!(stats.label_counts, [4, 0]);
        assert_eq!(stats.conversations, 1);
        assert_eq!(stats.topic_counts.get("chit-chat"), Some(&4));

        let empty = class_stats(&[]);
        assert_eq!(empty.total, 0);
        assert_eq!(empty.label_counts, [0, 0]);
        assert_eq!(empty.conversations, 0);
    }

    #[test]
    fn class_stats_matches_single_pass_tally() {
        let records = synthesize(300, 5, 0.44).unwrap();
        let stats = class_stats(&records);
        let ones = records.iter().filter(|r| r.fetch_context == 1).count();
        assert_eq!(stats.label_counts[1], ones);
        assert_eq!(stats.label_counts[0], 300 - ones);
        assert_eq!(
            stats.conversations,
            records
                .iter()
                .map(|r| r.chat_id.as_str())
                .collect::<HashSet<_>>()
                .len()
        );
    }

    #[test]
    fn csv_round_trip_fixpoint() {
        let records = synthesize(100, 21, 0.44).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        save_dataset_csv(&records, &p1).unwrap();
        let loaded = load_dataset(&p1, DataFormat::Csv).unwrap();
        assert_eq!(records, loaded);
        save_dataset_csv(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    proptest! {
        #[test]
        fn split_preserves_records_as_multisets(
            n in 20usize..200,
            seed in 0u64..500,
            fraction in 0.2f64..0.9,
        ) {
            let records = synthesize(n, seed, 0.44).unwrap();
            prop_assume!(records.iter().map(|r| r.chat_id.as_str()).collect::<HashSet<_>>().len() >= 2);
            let (train, val) = split(&records, fraction, seed).unwrap();
            prop_assert_eq!(train.len() + val.len(), records.len());
            let mut merged: Vec<_> = train.iter().chain(val.iter()).cloned().collect();
            let mut original = records.clone();
            merged.sort_by(|a, b| (&a.chat_id, &a.chat).cmp(&(&b.chat_id, &b.chat)));
            original.sort_by(|a, b| (&a.chat_id, &a.chat).cmp(&(&b.chat_id, &b.chat)));
            prop_assert_eq!(merged, original);
        }
    }
}
