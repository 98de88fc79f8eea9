//! Small generated corpora with known answers, used by tests, benches and
//! the bundled `data/` files.

use chrono::{DateTime, Duration, TimeZone, Utc};

use crate::corpus::IssueRecord;

pub const EASY_POINTS: f64 = 1.0;
pub const HARD_POINTS: f64 = 8.0;
pub const KEYWORD_CORPUS_SIZE: usize = 64;
pub const PERIODIC_CORPUS_SIZE: usize = 30;
pub const PERIODIC_REPEATS: usize = 2;

const COMPONENTS: [&str; 8] = ["parser", "login", "cache", "report", "widget", "schema", "export", "search"];
const ACTIONS: [&str; 5] = ["update", "refactor", "cleanup", "review", "adjust"];

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2016, 1, 4, 9, 0, 0).unwrap()
}

/// Issues whose story points are fixed by one title word: `easy` → 1,
/// `hard` → 8. Labels alternate, so every contiguous even-length window is
/// balanced and predicting the global mean (4.5) costs exactly 3.5 MAE.
/// Issues are created an hour apart; `i % 4 < 2` goes to `ALPHA`, the rest to
/// `BETA`, giving two balanced projects that share the rule.
pub fn keyword_corpus(n: usize) -> Vec<IssueRecord> {
    (0..n)
        .map(|i| {
            let easy = i % 2 == 0;
            let keyword = if easy { "easy" } else { "hard" };
            let a = COMPONENTS[(i / 2) % COMPONENTS.len()];
            let b = COMPONENTS[(i / 3 + 3) % COMPONENTS.len()];
            let action = ACTIONS[(i / 2) % ACTIONS.len()];
            let project = if i % 4 < 2 { "ALPHA" } else { "BETA" };
            IssueRecord {
                project: project.into(),
                issue_key: format!("{project}-{}", i + 1),
                created_at: epoch() + Duration::hours(i as i64),
                title: format!("{a} {keyword} {action}"),
                description: format!("{action} the {b} module next to {a}"),
                story_points: Some(if easy { EASY_POINTS } else { HARD_POINTS }),
            }
        })
        .collect()
}

/// Unlabeled issues whose text is `a b c` repeated `repeats` times, so every
/// next token (including the end marker) is fully determined.
pub fn periodic_corpus(n: usize, repeats: usize) -> Vec<IssueRecord> {
    let text = vec!["a b c"; repeats].join(" ");
    (0..n)
        .map(|i| IssueRecord {
            project: "PERIODIC".into(),
            issue_key: format!("PERIODIC-{}", i + 1),
            created_at: epoch() + Duration::minutes(i as i64),
            title: text.clone(),
            description: String::new(),
            story_points: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, split_chronological};

    #[test]
    fn keyword_split_has_balanced_partitions() {
        let split = split_chronological(&keyword_corpus(KEYWORD_CORPUS_SIZE)).unwrap();
        let mean = |r: &[IssueRecord]| r.iter().map(|x| x.points()).sum::<f64>() / r.len() as f64;
        assert_eq!(split.train.len(), 38);
        assert_eq!(mean(&split.train), 4.5);
        let test = split.test.reveal();
        let mae: f64 = test.iter().map(|r| (r.points() - 4.5).abs()).sum::<f64>() / test.len() as f64;
        assert_eq!(mae, 3.5);
    }

    #[test]
    fn label_follows_the_keyword_only() {
        for r in keyword_corpus(40) {
            let easy = r.title.split(' ').any(|w| w == "easy");
            let hard = r.title.split(' ').any(|w| w == "hard");
            assert!(easy ^ hard);
            assert!(!r.description.contains("easy") && !r.description.contains("hard"));
            assert_eq!(r.points(), if easy { EASY_POINTS } else { HARD_POINTS });
        }
    }

    /// `cargo test -p ldrnn-core regenerate_bundled -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_bundled_files() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        crate::corpus::write_corpus(&keyword_corpus(KEYWORD_CORPUS_SIZE), &dir.join("keyword_corpus.jsonl")).unwrap();
        crate::corpus::write_corpus(
            &periodic_corpus(PERIODIC_CORPUS_SIZE, PERIODIC_REPEATS),
            &dir.join("periodic_corpus.jsonl"),
        )
        .unwrap();
    }

    #[test]
    fn bundled_files_match_the_generators() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        let read = |name: &str| {
            let text = std::fs::read_to_string(dir.join(name)).unwrap();
            parse_corpus(text.as_bytes()).unwrap()
        };
        assert_eq!(read("keyword_corpus.jsonl"), keyword_corpus(KEYWORD_CORPUS_SIZE));
        assert_eq!(read("periodic_corpus.jsonl"), periodic_corpus(PERIODIC_CORPUS_SIZE, PERIODIC_REPEATS));
    }
}
