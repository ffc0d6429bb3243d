//! Quadruple-extraction scoring: parse raw `(Target | Argument | Targeted
//! Group | Hateful)` output strings, match predictions against gold records
//! under hard (all four fields exact) and soft (exact group/hateful, LCS
//! similarity of the spans strictly above 0.5) criteria, and micro-average
//! precision, recall, and F1 over the corpus.
//!
//! String lengths and subsequences are measured in Unicode code points.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

/// One extraction record. Fields are stored trimmed; `target` may hold the
/// literal `"NULL"` for target-less posts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quadruple {
    pub target: String,
    pub argument: String,
    pub group: String,
    pub hateful: String,
}

impl Quadruple {
    pub fn new(
        target: impl AsRef<str>,
        argument: impl AsRef<str>,
        group: impl AsRef<str>,
        hateful: impl AsRef<str>,
    ) -> Self {
        Self {
            target: target.as_ref().trim().to_string(),
            argument: argument.as_ref().trim().to_string(),
            group: group.as_ref().trim().to_string(),
            hateful: hateful.as_ref().trim().to_string(),
        }
    }
}

/// All quadruples extracted from one sample's raw output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleExtraction {
    pub sample_id: String,
    pub quads: Vec<Quadruple>,
}

/// Result of parsing one raw output string: the well-formed quadruples plus
/// one warning per malformed segment. Parsing never fails.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub quads: Vec<Quadruple>,
    pub warnings: Vec<String>,
}

const SEP_TOKEN: &str = "[SEP]";
const END_TOKEN: &str = "[END]";

/// Split a raw output string into quadruples: one trailing `[END]` is
/// stripped, segments are split on `[SEP]`, and each segment must hold
/// exactly four `|`-separated fields. Segments with any other field count
/// are skipped and reported as warnings.
pub fn parse_quadruples(raw: &str) -> ParseOutcome {
    let mut outcome = ParseOutcome::default();
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return outcome;
    }
    let body = trimmed.strip_suffix(END_TOKEN).unwrap_or(trimmed);
    for (i, segment) in body.split(SEP_TOKEN).enumerate() {
        let fields: Vec<&str> = segment.split('|').collect();
        if fields.len() == 4 {
            outcome
                .quads
                .push(Quadruple::new(fields[0], fields[1], fields[2], fields[3]));
        } else {
            outcome.warnings.push(format!(
                "segment {} has {} field(s), expected 4: {:?}",
                i + 1,
                fields.len(),
                segment.trim()
            ));
        }
    }
    outcome
}

/// Length of the longest common subsequence of `a` and `b`, over code points.
pub fn lcs_length(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One-row DP: row[j] = LCS(a[..i], b[..j]).
    let mut row = vec![0usize; b.len() + 1];
    for ca in &a {
        let mut diag = 0; // row[j-1] from the previous iteration of i
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS similarity: 2·M / (len_pred + len_gold), with two empty strings
/// counting as identical (1.0). Always in [0, 1] and symmetric.
pub fn similarity(pred: &str, gold: &str) -> f64 {
    let lp = pred.chars().count();
    let lg = gold.chars().count();
    if lp + lg == 0 {
        return 1.0;
    }
    2.0 * lcs_length(pred, gold) as f64 / (lp + lg) as f64
}

/// All four fields string-equal after trimming.
pub fn hard_match(pred: &Quadruple, gold: &Quadruple) -> bool {
    pred.target.trim() == gold.target.trim()
        && pred.argument.trim() == gold.argument.trim()
        && pred.group.trim() == gold.group.trim()
        && pred.hateful.trim() == gold.hateful.trim()
}

/// Group and hateful exact (as in [`hard_match`]) and both span similarities
/// strictly above 0.5.
pub fn soft_match(pred: &Quadruple, gold: &Quadruple) -> bool {
    pred.group.trim() == gold.group.trim()
        && pred.hateful.trim() == gold.hateful.trim()
        && similarity(pred.target.trim(), gold.target.trim()) > 0.5
        && similarity(pred.argument.trim(), gold.argument.trim()) > 0.5
}

/// Precision/recall/F1 triple for one matching criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus-level raw counts behind the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub predicted_total: usize,
    pub gold_total: usize,
    pub hard_correct: usize,
    pub soft_correct: usize,
}

/// Micro-averaged hard and soft scores plus their average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport {
    pub hard: PrfScores,
    pub soft: PrfScores,
    pub average_score: f64,
    pub counts: MatchCounts,
}

fn prf(matched: usize, predicted: usize, gold: usize) -> PrfScores {
    let precision = if predicted == 0 {
        0.0
    } else {
        matched as f64 / predicted as f64
    };
    let recall = if gold == 0 {
        0.0
    } else {
        matched as f64 / gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfScores {
        precision,
        recall,
        f1,
    }
}

/// Greedy one-to-one matching within one sample: predicted quads are visited
/// in order and each claims the first not-yet-claimed gold quad it matches.
fn greedy_matched(
    preds: &[Quadruple],
    golds: &[Quadruple],
    matches: impl Fn(&Quadruple, &Quadruple) -> bool,
) -> usize {
    let mut claimed = vec![false; golds.len()];
    let mut matched = 0;
    for pred in preds {
        for (i, gold) in golds.iter().enumerate() {
            if !claimed[i] && matches(pred, gold) {
                claimed[i] = true;
                matched += 1;
                break;
            }
        }
    }
    matched
}

/// Score a prediction corpus against a gold corpus, micro-aggregated.
///
/// Samples are keyed by `sample_id`; a gold sample with no matching
/// prediction is scored against an empty list, and predictions for unknown
/// ids count as unmatched. Duplicate ids within either corpus are an error.
pub fn score(
    preds: &[SampleExtraction],
    golds: &[SampleExtraction],
) -> Result<ScoreReport, MetricsError> {
    let pred_map = index_by_id(preds)?;
    let gold_map = index_by_id(golds)?;

    let empty: Vec<Quadruple> = Vec::new();
    let mut predicted_total = 0;
    let mut gold_total = 0;
    let mut hard_correct = 0;
    let mut soft_correct = 0;
    for (id, gold_quads) in &gold_map {
        let pred_quads = pred_map.get(id).copied().unwrap_or(&empty);
        predicted_total += pred_quads.len();
        gold_total += gold_quads.len();
        hard_correct += greedy_matched(pred_quads, gold_quads, hard_match);
        soft_correct += greedy_matched(pred_quads, gold_quads, soft_match);
    }
    // Predictions for ids absent from the gold corpus can match nothing.
    for (id, pred_quads) in &pred_map {
        if !gold_map.contains_key(id) {
            predicted_total += pred_quads.len();
        }
    }

    let hard = prf(hard_correct, predicted_total, gold_total);
    let soft = prf(soft_correct, predicted_total, gold_total);
    Ok(ScoreReport {
        hard,
        soft,
        average_score: (hard.f1 + soft.f1) / 2.0,
        counts: MatchCounts {
            predicted_total,
            gold_total,
            hard_correct,
            soft_correct,
        },
    })
}

fn index_by_id(
    samples: &[SampleExtraction],
) -> Result<BTreeMap<&str, &Vec<Quadruple>>, MetricsError> {
    let mut map = BTreeMap::new();
    for s in samples {
        if map.insert(s.sample_id.as_str(), &s.quads).is_some() {
            return Err(MetricsError::DuplicateSampleId {
                id: s.sample_id.clone(),
            });
        }
    }
    Ok(map)
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    output: String,
}

/// Samples read from one JSONL file plus accumulated parse warnings.
#[derive(Debug, Clone, Default)]
pub struct ExtractionFile {
    pub samples: Vec<SampleExtraction>,
    pub warnings: Vec<String>,
}

/// Read a UTF-8 JSON Lines file of `{"id": ..., "output": ...}` records and
/// parse each output string. Blank lines are skipped; malformed JSON is an
/// error, malformed quadruple segments become warnings.
pub fn read_extractions(path: impl AsRef<Path>) -> Result<ExtractionFile, MetricsError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = ExtractionFile::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| MetricsError::BadLine {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(MetricsError::DuplicateSampleId { id: raw.id });
        }
        let parsed = parse_quadruples(&raw.output);
        out.warnings.extend(
            parsed
                .warnings
                .into_iter()
                .map(|w| format!("sample {:?}: {w}", raw.id)),
        );
        out.samples.push(SampleExtraction {
            sample_id: raw.id,
            quads: parsed.quads,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(t: &str, a: &str, g: &str, h: &str) -> Quadruple {
        Quadruple::new(t, a, g, h)
    }

    #[test]
    fn parses_single_quad_with_end_token() {
        let out = parse_quadruples("A | B | Racism | hate [END]");
        assert_eq!(out.quads, vec![q("A", "B", "Racism", "hate")]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn parses_multiple_quads_in_order() {
        let out = parse_quadruples("A | B | Racism | hate [SEP] C | D | Sexism | hate [END]");
        assert_eq!(
            out.quads,
            vec![q("A", "B", "Racism", "hate"), q("C", "D", "Sexism", "hate")]
        );
    }

    #[test]
    fn malformed_segment_is_skipped_with_warning() {
        let out = parse_quadruples("garbage with two | pipes");
        assert!(out.quads.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn mixed_good_and_bad_segments() {
        let out = parse_quadruples("A | B | C | D [SEP] broken [SEP] E | F | G | H");
        assert_eq!(out.quads.len(), 2);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn empty_output_is_zero_quads_without_warnings() {
        let out = parse_quadruples("   ");
        assert!(out.quads.is_empty());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn lcs_hand_examples() {
        assert_eq!(lcs_length("abc", "abd"), 2);
        assert_eq!(lcs_length("x", ""), 0);
        assert_eq!(lcs_length("", ""), 0);
        assert_eq!(lcs_length("同一个字符串", "同一个字符串"), 6);
        assert_eq!(lcs_length("abcdgh", "aedfhr"), 3); // "adh"
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("张三", "张三"), 1.0);
        assert!((similarity("abc", "abd") - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(similarity("", "x"), 0.0);
        assert_eq!(similarity("", ""), 1.0);
    }

    #[test]
    fn hard_match_trims_fields() {
        assert!(hard_match(
            &q("张三 ", "坏", "Racism", "hate"),
            &q("张三", "坏", "Racism", "hate")
        ));
        assert!(!hard_match(
            &q("张三", "坏", "Racism", "hate"),
            &q("张三", "坏", "Racism", "non-hate")
        ));
    }

    #[test]
    fn soft_match_requires_exact_group_and_hateful() {
        let gold = q("abc", "arg", "Racism", "hate");
        assert!(soft_match(&q("abd", "arg", "Racism", "hate"), &gold));
        assert!(!soft_match(&q("abd", "arg", "Sexism", "hate"), &gold));
        assert!(!soft_match(&q("abd", "arg", "Racism", "non-hate"), &gold));
    }

    #[test]
    fn similarity_exactly_half_is_not_soft() {
        // pred "a" vs gold "abc": 2·1/(1+3) = 0.5, strict inequality fails.
        let gold = q("abc", "arg", "G", "hate");
        let pred = q("a", "arg", "G", "hate");
        assert_eq!(similarity("a", "abc"), 0.5);
        assert!(!soft_match(&pred, &gold));
    }

    #[test]
    fn hard_implies_soft() {
        let a = q("目标", "论点", "Region", "hate");
        assert!(hard_match(&a, &a.clone()));
        assert!(soft_match(&a, &a.clone()));
    }

    fn sample(id: &str, quads: Vec<Quadruple>) -> SampleExtraction {
        SampleExtraction {
            sample_id: id.to_string(),
            quads,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let golds = vec![
            sample("1", vec![q("A", "B", "G", "hate")]),
            sample(
                "2",
                vec![q("C", "D", "G", "hate"), q("E", "F", "G2", "non-hate")],
            ),
        ];
        let report = score(&golds, &golds).unwrap();
        assert_eq!(report.hard.f1, 1.0);
        assert_eq!(report.soft.f1, 1.0);
        assert_eq!(report.average_score, 1.0);
    }

    #[test]
    fn half_correct_gives_half_prf() {
        // 2 gold, 2 predicted, exactly 1 hard-correct.
        let golds = vec![sample(
            "1",
            vec![q("A", "B", "G", "hate"), q("C", "D", "G", "hate")],
        )];
        let preds = vec![sample(
            "1",
            vec![q("A", "B", "G", "hate"), q("X", "Y", "Z", "hate")],
        )];
        let report = score(&preds, &golds).unwrap();
        assert!((report.hard.precision - 0.5).abs() < 1e-12);
        assert!((report.hard.recall - 0.5).abs() < 1e-12);
        assert!((report.hard.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_formula_spot_check() {
        // P = 0.5, R = 0.25 → F1 = 2·0.125/0.75 = 1/3.
        let p = prf(1, 2, 4);
        assert!((p.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_prediction_counts_as_empty() {
        let golds = vec![
            sample("1", vec![q("A", "B", "G", "hate")]),
            sample("2", vec![q("C", "D", "G", "hate")]),
        ];
        let preds = vec![sample("1", vec![q("A", "B", "G", "hate")])];
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.counts.predicted_total, 1);
        assert_eq!(report.counts.gold_total, 2);
        assert_eq!(report.counts.hard_correct, 1);
    }

    #[test]
    fn score_ignores_sample_order() {
        let golds = vec![
            sample("a", vec![q("A", "B", "G", "hate")]),
            sample(
                "b",
                vec![q("C", "D", "G", "hate"), q("E", "F", "G", "hate")],
            ),
            sample("c", vec![]),
        ];
        let preds = vec![
            sample("b", vec![q("C", "D", "G", "hate")]),
            sample("a", vec![q("A", "B", "G", "hate")]),
        ];
        let forward = score(&preds, &golds).unwrap();
        let mut preds_rev = preds.clone();
        preds_rev.reverse();
        let mut golds_rev = golds.clone();
        golds_rev.reverse();
        let backward = score(&preds_rev, &golds_rev).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn matched_counts_never_exceed_either_total() {
        let golds = vec![sample("1", vec![q("A", "B", "G", "hate"); 3])];
        let preds = vec![sample("1", vec![q("A", "B", "G", "hate"); 5])];
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.counts.hard_correct, 3);
        assert!(report.counts.hard_correct <= report.counts.gold_total);
        assert!(report.counts.hard_correct <= report.counts.predicted_total);
    }

    #[test]
    fn duplicate_sample_id_is_rejected() {
        let dup = vec![sample("1", vec![]), sample("1", vec![])];
        assert!(matches!(
            score(&dup, &[]),
            Err(MetricsError::DuplicateSampleId { .. })
        ));
    }

    #[test]
    fn each_gold_is_claimed_at_most_once() {
        let golds = vec![sample("1", vec![q("A", "B", "G", "hate")])];
        let preds = vec![sample(
            "1",
            vec![q("A", "B", "G", "hate"), q("A", "B", "G", "hate")],
        )];
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.counts.hard_correct, 1);
        assert_eq!(report.counts.predicted_total, 2);
    }

    #[test]
    fn reads_jsonl_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"s1\",\"output\":\"A | B | G | hate [END]\"}\n\n{\"id\":\"s2\",\"output\":\"junk\"}\n",
        )
        .unwrap();
        let file = read_extractions(&path).unwrap();
        assert_eq!(file.samples.len(), 2);
        assert_eq!(file.samples[0].quads.len(), 1);
        assert!(file.samples[1].quads.is_empty());
        assert_eq!(file.warnings.len(), 1);
    }

    #[test]
    fn jsonl_duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"s1\",\"output\":\"\"}\n{\"id\":\"s1\",\"output\":\"\"}\n",
        )
        .unwrap();
        assert!(matches!(
            read_extractions(&path),
            Err(MetricsError::DuplicateSampleId { .. })
        ));
    }

    #[test]
    fn jsonl_bad_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        std::fs::write(&path, "{\"id\":\"s1\",\"output\":\"\"}\nnot json\n").unwrap();
        match read_extractions(&path) {
            Err(MetricsError::BadLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected bad line, got {other:?}"),
        }
    }

    /// Memoized recursive LCS, independent of the iterative DP row.
    fn lcs_oracle(a: &[char], b: &[char]) -> usize {
        fn go(
            a: &[char],
            b: &[char],
            i: usize,
            j: usize,
            memo: &mut Vec<Vec<Option<usize>>>,
        ) -> usize {
            if i == 0 || j == 0 {
                return 0;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let v = if a[i - 1] == b[j - 1] {
                go(a, b, i - 1, j - 1, memo) + 1
            } else {
                go(a, b, i - 1, j, memo).max(go(a, b, i, j - 1, memo))
            };
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        go(a, b, a.len(), b.len(), &mut memo)
    }

    proptest! {
        #[test]
        fn lcs_matches_recursive_oracle(a in "[abc]{0,12}", b in "[abc]{0,12}") {
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            prop_assert_eq!(lcs_length(&a, &b), lcs_oracle(&ca, &cb));
        }

        #[test]
        fn similarity_symmetric_bounded_and_one_iff_equal(a in "[ab]{0,10}", b in "[ab]{0,10}") {
            let s = similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, similarity(&b, &a));
            prop_assert_eq!(s == 1.0, a == b);
        }

        #[test]
        fn lcs_of_identical_strings_is_their_length(s in "\\PC{0,24}") {
            prop_assert_eq!(lcs_length(&s, &s), s.chars().count());
        }
    }
}
