//! Text formats for trial lists and score files.
//!
//! Trial list: `<1|0> <enroll-id> <test-id>` per line (1 = target).
//! Score file: `<enroll-id> <test-id> <score>` per line.
//! Fields are whitespace-separated; blank lines are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::cosine_score;
use crate::metrics::TrialSet;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialKey {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != n {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {n} fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

pub fn parse_trial_list(text: &str) -> Result<Vec<TrialKey>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line, 3, i + 1)?;
        let target = match f[0] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label must be 1 or 0, found `{other}`"),
                })
            }
        };
        out.push(TrialKey {
            target,
            enroll: f[1].to_string(),
            test: f[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_trial_list(trials: &[TrialKey]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line, 3, i + 1)?;
        let score: f64 = f[2].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad score `{}`", f[2]),
        })?;
        out.push(ScoreLine {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Scores are written with the shortest representation that round-trips.
pub fn format_scores(scores: &[ScoreLine]) -> String {
    let mut s = String::new();
    for l in scores {
        let _ = writeln!(s, "{} {} {}", l.enroll, l.test, l.score);
    }
    s
}

/// Labels each trial with its score. Every trial must have exactly one score.
pub fn join_scores(trials: &[TrialKey], scores: &[ScoreLine]) -> Result<TrialSet> {
    let mut by_pair: HashMap<(&str, &str), f64> = HashMap::with_capacity(scores.len());
    for l in scores {
        if by_pair.insert((&l.enroll, &l.test), l.score).is_some() {
            return Err(Error::invalid(format!("duplicate score for {} {}", l.enroll, l.test)));
        }
    }
    let mut set = TrialSet::default();
    for t in trials {
        let score = by_pair
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .ok_or_else(|| Error::invalid(format!("no score for trial {} {}", t.enroll, t.test)))?;
        set.push(t.target, *score);
    }
    Ok(set)
}

/// Cosine-scores every trial from precomputed embeddings keyed by utterance id.
pub fn score_trials(trials: &[TrialKey], embeddings: &HashMap<String, Vec<f64>>) -> Result<Vec<ScoreLine>> {
    let lookup = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no embedding for utterance `{id}`")))
    };
    trials
        .iter()
        .map(|t| {
            Ok(ScoreLine {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine_score(lookup(&t.enroll)?, lookup(&t.test)?)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_join() {
        let trials = parse_trial_list("1 a b\n0 a c\n\n1 d e\n").unwrap();
        assert_eq!(trials.len(), 3);
        assert!(trials[0].target && !trials[1].target);
        let scores = parse_scores("a b 0.5\na c -0.25\nd e 1e-3\n").unwrap();
        let set = join_scores(&trials, &scores).unwrap();
        assert_eq!(set.num_targets(), 2);
        assert_eq!(set.trials()[1].score, -0.25);
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse_trial_list("2 a b"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trial_list("1 a b\n1 a"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_scores("a b nope").is_err());
    }

    #[test]
    fn missing_score_is_an_error() {
        let trials = parse_trial_list("1 a b\n").unwrap();
        assert!(join_scores(&trials, &[]).is_err());
    }

    #[test]
    fn score_text_round_trips() {
        let lines = vec![ScoreLine {
            enroll: "0:1:2".into(),
            test: "3:4:2".into(),
            score: 0.1 + 0.2,
        }];
        assert_eq!(parse_scores(&format_scores(&lines)).unwrap(), lines);
        let keys = parse_trial_list("0 x y\n").unwrap();
        assert_eq!(format_trial_list(&keys), "0 x y\n");
    }
}
