use std::collections::BTreeMap;

use rand::Rng;
use rmroute_autograd::rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::RewardExample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    /// `chosen` / `rejected`: full transcripts with `Human:` and
    /// `Assistant:` turns that differ only in the final assistant turn.
    DialogueTranscript,
    /// `context`, `summaries` (exactly two), `label` (0 or 1).
    DualSummary,
    /// `prompt`, `endings` (at least two), `label` (index of the correct one).
    MultiEnding,
    /// `prompt`, `responses` ordered best first.
    Preranked,
}

/// A source record before conversion. Every record also needs `domain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub source: SourceTag,
    #[serde(flatten)]
    pub fields: BTreeMap<String, Value>,
}

impl RawRecord {
    pub fn new(source: SourceTag, fields: Value) -> Self {
        let fields = match fields {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Self { source, fields }
    }

    fn text(&self, index: usize, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| fail(index, format!("missing text field `{key}`")))
    }

    fn texts(&self, index: usize, key: &str) -> Result<Vec<&str>> {
        let arr = self
            .fields
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| fail(index, format!("missing list field `{key}`")))?;
        arr.iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| fail(index, format!("`{key}` must hold strings")))
            })
            .collect()
    }

    fn label(&self, index: usize) -> Result<i64> {
        self.fields
            .get("label")
            .and_then(Value::as_i64)
            .ok_or_else(|| fail(index, "missing integer field `label`".into()))
    }

    fn check_source(&self, index: usize, want: SourceTag) -> Result<()> {
        if self.source == want {
            Ok(())
        } else {
            Err(fail(
                index,
                format!("expected {want:?} record, got {:?}", self.source),
            ))
        }
    }
}

fn fail(index: usize, msg: String) -> Error {
    Error::Conversion { index, msg }
}

fn finish(index: usize, ex: RewardExample) -> Result<RewardExample> {
    let p = ex.problems(&[]);
    if p.is_empty() {
        Ok(ex)
    } else {
        Err(fail(index, p.join("; ")))
    }
}

#[derive(Debug, PartialEq)]
struct Turn<'a> {
    human: bool,
    text: &'a str,
}

fn parse_turns(t: &str) -> Vec<Turn<'_>> {
    let mut rest = t;
    let base = t.as_ptr() as usize;
    let mut marks = Vec::new();
    while !rest.is_empty() {
        let line_end = rest.find('\n').map_or(rest.len(), |i| i + 1);
        let line = &rest[..line_end];
        let trimmed = line.trim_start();
        let offset = line.as_ptr() as usize - base + (line.len() - trimmed.len());
        if let Some(body) = trimmed.strip_prefix("Human:") {
            marks.push((true, offset, offset + trimmed.len() - body.len()));
        } else if let Some(body) = trimmed.strip_prefix("Assistant:") {
            marks.push((false, offset, offset + trimmed.len() - body.len()));
        }
        rest = &rest[line_end..];
    }
    marks
        .iter()
        .enumerate()
        .map(|(k, &(human, _, body_start))| {
            let end = marks.get(k + 1).map_or(t.len(), |m| m.1);
            Turn {
                human,
                text: t[body_start..end].trim(),
            }
        })
        .collect()
}

/// Shared turns become the prompt (turn texts joined by newlines); the
/// final assistant turns become chosen and rejected.
pub fn convert_dialogue(records: &[RawRecord]) -> Result<Vec<RewardExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.check_source(i, SourceTag::DialogueTranscript)?;
            let (c, j) = (
                parse_turns(r.text(i, "chosen")?),
                parse_turns(r.text(i, "rejected")?),
            );
            let (Some(last_c), Some(last_r)) = (c.last(), j.last()) else {
                return Err(fail(i, "transcript has no turns".into()));
            };
            if last_c.human || last_r.human {
                return Err(fail(
                    i,
                    "transcript does not end with an assistant turn".into(),
                ));
            }
            if c.len() != j.len() || c[..c.len() - 1] != j[..j.len() - 1] {
                return Err(fail(
                    i,
                    "transcripts diverge before the final assistant turn".into(),
                ));
            }
            let prompt = c[..c.len() - 1]
                .iter()
                .map(|t| t.text)
                .collect::<Vec<_>>()
                .join("\n");
            finish(
                i,
                RewardExample {
                    prompt,
                    chosen: last_c.text.to_string(),
                    rejected: last_r.text.to_string(),
                    domain: r.text(i, "domain")?.to_string(),
                },
            )
        })
        .collect()
}

/// The labelled summary is chosen, the other rejected; context is the prompt.
pub fn convert_dual_summary(records: &[RawRecord]) -> Result<Vec<RewardExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.check_source(i, SourceTag::DualSummary)?;
            let s = r.texts(i, "summaries")?;
            if s.len() != 2 {
                return Err(fail(i, format!("expected 2 summaries, got {}", s.len())));
            }
            let label = r.label(i)?;
            if !(0..=1).contains(&label) {
                return Err(fail(i, format!("label {label} outside {{0, 1}}")));
            }
            let l = label as usize;
            finish(
                i,
                RewardExample {
                    prompt: r.text(i, "context")?.to_string(),
                    chosen: s[l].to_string(),
                    rejected: s[1 - l].to_string(),
                    domain: r.text(i, "domain")?.to_string(),
                },
            )
        })
        .collect()
}

/// The correct ending is chosen; the rejected one is drawn uniformly from
/// the incorrect endings with a stream seeded by `seed`.
pub fn convert_multi_ending(records: &[RawRecord], seed: u64) -> Result<Vec<RewardExample>> {
    let mut rng = rng::stream(seed, "multi-ending");
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.check_source(i, SourceTag::MultiEnding)?;
            let endings = r.texts(i, "endings")?;
            if endings.len() < 2 {
                return Err(fail(
                    i,
                    format!("need at least 2 endings, got {}", endings.len()),
                ));
            }
            let label = r.label(i)?;
            if label < 0 || label as usize >= endings.len() {
                return Err(fail(
                    i,
                    format!(
                        "correct index {label} out of range for {} endings",
                        endings.len()
                    ),
                ));
            }
            let correct = label as usize;
            let mut pick = rng.gen_range(0..endings.len() - 1);
            if pick >= correct {
                pick += 1;
            }
            finish(
                i,
                RewardExample {
                    prompt: r.text(i, "prompt")?.to_string(),
                    chosen: endings[correct].to_string(),
                    rejected: endings[pick].to_string(),
                    domain: r.text(i, "domain")?.to_string(),
                },
            )
        })
        .collect()
}

/// Responses ranked best first expand to adjacent pairs: rank i chosen
/// against rank i+1.
pub fn convert_preranked(records: &[RawRecord]) -> Result<Vec<RewardExample>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        r.check_source(i, SourceTag::Preranked)?;
        let resp = r.texts(i, "responses")?;
        if resp.len() < 2 {
            return Err(fail(
                i,
                format!("need at least 2 responses, got {}", resp.len()),
            ));
        }
        let prompt = r.text(i, "prompt")?;
        let domain = r.text(i, "domain")?;
        for w in resp.windows(2) {
            out.push(finish(
                i,
                RewardExample {
                    prompt: prompt.to_string(),
                    chosen: w[0].to_string(),
                    rejected: w[1].to_string(),
                    domain: domain.to_string(),
                },
            )?);
        }
    }
    Ok(out)
}

/// Converts a mixed list, dispatching on each record's source tag and
/// keeping input order.
pub fn convert_records(records: &[RawRecord], seed: u64) -> Result<Vec<RewardExample>> {
    let mut out = Vec::new();
    let mut ending_rng_seed = 0u64;
    for (i, r) in records.iter().enumerate() {
        let one = std::slice::from_ref(r);
        let converted = match r.source {
            SourceTag::DialogueTranscript => convert_dialogue(one),
            SourceTag::DualSummary => convert_dual_summary(one),
            SourceTag::MultiEnding => {
                ending_rng_seed += 1;
                convert_multi_ending(one, rng::child_seed(seed, "convert", ending_rng_seed))
            }
            SourceTag::Preranked => convert_preranked(one),
        };
        out.extend(converted.map_err(|e| match e {
            Error::Conversion { msg, .. } => Error::Conversion { index: i, msg },
            other => other,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn dialogue(chosen: &str, rejected: &str) -> RawRecord {
        RawRecord::new(
            SourceTag::DialogueTranscript,
            json!({"chosen": chosen, "rejected": rejected, "domain": "hh"}),
        )
    }

    #[test]
    fn dialogue_single_turn() {
        let r = dialogue(
            "\n\nHuman: hi\n\nAssistant: X",
            "\n\nHuman: hi\n\nAssistant: Y",
        );
        let ex = convert_dialogue(&[r]).unwrap();
        assert_eq!(
            (
                ex[0].prompt.as_str(),
                ex[0].chosen.as_str(),
                ex[0].rejected.as_str()
            ),
            ("hi", "X", "Y")
        );
    }

    #[test]
    fn dialogue_multi_turn_prefix() {
        let shared = "Human: first\nAssistant: ok then\nHuman: second";
        let r = dialogue(
            &format!("{shared}\nAssistant: good"),
            &format!("{shared}\nAssistant: bad"),
        );
        let ex = convert_dialogue(&[r]).unwrap();
        assert_eq!(ex[0].prompt, "first\nok then\nsecond");
    }

    #[test]
    fn dialogue_errors() {
        let same = dialogue("Human: hi\nAssistant: X", "Human: hi\nAssistant: X");
        let err = convert_dialogue(&[same]).unwrap_err().to_string();
        assert!(err.contains("degenerate pair"), "{err}");
        let early = dialogue("Human: hi\nAssistant: X", "Human: yo\nAssistant: Y");
        let err = convert_dialogue(&[early]).unwrap_err().to_string();
        assert!(err.contains("diverge"), "{err}");
    }

    #[test]
    fn dual_summary_rules() {
        let r = |a: &str, b: &str, l: i64| {
            RawRecord::new(
                SourceTag::DualSummary,
                json!({"context": "ctx", "summaries": [a, b], "label": l, "domain": "tldr"}),
            )
        };
        let one = convert_dual_summary(&[r("s0", "s1", 1)]).unwrap();
        assert_eq!(
            (one[0].chosen.as_str(), one[0].rejected.as_str()),
            ("s1", "s0")
        );
        assert_eq!(convert_dual_summary(&[r("s1", "s0", 0)]).unwrap(), one);
        assert!(convert_dual_summary(&[r("a", "b", 2)]).is_err());
        let no_label = RawRecord::new(
            SourceTag::DualSummary,
            json!({"context": "c", "summaries": ["a", "b"], "domain": "d"}),
        );
        assert!(convert_dual_summary(&[no_label])
            .unwrap_err()
            .to_string()
            .contains("label"));
    }

    #[test]
    fn multi_ending_rules() {
        let r = |endings: Vec<&str>, l: i64| {
            RawRecord::new(
                SourceTag::MultiEnding,
                json!({"prompt": "p", "endings": endings, "label": l, "domain": "hs"}),
            )
        };
        let four: Vec<RawRecord> = (0..20)
            .map(|_| r(vec!["e0", "e1", "e2", "e3"], 2))
            .collect();
        let a = convert_multi_ending(&four, 5).unwrap();
        assert!(a
            .iter()
            .all(|e| e.chosen == "e2" && ["e0", "e1", "e3"].contains(&e.rejected.as_str())));
        assert_eq!(a, convert_multi_ending(&four, 5).unwrap());
        let two = convert_multi_ending(&[r(vec!["x", "y"], 0)], 1).unwrap();
        assert_eq!(two[0].rejected, "y");
        assert!(convert_multi_ending(&[r(vec!["x", "y"], 2)], 1).is_err());
        assert!(convert_multi_ending(&[r(vec!["x"], 0)], 1).is_err());
    }

    #[test]
    fn preranked_adjacent_pairs() {
        let r = RawRecord::new(
            SourceTag::Preranked,
            json!({"prompt": "p", "responses": ["a", "b", "c"], "domain": "oa"}),
        );
        let ex = convert_preranked(&[r]).unwrap();
        let pairs: Vec<(&str, &str)> = ex
            .iter()
            .map(|e| (e.chosen.as_str(), e.rejected.as_str()))
            .collect();
        assert_eq!(pairs, vec![("a", "b"), ("b", "c")]);
    }

    #[test]
    fn raw_record_json_shape() {
        let text = r#"{"source":"dual-summary","context":"c","summaries":["a","b"],"label":0,"domain":"d"}"#;
        let r: RawRecord = serde_json::from_str(text).unwrap();
        assert_eq!(r.source, SourceTag::DualSummary);
        assert_eq!(convert_records(&[r], 0).unwrap()[0].chosen, "a");
    }
}
