//! Ground-truth construction from a speech classifier and an image
//! classifier: the more confident of the two decides, and samples where
//! neither is confident enough are discarded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attrib::check_probabilities;
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Anger,
    Happy,
    Hate,
    Sad,
}

impl EmotionClass {
    /// Output class order.
    pub const ALL: [EmotionClass; 4] = [
        EmotionClass::Anger,
        EmotionClass::Happy,
        EmotionClass::Hate,
        EmotionClass::Sad,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Anger => "anger",
            EmotionClass::Happy => "happy",
            EmotionClass::Hate => "hate",
            EmotionClass::Sad => "sad",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = Error;

    /// Accepts the four output classes and the source-side synonyms.
    fn from_str(s: &str) -> Result<Self> {
        relabel(s)
    }
}

/// Maps a source label onto the output classes: excitement becomes happy,
/// disgust becomes hate, the four output classes map to themselves.
pub fn relabel(label: &str) -> Result<EmotionClass> {
    match label.trim().to_ascii_lowercase().as_str() {
        "anger" => Ok(EmotionClass::Anger),
        "happy" | "excitement" => Ok(EmotionClass::Happy),
        "hate" | "disgust" => Ok(EmotionClass::Hate),
        "sad" => Ok(EmotionClass::Sad),
        other => Err(Error::invalid("emotion label", format!("unknown label '{other}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Speech,
    Image,
}

impl fmt::Display for Winner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Winner::Speech => "speech",
            Winner::Image => "image",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelDecision {
    /// `None` when the sample is discarded.
    pub label: Option<EmotionClass>,
    /// Highest speech-classifier probability.
    pub max1: f64,
    /// Highest image-classifier probability.
    pub max2: f64,
    pub winner: Winner,
}

impl LabelDecision {
    pub fn is_assigned(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRule {
    pub threshold: f64,
    /// Also discard samples where the two classifiers disagree on the class.
    pub require_agreement: bool,
    /// Source label of each probability column, relabeled on output.
    pub columns: Vec<String>,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            threshold: 0.5,
            require_agreement: false,
            columns: EmotionClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

impl LabelRule {
    pub fn decide(&self, ser_probs: &[f64], ier_probs: &[f64]) -> Result<LabelDecision> {
        let k = self.columns.len();
        for (name, p) in [("speech", ser_probs), ("image", ier_probs)] {
            if p.len() != k {
                return Err(Error::shape(
                    "assign_label",
                    format!("{name} probabilities"),
                    k,
                    p.len(),
                ));
            }
            check_probabilities(p).map_err(|e| Error::invalid("probability vector", format!("{name}: {e}")))?;
        }
        let (s, i) = (argmax(ser_probs), argmax(ier_probs));
        let (max1, max2) = (ser_probs[s], ier_probs[i]);
        // Ties go to the image classifier.
        let (winner, column) = if max2 >= max1 {
            (Winner::Image, i)
        } else {
            (Winner::Speech, s)
        };
        let label = relabel(&self.columns[column])?;
        let agree = relabel(&self.columns[s])? == relabel(&self.columns[i])?;
        let keep = max1.max(max2) >= self.threshold && (!self.require_agreement || agree);
        Ok(LabelDecision {
            label: keep.then_some(label),
            max1,
            max2,
            winner,
        })
    }
}

/// Decision with the default four-class columns.
pub fn assign_label(ser_probs: &[f64], ier_probs: &[f64], threshold: f64) -> Result<LabelDecision> {
    LabelRule {
        threshold,
        ..LabelRule::default()
    }
    .decide(ser_probs, ier_probs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub anger: u64,
    pub happy: u64,
    pub hate: u64,
    pub sad: u64,
}

impl ClassCounts {
    pub fn get(&self, c: EmotionClass) -> u64 {
        match c {
            EmotionClass::Anger => self.anger,
            EmotionClass::Happy => self.happy,
            EmotionClass::Hate => self.hate,
            EmotionClass::Sad => self.sad,
        }
    }

    fn add(&mut self, c: EmotionClass, n: u64) {
        match c {
            EmotionClass::Anger => self.anger += n,
            EmotionClass::Happy => self.happy += n,
            EmotionClass::Hate => self.hate += n,
            EmotionClass::Sad => self.sad += n,
        }
    }

    pub fn sum(&self) -> u64 {
        self.anger + self.happy + self.hate + self.sad
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: ClassCounts,
    pub discarded: u64,
    pub total: u64,
}

impl CorpusStats {
    pub fn assigned(&self) -> u64 {
        self.counts.sum()
    }

    /// One `name count` line per class, then the discard count and total.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in EmotionClass::ALL {
            out.push_str(&format!("{} {}\n", c.name(), self.counts.get(c)));
        }
        out.push_str(&format!("discarded {}\ntotal {}\n", self.discarded, self.total));
        out
    }
}

impl FromStr for CorpusStats {
    type Err = Error;

    /// Parses the text produced by [`CorpusStats::render`].
    fn from_str(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            format: "corpus stats",
            reason,
        };
        let mut stats = CorpusStats::default();
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("expected `name count`, found {line:?}")))?;
            let n: u64 = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad count in {line:?}")))?;
            match key {
                "discarded" => stats.discarded = n,
                "total" => stats.total = n,
                name => {
                    let class: EmotionClass = name.parse()?;
                    if class.name() != name {
                        return Err(bad(format!("source label {name:?} in output stats")));
                    }
                    stats.counts.add(class, n);
                }
            }
            if seen.contains(&key) {
                return Err(bad(format!("duplicate entry {key:?}")));
            }
            seen.push(key);
        }
        if seen.len() != 6 {
            return Err(bad(format!("expected 6 entries, found {}", seen.len())));
        }
        if stats.assigned() + stats.discarded != stats.total {
            return Err(bad(format!(
                "counts add up to {}, total says {}",
                stats.assigned() + stats.discarded,
                stats.total
            )));
        }
        Ok(stats)
    }
}

pub fn corpus_stats<'a>(decisions: impl IntoIterator<Item = &'a LabelDecision>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for d in decisions {
        stats.total += 1;
        match d.label {
            Some(c) => stats.counts.add(c, 1),
            None => stats.discarded += 1,
        }
    }
    stats
}
