//! Synthetic corpus with a tunable planted association between two
//! attribute groups and two partitions of target words.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

pub(crate) fn default_attributes_a() -> Vec<String> {
    word_list(include_str!("../../data/attributes_a.txt"))
}

pub(crate) fn default_attributes_b() -> Vec<String> {
    word_list(include_str!("../../data/attributes_b.txt"))
}

pub(crate) fn default_targets_a() -> Vec<String> {
    word_list(include_str!("../../data/targets_a.txt"))
}

pub(crate) fn default_targets_b() -> Vec<String> {
    word_list(include_str!("../../data/targets_b.txt"))
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Placeholders: `{attr}`, `{target}`, `{filler}` in bias templates;
/// `{topic}` and `{filler}` in neutral templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub attributes_a: Vec<String>,
    pub attributes_b: Vec<String>,
    /// Targets stereotypically associated with group A.
    pub targets_a: Vec<String>,
    /// Targets stereotypically associated with group B.
    pub targets_b: Vec<String>,
    pub filler: Vec<String>,
    pub topics_a: Vec<String>,
    pub topics_b: Vec<String>,
    /// Fillers used in neutral sentences about a group-A topic; falls back
    /// to `filler` when empty.
    pub topic_filler_a: Vec<String>,
    pub topic_filler_b: Vec<String>,
    pub templates: Vec<String>,
    pub neutral_templates: Vec<String>,
    /// Fraction of sentences drawn from the neutral templates.
    pub neutral_fraction: f64,
    /// Probability that a target co-occurs with its stereotyped group.
    pub bias_strength: f64,
    pub size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            attributes_a: default_attributes_a(),
            attributes_b: default_attributes_b(),
            targets_a: default_targets_a(),
            targets_b: default_targets_b(),
            filler: words(&[
                "good", "new", "old", "busy", "calm", "kind", "young", "tall", "quiet", "happy", "tired", "proud",
            ]),
            topics_a: words(&["rain", "snow", "wind", "storm", "cloud", "sun", "ice", "fog", "thunder", "frost"]),
            topics_b: words(&["bread", "apple", "rice", "soup", "cheese", "milk", "cake", "honey", "salad", "pasta"]),
            topic_filler_a: words(&["cold", "wet", "grey", "windy"]),
            topic_filler_b: words(&["fresh", "sweet", "tasty", "ripe"]),
            templates: words(&[
                "{attr} is a {target}",
                "{attr} works as a {target}",
                "the {target} said {attr} is {filler}",
                "{attr} became a {filler} {target}",
            ]),
            neutral_templates: words(&[
                "the {topic} is {filler}",
                "this {topic} was {filler} today",
                "that is the {topic}",
                "there is {topic} here",
            ]),
            neutral_fraction: 0.3,
            bias_strength: 0.9,
            size: 4000,
        }
    }
}

const BIAS_SLOTS: [&str; 3] = ["{attr}", "{target}", "{filler}"];
const NEUTRAL_SLOTS: [&str; 2] = ["{topic}", "{filler}"];

impl CorpusSpec {
    pub fn attributes(&self) -> impl Iterator<Item = &String> {
        self.attributes_a.iter().chain(&self.attributes_b)
    }

    pub fn targets(&self) -> impl Iterator<Item = &String> {
        self.targets_a.iter().chain(&self.targets_b)
    }

    /// Literal (non-placeholder) words of all templates.
    pub fn template_words(&self) -> Vec<String> {
        self.templates
            .iter()
            .chain(&self.neutral_templates)
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !(w.starts_with('{') && w.ends_with('}')))
            .map(str::to_owned)
            .collect()
    }

    /// Every word the generator can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        out.extend(self.attributes().cloned());
        out.extend(self.targets().cloned());
        out.extend(self.topics_a.iter().cloned());
        out.extend(self.topics_b.iter().cloned());
        out.extend(self.filler.iter().cloned());
        out.extend(self.topic_filler_a.iter().chain(&self.topic_filler_b).cloned());
        out.extend(self.template_words());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("corpus.attributes_a", &self.attributes_a),
            ("corpus.attributes_b", &self.attributes_b),
            ("corpus.targets_a", &self.targets_a),
            ("corpus.targets_b", &self.targets_b),
            ("corpus.filler", &self.filler),
            ("corpus.templates", &self.templates),
        ];
        for (field, list) in lists {
            if list.is_empty() {
                return Err(Error::config(field, "must not be empty"));
            }
        }
        if !self.neutral_templates.is_empty() && (self.topics_a.is_empty() || self.topics_b.is_empty()) {
            return Err(Error::config("corpus.topics_a", "neutral templates need both topic lists"));
        }
        let attrs: HashSet<&String> = self.attributes().collect();
        if attrs.len() != self.attributes_a.len() + self.attributes_b.len() {
            return Err(Error::config("corpus.attributes_b", "attribute groups overlap or repeat a word"));
        }
        let targets: HashSet<&String> = self.targets().collect();
        if targets.len() != self.targets_a.len() + self.targets_b.len() {
            return Err(Error::config("corpus.targets_b", "target partitions overlap or repeat a word"));
        }
        if let Some(w) = attrs.intersection(&targets).next() {
            return Err(Error::config("corpus.targets_a", format!("`{w}` is both an attribute and a target")));
        }
        for t in &self.templates {
            for slot in ["{attr}", "{target}"] {
                if t.matches(slot).count() != 1 {
                    return Err(Error::config("corpus.templates", format!("`{t}` must contain {slot} exactly once")));
                }
            }
            check_slots(t, &BIAS_SLOTS)?;
        }
        for t in &self.neutral_templates {
            if t.matches("{topic}").count() != 1 {
                return Err(Error::config("corpus.neutral_templates", format!("`{t}` must contain {{topic}} once")));
            }
            check_slots(t, &NEUTRAL_SLOTS)?;
        }
        if !(0.5..=1.0).contains(&self.bias_strength) {
            return Err(Error::config("corpus.bias_strength", "must lie in [0.5, 1]"));
        }
        if !(0.0..=1.0).contains(&self.neutral_fraction)
            || (self.neutral_fraction > 0.0 && self.neutral_templates.is_empty())
            || self.neutral_fraction >= 1.0
        {
            return Err(Error::config(
                "corpus.neutral_fraction",
                "must lie in [0, 1) and needs neutral templates when positive",
            ));
        }
        if self.size == 0 {
            return Err(Error::config("corpus.size", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_slots(template: &str, allowed: &[&str]) -> Result<()> {
    for w in template.split_whitespace() {
        if w.starts_with('{') && !allowed.contains(&w) {
            return Err(Error::config("corpus.templates", format!("unknown placeholder {w} in `{template}`")));
        }
    }
    Ok(())
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    template
        .split_whitespace()
        .map(|w| slots.iter().find(|(k, _)| *k == w).map_or(w, |(_, v)| *v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pick<'a>(list: &'a [String], rng: &mut Rng) -> &'a str {
    list.choose(rng).expect("validated non-empty")
}

/// Samples `spec.size` sentences.
///
/// A bias sentence draws a target uniformly from both partitions, then an
/// attribute from the target's stereotyped group with probability
/// `bias_strength` and from the other group otherwise.
pub fn generate_corpus(spec: &CorpusSpec, rng: &mut Rng) -> Result<Vec<String>> {
    spec.validate()?;
    let num_targets = spec.targets_a.len() + spec.targets_b.len();
    let mut out = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        if spec.neutral_fraction > 0.0 && rng.random::<f64>() < spec.neutral_fraction {
            let template = pick(&spec.neutral_templates, rng);
            let (topics, fillers) = if rng.random::<bool>() {
                (&spec.topics_a, &spec.topic_filler_a)
            } else {
                (&spec.topics_b, &spec.topic_filler_b)
            };
            let topic = pick(topics, rng);
            let filler = pick(if fillers.is_empty() { &spec.filler } else { fillers }, rng);
            out.push(fill(template, &[("{topic}", topic), ("{filler}", filler)]));
            continue;
        }
        let template = pick(&spec.templates, rng);
        let t = rng.random_range(0..num_targets);
        let (target, group_a) = if t < spec.targets_a.len() {
            (spec.targets_a[t].as_str(), true)
        } else {
            (spec.targets_b[t - spec.targets_a.len()].as_str(), false)
        };
        let stereotyped = rng.random::<f64>() < spec.bias_strength;
        let attrs = if group_a == stereotyped { &spec.attributes_a } else { &spec.attributes_b };
        let attr = pick(attrs, rng);
        let filler = pick(&spec.filler, rng);
        out.push(fill(template, &[("{attr}", attr), ("{target}", target), ("{filler}", filler)]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng, Stream};

    /// (A-target with A-attr, A-target with B-attr) counts
    fn cooccurrence(spec: &CorpusSpec, corpus: &[String]) -> (usize, usize, usize, usize) {
        let a: HashSet<&str> = spec.attributes_a.iter().map(String::as_str).collect();
        let ta: HashSet<&str> = spec.targets_a.iter().map(String::as_str).collect();
        let tb: HashSet<&str> = spec.targets_b.iter().map(String::as_str).collect();
        let mut counts = (0, 0, 0, 0);
        for s in corpus {
            let ws: Vec<&str> = s.split_whitespace().collect();
            let with_a = ws.iter().any(|w| a.contains(w));
            if ws.iter().any(|w| ta.contains(w)) {
                if with_a {
                    counts.0 += 1
                } else {
                    counts.1 += 1
                }
            }
            if ws.iter().any(|w| tb.contains(w)) {
                if with_a {
                    counts.2 += 1
                } else {
                    counts.3 += 1
                }
            }
        }
        counts
    }

    #[test]
    fn symmetric_corpus_is_balanced() {
        let spec = CorpusSpec {
            bias_strength: 0.5,
            neutral_fraction: 0.0,
            size: 10_000,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, &mut rng(42, Stream::Corpus)).unwrap();
        let (aa, ab, ba, bb) = cooccurrence(&spec, &corpus);
        for (x, y) in [(aa, ab), (ba, bb)] {
            let n = (x + y) as f64;
            let sigma = (n * 0.25).sqrt();
            assert!(((x as f64) - n / 2.0).abs() < 3.0 * sigma, "{x} vs {y}");
        }
    }

    #[test]
    fn full_bias_never_crosses_groups() {
        let spec = CorpusSpec {
            bias_strength: 1.0,
            size: 2000,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, &mut rng(1, Stream::Corpus)).unwrap();
        let (aa, ab, ba, bb) = cooccurrence(&spec, &corpus);
        assert!(aa > 0 && bb > 0);
        assert_eq!((ab, ba), (0, 0));
    }

    #[test]
    fn fixed_seed_fixed_corpus() {
        let spec = CorpusSpec {
            size: 300,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec, &mut rng(5, Stream::Corpus)).unwrap();
        let b = generate_corpus(&spec, &mut rng(5, Stream::Corpus)).unwrap();
        let c = generate_corpus(&spec, &mut rng(6, Stream::Corpus)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn validation_errors() {
        let mut spec = CorpusSpec::default();
        spec.templates.clear();
        assert!(generate_corpus(&spec, &mut rng(0, Stream::Corpus)).is_err());

        let mut spec = CorpusSpec::default();
        spec.targets_a.push("he".into());
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));

        let mut spec = CorpusSpec::default();
        spec.bias_strength = 0.3;
        assert!(spec.validate().is_err());

        let mut spec = CorpusSpec::default();
        spec.templates = vec!["{attr} is {target} {bogus}".into()];
        assert!(spec.validate().is_err());
    }
}
