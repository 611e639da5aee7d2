//! Prompt templates: an input pattern around the example text and one
//! verbalizer per class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{Example, Family};
use super::vocab::{tokenize, EOS};
use crate::error::{Error, Result};
use crate::objectives::CandidateSet;

pub const PLACEHOLDER: &str = "{x}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub family: Family,
    /// Text with exactly one `{x}`.
    pub pattern: String,
    /// Verbalizer text for each class, in label order.
    pub verbalizers: Vec<String>,
}

impl PromptTemplate {
    pub fn new(family: Family, index: usize, pattern: &str, verbalizers: &[&str]) -> Self {
        Self {
            id: format!("{}/{index}", family.name()),
            family,
            pattern: pattern.to_string(),
            verbalizers: verbalizers.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Template(format!(
                "template {} must contain {PLACEHOLDER} exactly once",
                self.id
            )));
        }
        if self.verbalizers.len() != self.family.num_classes() {
            return Err(Error::Template(format!(
                "template {} has {} verbalizers for {} classes",
                self.id,
                self.verbalizers.len(),
                self.family.num_classes()
            )));
        }
        Ok(())
    }
}

/// Renders `example` through `template`: the filled pattern followed by an
/// end-of-sequence token, with every verbalizer as a candidate.
pub fn apply_template(template: &PromptTemplate, example: &Example) -> Result<CandidateSet> {
    template.validate()?;
    if example.label >= template.verbalizers.len() {
        return Err(Error::Template(format!(
            "label {} has no verbalizer in template {}",
            example.label, template.id
        )));
    }
    let mut input = tokenize(&template.pattern.replace(PLACEHOLDER, &example.text))?;
    input.push(EOS);
    let candidates = template
        .verbalizers
        .iter()
        .map(|v| tokenize(v))
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::new(input, candidates, example.label)
}

/// Draws a template uniformly and applies it.
pub fn apply_random_template(
    templates: &[PromptTemplate],
    example: &Example,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    if templates.is_empty() {
        return Err(Error::Template("no templates to sample from".into()));
    }
    apply_template(&templates[rng.random_range(0..templates.len())], example)
}

/// Built-in templates of a family.
pub fn templates_for(family: Family) -> Vec<PromptTemplate> {
    let t = |i, p, v: &[&str]| PromptTemplate::new(family, i, p, v);
    match family {
        Family::CopyLast => vec![
            t(0, "{x} | last symbol ?", &["a", "b", "c", "d"]),
            t(1, "what is the last symbol of {x} ?", &["a", "it is b", "c", "the d"]),
            t(2, "copy the last of {x}", &["answer a", "b", "answer c", "d"]),
        ],
        Family::MajoritySymbol => vec![
            t(0, "{x} | which symbol is most ?", &["a", "it is b"]),
            t(1, "majority of {x} ?", &["a is most", "b"]),
            t(2, "does {x} has most a ?", &["yes", "no it is"]),
        ],
        Family::ContainsPattern => vec![
            t(0, "{x} | contains a b ?", &["no", "yes"]),
            t(1, "does {x} has pattern a b ?", &["it does not", "yes"]),
            t(2, "pattern a b in {x} ?", &["false", "it is true"]),
        ],
        Family::ParityOfCount => vec![
            t(0, "{x} | parity of count ?", &["even", "odd"]),
            t(1, "is the count of {x} even ?", &["yes", "no not even"]),
            t(2, "count {x} | parity ?", &["even number", "it is odd"]),
        ],
        Family::SortedOrder => vec![
            t(0, "{x} | sorted ?", &["no", "yes"]),
            t(1, "is {x} in sorted order ?", &["not sorted", "yes it is"]),
            t(2, "order of {x} is up ?", &["false", "true"]),
        ],
    }
}
