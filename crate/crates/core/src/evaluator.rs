//! Rank classification: every answer candidate is scored by the model and the
//! highest-scoring one is the prediction.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ia3::IA3Adapter;
use crate::model::{DecodeSegment, Model};
use crate::objectives::CandidateSet;
use crate::tensor::{Real, Tape};

/// Examples scored per packed forward pass.
const SCORE_CHUNK: usize = 16;

/// Summed token log-probability of each candidate, or its per-token mean
/// when `length_normalize` is set.
pub fn score_candidates<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    example: &CandidateSet,
    length_normalize: bool,
) -> Result<Vec<F>> {
    Ok(score_batch(model, adapter, std::slice::from_ref(example))?
        .remove(0)
        .scores(length_normalize))
}

/// Index of the largest score; the lowest index wins ties.
pub fn rank_classify<F: Real>(scores: &[F]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("no scores to rank".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Summed log-probability and token count of every candidate of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScores<F> {
    pub sums: Vec<F>,
    pub lens: Vec<usize>,
}

impl<F: Real> CandidateScores<F> {
    pub fn scores(&self, length_normalize: bool) -> Vec<F> {
        if !length_normalize {
            return self.sums.clone();
        }
        self.sums
            .iter()
            .zip(&self.lens)
            .map(|(&s, &n)| s / F::from_usize(n).expect("usize fits"))
            .collect()
    }
}

/// Scores every candidate of every example, packing several examples per
/// forward pass.
pub fn score_batch<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    examples: &[CandidateSet],
) -> Result<Vec<CandidateScores<F>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(SCORE_CHUNK) {
        for ex in chunk {
            ex.validate()?;
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let ba = adapter.map(|a| a.bind(&tape, false)).transpose()?;
        let inputs: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
        let adapters = vec![ba.as_ref(); chunk.len()];
        let mut decodes = Vec::new();
        for (i, ex) in chunk.iter().enumerate() {
            decodes.extend(ex.candidates.iter().map(|c| DecodeSegment { example: i, target: c }));
        }
        let packed = bound.forward_packed(&adapters, &inputs, &decodes)?;
        let flat: Vec<usize> = decodes.iter().flat_map(|d| d.target.iter().copied()).collect();
        let lp = packed.logits.log_softmax()?.pick(&flat)?.value();
        let mut seg = 0;
        for ex in chunk {
            let n = ex.candidates.len();
            let sums = (seg..seg + n)
                .map(|s| {
                    let o = packed.offsets[s];
                    lp.data()[o..o + packed.lens[s]].iter().copied().sum()
                })
                .collect();
            out.push(CandidateScores {
                sums,
                lens: packed.lens[seg..seg + n].to_vec(),
            });
            seg += n;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub length_normalize: bool,
    pub templates: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Length-normalized, five seeds, and no templates: callers fill those in
/// before `validate`.
impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            length_normalize: true,
            templates: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::config("templates", "at least one template is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }
}

/// Held-out examples rendered through each template, keyed by template id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalDataset {
    pub by_template: BTreeMap<String, Vec<CandidateSet>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub template: String,
    pub seed: u64,
    pub accuracy: f64,
    pub examples: usize,
    /// Mean over examples of the total probability of incorrect candidates.
    pub incorrect_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub length_normalize: bool,
    pub cells: Vec<EvalCell>,
    pub median: f64,
    pub iqr: f64,
    pub median_incorrect_mass: f64,
}

impl EvalReport {
    /// Summarizes accuracy cells by their median and interquartile range.
    pub fn from_cells(length_normalize: bool, cells: Vec<EvalCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Contract("no evaluation cells".into()));
        }
        let accs: Vec<f64> = cells.iter().map(|c| c.accuracy).collect();
        let masses: Vec<f64> = cells.iter().map(|c| c.incorrect_mass).collect();
        Ok(Self {
            length_normalize,
            median: median(&accs),
            iqr: iqr(&accs),
            median_incorrect_mass: median(&masses),
            cells,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (template, seed) cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for cell in &self.cells {
            w.serialize(cell)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Median accuracy over the cells of one seed.
    pub fn seed_median(&self, seed: u64) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.seed == seed)
            .map(|c| c.accuracy)
            .collect();
        (!accs.is_empty()).then(|| quantile(&accs, 0.5))
    }
}

/// Linear-interpolation quantile (type 7) of unsorted `xs`.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Interquartile range `Q3 - Q1`.
pub fn iqr(xs: &[f64]) -> f64 {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}

/// Accuracy of one adapter on one set of examples, and the mean probability
/// mass it puts on incorrect candidates.
pub fn accuracy<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    examples: &[CandidateSet],
    length_normalize: bool,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Contract("empty evaluation dataset".into()));
    }
    let scored = score_batch(model, adapter, examples)?;
    let mut correct = 0usize;
    let mut mass = 0.0;
    for (ex, s) in examples.iter().zip(&scored) {
        if rank_classify(&s.scores(length_normalize))? == ex.correct {
            correct += 1;
        }
        mass += s
            .sums
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ex.correct)
            .map(|(_, lp)| lp.to_f64_lossy().exp())
            .sum::<f64>();
    }
    let n = examples.len() as f64;
    Ok((correct as f64 / n, mass / n))
}

/// Accuracy for every (template, seed) cell. `adapters` holds one adapter
/// per seed, or a single entry shared by all seeds.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    adapters: &[Option<&IA3Adapter<F>>],
    dataset: &EvalDataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if adapters.len() != 1 && adapters.len() != config.seeds.len() {
        return Err(Error::Contract(format!(
            "{} adapters for {} seeds",
            adapters.len(),
            config.seeds.len()
        )));
    }
    let mut cells = Vec::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        let adapter = adapters[if adapters.len() == 1 { 0 } else { si }];
        for template in &config.templates {
            let examples = dataset
                .by_template
                .get(template)
                .ok_or_else(|| Error::Template(format!("no evaluation examples for template {template:?}")))?;
            let (acc, mass) = accuracy(model, adapter, examples, config.length_normalize)?;
            cells.push(EvalCell {
                template: template.clone(),
                seed,
                accuracy: acc,
                examples: examples.len(),
                incorrect_mass: mass,
            });
        }
    }
    EvalReport::from_cells(config.length_normalize, cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_with_ties() {
        assert_eq!(rank_classify(&[-1.0f64, -0.5, -2.0]).unwrap(), 1);
        assert_eq!(rank_classify(&[-1.0f64, -1.0]).unwrap(), 0);
        assert_eq!(rank_classify(&[3.0f64]).unwrap(), 0);
        assert!(rank_classify::<f64>(&[]).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let xs = [0.1, 0.4, 0.2, 0.3];
        assert!((median(&xs) - 0.25).abs() < 1e-15);
        // Q1 at h = 0.75 → 0.175, Q3 at h = 2.25 → 0.325
        assert!((iqr(&xs) - 0.15).abs() < 1e-15);
        assert_eq!(median(&[0.7]), 0.7);
        assert_eq!(iqr(&[0.7]), 0.0);
    }

    #[test]
    fn config_needs_templates_and_seeds() {
        let c = EvalConfig {
            length_normalize: true,
            templates: vec![],
            seeds: vec![0],
        };
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }
}
