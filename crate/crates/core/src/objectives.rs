//! Training losses over a set of answer candidates: token-level
//! cross-entropy on the correct answer, unlikelihood on the incorrect ones,
//! and a softmax over length-normalized candidate log-probabilities. The
//! three are summed without weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ia3::{BoundAdapter, IA3Adapter};
use crate::model::{BoundModel, DecodeSegment, Model};
use crate::tensor::{Real, Tape, Tensor, Var};

/// A prompted input with its ordered answer candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub input: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub correct: usize,
}

impl CandidateSet {
    pub fn new(input: Vec<usize>, candidates: Vec<Vec<usize>>, correct: usize) -> Result<Self> {
        let set = Self {
            input,
            candidates,
            correct,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if self.candidates.is_empty() || self.correct >= self.candidates.len() {
            return Err(Error::Contract(format!(
                "correct index {} out of {} candidates",
                self.correct,
                self.candidates.len()
            )));
        }
        if self.candidates.iter().any(Vec::is_empty) {
            return Err(Error::Contract("empty candidate sequence".into()));
        }
        let y = &self.candidates[self.correct];
        if self.incorrect().any(|c| c == y) {
            return Err(Error::Contract(
                "correct target duplicated among incorrect targets".into(),
            ));
        }
        Ok(())
    }

    pub fn correct_target(&self) -> &[usize] {
        &self.candidates[self.correct]
    }

    pub fn incorrect(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.candidates
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.correct)
            .map(|(_, c)| c)
    }

    pub fn num_incorrect(&self) -> usize {
        self.candidates.len() - 1
    }
}

/// Which loss terms contribute to training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Losses {
    pub lm: bool,
    pub ul: bool,
    pub ln: bool,
}

impl Default for Losses {
    fn default() -> Self {
        Self::ALL
    }
}

impl Losses {
    pub const ALL: Self = Self {
        lm: true,
        ul: true,
        ln: true,
    };
    pub const LM_ONLY: Self = Self {
        lm: true,
        ul: false,
        ln: false,
    };

    fn needs_incorrect(&self) -> bool {
        self.ul || self.ln
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub ul: f64,
    pub ln: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(lm: f64, ul: f64, ln: f64) -> Self {
        Self {
            lm,
            ul,
            ln,
            total: lm + ul + ln,
        }
    }
}

/// `-(1/T) Σ_t log p(y_t | x, y_<t)` from per-token log-probabilities.
pub fn lm_from_token_logprobs<F: Real>(logprobs: &[F]) -> Result<F> {
    if logprobs.is_empty() {
        return Err(Error::Contract("empty target".into()));
    }
    let n = F::from_usize(logprobs.len()).expect("usize fits");
    Ok(-logprobs.iter().copied().sum::<F>() / n)
}

/// `-Σ_n Σ_t log(1 - p(ŷⁿ_t | x, ŷⁿ_<t)) / Σ_n Tⁿ`; zero when there are no
/// incorrect targets.
pub fn ul_from_token_logprobs<F: Real>(per_candidate: &[Vec<F>]) -> F {
    let count: usize = per_candidate.iter().map(Vec::len).sum();
    if count == 0 {
        return F::zero();
    }
    let hi = F::lit(crate::tensor::LOG1M_CLAMP);
    let total: F = per_candidate
        .iter()
        .flatten()
        .map(|&lp| (-lp.exp().min(hi)).ln_1p())
        .sum();
    -total / F::from_usize(count).expect("usize fits")
}

/// Softmax cross-entropy over candidate scores with `correct` as the label.
pub fn ln_from_scores<F: Real>(scores: &[F], correct: usize) -> Result<F> {
    if correct >= scores.len() {
        return Err(Error::Contract(format!(
            "correct index {correct} out of {} scores",
            scores.len()
        )));
    }
    if scores.len() == 1 {
        return Ok(F::zero());
    }
    let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = m + scores.iter().map(|&s| (s - m).exp()).sum::<F>().ln();
    Ok(lse - scores[correct])
}

/// Differentiable loss of a batch: the mean over examples of each term.
pub struct BatchLoss<'t, F> {
    pub total: Var<'t, F>,
    pub breakdown: LossBreakdown,
    /// Per-example `(lm, ul, ln)`.
    pub per_example: Vec<(F, F, F)>,
}

/// Records the summed loss for every example of a batch on the tape.
/// `adapters[i]` belongs to `sets[i]`. Per-example terms are averaged over the
/// batch.
pub fn batch_loss<'t, F: Real>(
    model: &BoundModel<'t, F>,
    adapters: &[Option<&BoundAdapter<'t, F>>],
    sets: &[&CandidateSet],
    losses: Losses,
) -> Result<BatchLoss<'t, F>> {
    if sets.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if adapters.len() != sets.len() {
        return Err(Error::Contract("one adapter slot per example required".into()));
    }
    let tape = model.tape();
    let mut decodes = Vec::new();
    // Per example: indices into `decodes` and which of them is correct.
    let mut layout: Vec<(Vec<usize>, usize)> = Vec::with_capacity(sets.len());
    for (e, set) in sets.iter().enumerate() {
        set.validate()?;
        let mut idx = Vec::new();
        let mut correct_pos = 0;
        for (c, target) in set.candidates.iter().enumerate() {
            if c != set.correct && !losses.needs_incorrect() {
                continue;
            }
            if c == set.correct {
                correct_pos = idx.len();
            }
            idx.push(decodes.len());
            decodes.push(DecodeSegment {
                example: e,
                target: target.as_slice(),
            });
        }
        layout.push((idx, correct_pos));
    }
    let inputs: Vec<&[usize]> = sets.iter().map(|s| s.input.as_slice()).collect();
    let packed = model.forward_packed(adapters, &inputs, &decodes)?;
    let targets: Vec<usize> = decodes.iter().flat_map(|d| d.target.iter().copied()).collect();
    let token_lp = packed.logits.log_softmax()?.pick(&targets)?;
    let seg_sums = if losses.ln {
        Some(token_lp.segment_sums(&packed.lens)?)
    } else {
        None
    };

    let n = F::from_usize(sets.len()).expect("usize fits");
    let mut totals = Vec::with_capacity(sets.len());
    let mut per_example = Vec::with_capacity(sets.len());
    let (mut lm_sum, mut ul_sum, mut ln_sum) = (0.0, 0.0, 0.0);
    for (set, (idx, correct_pos)) in sets.iter().zip(&layout) {
        let mut terms: Vec<Var<'t, F>> = Vec::with_capacity(3);
        let mut vals = (F::zero(), F::zero(), F::zero());

        if losses.lm {
            let c = idx[*correct_pos];
            let rows: Vec<usize> = (packed.offsets[c]..packed.offsets[c] + packed.lens[c]).collect();
            let lm = token_lp.gather(&rows)?.mean()?.neg()?;
            vals.0 = lm.item()?;
            terms.push(lm);
        }
        if losses.ul && set.num_incorrect() > 0 {
            let rows: Vec<usize> = idx
                .iter()
                .enumerate()
                .filter(|(k, _)| k != correct_pos)
                .flat_map(|(_, &d)| packed.offsets[d]..packed.offsets[d] + packed.lens[d])
                .collect();
            let count = F::from_usize(rows.len()).expect("usize fits");
            let ul = token_lp
                .gather(&rows)?
                .exp()?
                .log1m()?
                .sum()?
                .scale(-F::one() / count)?;
            vals.1 = ul.item()?;
            terms.push(ul);
        }
        if let (Some(sums), true) = (seg_sums, set.num_incorrect() > 0) {
            let inv_len: Vec<F> = idx
                .iter()
                .map(|&d| F::one() / F::from_usize(packed.lens[d]).expect("usize fits"))
                .collect();
            let beta = sums.gather(idx)?.mul(tape.constant(Tensor::vector(inv_len)?))?;
            let ln = beta.log_softmax()?.gather(&[*correct_pos])?.neg()?;
            vals.2 = ln.item()?;
            terms.push(ln);
        }

        let example_total = match terms.len() {
            0 => tape.constant(Tensor::scalar(F::zero())),
            1 => terms[0],
            _ => tape.concat(&terms)?.sum()?,
        };
        totals.push(example_total);
        lm_sum += vals.0.to_f64_lossy();
        ul_sum += vals.1.to_f64_lossy();
        ln_sum += vals.2.to_f64_lossy();
        per_example.push(vals);
    }
    let total = if totals.len() == 1 {
        totals[0]
    } else {
        tape.concat(&totals)?.mean()?
    };
    let nf = n.to_f64_lossy();
    Ok(BatchLoss {
        total,
        breakdown: LossBreakdown::new(lm_sum / nf, ul_sum / nf, ln_sum / nf),
        per_example,
    })
}

/// Per-token log-probabilities of each target given `input`.
pub fn token_logprobs<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    input: &[usize],
    targets: &[&[usize]],
) -> Result<Vec<Vec<F>>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let ba = adapter.map(|a| a.bind(&tape, false)).transpose()?;
    let decodes: Vec<DecodeSegment<'_>> = targets
        .iter()
        .map(|t| DecodeSegment { example: 0, target: t })
        .collect();
    let packed = bound.forward_packed(&[ba.as_ref()], &[input], &decodes)?;
    let flat: Vec<usize> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let lp = packed.logits.log_softmax()?.pick(&flat)?.value();
    Ok(packed
        .offsets
        .iter()
        .zip(&packed.lens)
        .map(|(&o, &n)| lp.data()[o..o + n].to_vec())
        .collect())
}

pub fn lm_loss<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    input: &[usize],
    target: &[usize],
) -> Result<F> {
    if target.is_empty() {
        return Err(Error::Contract("empty target".into()));
    }
    let lp = token_logprobs(model, adapter, input, &[target])?;
    lm_from_token_logprobs(&lp[0])
}

pub fn ul_loss<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    input: &[usize],
    incorrect: &[&[usize]],
) -> Result<F> {
    let lp = token_logprobs(model, adapter, input, incorrect)?;
    Ok(ul_from_token_logprobs(&lp))
}

/// `β(x, y) = (1/T) Σ_t log p(y_t | x, y_<t)`.
pub fn length_normalized_logprob<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    input: &[usize],
    target: &[usize],
) -> Result<F> {
    Ok(-lm_loss(model, adapter, input, target)?)
}

pub fn ln_loss<F: Real>(model: &Model<F>, adapter: Option<&IA3Adapter<F>>, set: &CandidateSet) -> Result<F> {
    set.validate()?;
    let targets: Vec<&[usize]> = set.candidates.iter().map(Vec::as_slice).collect();
    let lp = token_logprobs(model, adapter, &set.input, &targets)?;
    let betas: Vec<F> = lp
        .iter()
        .map(|t| lm_from_token_logprobs(t).map(|l| -l))
        .collect::<Result<_>>()?;
    ln_from_scores(&betas, set.correct)
}

/// All three terms for one example, computed through the same taped path used
/// in training.
pub fn total_loss<F: Real>(
    model: &Model<F>,
    adapter: Option<&IA3Adapter<F>>,
    set: &CandidateSet,
    losses: Losses,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let ba = adapter.map(|a| a.bind(&tape, false)).transpose()?;
    Ok(batch_loss(&bound, &[ba.as_ref()], &[set], losses)?.breakdown)
}
