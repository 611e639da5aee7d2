//! Synthetic classification tasks over short symbol sequences, and seeded
//! few-shot subsets of their training splits.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_SIZE: usize = 512;
pub const HELDOUT_SIZE: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Which of `a b c d` ends the sequence.
    CopyLast,
    /// Whether `a` or `b` occurs more often (odd lengths, no ties).
    MajoritySymbol,
    /// Whether `a` is immediately followed by `b` somewhere.
    ContainsPattern,
    /// Whether the number of symbols is even or odd.
    ParityOfCount,
    /// Whether a digit sequence is non-decreasing.
    SortedOrder,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::CopyLast,
        Family::MajoritySymbol,
        Family::ContainsPattern,
        Family::ParityOfCount,
        Family::SortedOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::CopyLast => "copy-last",
            Family::MajoritySymbol => "majority-symbol",
            Family::ContainsPattern => "contains-pattern",
            Family::ParityOfCount => "parity-of-count",
            Family::SortedOrder => "sorted-order",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn num_classes(self) -> usize {
        match self {
            Family::CopyLast => 4,
            _ => 2,
        }
    }

    /// Families used for multitask adapter pre-training; the rest are held out.
    pub fn in_mixture(self) -> bool {
        matches!(
            self,
            Family::CopyLast | Family::MajoritySymbol | Family::ContainsPattern
        )
    }

    /// The generative rule: label of a sequence of symbols.
    pub fn label(self, seq: &[&str]) -> usize {
        match self {
            Family::CopyLast => match seq.last() {
                Some(&"a") => 0,
                Some(&"b") => 1,
                Some(&"c") => 2,
                _ => 3,
            },
            Family::MajoritySymbol => {
                let a = seq.iter().filter(|&&s| s == "a").count();
                usize::from(2 * a < seq.len())
            }
            Family::ContainsPattern => usize::from(seq.windows(2).any(|w| w == ["a", "b"])),
            Family::ParityOfCount => seq.len() % 2,
            Family::SortedOrder => usize::from(seq.windows(2).all(|w| w[0] <= w[1])),
        }
    }

    fn sample_sequence(self, rng: &mut impl Rng) -> Vec<&'static str> {
        const LETTERS: [&str; 4] = ["a", "b", "c", "d"];
        const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
        let (alphabet, len): (&[&'static str], usize) = match self {
            Family::CopyLast => (&LETTERS, rng.random_range(3..=6)),
            Family::MajoritySymbol => (&LETTERS[..2], 2 * rng.random_range(1..=3) + 1),
            Family::ContainsPattern => (&LETTERS[..3], rng.random_range(3..=6)),
            Family::ParityOfCount => (&LETTERS, rng.random_range(2..=5)),
            Family::SortedOrder => (&DIGITS, rng.random_range(3..=5)),
        };
        let mut seq: Vec<_> = (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        // sorted sequences are rare under uniform sampling
        if self == Family::SortedOrder && rng.random_bool(0.5) {
            seq.sort_unstable();
        }
        seq
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    /// Space-separated symbols.
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub family: Family,
    pub seed: u64,
    pub train: Vec<Example>,
    pub heldout: Vec<Example>,
}

impl SyntheticTask {
    /// Balanced splits: example `i` is drawn by rejection until its label is
    /// `i mod classes`, then each split is shuffled.
    pub fn generate(family: Family, seed: u64, train_size: usize, heldout_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = family.num_classes();
        let mut split = |n: usize, first_id: usize| {
            let mut out: Vec<Example> = (0..n)
                .map(|i| {
                    let target = i % classes;
                    loop {
                        let seq = family.sample_sequence(&mut rng);
                        if family.label(&seq) == target {
                            break Example {
                                id: 0,
                                text: seq.join(" "),
                                label: target,
                            };
                        }
                    }
                })
                .collect();
            out.shuffle(&mut rng);
            for (i, ex) in out.iter_mut().enumerate() {
                ex.id = first_id + i;
            }
            out
        };
        let train = split(train_size, 0);
        let heldout = split(heldout_size, train_size);
        Self {
            family,
            seed,
            train,
            heldout,
        }
    }

    pub fn name(&self) -> &'static str {
        self.family.name()
    }

    pub fn num_classes(&self) -> usize {
        self.family.num_classes()
    }
}

/// One task per family, seeded from `master_seed`.
pub fn generate_task_suite(master_seed: u64) -> Vec<SyntheticTask> {
    Family::ALL
        .iter()
        .enumerate()
        .map(|(i, &f)| SyntheticTask::generate(f, task_seed(master_seed, i), TRAIN_SIZE, HELDOUT_SIZE))
        .collect()
}

fn task_seed(master: u64, index: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotDataset {
    pub family: Family,
    pub k: usize,
    pub seed: u64,
    /// Positions in the parent task's training split.
    pub indices: Vec<usize>,
    pub examples: Vec<Example>,
}

/// `k` training examples drawn uniformly without replacement.
pub fn sample_few_shot(task: &SyntheticTask, k: usize, seed: u64) -> Result<FewShotDataset> {
    if k > task.train.len() {
        return Err(Error::Contract(format!(
            "{k} shots requested from a training split of {}",
            task.train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, task.train.len(), k).into_vec();
    indices.sort_unstable();
    let examples = indices.iter().map(|&i| task.train[i].clone()).collect();
    Ok(FewShotDataset {
        family: task.family,
        k,
        seed,
        indices,
        examples,
    })
}
