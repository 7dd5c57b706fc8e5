//! Class-balanced minibatches.
//!
//! Each grade class keeps its own seeded-shuffled queue. A batch takes a
//! fixed number of lesions from every queue; an exhausted queue is
//! reshuffled and restarted, so minority grades simply repeat more often.

use rand::seq::SliceRandom;

use crate::datamodel::{Grade, LesionRecord};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

struct ClassQueue {
    members: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl ClassQueue {
    fn next(&mut self, rng: &mut StreamRng) -> usize {
        if self.pos == self.order.len() {
            self.order.clone_from(&self.members);
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Infinite stream of batches of indices into the training lesion list.
pub struct BalancedBatches {
    queues: [ClassQueue; 3],
    per_grade: usize,
    rng: StreamRng,
}

impl BalancedBatches {
    pub fn new(lesions: &[&LesionRecord], per_grade: usize, seed: u64) -> Result<Self> {
        if per_grade == 0 {
            return Err(Error::Config("per-grade batch count must be positive".into()));
        }
        let mut members: [Vec<usize>; 3] = Default::default();
        for (i, l) in lesions.iter().enumerate() {
            members[l.label().consensus.index()].push(i);
        }
        for (g, m) in Grade::ALL.iter().zip(&members) {
            if m.is_empty() {
                return Err(Error::Config(format!(
                    "no training lesions with consensus grade {g}; balanced batches need all three"
                )));
            }
        }
        let queues = members.map(|members| ClassQueue {
            members,
            order: Vec::new(),
            pos: 0,
        });
        Ok(BalancedBatches {
            queues,
            per_grade,
            rng: seed::stream(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        3 * self.per_grade
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.batch_size());
        for q in &mut self.queues {
            for _ in 0..self.per_grade {
                batch.push(q.next(&mut self.rng));
            }
        }
        batch.shuffle(&mut self.rng);
        Some(batch)
    }
}

/// Unbalanced alternative: uniform reshuffled passes over all lesions.
pub struct UniformBatches {
    queue: ClassQueue,
    batch_size: usize,
    rng: StreamRng,
}

impl UniformBatches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Config("uniform batches need lesions and a positive batch size".into()));
        }
        Ok(UniformBatches {
            queue: ClassQueue {
                members: (0..n).collect(),
                order: Vec::new(),
                pos: 0,
            },
            batch_size,
            rng: seed::stream(seed),
        })
    }
}

impl Iterator for UniformBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some((0..self.batch_size).map(|_| self.queue.next(&mut self.rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ObserverGrades;

    pub(crate) fn lesions_with_counts(counts: [usize; 3]) -> Vec<LesionRecord> {
        let mut out = Vec::new();
        for (gi, &n) in counts.iter().enumerate() {
            let g = Grade::ALL[gi];
            for k in 0..n {
                out.push(
                    LesionRecord::new(
                        format!("G{}-{k}", g),
                        format!("P{}-{k}", g),
                        "x.png",
                        vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
                        0.88,
                        ObserverGrades::new(g, g, g),
                    )
                    .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn exact_fit_batch_is_a_permutation() {
        let lesions = lesions_with_counts([4, 4, 4]);
        let refs: Vec<&LesionRecord> = lesions.iter().collect();
        let mut b = BalancedBatches::new(&refs, 4, 1).unwrap();
        let mut first = b.next().unwrap();
        first.sort_unstable();
        assert_eq!(first, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn minority_classes_cycle() {
        let lesions = lesions_with_counts([100, 10, 10]);
        let refs: Vec<&LesionRecord> = lesions.iter().collect();
        let batches: Vec<Vec<usize>> = BalancedBatches::new(&refs, 4, 7).unwrap().take(10).collect();
        let mut counts = vec![0usize; lesions.len()];
        for b in &batches {
            let mut hist = [0; 3];
            for &i in b {
                counts[i] += 1;
                hist[lesions[i].label().consensus.index()] += 1;
            }
            assert_eq!(hist, [4, 4, 4]);
        }
        assert!((100..110).all(|i| counts[i] >= 3));
        // 40 grade-1 draws from 100 lesions: first pass, so no repeats.
        assert!((0..100).all(|i| counts[i] <= 1));
    }

    #[test]
    fn same_seed_same_batches() {
        let lesions = lesions_with_counts([7, 3, 5]);
        let refs: Vec<&LesionRecord> = lesions.iter().collect();
        let a: Vec<_> = BalancedBatches::new(&refs, 4, 3).unwrap().take(20).collect();
        let b: Vec<_> = BalancedBatches::new(&refs, 4, 3).unwrap().take(20).collect();
        assert_eq!(a, b);
        let c: Vec<_> = BalancedBatches::new(&refs, 4, 4).unwrap().take(20).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn missing_class_is_an_error() {
        let lesions = lesions_with_counts([3, 0, 2]);
        let refs: Vec<&LesionRecord> = lesions.iter().collect();
        assert!(BalancedBatches::new(&refs, 4, 0).is_err());
    }

    #[test]
    fn uniform_batches_cover_every_lesion() {
        let mut b = UniformBatches::new(6, 3, 0).unwrap();
        let mut seen: Vec<usize> = b.next().unwrap().into_iter().chain(b.next().unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}
