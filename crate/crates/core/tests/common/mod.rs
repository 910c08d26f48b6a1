//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use apolo::domain::{LabelMode, LabelSet, LabelSpace, RunStatus};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A multi-label instance as membership matrices: `pred[i][c]` says whether
/// label `c` is predicted for sample `i`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub labels: usize,
    pub pred: Vec<Vec<bool>>,
    pub gold: Vec<Vec<bool>>,
}

pub const NAMES: [&str; 5] = ["a", "b", "c", "d", "e"];

impl Instance {
    /// Random instance with 1..=8 samples over 2..=5 labels; every gold row
    /// holds at least one label.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let labels = rng.random_range(2..=5);
        let n = rng.random_range(1..=8);
        let row = |rng: &mut ChaCha8Rng| (0..labels).map(|_| rng.random_bool(0.4)).collect::<Vec<_>>();
        let pred = (0..n).map(|_| row(rng)).collect();
        let gold = (0..n)
            .map(|_| {
                let mut r = row(rng);
                if !r.iter().any(|&x| x) {
                    r[rng.random_range(0..labels)] = true;
                }
                r
            })
            .collect();
        Self { labels, pred, gold }
    }

    pub fn space(&self) -> LabelSpace {
        LabelSpace::from_raw(&NAMES[..self.labels], LabelMode::Multi).unwrap()
    }

    fn to_sets(&self, rows: &[Vec<bool>]) -> Vec<LabelSet> {
        let space = self.space();
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &x)| x)
                    .map(|(c, _)| space.resolve(NAMES[c]).unwrap().clone())
                    .collect()
            })
            .collect()
    }

    pub fn pred_sets(&self) -> Vec<LabelSet> {
        self.to_sets(&self.pred)
    }

    pub fn gold_sets(&self) -> Vec<LabelSet> {
        self.to_sets(&self.gold)
    }

    fn label_counts(&self, c: usize) -> (u32, u32, u32) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in self.pred.iter().zip(&self.gold) {
            match (p[c], g[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        (tp, fp, fn_)
    }

    pub fn macro_f1(&self) -> f64 {
        let sum: f64 = (0..self.labels)
            .map(|c| {
                let (tp, fp, fn_) = self.label_counts(c);
                if tp + fp + fn_ == 0 {
                    0.0
                } else {
                    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                    if precision + recall == 0.0 {
                        0.0
                    } else {
                        2.0 * precision * recall / (precision + recall)
                    }
                }
            })
            .sum();
        sum / self.labels as f64
    }

    pub fn micro_f1(&self) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in 0..self.labels {
            let (a, b, d) = self.label_counts(c);
            tp += a;
            fp += b;
            fn_ += d;
        }
        if tp == 0 {
            return 0.0;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        2.0 * precision * recall / (precision + recall)
    }

    pub fn emr(&self) -> f64 {
        let hits = self.pred.iter().zip(&self.gold).filter(|(p, g)| p == g).count();
        hits as f64 / self.pred.len() as f64
    }

    pub fn pma(&self) -> f64 {
        let hits = self
            .pred
            .iter()
            .zip(&self.gold)
            .filter(|(p, g)| {
                let inter = p.iter().zip(g.iter()).filter(|(a, b)| **a && **b).count();
                let size = g.iter().filter(|x| **x).count();
                inter as f64 > size as f64 / 2.0
            })
            .count();
        hits as f64 / self.pred.len() as f64
    }
}

/// Reference stopping rule: number of iterations run and the final status
/// for a reward sequence of length `max_iterations`.
pub fn reference_stop(rewards: &[f64], delta: f64, max_iterations: usize) -> (usize, RunStatus) {
    let mut previous = 0.0;
    for (i, &r) in rewards.iter().enumerate().take(max_iterations) {
        let t = i + 1;
        if r - previous <= delta {
            return (t, RunStatus::StoppedDelta);
        }
        if t == max_iterations {
            return (t, RunStatus::StoppedMaxIter);
        }
        previous = r;
    }
    unreachable!("reward sequence shorter than max_iterations")
}

/// Every sequence of length `1..=max_len` over `alphabet`.
pub fn all_sequences(alphabet: &[f64], max_len: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |&x| {
                    let mut n = s.clone();
                    n.push(x);
                    n
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}
