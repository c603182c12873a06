//! Candidate assignment pools: BCRD sampling, brute-force enumeration, mirror
//! closure and greedy pair-switch refinement.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::balance::Imbalance;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::stream_rng;

/// Default cap on `n` for [`enumerate_balanced`]; C(16, 8) = 12,870 vectors.
pub const DEFAULT_ENUMERATION_CAP: usize = 16;

/// A forced-balance treatment assignment: entries are +1 (treatment) or -1
/// (control) and sum to zero.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment(Vec<i8>);

impl Assignment {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDimension("assignment has no subjects".into()));
        }
        if let Some(i) = entries.iter().position(|&e| e != 1 && e != -1) {
            return Err(Error::Input(format!(
                "assignment entry {} is {}, expected +1 or -1",
                i, entries[i]
            )));
        }
        let sum: i64 = entries.iter().map(|&e| e as i64).sum();
        if sum != 0 {
            return Err(Error::Precondition(format!(
                "assignment is not forced-balance (entries sum to {sum})"
            )));
        }
        Ok(Assignment(entries))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn negated(&self) -> Assignment {
        Assignment(self.0.iter().map(|&e| -e).collect())
    }

    /// Representative of the mirror pair {w, -w}: the member whose first entry is +1.
    pub fn canonical(&self) -> Assignment {
        if self.0[0] == 1 {
            self.clone()
        } else {
            self.negated()
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&e| e as f64).collect()
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(&e, &x)| e as f64 * x).sum()
    }

    /// Line encoding: '+' for treatment, '-' for control.
    pub fn encode(&self) -> String {
        self.0.iter().map(|&e| if e > 0 { '+' } else { '-' }).collect()
    }

    pub fn decode(line: &str) -> Result<Self> {
        let entries = line
            .trim()
            .chars()
            .map(|c| match c {
                '+' => Ok(1),
                '-' | '\u{2212}' => Ok(-1),
                other => Err(Error::Parse(format!(
                    "unexpected character {other:?} in assignment line"
                ))),
            })
            .collect::<Result<Vec<i8>>>()?;
        Assignment::new(entries)
    }
}

impl fmt::Debug for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Assignment({})", self.encode())
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl Serialize for Assignment {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for Assignment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Assignment::decode(&s).map_err(serde::de::Error::custom)
    }
}

/// How a pool was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Bcrd,
    BcrdGreedy,
    Enumerated,
}

/// Where an individual pool member came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Sampled,
    Enumerated,
    Mirror,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentPool {
    n: usize,
    assignments: Vec<Assignment>,
    origins: Vec<Origin>,
    seed: u64,
    mirror_closed: bool,
    generator: Generator,
}

impl AssignmentPool {
    /// Builds a pool from explicit assignments. Duplicates are dropped (first
    /// occurrence kept) and mirror closure is detected.
    pub fn from_assignments(
        n: usize,
        assignments: Vec<Assignment>,
        seed: u64,
        generator: Generator,
    ) -> Result<Self> {
        let origins = vec![Origin::Sampled; assignments.len()];
        Self::build(n, assignments, origins, seed, generator)
    }

    fn build(
        n: usize,
        assignments: Vec<Assignment>,
        origins: Vec<Origin>,
        seed: u64,
        generator: Generator,
    ) -> Result<Self> {
        check_even(n)?;
        if let Some(w) = assignments.iter().find(|w| w.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
                context: "assignment length in pool",
            });
        }
        let mut seen = HashSet::with_capacity(assignments.len());
        let mut kept = Vec::with_capacity(assignments.len());
        let mut kept_origins = Vec::with_capacity(assignments.len());
        for (w, o) in assignments.into_iter().zip(origins) {
            if seen.insert(w.clone()) {
                kept.push(w);
                kept_origins.push(o);
            }
        }
        let mirror_closed = kept.iter().all(|w| seen.contains(&w.negated()));
        Ok(AssignmentPool {
            n,
            assignments: kept,
            origins: kept_origins,
            seed,
            mirror_closed,
            generator,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mirror_closed(&self) -> bool {
        self.mirror_closed
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn get(&self, i: usize) -> Option<&Assignment> {
        self.assignments.get(i)
    }

    pub fn contains(&self, w: &Assignment) -> bool {
        self.assignments.iter().any(|v| v == w)
    }

    /// Reorders the pool by `order` (a permutation of indices).
    pub(crate) fn permuted(&self, order: &[usize]) -> AssignmentPool {
        AssignmentPool {
            n: self.n,
            assignments: order.iter().map(|&i| self.assignments[i].clone()).collect(),
            origins: order.iter().map(|&i| self.origins[i]).collect(),
            seed: self.seed,
            mirror_closed: self.mirror_closed,
            generator: self.generator,
        }
    }

    /// Serializes as a header line `n=<n> S=<S> seed=<seed>` followed by one
    /// '+'/'-' line per assignment.
    pub fn to_text(&self) -> String {
        let mut out = format!("n={} S={} seed={}\n", self.n, self.len(), self.seed);
        for w in &self.assignments {
            out.push_str(&w.encode());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("pool file is empty".into()))?;
        let mut n = None;
        let mut s = None;
        let mut seed = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header field {field:?}")))?;
            let parsed: u64 = value
                .parse()
                .map_err(|_| Error::Parse(format!("header field {key} is not an integer")))?;
            match key {
                "n" => n = Some(parsed as usize),
                "S" => s = Some(parsed as usize),
                "seed" => seed = Some(parsed),
                _ => return Err(Error::Parse(format!("unknown header field {key:?}"))),
            }
        }
        let (n, s, seed) = match (n, s, seed) {
            (Some(n), Some(s), Some(seed)) => (n, s, seed),
            _ => return Err(Error::Parse("header must contain n=, S= and seed=".into())),
        };
        let assignments = lines
            .filter(|l| !l.trim().is_empty())
            .map(Assignment::decode)
            .collect::<Result<Vec<_>>>()?;
        if assignments.len() != s {
            return Err(Error::Parse(format!(
                "header declares S={s} but {} assignments follow",
                assignments.len()
            )));
        }
        AssignmentPool::from_assignments(n, assignments, seed, Generator::Bcrd)
    }
}

fn check_even(n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidDimension(format!(
            "forced balance needs an even number of subjects >= 2, got {n}"
        )));
    }
    Ok(())
}

/// One uniformly random balanced vector from stream `index` of `seed`.
pub fn bcrd_draw(n: usize, seed: u64, index: u64) -> Assignment {
    let mut rng = stream_rng(seed, index);
    let mut entries: Vec<i8> = (0..n).map(|i| if i < n / 2 { 1 } else { -1 }).collect();
    entries.shuffle(&mut rng);
    Assignment(entries)
}

/// Draws `s` assignments uniformly from the balanced completely randomized
/// design, then removes duplicates. Draw `i` depends only on `(seed, i)`.
pub fn sample_bcrd(n: usize, s: usize, seed: u64) -> Result<AssignmentPool> {
    check_even(n)?;
    if s == 0 {
        return Err(Error::EmptyPool);
    }
    let draws = parallel::map_indexed(s, |i| bcrd_draw(n, seed, i as u64));
    AssignmentPool::from_assignments(n, draws, seed, Generator::Bcrd)
}

/// All C(n, n/2) balanced vectors, in lexicographic order of the treated set.
pub fn enumerate_balanced(n: usize) -> Result<AssignmentPool> {
    enumerate_balanced_with_cap(n, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_balanced_with_cap(n: usize, cap: usize) -> Result<AssignmentPool> {
    check_even(n)?;
    if n > cap || n > 62 {
        return Err(Error::Capacity {
            what: "n for enumeration",
            value: n,
            cap: cap.min(62),
        });
    }
    let k = n / 2;
    let mut out = Vec::new();
    // Gosper's hack over n-bit masks with k bits set
    let mut mask: u64 = (1u64 << k) - 1;
    let limit: u64 = 1u64 << n;
    while mask < limit {
        let entries = (0..n)
            .map(|i| if mask >> i & 1 == 1 { 1 } else { -1 })
            .collect();
        out.push(Assignment(entries));
        let c = mask & mask.wrapping_neg();
        let r = mask + c;
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    let origins = vec![Origin::Enumerated; out.len()];
    AssignmentPool::build(n, out, origins, 0, Generator::Enumerated)
}

/// Adds `-w` for every `w` missing its mirror. Input order is preserved and
/// missing mirrors are appended in the order of their partners.
pub fn mirror_close(pool: &AssignmentPool) -> AssignmentPool {
    let present: HashSet<&Assignment> = pool.assignments.iter().collect();
    let mut assignments = pool.assignments.clone();
    let mut origins = pool.origins.clone();
    let mut added = HashSet::new();
    for w in &pool.assignments {
        let m = w.negated();
        if !present.contains(&m) && added.insert(m.clone()) {
            assignments.push(m);
            origins.push(Origin::Mirror);
        }
    }
    AssignmentPool {
        n: pool.n,
        assignments,
        origins,
        seed: pool.seed,
        mirror_closed: true,
        generator: pool.generator,
    }
}

#[derive(Clone, Debug)]
pub struct GreedyOutcome {
    pub assignment: Assignment,
    /// Imbalance before the first swap and after every accepted swap.
    pub history: Vec<f64>,
    pub swaps: usize,
}

/// Default bound on accepted swaps in [`greedy_pair_switch`].
pub const DEFAULT_GREEDY_ITERATION_CAP: usize = 10_000;

/// Greedy pair-switch refinement of `w` under the metric bound in `evaluator`.
pub fn greedy_pair_switch(
    evaluator: &Imbalance,
    w: &Assignment,
    iteration_cap: usize,
) -> Result<GreedyOutcome> {
    greedy_descent(&evaluator.form(), w, iteration_cap)
}

/// Greedy pair-switch descent: repeatedly applies the treatment/control swap
/// that lowers `(1/n) w'Mw` the most, until no swap lowers it. Ties go to the
/// lexicographically first `(treated, control)` index pair.
pub fn greedy_descent(
    form: &nalgebra::DMatrix<f64>,
    w: &Assignment,
    iteration_cap: usize,
) -> Result<GreedyOutcome> {
    let n = w.len();
    if form.nrows() != n || form.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: form.nrows(),
            context: "imbalance form vs assignment",
        });
    }
    let mut entries = w.0.clone();
    let wf: Vec<f64> = w.to_f64();
    // mw = M w, maintained under swaps
    let mut mw: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| form[(i, j)] * wf[j]).sum())
        .collect();
    let mut value: f64 = wf.iter().zip(&mw).map(|(a, b)| a * b).sum::<f64>();
    let nf = n as f64;
    let scale = form.diagonal().iter().map(|d| d.abs()).sum::<f64>().max(1e-300);
    let mut history = vec![value / nf];
    let mut swaps = 0;
    while swaps < iteration_cap {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if entries[i] != 1 {
                continue;
            }
            for j in 0..n {
                if entries[j] != -1 {
                    continue;
                }
                // w' = w - 2 e_i + 2 e_j
                let delta = 4.0 * (mw[j] - mw[i])
                    + 4.0 * (form[(i, i)] + form[(j, j)] - 2.0 * form[(i, j)]);
                if best.is_none_or(|(_, _, b)| delta < b) {
                    best = Some((i, j, delta));
                }
            }
        }
        match best {
            Some((i, j, delta)) if delta < -1e-12 * scale => {
                entries[i] = -1;
                entries[j] = 1;
                for (k, m) in mw.iter_mut().enumerate() {
                    *m += 2.0 * (form[(k, j)] - form[(k, i)]);
                }
                value += delta;
                swaps += 1;
                history.push(value / nf);
            }
            _ => break,
        }
    }
    Ok(GreedyOutcome {
        assignment: Assignment(entries),
        history,
        swaps,
    })
}

/// Appends greedy-refined vectors to a pool. Starting points are fresh BCRD
/// draws on streams past the pool's own sampling streams, so augmentation
/// never changes the base draws.
pub fn augment_greedy(
    pool: &AssignmentPool,
    evaluator: &Imbalance,
    count: usize,
    iteration_cap: usize,
) -> Result<AssignmentPool> {
    let n = pool.n;
    let form = evaluator.form();
    let offset = 1u64 << 40;
    let refined = parallel::try_map_indexed(count, |i| {
        let start = bcrd_draw(n, pool.seed, offset + i as u64);
        greedy_descent(&form, &start, iteration_cap).map(|o| o.assignment)
    })?;
    let mut assignments = pool.assignments.clone();
    let mut origins = pool.origins.clone();
    assignments.extend(refined);
    origins.resize(assignments.len(), Origin::Greedy);
    let mut out = AssignmentPool::build(n, assignments, origins, pool.seed, Generator::BcrdGreedy)?;
    if pool.mirror_closed && !out.mirror_closed {
        out = mirror_close(&out);
    }
    Ok(out)
}
