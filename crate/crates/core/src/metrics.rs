//! Caption metrics: corpus CIDEr-D, an exact-match METEOR, 4-gram repetition
//! and bag-of-tokens agreement between two predictions.

use std::collections::{BTreeMap, HashMap};

use crate::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_N: usize = 4;
/// Search nodes allowed when minimizing METEOR chunks before settling for
/// the best alignment found so far.
pub const METEOR_NODE_BUDGET: usize = 200_000;

/// Ordered so that floating-point sums over n-grams are reproducible.
type NGrams<'a> = BTreeMap<&'a [String], f64>;

fn ngram_counts(tokens: &[String], n: usize) -> NGrams<'_> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Corpus CIDEr-D with one reference per instance, on the ×10 scale.
///
/// Document frequencies come from the references; a term seen in `df` of the
/// `N` references has weight `ln N - ln max(df, 1)`. Returns the corpus mean
/// and the per-instance scores.
pub fn cider_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<(f64, Vec<f64>)> {
    cider_corpus_with(candidates, references, CIDER_SIGMA, CIDER_N)
}

pub fn cider_corpus_with(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    sigma: f64,
    n_max: usize,
) -> Result<(f64, Vec<f64>)> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.len() < 2 {
        return Err(Error::Argument("CIDEr needs a corpus of at least two instances".into()));
    }
    let log_n = (references.len() as f64).ln();
    let ref_grams: Vec<Vec<NGrams<'_>>> = references
        .iter()
        .map(|r| (1..=n_max).map(|n| ngram_counts(r, n)).collect())
        .collect();
    let mut df: BTreeMap<&[String], f64> = BTreeMap::new();
    for grams in &ref_grams {
        for g in grams {
            for k in g.keys() {
                *df.entry(k).or_insert(0.0) += 1.0;
            }
        }
    }
    let scores: Vec<f64> = candidates
        .iter()
        .zip(references)
        .zip(&ref_grams)
        .map(|((c, r), rg)| {
            if c.is_empty() {
                return 0.0;
            }
            let delta = c.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            let mut total = 0.0;
            for n in 1..=n_max {
                let (vc, nc) = weigh(&ngram_counts(c, n), &df, log_n);
                let (vr, nr) = weigh(&rg[n - 1], &df, log_n);
                let mut dot = 0.0;
                for (k, &x) in &vc {
                    if let Some(&y) = vr.get(k) {
                        dot += x.min(y) * y;
                    }
                }
                if nc != 0.0 && nr != 0.0 {
                    dot /= nc * nr;
                }
                total += dot * penalty;
            }
            10.0 * total / n_max as f64
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

fn weigh<'a>(g: &NGrams<'a>, df: &BTreeMap<&[String], f64>, log_n: f64) -> (NGrams<'a>, f64) {
    let v: NGrams<'a> = g
        .iter()
        .map(|(k, &tf)| (*k, tf * (log_n - df.get(k).copied().unwrap_or(0.0).max(1.0).ln())))
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Alignment statistics behind [`meteor_lite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
    /// False when the search budget ran out before optimality was proven.
    pub exact: bool,
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in &sorted {
        if i == 0 || j == 0 || prev != Some((i - 1, j - 1)) {
            chunks += 1;
        }
        prev = Some((i, j));
    }
    chunks
}

/// Greedy tiling by longest common runs; always reaches the maximal match count.
fn greedy_alignment(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut cu = vec![false; c.len()];
    let mut ru = vec![false; r.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best = (0, 0, 0);
        for i in 0..c.len() {
            for j in 0..r.len() {
                let mut l = 0;
                while i + l < c.len() && j + l < r.len() && !cu[i + l] && !ru[j + l] && c[i + l] == r[j + l] {
                    l += 1;
                }
                if l > best.2 {
                    best = (i, j, l);
                }
            }
        }
        if best.2 == 0 {
            return pairs;
        }
        for k in 0..best.2 {
            cu[best.0 + k] = true;
            ru[best.1 + k] = true;
            pairs.push((best.0 + k, best.1 + k));
        }
    }
}

struct Search<'a> {
    c: &'a [String],
    ref_pos: HashMap<&'a str, Vec<usize>>,
    target: usize,
    ref_used: Vec<bool>,
    /// Remaining candidate occurrences of each type from the current position on.
    cand_left: HashMap<&'a str, usize>,
    free_ref: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
    exhausted: bool,
}

impl Search<'_> {
    fn reachable(&self) -> usize {
        self.cand_left
            .iter()
            .map(|(t, &n)| n.min(self.free_ref.get(t).copied().unwrap_or(0)))
            .sum()
    }

    fn dfs(&mut self, i: usize, matched: usize, chunks: usize, prev: Option<usize>) {
        if chunks >= self.best {
            return;
        }
        if matched == self.target {
            self.best = chunks;
            return;
        }
        if i == self.c.len() || matched + self.reachable() < self.target {
            return;
        }
        self.nodes += 1;
        if self.nodes > METEOR_NODE_BUDGET {
            self.exhausted = true;
            return;
        }
        let tok = self.c[i].as_str();
        *self.cand_left.get_mut(tok).expect("counted") -= 1;
        let options: Vec<usize> = self
            .ref_pos
            .get(tok)
            .map(|v| v.iter().copied().filter(|&j| !self.ref_used[j]).collect())
            .unwrap_or_default();
        let cont = prev.map(|p| p + 1);
        let ordered = options
            .iter()
            .copied()
            .filter(|&j| Some(j) == cont)
            .chain(options.iter().copied().filter(|&j| Some(j) != cont));
        for j in ordered.collect::<Vec<_>>() {
            self.ref_used[j] = true;
            *self.free_ref.get_mut(tok).expect("counted") -= 1;
            let extra = usize::from(Some(j) != cont);
            self.dfs(i + 1, matched + 1, chunks + extra, Some(j));
            *self.free_ref.get_mut(tok).expect("counted") += 1;
            self.ref_used[j] = false;
            if self.exhausted {
                break;
            }
        }
        if !self.exhausted {
            self.dfs(i + 1, matched, chunks, None);
        }
        *self.cand_left.get_mut(tok).expect("counted") += 1;
    }
}

/// Maximal one-to-one exact unigram alignment with the fewest chunks.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        ref_pos.entry(t.as_str()).or_default().push(j);
    }
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    for t in candidate {
        *cand_left.entry(t.as_str()).or_insert(0) += 1;
    }
    let free_ref: HashMap<&str, usize> = ref_pos.iter().map(|(k, v)| (*k, v.len())).collect();
    let target: usize = cand_left
        .iter()
        .map(|(t, &n)| n.min(free_ref.get(t).copied().unwrap_or(0)))
        .sum();
    if target == 0 {
        return Alignment {
            matches: 0,
            chunks: 0,
            exact: true,
        };
    }
    let greedy = count_chunks(&greedy_alignment(candidate, reference));
    let mut s = Search {
        c: candidate,
        ref_pos,
        target,
        ref_used: vec![false; reference.len()],
        cand_left,
        free_ref,
        best: greedy,
        nodes: 0,
        exhausted: false,
    };
    if greedy > 1 {
        s.dfs(0, 0, 0, None);
    }
    Alignment {
        matches: target,
        chunks: s.best,
        exact: !s.exhausted,
    }
}

/// METEOR with exact matching only:
/// `F = 10PR / (R + 9P)`, `penalty = 0.5 (chunks / m)^3`, score `F (1 - penalty)`.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    let a = align(candidate, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = a.chunks as f64 / m;
    f * (1.0 - 0.5 * frag.powi(3))
}

/// Fraction of 4-gram positions repeating a 4-gram seen earlier in the same
/// paragraph.
pub fn r4(tokens: &[String]) -> f64 {
    if tokens.len() < 4 {
        return 0.0;
    }
    let mut seen = std::collections::HashSet::new();
    let mut repeats = 0usize;
    let total = tokens.len() - 3;
    for w in tokens.windows(4) {
        if !seen.insert(w) {
            repeats += 1;
        }
    }
    repeats as f64 / total as f64
}

/// Multiset token F1 between two predictions. Two empty predictions agree
/// perfectly.
pub fn consistency_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / a.len() as f64;
    let r = overlap as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub id: String,
    pub cider: f64,
    pub meteor: f64,
    pub r4: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scenario: String,
    pub model: String,
    pub cider: f64,
    pub meteor: f64,
    pub r4: f64,
    pub consistency: Option<f64>,
    pub per_instance: Vec<InstanceScore>,
}

/// Scores `predictions` against `references`, aligned by position.
pub fn evaluate(
    scenario: &str,
    model: &str,
    ids: &[String],
    predictions: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<MetricReport> {
    if ids.len() != predictions.len() {
        return Err(Error::Argument(format!("{} ids for {} predictions", ids.len(), predictions.len())));
    }
    let (cider, per_cider) = cider_corpus(predictions, references)?;
    let per_instance: Vec<InstanceScore> = ids
        .iter()
        .zip(predictions.iter().zip(references))
        .zip(per_cider)
        .map(|((id, (p, r)), c)| InstanceScore {
            id: id.clone(),
            cider: c,
            meteor: meteor_lite(p, r),
            r4: r4(p),
        })
        .collect();
    let n = per_instance.len() as f64;
    Ok(MetricReport {
        scenario: scenario.to_string(),
        model: model.to_string(),
        cider,
        meteor: per_instance.iter().map(|s| s.meteor).sum::<f64>() / n,
        r4: per_instance.iter().map(|s| s.r4).sum::<f64>() / n,
        consistency: None,
        per_instance,
    })
}

/// Mean [`consistency_f1`] over paired predictions.
pub fn mean_consistency(a: &[Vec<String>], b: &[Vec<String>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!("cannot pair {} and {} predictions", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| consistency_f1(x, y)).sum::<f64>() / a.len() as f64)
}
