use std::collections::HashMap;

use super::TokenizedText;

#[derive(Debug, Clone, PartialEq)]
pub struct MeteorConfig {
    /// Also match tokens whose Porter stems agree.
    pub stem: bool,
    /// Search nodes explored before the best alignment so far is accepted.
    pub node_budget: usize,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        Self {
            stem: true,
            node_budget: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
    /// False when the node budget ran out before the search finished.
    pub exact: bool,
}

/// METEOR with exact and stem matching.
pub fn meteor(hyp: &TokenizedText, reference: &TokenizedText) -> f64 {
    meteor_with(hyp, reference, &MeteorConfig::default())
}

pub fn meteor_with(hyp: &TokenizedText, reference: &TokenizedText, cfg: &MeteorConfig) -> f64 {
    let a = align(hyp.tokens(), reference.tokens(), cfg);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// Alignment with the most matches and, among those, the fewest chunks.
///
/// Tokens match when equal or, with stemming on, when their stems are equal.
/// Minimizing chunks is a branch-and-bound search over hypothesis positions;
/// continuing the current chunk is tried first.
pub fn align(hyp: &[String], reference: &[String], cfg: &MeteorConfig) -> Alignment {
    let key = |t: &String| {
        if cfg.stem {
            porter_stemmer::stem(t)
        } else {
            t.clone()
        }
    };
    let mut classes: HashMap<String, usize> = HashMap::new();
    let mut class_of = |t: &String| {
        let k = key(t);
        let next = classes.len();
        *classes.entry(k).or_insert(next)
    };
    let h: Vec<usize> = hyp.iter().map(&mut class_of).collect();
    let r: Vec<usize> = reference.iter().map(&mut class_of).collect();
    let nclass = classes.len();

    let mut hc = vec![0usize; nclass];
    let mut rc = vec![0usize; nclass];
    h.iter().for_each(|&c| hc[c] += 1);
    r.iter().for_each(|&c| rc[c] += 1);
    let matches: usize = (0..nclass).map(|c| hc[c].min(rc[c])).sum();
    if matches == 0 {
        return Alignment {
            matches: 0,
            chunks: 0,
            exact: true,
        };
    }

    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); nclass];
    for (j, &c) in r.iter().enumerate() {
        positions[c].push(j);
    }
    let mut search = Search {
        h: &h,
        r: &r,
        positions: &positions,
        used: vec![false; r.len()],
        skips: (0..nclass).map(|c| hc[c] - hc[c].min(rc[c])).collect(),
        best: usize::MAX,
        nodes: 0,
        budget: cfg.node_budget.max(1),
    };
    search.run(0, None, 0);
    Alignment {
        matches,
        chunks: search.best,
        exact: search.nodes <= search.budget,
    }
}

struct Search<'a> {
    h: &'a [usize],
    r: &'a [usize],
    positions: &'a [Vec<usize>],
    used: Vec<bool>,
    /// Hypothesis tokens per class that may stay unmatched.
    skips: Vec<usize>,
    best: usize,
    nodes: usize,
    budget: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        if i == self.h.len() {
            self.best = chunks;
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget && self.best != usize::MAX {
            return;
        }
        let c = self.h[i];
        if let Some(j) = prev.map(|p| p + 1) {
            if j < self.r.len() && self.r[j] == c && !self.used[j] {
                self.used[j] = true;
                self.run(i + 1, Some(j), chunks);
                self.used[j] = false;
            }
        }
        for k in 0..self.positions[c].len() {
            let j = self.positions[c][k];
            if self.used[j] || prev.map(|p| p + 1) == Some(j) {
                continue;
            }
            self.used[j] = true;
            self.run(i + 1, Some(j), chunks + 1);
            self.used[j] = false;
        }
        if self.skips[c] > 0 {
            self.skips[c] -= 1;
            self.run(i + 1, None, chunks);
            self.skips[c] += 1;
        }
    }
}
