use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type Ngram = Vec<String>;

fn tokens(text: &str) -> Vec<String> {
    WhitespaceTokenizer.tokenize(text)
}

fn ngram_counts(toks: &[String]) -> [BTreeMap<Ngram, f64>; MAX_N] {
    let mut out: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
    for (n, map) in out.iter_mut().enumerate() {
        for w in toks.windows(n + 1) {
            *map.entry(w.to_vec()).or_default() += 1.0;
        }
    }
    out
}

/// Where document frequencies for grouped CIDEr come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdfScope {
    /// One IDF table over the whole corpus.
    #[default]
    Global,
    /// Each group's CIDEr uses IDF computed from that group alone.
    PerGroup,
}

struct TfIdf {
    vec: [BTreeMap<Ngram, f64>; MAX_N],
    norm: [f64; MAX_N],
    len: usize,
}

struct Corpus {
    df: BTreeMap<Ngram, f64>,
    ref_len: f64,
}

impl Corpus {
    fn new(references: &[Vec<String>]) -> Self {
        let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<&Ngram> = BTreeSet::new();
            let counts: Vec<_> = refs.iter().map(|r| ngram_counts(&tokens(r))).collect();
            for c in &counts {
                for map in c {
                    for k in map.keys() {
                        seen.insert(k);
                    }
                }
            }
            for k in seen {
                *df.entry(k.clone()).or_default() += 1.0;
            }
        }
        Self {
            df,
            ref_len: (references.len() as f64).ln(),
        }
    }

    fn vectorise(&self, text: &str) -> TfIdf {
        let toks = tokens(text);
        let counts = ngram_counts(&toks);
        let mut vec: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (g, &tf) in &counts[n] {
                let df = self.df.get(g).copied().unwrap_or(0.0).max(1.0);
                let w = tf * (self.ref_len - df.ln());
                norm[n] += w * w;
                vec[n].insert(g.clone(), w);
            }
            norm[n] = norm[n].sqrt();
        }
        TfIdf {
            vec,
            norm,
            len: toks.len(),
        }
    }

    fn similarity(hyp: &TfIdf, r: &TfIdf) -> f64 {
        let delta = hyp.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.vec[n] {
                if let Some(&rv) = r.vec[n].get(g) {
                    val += h.min(rv) * rv;
                }
            }
            if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
                val /= hyp.norm[n] * r.norm[n];
            } else {
                val = 0.0;
            }
            total += val * penalty;
        }
        total / MAX_N as f64
    }

    fn score(&self, candidate: &str, refs: &[String]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let hyp = self.vectorise(candidate);
        let s: f64 = refs.iter().map(|r| Self::similarity(&hyp, &self.vectorise(r))).sum();
        10.0 * s / refs.len() as f64
    }
}

fn check_corpus(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Invalid("CIDEr needs a non-empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates for {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Per-item CIDEr-D scores, each in `[0, 10]`.
pub fn cider_scores(candidates: &[String], references: &[Vec<String>]) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let corpus = Corpus::new(references);
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| corpus.score(c, r))
        .collect())
}

/// Corpus CIDEr-D: mean of the per-item scores.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    let s = cider_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Macro average over groups of each group's corpus CIDEr-D.
pub fn cider_grouped<K: Ord + Clone>(
    candidates: &[String],
    references: &[Vec<String>],
    groups: &[K],
    scope: IdfScope,
) -> Result<f64> {
    check_corpus(candidates, references)?;
    if groups.len() != candidates.len() {
        return Err(Error::Shape(format!("{} group keys for {} items", groups.len(), candidates.len())));
    }
    let mut members: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in groups.iter().enumerate() {
        members.entry(k.clone()).or_default().push(i);
    }
    let group_scores: Vec<f64> = match scope {
        IdfScope::Global => {
            let per = cider_scores(candidates, references)?;
            members
                .values()
                .map(|idx| idx.iter().map(|&i| per[i]).sum::<f64>() / idx.len() as f64)
                .collect()
        }
        IdfScope::PerGroup => members
            .values()
            .map(|idx| {
                let c: Vec<String> = idx.iter().map(|&i| candidates[i].clone()).collect();
                let r: Vec<Vec<String>> = idx.iter().map(|&i| references[i].clone()).collect();
                cider(&c, &r)
            })
            .collect::<Result<_>>()?,
    };
    Ok(group_scores.iter().sum::<f64>() / group_scores.len() as f64)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with `beta = 1.2`, best over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    const BETA: f64 = 1.2;
    let c = tokens(candidate);
    references
        .iter()
        .map(|r| {
            let r = tokens(r);
            let l = lcs(&c, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p)
        })
        .fold(0.0, f64::max)
}
