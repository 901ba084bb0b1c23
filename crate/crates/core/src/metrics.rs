//! Report similarity metrics: BLEU-n, METEOR (exact matching), ROUGE-L and
//! per-keyword precision/recall/F1.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

const KEYWORD_HEADER: &str = "keyword\ttp\tfp\tfn\tprecision\trecall\tf1";

/// Lowercases, splits on whitespace and strips leading/trailing ASCII
/// punctuation from each token. Empty tokens are dropped; interior
/// punctuation such as hyphens is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_matches<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Accumulated BLEU statistics for a set of sentence pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<S: AsRef<str>>(&mut self, cand: &[S], reference: &[S]) {
        for n in 1..=4 {
            let (m, t) = clipped_matches(cand, reference, n);
            self.matches[n - 1] += m;
            self.totals[n - 1] += t;
        }
        self.cand_len += cand.len();
        self.ref_len += reference.len();
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp().min(1.0)
        }
    }

    /// Unsmoothed BLEU-`max_n`; any order with no matching n-grams (or no
    /// candidate n-grams) yields 0.
    pub fn score(&self, max_n: usize) -> f64 {
        assert!((1..=4).contains(&max_n), "BLEU order {max_n} outside 1..=4");
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        self.brevity_penalty() * (log_sum / max_n as f64).exp()
    }

    /// BLEU-`max_n` with add-one smoothing of the n >= 2 precisions, for
    /// sentence-level diagnostics.
    pub fn smoothed_score(&self, max_n: usize) -> f64 {
        assert!((1..=4).contains(&max_n));
        if self.totals[0] == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..max_n {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        self.brevity_penalty() * (log_sum / max_n as f64).exp()
    }
}

/// Sentence-level BLEU-`max_n` of one candidate against one reference.
pub fn bleu_n<S: AsRef<str>>(cand: &[S], reference: &[S], max_n: usize) -> f64 {
    let mut s = BleuStats::default();
    s.add(cand, reference);
    s.score(max_n)
}

/// Corpus-level BLEU-1..4: n-gram counts and lengths are summed over all
/// pairs before taking ratios.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> [f64; 4] {
    let mut s = BleuStats::default();
    for (c, r) in pairs {
        s.add(c, r);
    }
    [1, 2, 3, 4].map(|n| s.score(n))
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure with recall weight `ROUGE_BETA`.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Exact-match unigram alignment statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Memoised states explored before the exact chunk search gives way to
/// the greedy alignment.
const ALIGN_STATE_BUDGET: usize = 200_000;

/// Aligns candidate and reference unigrams one-to-one by exact match, using
/// the maximum number of matches and, among those, the fewest chunks (runs
/// contiguous in both sequences).
///
/// The chunk minimisation is an exhaustive memoised search for references of
/// up to 128 tokens; if it outgrows `ALIGN_STATE_BUDGET` states the greedy
/// alignment is used instead.
pub fn align<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Alignment {
    let c: Vec<&str> = cand.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut cc: HashMap<&str, usize> = HashMap::new();
    let mut rc: HashMap<&str, usize> = HashMap::new();
    for w in &c {
        *cc.entry(w).or_default() += 1;
    }
    for w in &r {
        *rc.entry(w).or_default() += 1;
    }
    let matches: usize = cc.iter().map(|(w, &n)| n.min(rc.get(w).copied().unwrap_or(0))).sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let greedy = greedy_chunks(&c, &r, &cc, &rc);
    let chunks = if r.len() <= 128 {
        ChunkSearch::new(&c, &r, &cc, &rc).run().unwrap_or(greedy)
    } else {
        greedy
    };
    Alignment { matches, chunks }
}

/// Left-to-right alignment: each matchable candidate token prefers the
/// reference position continuing the current chunk, else the earliest free
/// one.
fn greedy_chunks(
    c: &[&str],
    r: &[&str],
    cc: &HashMap<&str, usize>,
    rc: &HashMap<&str, usize>,
) -> usize {
    let mut quota: HashMap<&str, usize> =
        cc.iter().map(|(w, &n)| (*w, n.min(rc.get(w).copied().unwrap_or(0)))).collect();
    let mut used = vec![false; r.len()];
    let mut prev: Option<usize> = None;
    let mut chunks = 0;
    for w in c {
        let q = quota.get_mut(w).unwrap();
        if *q == 0 {
            prev = None;
            continue;
        }
        let next = prev
            .map(|p| p + 1)
            .filter(|&j| j < r.len() && !used[j] && r[j] == *w);
        let j = next.or_else(|| (0..r.len()).find(|&j| !used[j] && r[j] == *w));
        match j {
            Some(j) => {
                if next.is_none() {
                    chunks += 1;
                }
                used[j] = true;
                *q -= 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks
}

struct ChunkSearch<'a> {
    c: &'a [&'a str],
    r: &'a [&'a str],
    /// Candidate occurrences of each candidate token's word that may remain
    /// unmatched.
    spare: HashMap<&'a str, usize>,
    memo: HashMap<(usize, u128, usize), usize>,
    exhausted: bool,
}

const NO_PREV: usize = usize::MAX;
const INFEASIBLE: usize = usize::MAX / 2;

impl<'a> ChunkSearch<'a> {
    fn new(
        c: &'a [&'a str],
        r: &'a [&'a str],
        cc: &HashMap<&'a str, usize>,
        rc: &HashMap<&'a str, usize>,
    ) -> Self {
        let spare = cc
            .iter()
            .map(|(w, &n)| (*w, n - n.min(rc.get(w).copied().unwrap_or(0))))
            .collect();
        Self {
            c,
            r,
            spare,
            memo: HashMap::new(),
            exhausted: false,
        }
    }

    fn run(mut self) -> Option<usize> {
        let mut skipped: HashMap<&str, usize> = HashMap::new();
        let best = self.solve(0, 0, NO_PREV, &mut skipped);
        (!self.exhausted && best < INFEASIBLE).then_some(best)
    }

    /// Fewest chunks for candidate suffix `i..` given used reference
    /// positions and the reference position matched at `i - 1`.
    fn solve(
        &mut self,
        i: usize,
        used: u128,
        prev: usize,
        skipped: &mut HashMap<&'a str, usize>,
    ) -> usize {
        if i == self.c.len() {
            return 0;
        }
        if self.exhausted {
            return INFEASIBLE;
        }
        let key = (i, used, prev);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        if self.memo.len() >= ALIGN_STATE_BUDGET {
            self.exhausted = true;
            return INFEASIBLE;
        }
        let w = self.c[i];
        let mut best = INFEASIBLE;
        let s = skipped.get(w).copied().unwrap_or(0);
        if s < self.spare[w] {
            *skipped.entry(w).or_default() += 1;
            best = best.min(self.solve(i + 1, used, NO_PREV, skipped));
            *skipped.get_mut(w).unwrap() -= 1;
        }
        for j in 0..self.r.len() {
            if self.r[j] != w || used & (1u128 << j) != 0 {
                continue;
            }
            let cost = usize::from(prev == NO_PREV || prev + 1 != j);
            let rest = self.solve(i + 1, used | (1u128 << j), j, skipped);
            best = best.min(rest.saturating_add(cost));
        }
        self.memo.insert(key, best);
        best
    }
}

/// METEOR with exact matching only:
/// `Fmean = P R / (alpha P + (1 - alpha) R)`,
/// `penalty = gamma (chunks / matches)^beta`, score `Fmean (1 - penalty)`.
pub fn meteor<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    let Alignment { matches, chunks } = align(cand, reference);
    meteor_from_alignment(matches, chunks, cand.len(), reference.len())
}

pub fn meteor_from_alignment(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeywordScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl KeywordScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-keyword detection scores. A generated report predicts a keyword when
/// its tokens contain the keyword exactly; the reference side comes from
/// each study's keyword tags.
pub fn keyword_f1<S: AsRef<str>, T: AsRef<str>>(
    generated: &[Vec<S>],
    reference_tags: &[Vec<T>],
    keywords: &[&str],
) -> BTreeMap<String, KeywordScore> {
    assert_eq!(generated.len(), reference_tags.len());
    keywords
        .iter()
        .map(|&kw| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (g, tags) in generated.iter().zip(reference_tags) {
                let pred = g.iter().any(|t| t.as_ref() == kw);
                let gold = tags.iter().any(|t| t.as_ref() == kw);
                match (pred, gold) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            (kw.to_string(), KeywordScore::from_counts(tp, fp, fn_))
        })
        .collect()
}

/// Headline scores for one evaluation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub keywords: BTreeMap<String, KeywordScore>,
}

impl MetricReport {
    /// Corpus BLEU, mean sentence METEOR and ROUGE-L, and keyword scores.
    pub fn compute(
        generated: &[String],
        references: &[String],
        reference_tags: &[Vec<String>],
        keywords: &[&str],
    ) -> Self {
        assert_eq!(generated.len(), references.len());
        let pairs: Vec<(Vec<String>, Vec<String>)> = generated
            .iter()
            .zip(references)
            .map(|(g, r)| (tokenize(g), tokenize(r)))
            .collect();
        let n = pairs.len().max(1) as f64;
        let meteor = pairs.iter().map(|(c, r)| meteor(c, r)).sum::<f64>() / n;
        let rouge = pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n;
        let gen_tokens: Vec<Vec<String>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        Self {
            bleu: corpus_bleu(&pairs),
            meteor,
            rouge_l: rouge,
            keywords: keyword_f1(&gen_tokens, reference_tags, keywords),
        }
    }

    /// Unweighted mean F1 over `keywords`.
    pub fn macro_f1(&self, keywords: &[&str]) -> f64 {
        let total: f64 = keywords
            .iter()
            .map(|k| self.keywords.get(*k).map_or(0.0, |s| s.f1))
            .sum();
        total / keywords.len() as f64
    }

    /// `metric<TAB>value` lines in alphabetical order, then a keyword block
    /// with raw counts, sorted by keyword.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("bleu_1", self.bleu[0]),
            ("bleu_2", self.bleu[1]),
            ("bleu_3", self.bleu[2]),
            ("bleu_4", self.bleu[3]),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
        ];
        for (name, v) in rows {
            let _ = writeln!(out, "{name}\t{v:.6}");
        }
        out.push('\n');
        out.push_str(KEYWORD_HEADER);
        out.push('\n');
        for (kw, s) in &self.keywords {
            let _ = writeln!(
                out,
                "{kw}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            );
        }
        out
    }

    /// Inverse of [`MetricReport::to_text`]. Headline metrics come back at
    /// the printed precision; keyword scores are recomputed from the counts.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::corrupt("metrics", format!("unexpected line `{line}`"));
        let mut m = MetricReport::default();
        let mut lines = text.lines();
        let mut seen = 0;
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (name, v) = line.split_once('\t').ok_or_else(|| bad(line))?;
            let v: f64 = v.parse().map_err(|_| bad(line))?;
            match name {
                "bleu_1" => m.bleu[0] = v,
                "bleu_2" => m.bleu[1] = v,
                "bleu_3" => m.bleu[2] = v,
                "bleu_4" => m.bleu[3] = v,
                "meteor" => m.meteor = v,
                "rouge_l" => m.rouge_l = v,
                _ => return Err(bad(line)),
            }
            seen += 1;
        }
        if seen != 6 || lines.next() != Some(KEYWORD_HEADER) {
            return Err(Error::corrupt("metrics", "missing headline metrics or keyword header"));
        }
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            let [kw, tp, fp, fn_, ..] = f[..] else {
                return Err(bad(line));
            };
            let n = |x: &str| x.parse::<usize>().map_err(|_| bad(line));
            m.keywords
                .insert(kw.to_string(), KeywordScore::from_counts(n(tp)?, n(fp)?, n(fn_)?));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(toks("The lungs are clear."), ["the", "lungs", "are", "clear"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("Low-lung  volumes,"), ["low-lung", "volumes"]);
        assert_eq!(toks(" ... ; "), Vec::<String>::new());
    }

    #[test]
    fn bleu_examples() {
        let a = toks("the heart is mildly enlarged today");
        for n in 1..=4 {
            assert_eq!(bleu_n(&a, &a, n), 1.0);
        }
        assert_eq!(bleu_n(&toks("a b c"), &toks("d e f"), 1), 0.0);
        let b1 = bleu_n(&toks("the cat sat"), &toks("the cat sat down"), 1);
        assert!((b1 - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b1 - 0.7165).abs() < 1e-4);
        assert_eq!(bleu_n::<String>(&[], &toks("a"), 1), 0.0);
    }

    #[test]
    fn smoothed_bleu_is_positive_without_higher_order_matches() {
        let mut s = BleuStats::default();
        s.add(&toks("a b c d"), &toks("d c b a"));
        assert_eq!(s.score(4), 0.0);
        assert!(s.smoothed_score(4) > 0.0);
    }

    #[test]
    fn rouge_examples() {
        let a = toks("a b c");
        assert_eq!(rouge_l(&a, &a), 1.0);
        assert_eq!(rouge_l(&a, &toks("x y")), 0.0);
        // LCS 3, P = 0.75, R = 1.
        let f = rouge_l(&toks("a b c d"), &toks("a c d"));
        let b2 = 1.44;
        assert!((f - (1.0 + b2) * 0.75 / (1.0 + b2 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&toks("a b"), &toks("c d")), 0.0);
        assert!((meteor(&toks("x"), &toks("x")) - 0.5).abs() < 1e-12);
        let long: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let expected = 1.0 - 0.5 * (1.0f64 / 20.0).powi(3);
        assert!((meteor(&long, &long) - expected).abs() < 1e-12);
        assert!((meteor(&long, &long) - 0.99994).abs() < 1e-5);
    }

    #[test]
    fn alignment_prefers_fewest_chunks() {
        // Greedy left-to-right would pair the first "a" with reference
        // position 0 and split the run; the optimum keeps "a b" together.
        let c = toks("a b");
        let r = toks("a x a b");
        assert_eq!(align(&c, &r), Alignment { matches: 2, chunks: 1 });
        let c = toks("the cat the dog");
        let r = toks("the dog the cat");
        assert_eq!(align(&c, &r), Alignment { matches: 4, chunks: 2 });
    }

    #[test]
    fn keyword_counts() {
        let generated = vec![
            toks("effusion"),
            toks("effusion"),
            toks("effusion"),
            toks("nothing"),
        ];
        let tags = vec![
            vec!["effusion".to_string()],
            vec!["effusion".to_string()],
            vec![],
            vec!["effusion".to_string()],
        ];
        let s = keyword_f1(&generated, &tags, &["effusion", "bone"]);
        let e = s["effusion"];
        assert_eq!((e.tp, e.fp, e.fn_), (2, 1, 1));
        assert!((e.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((e.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((e.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s["bone"].f1, 0.0);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let refs = vec![
            "there is a small left pleural effusion. the heart is mildly enlarged.".to_string(),
            "the lungs are clear. no acute osseous abnormality.".to_string(),
        ];
        let tags = vec![vec!["effusion".into(), "heart".into()], vec![]];
        let m = MetricReport::compute(&refs, &refs, &tags, &["effusion", "heart"]);
        assert_eq!(m.bleu[0], 1.0);
        assert_eq!(m.rouge_l, 1.0);
        assert_eq!(m.keywords["effusion"].f1, 1.0);
        assert_eq!(m.keywords["heart"].f1, 1.0);
    }

    #[test]
    fn report_text_is_sorted() {
        let m = MetricReport {
            keywords: keyword_f1(&[toks("b a")], &[vec!["a".to_string()]], &["b", "a"]),
            ..MetricReport::default()
        };
        let text = m.to_text();
        assert!(text.starts_with("bleu_1\t0.000000\n"));
        let a = text.find("\na\t").unwrap();
        let b = text.find("\nb\t").unwrap();
        assert!(a < b);
    }

    #[test]
    fn report_text_round_trip() {
        let refs = vec!["the heart is enlarged".to_string(), "there is effusion".to_string()];
        let gens = vec!["the heart is fine".to_string(), "there is effusion here".to_string()];
        let tags = vec![vec!["heart".into()], vec!["effusion".into()]];
        let m = MetricReport::compute(&gens, &refs, &tags, &["effusion", "heart", "bone"]);
        let text = m.to_text();
        let back = MetricReport::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.keywords, m.keywords);
        assert!((back.meteor - m.meteor).abs() <= 5e-7);
        assert!(MetricReport::from_text("bleu_1\t0.5\n").is_err());
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..10).prop_map(|i| format!("t{i}")), 1..30)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(c in seq(), r in seq()) {
            for n in 1..=4 {
                let b = bleu_n(&c, &r, n);
                prop_assert!((0.0..=1.0).contains(&b));
            }
            prop_assert!((0.0..=1.0).contains(&rouge_l(&c, &r)));
            let m = meteor(&c, &r);
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn self_scores(c in seq()) {
            prop_assert_eq!(rouge_l(&c, &c), 1.0);
            let m = meteor(&c, &c);
            prop_assert!(m >= 1.0 - METEOR_GAMMA * (c.len() as f64).powf(-METEOR_BETA) - 1e-12);
            if c.len() >= 4 {
                prop_assert!((bleu_n(&c, &c, 4) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn appending_a_reference_token_never_lowers_bleu1(r in seq(), cut in 0usize..30) {
            let cut = cut.min(r.len().saturating_sub(1));
            let short: Vec<String> = r[..cut].to_vec();
            let mut longer = short.clone();
            longer.push(r[cut].clone());
            prop_assert!(bleu_n(&longer, &r, 1) >= bleu_n(&short, &r, 1));
        }
    }
}
