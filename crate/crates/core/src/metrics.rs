//! Automatic evaluation: BLEU-1..4, Dist-1/2, TokSim, Grd-F1 and the
//! neighbor-vs-random embedding probe.

use crate::error::{Error, Result};
use crate::social::{SocialGraph, SpeakerId};
use crate::tensor::cosine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

/// Inverse document frequencies indexed by token id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    idf: Vec<f64>,
    max_idf: f64,
}

impl IdfTable {
    /// Smoothed idf `ln((1 + N) / (1 + df)) + 1` over `docs`.
    pub fn from_documents<'a, I>(docs: I, vocab_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut df = vec![0usize; vocab_size];
        let mut n = 0usize;
        for doc in docs {
            n += 1;
            let uniq: BTreeSet<u32> = doc.iter().copied().collect();
            for t in uniq {
                if let Some(c) = df.get_mut(t as usize) {
                    *c += 1;
                }
            }
        }
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let max_idf = idf.iter().copied().fold(1.0, f64::max);
        Self { idf, max_idf }
    }

    /// Every token weighted 1.
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            idf: vec![1.0; vocab_size],
            max_idf: 1.0,
        }
    }

    /// Tokens outside the table get the maximum idf.
    pub fn get(&self, token: u32) -> f64 {
        self.idf.get(token as usize).copied().unwrap_or(self.max_idf)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopWords(BTreeSet<u32>);

impl StopWords {
    pub fn new<I: IntoIterator<Item = u32>>(tokens: I) -> Self {
        Self(tokens.into_iter().collect())
    }

    /// The most frequent `fraction` of observed token types (at least one).
    pub fn top_fraction<'a, I>(docs: I, fraction: f64) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut freq: HashMap<u32, usize> = HashMap::new();
        for doc in docs {
            for &t in doc {
                *freq.entry(t).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Self::default();
        }
        let mut ranked: Vec<(u32, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = ((ranked.len() as f64 * fraction).ceil() as usize).max(1);
        Self(ranked.into_iter().take(keep).map(|(t, _)| t).collect())
    }

    pub fn contains(&self, t: u32) -> bool {
        self.0.contains(&t)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn counts(tokens: &[u32], stop: &StopWords) -> BTreeMap<u32, f64> {
    let mut m = BTreeMap::new();
    for &t in tokens.iter().filter(|&&t| !stop.contains(t)) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

/// TF-IDF weighted cosine between a response and a bag of history tokens,
/// both stopword-filtered. Degenerate inputs give 0.
pub fn toksim(response: &[u32], history: &[u32], idf: &IdfTable, stop: &StopWords) -> f64 {
    let a = counts(response, stop);
    let b = counts(history, stop);
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let weigh = |m: &BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
        m.iter().map(|(&t, &c)| (t, c * idf.get(t))).collect()
    };
    let (wa, wb) = (weigh(&a), weigh(&b));
    let dot: f64 = wa.iter().filter_map(|(t, x)| wb.get(t).map(|y| x * y)).sum();
    let na: f64 = wa.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = wb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Harmonic mean of token precision and recall over distinct,
/// stopword-filtered tokens.
pub fn grd_f1(response: &[u32], history: &[u32], stop: &StopWords) -> f64 {
    let r: BTreeSet<u32> = response.iter().copied().filter(|&t| !stop.contains(t)).collect();
    let h: BTreeSet<u32> = history.iter().copied().filter(|&t| !stop.contains(t)).collect();
    if r.is_empty() || h.is_empty() {
        return 0.0;
    }
    let common = r.intersection(&h).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let p = common / r.len() as f64;
    let rc = common / h.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BleuSmoothing {
    None,
    /// Add one to matches and totals of every order above 1.
    AddOne,
}

fn ngrams(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU up to order `n` (uniform weights) with brevity penalty,
/// single reference per hypothesis.
pub fn bleu_n<H: AsRef<[u32]>, R: AsRef<[u32]>>(
    hypotheses: &[H],
    references: &[R],
    n: usize,
    smoothing: BleuSmoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Alignment {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} not in 1..=4")));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for order in 1..=n {
            let hc = ngrams(h, order);
            let rc = ngrams(r, order);
            for (g, &c) in &hc {
                matches[order - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[order - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let s = if order > 1 && smoothing == BleuSmoothing::AddOne {
            1.0
        } else {
            0.0
        };
        let num = matches[order - 1] as f64 + s;
        let den = totals[order - 1] as f64 + s;
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Distinct n-grams over total n-grams across the corpus.
pub fn dist_n<H: AsRef<[u32]>>(hypotheses: &[H], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("dist-n needs n >= 1".into()));
    }
    let mut distinct: BTreeSet<&[u32]> = BTreeSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        let h = h.as_ref();
        if h.len() >= n {
            for w in h.windows(n) {
                distinct.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(format!("dist-{n} over a corpus without {n}-grams")));
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// One generated response with its reference and the speaker's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
    pub history: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Cumulative BLEU-1..4 as fractions.
    pub bleu: [f64; 4],
    pub dist1: f64,
    pub dist2: f64,
    pub toksim: f64,
    pub grd_f1: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn compute(entries: &[EvalEntry], idf: &IdfTable, stop: &StopWords) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::UndefinedMetric("evaluation over zero samples".into()));
        }
        let hyps: Vec<&[u32]> = entries.iter().map(|e| e.hypothesis.as_slice()).collect();
        let refs: Vec<&[u32]> = entries.iter().map(|e| e.reference.as_slice()).collect();
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(&hyps, &refs, n + 1, BleuSmoothing::AddOne)?;
        }
        let dist = |n| dist_n(&hyps, n).unwrap_or(0.0);
        let count = entries.len() as f64;
        let toksim_mean = entries
            .iter()
            .map(|e| toksim(&e.hypothesis, &e.history, idf, stop))
            .sum::<f64>()
            / count;
        let f1_mean = entries
            .iter()
            .map(|e| grd_f1(&e.hypothesis, &e.history, stop))
            .sum::<f64>()
            / count;
        Ok(Self {
            bleu,
            dist1: dist(1),
            dist2: dist(2),
            toksim: toksim_mean,
            grd_f1: f1_mean,
            samples: entries.len(),
        })
    }

    /// Flat metric-name → value record.
    pub fn to_record(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (i, b) in self.bleu.iter().enumerate() {
            m.insert(format!("bleu{}", i + 1), *b);
        }
        m.insert("dist1".into(), self.dist1);
        m.insert("dist2".into(), self.dist2);
        m.insert("toksim".into(), self.toksim);
        m.insert("grd_f1".into(), self.grd_f1);
        m.insert("samples".into(), self.samples as f64);
        m
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6} {:>7} {:>7}",
            "variant", "Bleu1", "Bleu2", "Bleu3", "Bleu4", "Dist1", "Dist2", "Grd-F1", "TokSim"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<16} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>6.3} {:>6.3} {:>7.3} {:>7.3}",
            name,
            self.bleu[0] * 100.0,
            self.bleu[1] * 100.0,
            self.bleu[2] * 100.0,
            self.bleu[3] * 100.0,
            self.dist1,
            self.dist2,
            self.grd_f1,
            self.toksim
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row("model"))
    }
}

pub const DEFAULT_MARGINS: [f64; 3] = [0.0, 0.1, 0.2];

/// Fraction of probed speakers whose embedding is closer to a neighbor's than
/// to a random speaker's by more than each margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaProbe {
    pub margins: Vec<f64>,
    pub ratios: Vec<f64>,
    pub speakers: usize,
    pub skipped: Vec<SpeakerId>,
}

impl GammaProbe {
    pub fn ratio_at(&self, margin: f64) -> Option<f64> {
        self.margins
            .iter()
            .position(|&m| (m - margin).abs() < 1e-12)
            .map(|i| self.ratios[i])
    }
}

impl fmt::Display for GammaProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, r) in self.margins.iter().zip(&self.ratios) {
            write!(f, "γ-{m}: {r:.3}  ")?;
        }
        write!(f, "(n={})", self.speakers)
    }
}

/// `probed` holds the representation of each probed speaker; `comparators`
/// holds the embeddings that neighbors and random partners are read from.
pub fn gamma_probe<R: Rng + ?Sized>(
    probed: &BTreeMap<SpeakerId, Vec<f64>>,
    comparators: &BTreeMap<SpeakerId, Vec<f64>>,
    graph: &SocialGraph,
    margins: &[f64],
    rng: &mut R,
) -> Result<GammaProbe> {
    let pool: Vec<SpeakerId> = comparators.keys().copied().collect();
    let mut hits = vec![0usize; margins.len()];
    let mut counted = 0usize;
    let mut skipped = Vec::new();
    for (&s, h) in probed {
        let neigh: Vec<SpeakerId> = graph
            .neighbors(s)?
            .iter()
            .copied()
            .filter(|u| comparators.contains_key(u))
            .collect();
        let randoms: Vec<SpeakerId> = pool
            .iter()
            .copied()
            .filter(|&u| u != s && graph.neighbors(s).map_or(true, |n| n.binary_search(&u).is_err()))
            .collect();
        if neigh.is_empty() || randoms.is_empty() {
            log::warn!("gamma probe: speaker {s} has no usable neighbor or random partner, skipped");
            skipped.push(s);
            continue;
        }
        let sn = neigh[rng.gen_range(0..neigh.len())];
        let sr = randoms[rng.gen_range(0..randoms.len())];
        let sim_n = cosine(h, &comparators[&sn]);
        let sim_r = cosine(h, &comparators[&sr]);
        counted += 1;
        for (c, &m) in hits.iter_mut().zip(margins) {
            if sim_n > sim_r + m {
                *c += 1;
            }
        }
    }
    let ratios: Vec<f64> = hits
        .iter()
        .map(|&c| if counted == 0 { 0.0 } else { c as f64 / counted as f64 })
        .collect();
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]));
    for w in order.windows(2) {
        assert!(
            ratios[w[0]] >= ratios[w[1]],
            "gamma ratios must not increase with the margin"
        );
    }
    Ok(GammaProbe {
        margins: margins.to_vec(),
        ratios,
        speakers: counted,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: u32 = 10;
    const B: u32 = 11;
    const C: u32 = 12;
    const D: u32 = 13;

    #[test]
    fn bleu_examples() {
        let same = vec![vec![A, B, C], vec![B, D]];
        assert!((bleu_n(&same, &same, 1, BleuSmoothing::None).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu_n(&same, &same, 4, BleuSmoothing::AddOne).unwrap() - 1.0).abs() < 1e-12);

        let disjoint_h = vec![vec![A, B]];
        let disjoint_r = vec![vec![C, D]];
        assert_eq!(bleu_n(&disjoint_h, &disjoint_r, 1, BleuSmoothing::None).unwrap(), 0.0);
        assert_eq!(bleu_n(&disjoint_h, &disjoint_r, 2, BleuSmoothing::AddOne).unwrap(), 0.0);

        let h = vec![vec![A, B, C]];
        let r = vec![vec![A, B, D]];
        let b1 = bleu_n(&h, &r, 1, BleuSmoothing::None).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        // sqrt(2/3 · 1/2), brevity penalty 1
        let b2 = bleu_n(&h, &r, 2, BleuSmoothing::None).unwrap();
        assert!((b2 - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // add-one bigram precision (1+1)/(2+1)
        let b2s = bleu_n(&h, &r, 2, BleuSmoothing::AddOne).unwrap();
        assert!((b2s - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_and_alignment() {
        let h = vec![vec![A]];
        let r = vec![vec![A, B]];
        let b = bleu_n(&h, &r, 1, BleuSmoothing::None).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        assert!(matches!(
            bleu_n(&h, &[vec![A], vec![B]], 1, BleuSmoothing::None),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn dist_examples() {
        assert!((dist_n(&[vec![A, A, B]], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((dist_n(&[vec![A, A, A, A]], 1).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(dist_n(&[vec![A, B], vec![C, D]], 1).unwrap(), 1.0);
        assert!(matches!(
            dist_n(&[vec![A]], 2),
            Err(Error::UndefinedMetric(_))
        ));
        let empty: Vec<Vec<u32>> = vec![];
        assert!(dist_n(&empty, 1).is_err());
    }

    #[test]
    fn toksim_examples() {
        let idf = IdfTable::uniform(20);
        let none = StopWords::default();
        assert!((toksim(&[A, B, B], &[B, A, B], &idf, &none) - 1.0).abs() < 1e-12);
        assert_eq!(toksim(&[A, B], &[C, D], &idf, &none), 0.0);
        assert!((toksim(&[A, B], &[A, C], &idf, &none) - 0.5).abs() < 1e-12);
        let stop = StopWords::new([A]);
        assert_eq!(toksim(&[A], &[A, C], &idf, &stop), 0.0);
        let dup = StopWords::new([A, A, A]);
        assert_eq!(
            toksim(&[A, B, C], &[A, C], &idf, &stop),
            toksim(&[A, B, C], &[A, C], &idf, &dup)
        );
    }

    #[test]
    fn idf_defaults_to_max_for_unseen() {
        let docs: Vec<Vec<u32>> = vec![vec![3, 4], vec![3]];
        let idf = IdfTable::from_documents(docs.iter().map(|d| d.as_slice()), 6);
        assert!(idf.get(3) < idf.get(4));
        assert_eq!(idf.get(5), idf.get(100));
        assert!((idf.get(5) - (3.0f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn grd_f1_examples() {
        let none = StopWords::default();
        assert_eq!(grd_f1(&[A, B], &[B, A], &none), 1.0);
        assert_eq!(grd_f1(&[A, B], &[C, D], &none), 0.0);
        assert!((grd_f1(&[A, B], &[B, C], &none) - 0.5).abs() < 1e-12);
        assert_eq!(grd_f1(&[], &[], &none), 0.0);
        let stop = StopWords::new([B, B]);
        assert_eq!(grd_f1(&[A, B], &[B, C], &stop), 0.0);
    }

    #[test]
    fn stopwords_take_top_fraction() {
        let docs: Vec<Vec<u32>> = vec![vec![3, 3, 3, 4, 4, 5], vec![3, 6, 7]];
        let s = StopWords::top_fraction(docs.iter().map(|d| d.as_slice()), 0.01);
        assert_eq!(s, StopWords::new([3]));
        let s = StopWords::top_fraction(docs.iter().map(|d| d.as_slice()), 0.4);
        assert_eq!(s, StopWords::new([3, 4]));
    }

    fn ring(n: usize) -> SocialGraph {
        SocialGraph::from_edges(
            n,
            (0..n).map(|i| (SpeakerId(i as u32), SpeakerId(((i + 1) % n) as u32))),
        )
        .unwrap()
    }

    #[test]
    fn gamma_perfect_structure() {
        // Neighbors identical, non-neighbors orthogonal: a 4-cycle where
        // opposite corners differ.
        let g = ring(4);
        let e = |x: f64, y: f64| vec![x, y];
        let emb: BTreeMap<SpeakerId, Vec<f64>> = BTreeMap::from([
            (SpeakerId(0), e(1.0, 0.0)),
            (SpeakerId(1), e(1.0, 1.0)),
            (SpeakerId(2), e(0.0, 1.0)),
            (SpeakerId(3), e(1.0, 1.0)),
        ]);
        let mut probed = BTreeMap::new();
        probed.insert(SpeakerId(0), e(1.0, 1.0));
        let comps: BTreeMap<_, _> = emb.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Probe 0 looks like its neighbors (1,1); its only non-neighbor 2 is (0,1).
        let probe = gamma_probe(&probed, &comps, &g, &DEFAULT_MARGINS, &mut rng).unwrap();
        assert_eq!(probe.speakers, 1);
        let cos_r = cosine(&[1.0, 1.0], &[0.0, 1.0]);
        assert!(1.0 > cos_r + 0.2);
        assert_eq!(probe.ratios, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn gamma_identical_neighbors_orthogonal_randoms() {
        // 40 disjoint pairs; pair p lives on basis vector p, so neighbors are
        // identical and every non-neighbor is orthogonal.
        let pairs = 40;
        let n = 2 * pairs;
        let g = SocialGraph::from_edges(
            n,
            (0..pairs).map(|p| (SpeakerId(2 * p as u32), SpeakerId(2 * p as u32 + 1))),
        )
        .unwrap();
        let emb: BTreeMap<SpeakerId, Vec<f64>> = (0..n)
            .map(|i| {
                let mut v = vec![0.0; pairs];
                v[i / 2] = 1.0;
                (SpeakerId(i as u32), v)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = gamma_probe(&emb, &emb, &g, &DEFAULT_MARGINS, &mut rng).unwrap();
        assert_eq!(probe.ratios, vec![1.0, 1.0, 1.0]);
        assert_eq!(probe.speakers, n);
    }

    #[test]
    fn gamma_random_embeddings_near_half() {
        let n = 1000;
        let g = ring(n);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb: BTreeMap<SpeakerId, Vec<f64>> = (0..n)
            .map(|i| {
                let v = crate::tensor::Mat::randn(1, 16, 1.0, &mut rng).into_data();
                (SpeakerId(i as u32), v)
            })
            .collect();
        let probe = gamma_probe(&emb, &emb, &g, &DEFAULT_MARGINS, &mut rng).unwrap();
        // binomial sd for p=0.5, n=1000 is ~0.016
        assert!((probe.ratios[0] - 0.5).abs() < 0.05, "{probe}");
        assert!(probe.ratios[1] <= probe.ratios[0] && probe.ratios[2] <= probe.ratios[1]);
    }

    #[test]
    fn gamma_skips_neighborless() {
        let g = SocialGraph::from_edges(3, [(SpeakerId(0), SpeakerId(1))]).unwrap();
        let emb: BTreeMap<SpeakerId, Vec<f64>> =
            (0..3).map(|i| (SpeakerId(i), vec![1.0, i as f64])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = gamma_probe(&emb, &emb, &g, &[0.0], &mut rng).unwrap();
        assert_eq!(probe.skipped, vec![SpeakerId(2)]);
        assert_eq!(probe.speakers, 2);
    }

    #[test]
    fn report_is_order_invariant() {
        let mk = |h: &[u32], r: &[u32], hist: &[u32]| EvalEntry {
            hypothesis: h.to_vec(),
            reference: r.to_vec(),
            history: hist.to_vec(),
        };
        let entries = vec![
            mk(&[A, B, C], &[A, B, D], &[A, C]),
            mk(&[B, B], &[B, C], &[D]),
            mk(&[C, D, A, B], &[C, D], &[C, D, B]),
        ];
        let idf = IdfTable::uniform(20);
        let stop = StopWords::default();
        let r1 = EvalReport::compute(&entries, &idf, &stop).unwrap();
        let mut rev = entries.clone();
        rev.reverse();
        let r2 = EvalReport::compute(&rev, &idf, &stop).unwrap();
        for (k, v) in r1.to_record() {
            assert!((v - r2.to_record()[&k]).abs() < 1e-12, "{k}");
        }
        assert!(r1.to_record().values().all(|&v| v >= 0.0));
    }
}
