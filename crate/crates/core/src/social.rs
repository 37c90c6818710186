//! Undirected speaker graph with neighbor lookup and sampling primitives.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

/// Dense speaker handle, valid in `[0, num_speakers)` of its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub u32);

impl SpeakerId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for SpeakerId {
    fn from(v: u32) -> Self {
        SpeakerId(v)
    }
}

/// Mutual-follow graph. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocialGraph {
    adjacency: Vec<Vec<SpeakerId>>,
    num_edges: usize,
}

impl SocialGraph {
    /// Graph without edges.
    pub fn empty(num_speakers: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); num_speakers],
            num_edges: 0,
        }
    }

    /// Builds a graph from unordered pairs, rejecting self-loops, repeated
    /// edges (in either orientation) and out-of-range endpoints.
    pub fn from_edges<I>(num_speakers: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SpeakerId, SpeakerId)>,
    {
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); num_speakers];
        for (a, b) in edges {
            for s in [a, b] {
                if s.index() >= num_speakers {
                    return Err(Error::InvalidSpeaker {
                        speaker: s,
                        num_speakers,
                    });
                }
            }
            if a == b {
                return Err(Error::format("edge list", format!("self-loop on speaker {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::format("edge list", format!("edge {a}-{b} declared twice")));
            }
            adjacency[a.index()].push(b);
            adjacency[b.index()].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            adjacency,
            num_edges: seen.len(),
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.adjacency.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    fn check(&self, s: SpeakerId) -> Result<()> {
        if s.index() < self.num_speakers() {
            Ok(())
        } else {
            Err(Error::InvalidSpeaker {
                speaker: s,
                num_speakers: self.num_speakers(),
            })
        }
    }

    /// Neighbors of `s`, sorted ascending.
    pub fn neighbors(&self, s: SpeakerId) -> Result<&[SpeakerId]> {
        self.check(s)?;
        Ok(&self.adjacency[s.index()])
    }

    pub fn degree(&self, s: SpeakerId) -> Result<usize> {
        self.neighbors(s).map(<[_]>::len)
    }

    pub fn contains_edge(&self, a: SpeakerId, b: SpeakerId) -> bool {
        a.index() < self.num_speakers() && self.adjacency[a.index()].binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(low, high)`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (SpeakerId, SpeakerId)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, list)| {
            let a = SpeakerId(a as u32);
            list.iter().filter(move |&&b| b > a).map(move |&b| (a, b))
        })
    }

    /// `k_ns` speakers drawn uniformly with replacement from every speaker
    /// except `s`. Neighbors of `s` are valid negatives.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        s: SpeakerId,
        k_ns: usize,
        rng: &mut R,
    ) -> Result<Vec<SpeakerId>> {
        self.check(s)?;
        let n = self.num_speakers();
        if n < 2 {
            return Err(Error::InsufficientPopulation(n));
        }
        if k_ns == 0 {
            return Err(Error::Config("k_ns must be at least 1".into()));
        }
        Ok((0..k_ns)
            .map(|_| {
                let r = rng.gen_range(0..n - 1);
                SpeakerId(if r >= s.index() { r + 1 } else { r } as u32)
            })
            .collect())
    }

    /// Union of the neighbor lists of `s`'s neighbors. Contains `s` whenever
    /// `s` has a neighbor.
    pub fn two_hop_frontier(&self, s: SpeakerId) -> Result<BTreeSet<SpeakerId>> {
        let mut out = BTreeSet::new();
        for &u in self.neighbors(s)? {
            out.extend(self.adjacency[u.index()].iter().copied());
        }
        Ok(out)
    }

    /// Subgraph induced on speakers `0..n`.
    pub fn induced_prefix(&self, n: usize) -> Self {
        let n = n.min(self.num_speakers());
        let mut num_edges = 0;
        let adjacency: Vec<Vec<SpeakerId>> = self.adjacency[..n]
            .iter()
            .map(|list| {
                let kept: Vec<SpeakerId> = list.iter().copied().filter(|b| b.index() < n).collect();
                num_edges += kept.len();
                kept
            })
            .collect();
        Self {
            adjacency,
            num_edges: num_edges / 2,
        }
    }

    /// Same speaker set, keeping only edges accepted by `keep`.
    pub fn filter_edges(&self, keep: impl Fn(SpeakerId, SpeakerId) -> bool) -> Self {
        let edges: Vec<_> = self.edges().filter(|&(a, b)| keep(a, b)).collect();
        Self::from_edges(self.num_speakers(), edges).expect("subset of a valid edge set")
    }

    /// Writes one `u<TAB>v` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for (a, b) in self.edges() {
            writeln!(w, "{a}\t{b}")?;
        }
        Ok(())
    }

    /// Parses the edge-list format. Blank lines are ignored.
    pub fn read_edge_list<R: BufRead>(num_speakers: usize, r: R) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let mut field = |name: &str| -> Result<SpeakerId> {
                let raw = parts.next().ok_or_else(|| {
                    Error::format("edge list", format!("line {}: missing {name}", lineno + 1))
                })?;
                raw.trim().parse::<u32>().map(SpeakerId).map_err(|e| {
                    Error::format("edge list", format!("line {}: {name} {raw:?}: {e}", lineno + 1))
                })
            };
            let a = field("u")?;
            let b = field("v")?;
            if parts.next().is_some() {
                return Err(Error::format(
                    "edge list",
                    format!("line {}: expected exactly two fields", lineno + 1),
                ));
            }
            edges.push((a, b));
        }
        Self::from_edges(num_speakers, edges)
    }
}
