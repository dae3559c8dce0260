//! Trace metrics: fragmented parallel time, plain parallel time, disorder,
//! and scaling-exponent fits.

use thiserror::Error;

use crate::engine::{AgentId, Population};
use crate::spec::ProtocolSpec;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 3 distinct sizes with positive values, got {0}")]
    InsufficientData(usize),
    #[error("state `{0}` is not one of L, N, U")]
    InvalidState(String),
    #[error("population carries no keys")]
    NoKeys,
}

/// Chunk decomposition of a trace.
///
/// A chunk is a maximal run of consecutive interactions in which no agent
/// appears as the responder of a meaningful interaction more than `10 ln n`
/// times. Failed attempts (emptiness, singleton, no-match) are attributed to
/// the initiator and never count against the bound. The greedy
/// maximal-prefix decomposition is minimal because chunk feasibility is
/// closed under taking contiguous subsequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkReport {
    pub n: u32,
    /// Minimal number of chunks; 0 for an empty trace.
    pub chunk_count: u64,
    /// Interaction index (1-based) starting each chunk after the first.
    pub chunk_boundaries: Vec<u64>,
    /// `chunk_count * ln n`.
    pub fragmented_time: f64,
    /// Largest per-agent responder tally observed in each chunk.
    pub responder_max_per_chunk: Vec<u32>,
}

impl ChunkReport {
    pub fn parallel_time(&self, interactions: u64) -> f64 {
        interactions as f64 / self.n as f64
    }
}

/// Streaming chunker. Tallies are kept per agent with an epoch stamp so a
/// chunk cut clears them in O(1).
pub struct ChunkStream {
    n: u32,
    threshold: f64,
    /// floor(10 ln n): the largest responder tally a chunk may contain.
    limit: u32,
    tally: Vec<u32>,
    stamp: Vec<u64>,
    epoch: u64,
    interactions_seen: u64,
    boundaries: Vec<u64>,
    max_in_chunk: u32,
    responder_max: Vec<u32>,
}

impl ChunkStream {
    pub fn new(n: u32) -> Self {
        let threshold = 10.0 * (n as f64).ln();
        ChunkStream {
            n,
            threshold,
            limit: threshold.floor() as u32,
            tally: vec![0; n as usize],
            stamp: vec![0; n as usize],
            epoch: 1,
            interactions_seen: 0,
            boundaries: Vec::new(),
            max_in_chunk: 0,
            responder_max: Vec::new(),
        }
    }

    /// Record that an interaction happened; only meaningful ones also call
    /// [`ChunkStream::note_meaningful`].
    #[inline]
    pub fn note_interaction(&mut self) {
        self.interactions_seen += 1;
    }

    #[inline]
    pub fn note_meaningful(&mut self, responder: AgentId, step: u64) {
        self.interactions_seen = self.interactions_seen.max(step);
        let a = responder as usize;
        let mut t = if self.stamp[a] == self.epoch {
            self.tally[a]
        } else {
            0
        };
        if t >= self.limit {
            // this response would exceed 10 ln n: cut before it
            self.responder_max.push(self.max_in_chunk);
            self.boundaries.push(step);
            self.epoch += 1;
            self.max_in_chunk = 0;
            t = 0;
        }
        t += 1;
        self.tally[a] = t;
        self.stamp[a] = self.epoch;
        if t > self.max_in_chunk {
            self.max_in_chunk = t;
        }
    }

    /// Snapshot of the decomposition so far.
    pub fn report(&self) -> ChunkReport {
        let chunk_count = if self.interactions_seen == 0 {
            0
        } else {
            self.boundaries.len() as u64 + 1
        };
        let mut responder_max = self.responder_max.clone();
        if self.interactions_seen > 0 {
            responder_max.push(self.max_in_chunk);
        }
        ChunkReport {
            n: self.n,
            chunk_count,
            chunk_boundaries: self.boundaries.clone(),
            fragmented_time: chunk_count as f64 * (self.n as f64).ln(),
            responder_max_per_chunk: responder_max,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Chunk a recorded trace given as per-interaction responder entries
/// (`Some(agent)` for meaningful interactions, `None` otherwise).
pub fn fragmented_time(
    responders: impl IntoIterator<Item = Option<AgentId>>,
    n: u32,
) -> ChunkReport {
    let mut cs = ChunkStream::new(n);
    let mut step = 0u64;
    for r in responders {
        step += 1;
        cs.note_interaction();
        if let Some(b) = r {
            cs.note_meaningful(b, step);
        }
    }
    cs.report()
}

/// Disorder of a comparison-model configuration over states L, N, U: the
/// number of unordered agent pairs whose interaction would be meaningful
/// under the standard median rules. Direct O(n^2) enumeration.
pub fn disorder(pop: &Population, spec: &ProtocolSpec) -> Result<u64, MetricsError> {
    if !pop.has_keys() {
        return Err(MetricsError::NoKeys);
    }
    #[derive(Copy, Clone, PartialEq)]
    enum Lnu {
        L,
        N,
        U,
    }
    let mut class = Vec::with_capacity(spec.n_states());
    for s in spec.states() {
        class.push(match spec.state_name(s) {
            "L" => Lnu::L,
            "N" => Lnu::N,
            "U" => Lnu::U,
            other => return Err(MetricsError::InvalidState(other.to_string())),
        });
    }
    let n = pop.n();
    let mut d = 0u64;
    for a in 0..n {
        for b in (a + 1)..n {
            let (lo, hi) = if pop.compare(a, b) == std::cmp::Ordering::Less {
                (a, b)
            } else {
                (b, a)
            };
            let sl = class[pop.state_of(lo).0 as usize];
            let sh = class[pop.state_of(hi).0 as usize];
            let meaningful = matches!(
                (sl, sh),
                (Lnu::N, Lnu::N) | (Lnu::U, Lnu::L) | (Lnu::U, Lnu::N) | (Lnu::N, Lnu::L)
            );
            if meaningful {
                d += 1;
            }
        }
    }
    Ok(d)
}

/// Result of checking one trace against the fragmented-time envelope
/// `T/10 <= T_F <= 2T`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Lemma1Check {
    pub parallel_time: f64,
    pub fragmented_time: f64,
    pub within: bool,
    pub lower_ok: bool,
}

pub fn lemma1_check(interactions: u64, n: u32, chunk: &ChunkReport) -> Lemma1Check {
    let t = interactions as f64 / n as f64;
    let tf = chunk.fragmented_time;
    Lemma1Check {
        parallel_time: t,
        fragmented_time: tf,
        within: t / 10.0 <= tf && tf <= 2.0 * t,
        lower_ok: t / 10.0 <= tf,
    }
}

/// Minimum trace length for inclusion in envelope statistics; traces shorter
/// than this are boundary noise the envelope is not claimed for.
pub fn default_min_trace_len(n: u32) -> u64 {
    (10.0 * n as f64 * (n as f64).ln()).ceil() as u64
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals in the fitted coordinates.
    pub residual: f64,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Fit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    Fit {
        slope,
        intercept,
        residual,
    }
}

fn check_points(points: &[(f64, f64)], min_x: f64) -> Result<(), MetricsError> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 || points.iter().any(|&(x, v)| v <= 0.0 || x < min_x) {
        return Err(MetricsError::InsufficientData(xs.len()));
    }
    Ok(())
}

/// Least-squares slope of `ln value` against `ln n`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<Fit, MetricsError> {
    check_points(points, f64::MIN_POSITIVE)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(least_squares(&xs, &ys))
}

/// Least-squares slope of `ln value` against `ln ln n`; sizes must exceed 1
/// so the inner logarithm is positive.
pub fn fit_polylog(points: &[(f64, f64)]) -> Result<Fit, MetricsError> {
    check_points(points, 1.0 + f64::EPSILON)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln().ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(least_squares(&xs, &ys))
}

/// One trial row of a scaling sweep.
#[derive(Clone, Debug)]
pub struct ScalingRow {
    pub n: u32,
    pub seed: u64,
    pub interactions: u64,
    pub fragmented_time: f64,
    pub parallel_time: f64,
    pub correct: bool,
}

/// Trial table for a sweep over strictly increasing population sizes.
#[derive(Clone, Debug, Default)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn push(&mut self, row: ScalingRow) {
        self.rows.push(row);
    }

    /// Mean of a metric per size, as (n, mean) points for fitting.
    pub fn mean_by_n(&self, metric: impl Fn(&ScalingRow) -> f64) -> Vec<(f64, f64)> {
        let mut ns: Vec<u32> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns.iter()
            .map(|&n| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.n == n)
                    .map(&metric)
                    .collect();
                (n as f64, vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}
