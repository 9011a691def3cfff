use rand::seq::index;
use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::error::{usage, Result};
use crate::rng::MemrRng;

/// One single-step model rollout and the importance weight of the real state
/// it started from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Segment {
    round: u64,
    samples: Vec<ModelSample>,
}

/// A batch drawn from a single segment.
#[derive(Debug)]
pub struct PolicyBatch<'a> {
    /// Generation round shared by every sample in the batch.
    pub round: u64,
    pub samples: Vec<&'a ModelSample>,
}

/// Ring of fixed-size segments. Every segment holds exactly the rollouts of
/// one generation round, so the importance weights inside a segment all
/// refer to the same sampling distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedModelBuffer {
    segment_len: usize,
    max_segments: usize,
    segments: Vec<Segment>,
    next: usize,
    rounds: u64,
}

impl SegmentedModelBuffer {
    /// `dataset_size` must be a positive multiple of `segment_len`.
    pub fn new(dataset_size: usize, segment_len: usize) -> Result<Self> {
        if segment_len == 0 || dataset_size == 0 || dataset_size % segment_len != 0 {
            return usage(format!(
                "model dataset size {dataset_size} must be a positive multiple of segment length {segment_len}"
            ));
        }
        Ok(Self {
            segment_len,
            max_segments: dataset_size / segment_len,
            segments: Vec::new(),
            next: 0,
            rounds: 0,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn max_segments(&self) -> usize {
        self.max_segments
    }

    pub fn occupied_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn len(&self) -> usize {
        self.segments.len() * self.segment_len
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Rounds pushed so far; also the id the next push will receive.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Stores one generation round as a new segment, evicting the oldest
    /// segment when full. Returns the round id.
    pub fn push_segment(&mut self, batch: Vec<ModelSample>) -> Result<u64> {
        if batch.len() != self.segment_len {
            return usage(format!(
                "segment must hold exactly {} rollouts, got {}",
                self.segment_len,
                batch.len()
            ));
        }
        let round = self.rounds;
        let seg = Segment { round, samples: batch };
        if self.segments.len() < self.max_segments {
            self.segments.push(seg);
        } else {
            self.segments[self.next] = seg;
        }
        self.next = (self.next + 1) % self.max_segments;
        self.rounds += 1;
        Ok(round)
    }

    /// Picks an occupied segment uniformly, then `b` distinct entries of it
    /// uniformly.
    pub fn sample_policy_batch(&self, b: usize, rng: &mut MemrRng) -> Result<PolicyBatch<'_>> {
        if self.segments.is_empty() {
            return usage("cannot sample from an empty model buffer");
        }
        if b == 0 || b > self.segment_len {
            return usage(format!("batch size {b} must be in 1..={}", self.segment_len));
        }
        let seg = &self.segments[rng.random_range(0..self.segments.len())];
        let picks = index::sample(rng, self.segment_len, b);
        Ok(PolicyBatch {
            round: seg.round,
            samples: picks.iter().map(|i| &seg.samples[i]).collect(),
        })
    }

    /// Uniform draw over all stored samples (with replacement), for
    /// diagnostics.
    pub fn sample_any(&self, k: usize, rng: &mut MemrRng) -> Vec<&ModelSample> {
        if self.segments.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                &self.segments[i / self.segment_len].samples[i % self.segment_len]
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &ModelSample)> {
        self.segments
            .iter()
            .flat_map(|s| s.samples.iter().map(move |m| (s.round, m)))
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u64(self.segment_len as u64);
        w.put_u64(self.max_segments as u64);
        w.put_u64(self.next as u64);
        w.put_u64(self.rounds);
        w.put_u64(self.segments.len() as u64);
        for seg in &self.segments {
            w.put_u64(seg.round);
            for s in &seg.samples {
                w.put_f64s(&s.state);
                w.put_f64s(&s.action);
                w.put_f64s(&s.next_state);
                w.put_f64(s.reward);
                w.put_f64(s.weight);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let segment_len = r.usize()?;
        let max_segments = r.usize()?;
        let mut buf = Self::new(segment_len.saturating_mul(max_segments), segment_len)
            .map_err(|e| r.error(e.to_string()))?;
        buf.next = r.usize()?;
        buf.rounds = r.u64()?;
        let n = r.usize()?;
        if n > max_segments || buf.next >= max_segments {
            return Err(r.error("segment count exceeds capacity"));
        }
        for _ in 0..n {
            let round = r.u64()?;
            let mut samples = Vec::with_capacity(segment_len);
            for _ in 0..segment_len {
                samples.push(ModelSample {
                    state: r.f64s()?,
                    action: r.f64s()?,
                    next_state: r.f64s()?,
                    reward: r.f64()?,
                    weight: r.f64()?,
                });
            }
            buf.segments.push(Segment { round, samples });
        }
        Ok(buf)
    }
}
