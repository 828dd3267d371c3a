//! Two-engine transfer/compute pipeline simulation and staged thread
//! memory accounting.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub chunks: usize,
    pub transfer: f64,
    pub compute: f64,
    pub overlap: bool,
}

impl PipelineSpec {
    pub fn new(chunks: usize, transfer: f64, compute: f64, overlap: bool) -> Result<Self> {
        let s = PipelineSpec {
            chunks,
            transfer,
            compute,
            overlap,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunks == 0 {
            return Err(Error::Pipeline("chunk count must be at least 1".into()));
        }
        for (what, v) in [("transfer", self.transfer), ("compute", self.compute)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Pipeline(format!(
                    "{what} time {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Makespan for equal chunks without running the simulation.
    pub fn closed_form(&self) -> f64 {
        let n = self.chunks as f64;
        let (t, c) = (self.transfer, self.compute);
        if !self.overlap {
            n * (t + c)
        } else if c >= t {
            t + n * c
        } else {
            n * t + c
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Transfer,
    Compute,
}

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Transfer => "transfer",
            EngineKind::Compute => "compute",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    /// `transfer[k]` or `compute[k]`.
    pub event: String,
    pub engine: EngineKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub makespan: f64,
    /// Events ordered by start time; transfers before computes at equal start.
    pub timeline: Vec<TimelineEvent>,
}

impl PipelineRun {
    /// CSV with header `event,engine,start,end`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["event", "engine", "start", "end"])?;
        for e in &self.timeline {
            out.write_record([
                e.event.clone(),
                e.engine.as_str().to_string(),
                e.start.to_string(),
                e.end.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Completion {
    time: f64,
    seq: u64,
    engine: EngineKind,
    chunk: usize,
}

impl Eq for Completion {}

impl Ord for Completion {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Discrete-event simulation of one transfer engine feeding one compute
/// engine. Chunk `k` may compute only once its transfer has finished. Without
/// overlap, computation starts only after the last transfer.
pub fn simulate_pipeline(spec: &PipelineSpec) -> Result<PipelineRun> {
    spec.validate()?;
    let n = spec.chunks;
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut timeline = Vec::with_capacity(2 * n);
    let mut schedule = |heap: &mut BinaryHeap<Completion>,
                        timeline: &mut Vec<TimelineEvent>,
                        engine: EngineKind,
                        chunk: usize,
                        start: f64| {
        let dur = match engine {
            EngineKind::Transfer => spec.transfer,
            EngineKind::Compute => spec.compute,
        };
        timeline.push(TimelineEvent {
            event: format!("{}[{chunk}]", engine.as_str()),
            engine,
            start,
            end: start + dur,
        });
        heap.push(Completion {
            time: start + dur,
            seq,
            engine,
            chunk,
        });
        seq += 1;
    };

    let mut ready: VecDeque<usize> = VecDeque::new();
    let mut compute_busy = false;
    let mut transferred = 0;
    let mut makespan: f64 = 0.0;
    schedule(&mut heap, &mut timeline, EngineKind::Transfer, 0, 0.0);

    while let Some(ev) = heap.pop() {
        let now = ev.time;
        makespan = makespan.max(now);
        match ev.engine {
            EngineKind::Transfer => {
                transferred += 1;
                ready.push_back(ev.chunk);
                if ev.chunk + 1 < n {
                    schedule(
                        &mut heap,
                        &mut timeline,
                        EngineKind::Transfer,
                        ev.chunk + 1,
                        now,
                    );
                }
            }
            EngineKind::Compute => compute_busy = false,
        }
        let may_compute = spec.overlap || transferred == n;
        if !compute_busy && may_compute {
            if let Some(k) = ready.pop_front() {
                compute_busy = true;
                schedule(&mut heap, &mut timeline, EngineKind::Compute, k, now);
            }
        }
    }
    timeline.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then_with(|| (a.engine as u8).cmp(&(b.engine as u8)))
    });
    Ok(PipelineRun { makespan, timeline })
}

/// Ordered module stages with resident-memory estimates, split into
/// segments by boundaries. A boundary `b` sits after stage `b - 1`, so valid
/// positions are `1..stages.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadStagePlan {
    pub stages: Vec<(String, f64)>,
    pub boundaries: Vec<usize>,
}

impl ThreadStagePlan {
    pub fn new(stages: Vec<(String, f64)>, boundaries: Vec<usize>) -> Result<Self> {
        let p = ThreadStagePlan { stages, boundaries };
        p.validate()?;
        Ok(p)
    }

    /// Stages with the default four boundaries spread evenly.
    pub fn with_default_boundaries(stages: Vec<(String, f64)>) -> Result<Self> {
        let b = default_boundaries(stages.len());
        Self::new(stages, b)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((name, m)) = self
            .stages
            .iter()
            .find(|(_, m)| !(*m >= 0.0 && m.is_finite()))
        {
            return Err(Error::Plan(format!(
                "stage {name:?} has memory estimate {m}"
            )));
        }
        let n = self.stages.len();
        for (i, &b) in self.boundaries.iter().enumerate() {
            if b == 0 || b >= n {
                return Err(Error::Plan(format!("boundary {b} outside 1..{n}")));
            }
            if i > 0 && self.boundaries[i - 1] >= b {
                return Err(Error::Plan("boundaries must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// Four evenly spaced boundaries, or one after every stage when there are
/// fewer than five stages.
pub fn default_boundaries(stages: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (1..=4)
        .map(|i| (i * stages + 2) / 5)
        .filter(|&p| p >= 1 && p < stages)
        .collect();
    b.dedup();
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    /// Resident memory after each stage starts.
    pub resident: Vec<f64>,
    pub peak_with_boundaries: f64,
    pub peak_without_boundaries: f64,
}

/// Threads accumulate stage memory until a boundary tears them down, so the
/// resident set at any stage is the running sum within its segment.
pub fn plan_thread_stages(plan: &ThreadStagePlan) -> Result<StageTrace> {
    plan.validate()?;
    let mut resident = Vec::with_capacity(plan.stages.len());
    let mut acc = 0.0;
    let mut cuts = plan.boundaries.iter().peekable();
    for (i, (_, m)) in plan.stages.iter().enumerate() {
        if cuts.peek() == Some(&&i) {
            cuts.next();
            acc = 0.0;
        }
        acc += m;
        resident.push(acc);
    }
    let peak_with_boundaries = resident.iter().copied().fold(0.0, f64::max);
    Ok(StageTrace {
        resident,
        peak_with_boundaries,
        peak_without_boundaries: plan.stages.iter().map(|(_, m)| m).sum(),
    })
}
