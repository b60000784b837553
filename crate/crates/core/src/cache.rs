//! Per-layer FIFO of the three block attention outputs.
//!
//! A compute step pushes `[spatial, camera, motion]`; the next step pops them
//! in the same order, releasing each entry's elements as it goes. Any
//! out-of-order access is a protocol error rather than a silent recompute.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::attention::BlockKind;
use crate::cost::CostCounters;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

pub const SLOTS_PER_LAYER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub kind: BlockKind,
    pub value: Tensor,
    pub step_written: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityRecord {
    pub step: usize,
    pub layer: usize,
    pub kind: BlockKind,
    pub cosine: f64,
    /// Set when either operand had zero norm; `cosine` is then 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RollingCache {
    layers: Vec<VecDeque<CacheEntry>>,
    log: Vec<SimilarityRecord>,
}

impl RollingCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| VecDeque::with_capacity(SLOTS_PER_LAYER)).collect(),
            log: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn queue(&self, layer: usize) -> Result<&VecDeque<CacheEntry>> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::protocol(layer, format!("no such layer (cache has {})", self.layers.len())))
    }

    fn queue_mut(&mut self, layer: usize) -> Result<&mut VecDeque<CacheEntry>> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::protocol(layer, format!("no such layer (cache has {n})")))
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn kinds(&self, layer: usize) -> Vec<BlockKind> {
        self.layers
            .get(layer)
            .map(|q| q.iter().map(|e| e.kind).collect())
            .unwrap_or_default()
    }

    /// Step stamp of the entries currently held for `layer`.
    pub fn step_written(&self, layer: usize) -> Option<usize> {
        self.layers.get(layer)?.front().map(|e| e.step_written)
    }

    /// Elements currently held across all layers.
    pub fn resident_elements(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|q| q.iter())
            .map(|e| e.value.len() as u64)
            .sum()
    }

    /// Pushes one step's attention outputs. The layer's queue must be empty.
    pub fn store(
        &mut self,
        layer: usize,
        a_s: Tensor,
        a_c: Tensor,
        a_m: Tensor,
        step: usize,
        cost: &mut CostCounters,
    ) -> Result<()> {
        if a_s.shape() != a_c.shape() || a_s.shape() != a_m.shape() {
            return Err(Error::shape(format!(
                "cache entries disagree in shape: {:?} {:?} {:?}",
                a_s.shape(),
                a_c.shape(),
                a_m.shape()
            )));
        }
        let queue = self.queue_mut(layer)?;
        if !queue.is_empty() {
            return Err(Error::protocol(
                layer,
                format!("store at step {step} into a queue still holding {} entries", queue.len()),
            ));
        }
        let elements = a_s.len() as u64;
        for (kind, value) in BlockKind::CHAIN.into_iter().zip([a_s, a_c, a_m]) {
            queue.push_back(CacheEntry {
                kind,
                value,
                step_written: step,
            });
        }
        cost.allocate(SLOTS_PER_LAYER as u64 * elements);
        Ok(())
    }

    /// Pops the head entry, which must be of `kind`, and releases it.
    pub fn retrieve(&mut self, layer: usize, kind: BlockKind, cost: &mut CostCounters) -> Result<Tensor> {
        let queue = self.queue_mut(layer)?;
        match queue.front() {
            None => Err(Error::protocol(layer, format!("retrieve {} from an empty queue", kind.as_str()))),
            Some(head) if head.kind != kind => Err(Error::protocol(
                layer,
                format!("retrieve {} but head is {}", kind.as_str(), head.kind.as_str()),
            )),
            Some(_) => {
                let entry = queue.pop_front().expect("head checked");
                cost.release(entry.value.len() as u64);
                Ok(entry.value)
            }
        }
    }

    /// Reads the entry of `kind` without consuming it.
    pub fn peek(&self, layer: usize, kind: BlockKind) -> Result<&Tensor> {
        self.queue(layer)?
            .iter()
            .find(|e| e.kind == kind)
            .map(|e| &e.value)
            .ok_or_else(|| Error::protocol(layer, format!("peek {} but no such entry is cached", kind.as_str())))
    }

    /// Cosine between the cached entry of `kind` and a freshly computed
    /// value; appended to the similarity log.
    pub fn record_similarity(
        &mut self,
        layer: usize,
        kind: BlockKind,
        new_value: &Tensor,
        step: usize,
    ) -> Result<f64> {
        let cached = self.peek(layer, kind)?;
        let (value, degenerate) = match cosine(cached, new_value) {
            Ok(c) => (c, false),
            Err(Error::Degenerate(_)) => (0.0, true),
            Err(e) => return Err(e),
        };
        self.log.push(SimilarityRecord {
            step,
            layer,
            kind,
            cosine: value,
            degenerate,
        });
        Ok(value)
    }

    /// Consumes the held entries and stores a new set in their place.
    pub fn replace(
        &mut self,
        layer: usize,
        a_s: Tensor,
        a_c: Tensor,
        a_m: Tensor,
        step: usize,
        cost: &mut CostCounters,
    ) -> Result<()> {
        if !self.is_empty(layer) {
            for kind in BlockKind::CHAIN {
                self.retrieve(layer, kind, cost)?;
            }
        }
        self.store(layer, a_s, a_c, a_m, step, cost)
    }

    pub fn similarity_log(&self) -> &[SimilarityRecord] {
        &self.log
    }

    /// Appends externally produced records, e.g. to replay a log.
    pub fn extend_log(&mut self, records: impl IntoIterator<Item = SimilarityRecord>) {
        self.log.extend(records);
    }

    /// `step,layer,kind,cosine` rows with a header line.
    pub fn write_similarity_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,layer,kind,cosine")?;
        for r in &self.log {
            writeln!(out, "{},{},{},{}", r.step, r.layer, r.kind.as_str(), r.cosine)?;
        }
        Ok(())
    }
}
