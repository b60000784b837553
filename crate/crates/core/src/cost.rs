//! Hardware-independent cost instrumentation.
//!
//! FLOPs are counted as `2·m·n·k` per matrix product plus one per softmax
//! exponential. Memory is an element count of tracked buffers, not bytes.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopKind {
    Attention,
    Ffn,
    Mixing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostCounters {
    pub flops_attention: u64,
    pub flops_ffn: u64,
    pub flops_mixing: u64,
    pub live_elements: u64,
    pub peak_live_elements: u64,
}

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, kind: FlopKind, flops: u64) {
        match kind {
            FlopKind::Attention => self.flops_attention += flops,
            FlopKind::Ffn => self.flops_ffn += flops,
            FlopKind::Mixing => self.flops_mixing += flops,
        }
    }

    pub fn allocate(&mut self, elements: u64) {
        self.live_elements += elements;
        self.peak_live_elements = self.peak_live_elements.max(self.live_elements);
    }

    pub fn release(&mut self, elements: u64) {
        debug_assert!(elements <= self.live_elements, "releasing untracked elements");
        self.live_elements = self.live_elements.saturating_sub(elements);
    }

    /// Attention plus FFN: the work done inside the attention chains.
    pub fn chain_flops(&self) -> u64 {
        self.flops_attention + self.flops_ffn
    }

    pub fn total_flops(&self) -> u64 {
        self.flops_attention + self.flops_ffn + self.flops_mixing
    }

    /// FLOP difference `self - earlier`, for per-step accounting on a
    /// running counter.
    pub fn flops_since(&self, earlier: &CostCounters) -> CostCounters {
        CostCounters {
            flops_attention: self.flops_attention - earlier.flops_attention,
            flops_ffn: self.flops_ffn - earlier.flops_ffn,
            flops_mixing: self.flops_mixing - earlier.flops_mixing,
            live_elements: self.live_elements,
            peak_live_elements: self.peak_live_elements,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let mut c = CostCounters::new();
        c.allocate(10);
        c.allocate(5);
        c.release(12);
        c.allocate(2);
        assert_eq!(c.live_elements, 5);
        assert_eq!(c.peak_live_elements, 15);
    }

    #[test]
    fn charges_land_in_their_bucket() {
        let mut c = CostCounters::new();
        c.charge(FlopKind::Attention, 7);
        c.charge(FlopKind::Ffn, 3);
        c.charge(FlopKind::Mixing, 1);
        assert_eq!(c.chain_flops(), 10);
        assert_eq!(c.total_flops(), 11);
    }
}
