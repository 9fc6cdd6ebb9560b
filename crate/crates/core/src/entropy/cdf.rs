//! Quantized cumulative distribution tables.

/// Bits of CDF precision.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
/// Smallest frequency any symbol (including the escape) can receive, so
/// every coded probability is at least `2^-15`.
pub const MIN_FREQ: u32 = 2;

/// A discrete distribution over `offset..offset + n` plus a trailing escape
/// symbol for values outside that range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    /// `n + 2` entries: `cdf[0] = 0`, `cdf[n + 1] = TOTAL`.
    pub cdf: Vec<u32>,
    pub offset: i32,
}

impl CdfTable {
    /// Quantize `pmf` (probabilities of the in-range symbols); the escape
    /// symbol receives the leftover mass `1 - sum(pmf)`.
    pub fn from_pmf(pmf: &[f64], offset: i32) -> Self {
        let n = pmf.len();
        let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        let mut probs: Vec<f64> = pmf.iter().map(|p| p.max(0.0)).collect();
        probs.push(tail);
        let budget = TOTAL - MIN_FREQ * (n as u32 + 1);
        let mass: f64 = probs.iter().sum::<f64>().max(1e-300);
        let mut freq: Vec<u32> = probs
            .iter()
            .map(|p| MIN_FREQ + ((p / mass) * budget as f64).floor() as u32)
            .collect();
        let sum: u32 = freq.iter().sum();
        // hand the rounding remainder to the most probable symbol
        let argmax = (0..freq.len()).max_by_key(|&i| freq[i]).unwrap_or(0);
        freq[argmax] += TOTAL - sum;
        let mut cdf = Vec::with_capacity(n + 2);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Self { cdf, offset }
    }

    /// Number of in-range symbols.
    pub fn support(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn escape_index(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn freq(&self, i: usize) -> u32 {
        self.cdf[i + 1] - self.cdf[i]
    }

    pub fn index_of(&self, value: i32) -> Option<usize> {
        let i = value as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.support()).then_some(i as usize)
    }

    pub fn value_of(&self, i: usize) -> i32 {
        self.offset + i as i32
    }

    /// Symbol index whose interval contains cumulative count `v`.
    pub fn locate(&self, v: u32) -> usize {
        self.cdf.partition_point(|&c| c <= v) - 1
    }

    /// Exact cost in bits of coding `value` under this table, including
    /// the escape payload.
    pub fn bits(&self, value: i32) -> f64 {
        let (i, extra) = match self.index_of(value) {
            Some(i) => (i, 0.0),
            None => (self.escape_index(), crate::entropy::range_coder::escape_payload_bits(value) as f64),
        };
        PRECISION as f64 - (self.freq(i) as f64).log2() + extra
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn every_symbol_is_codable(pmf in proptest::collection::vec(0.0f64..1.0, 1..300)) {
            let s: f64 = pmf.iter().sum::<f64>().max(1e-9) * 1.0001;
            let pmf: Vec<f64> = pmf.iter().map(|p| p / s).collect();
            let t = CdfTable::from_pmf(&pmf, -7);
            prop_assert_eq!(*t.cdf.last().unwrap(), TOTAL);
            for i in 0..=t.support() {
                prop_assert!(t.freq(i) >= MIN_FREQ);
                prop_assert!(t.bits(t.value_of(i)) <= 15.0 + 1e-9 || i == t.escape_index());
            }
        }
    }

    #[test]
    fn locate_inverts_cdf() {
        let t = CdfTable::from_pmf(&[0.25, 0.5, 0.2], 3);
        for i in 0..=t.support() {
            assert_eq!(t.locate(t.cdf[i]), i);
            assert_eq!(t.locate(t.cdf[i + 1] - 1), i);
        }
        assert_eq!(t.index_of(4), Some(1));
        assert_eq!(t.index_of(6), None);
        assert_eq!(t.index_of(2), None);
    }

    #[test]
    fn quantized_bits_track_probabilities() {
        let t = CdfTable::from_pmf(&[0.5, 0.25, 0.125, 0.0625], 0);
        assert!((t.bits(0) - 1.0).abs() < 0.01);
        assert!((t.bits(1) - 2.0).abs() < 0.01);
        assert!((t.bits(3) - 4.0).abs() < 0.01);
    }
}
