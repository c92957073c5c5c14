//! Resource-block occupancy per subframe and mapping of bandwidth demands
//! onto whole, contiguous block runs.

use ulsched_core::channel_power::{rate, SpectralEfficiency, UeLink};

use crate::config::{RB_HZ, SUBFRAME_MS};

/// Bytes carried in one subframe at `rate` bit/s.
pub fn bytes_per_subframe(rate_bps: f64) -> f64 {
    rate_bps * SUBFRAME_MS * 1e-3 / 8.0
}

/// Transport-block capacity in bytes for `rbs` blocks on `link`. Floored
/// to whole bytes so queue bookkeeping stays on integers and byte
/// conservation checks hold exactly.
pub fn tb_capacity_bytes(link: &UeLink, psi: &dyn SpectralEfficiency, rbs: usize) -> f64 {
    if rbs == 0 {
        return 0.0;
    }
    bytes_per_subframe(rate(link, psi, rbs as f64 * RB_HZ).expect("positive bandwidth")).floor()
}

/// Per-subframe resource-block ownership.
#[derive(Debug, Clone)]
pub struct RbMap {
    owner: Vec<Option<u16>>,
}

impl RbMap {
    pub fn new(n_rbs: usize) -> Self {
        Self {
            owner: vec![None; n_rbs],
        }
    }

    pub fn n_rbs(&self) -> usize {
        self.owner.len()
    }

    pub fn owner(&self, rb: usize) -> Option<u16> {
        self.owner[rb]
    }

    pub fn free_count(&self) -> usize {
        self.owner.iter().filter(|o| o.is_none()).count()
    }

    /// Claim `[start, start+count)` for `ue`. Panics on double booking:
    /// the engine guarantees exclusive ownership by construction.
    pub fn claim(&mut self, ue: u16, start: usize, count: usize) {
        for rb in &mut self.owner[start..start + count] {
            assert!(rb.is_none(), "resource block granted twice");
            *rb = Some(ue);
        }
    }

    /// Return `[start, start+count)` held by `ue` to the free pool.
    pub fn release(&mut self, ue: u16, start: usize, count: usize) {
        for rb in &mut self.owner[start..start + count] {
            assert_eq!(*rb, Some(ue), "releasing a block the user does not hold");
            *rb = None;
        }
    }

    /// Maximal runs of free blocks, ascending.
    pub fn free_fragments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, o) in self.owner.iter().enumerate() {
            match (o.is_none(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.owner.len() - s));
        }
        out
    }

    /// Place a demand of `rbs` blocks: the smallest free fragment that
    /// fits, else the largest free fragment (truncating the demand).
    /// Returns the claimed run.
    pub fn place(&mut self, ue: u16, rbs: usize) -> Option<(usize, usize)> {
        if rbs == 0 {
            return None;
        }
        let frags = self.free_fragments();
        let pick = frags
            .iter()
            .filter(|&&(_, len)| len >= rbs)
            .min_by_key(|&&(_, len)| len)
            .or_else(|| frags.iter().max_by_key(|&&(_, len)| len))
            .copied()?;
        let count = pick.1.min(rbs);
        if count == 0 {
            return None;
        }
        self.claim(ue, pick.0, count);
        Some((pick.0, count))
    }
}

/// Turn fractional bandwidth demands (Hz) into whole-block grants, in the
/// given order (callers rank by marginal value), stopping after
/// `max_grants` placements when set. Returns `(ue, rb_start, rb_count)`
/// triples.
pub fn map_grants(
    map: &mut RbMap,
    demands_hz: &[(u16, f64)],
    max_grants: Option<usize>,
) -> Vec<(u16, usize, usize)> {
    let cap = max_grants.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for &(ue, hz) in demands_hz {
        if out.len() >= cap {
            break;
        }
        let rbs = (hz / RB_HZ).round() as usize;
        if rbs == 0 {
            continue;
        }
        if let Some((start, count)) = map.place(ue, rbs) {
            out.push((ue, start, count));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fragments_track_claims() {
        let mut map = RbMap::new(10);
        assert_eq!(map.free_fragments(), vec![(0, 10)]);
        map.claim(1, 3, 2);
        assert_eq!(map.free_fragments(), vec![(0, 3), (5, 5)]);
        map.claim(2, 0, 1);
        assert_eq!(map.free_fragments(), vec![(1, 2), (5, 5)]);
        assert_eq!(map.free_count(), 7);
    }

    #[test]
    fn place_prefers_the_smallest_fitting_fragment() {
        let mut map = RbMap::new(12);
        map.claim(9, 4, 2); // free: [0,4) and [6,12)
        let got = map.place(1, 3).unwrap();
        assert_eq!(got, (0, 3), "3 blocks fit the 4-run better than the 6-run");
        // A demand larger than any fragment truncates into the largest.
        let got = map.place(2, 9).unwrap();
        assert_eq!(got, (6, 6));
    }

    #[test]
    fn grants_never_overlap() {
        let mut map = RbMap::new(25);
        let demands: Vec<(u16, f64)> = (0..8)
            .map(|ue| (ue as u16, (ue as f64 + 1.0) * 0.7 * RB_HZ))
            .collect();
        let grants = map_grants(&mut map, &demands, None);
        let mut seen = vec![false; 25];
        for &(_, start, count) in &grants {
            for rb in start..start + count {
                assert!(!seen[rb], "block {rb} granted twice");
                seen[rb] = true;
            }
        }
    }

    #[test]
    fn grant_cap_and_release_work() {
        let mut map = RbMap::new(12);
        let demands: Vec<(u16, f64)> = (0..5).map(|ue| (ue as u16, 2.0 * RB_HZ)).collect();
        let grants = map_grants(&mut map, &demands, Some(3));
        assert_eq!(grants.len(), 3);
        assert_eq!(map.free_count(), 6);
        let (ue, start, count) = grants[0];
        map.release(ue, start, count);
        assert_eq!(map.free_count(), 8);
    }

    #[test]
    fn capacity_is_monotone_in_blocks() {
        use ulsched_core::channel_power::{Shannon, UeLink};
        let link = UeLink::new(1e-12, 1e-7, 0.2, 1.6e-20).unwrap();
        let psi = Shannon;
        let mut prev = 0.0;
        for rbs in 0..20 {
            let c = tb_capacity_bytes(&link, &psi, rbs);
            assert!(c >= prev);
            prev = c;
        }
        assert!(prev > 0.0);
    }
}
