//! The region table: maps a cache's contiguous byte address space onto
//! physical memory regions hosted on server VMs.
//!
//! Virtual region `i` covers `[i * region_size, (i + 1) * region_size)`.
//! Operations that span region boundaries are split into per-region
//! sub-extents; the caller reassembles them.

use serde::{Deserialize, Serialize};

use crate::types::{CoreError, RegionId, VmId, DEFAULT_REGION_SIZE};

/// Lifecycle state of one region table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionStatus {
    Active,
    Migrating,
    Paused,
}

/// One virtual-region mapping: which VM and physical region back it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub vm_id: VmId,
    pub physical_region_id: RegionId,
    pub status: RegionStatus,
}

/// A resolved address: entry index plus the offset inside that region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLocation {
    pub entry_index: usize,
    pub vm_id: VmId,
    pub physical_region_id: RegionId,
    pub region_offset: u64,
}

/// One per-region slice of a possibly boundary-spanning operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubExtent {
    pub entry_index: usize,
    pub region_offset: u64,
    pub len: u64,
}

/// Client-side map from the cache address space to physical regions.
///
/// Entries cover `[0, capacity)` contiguously; the capacity is rounded up to
/// a whole number of regions internally, but addresses past the requested
/// capacity are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionTable {
    region_size: u64,
    capacity: u64,
    entries: Vec<RegionEntry>,
}

impl RegionTable {
    /// Builds a table over `capacity` bytes from an ordered region mapping.
    pub fn new(
        region_size: u64,
        capacity: u64,
        mapping: Vec<(VmId, RegionId)>,
    ) -> Result<Self, CoreError> {
        if region_size == 0 {
            return Err(CoreError::InvalidValue {
                what: "region_table",
                why: "region_size must be >= 1".into(),
            });
        }
        let needed = capacity.div_ceil(region_size);
        if mapping.len() as u64 != needed {
            return Err(CoreError::InvalidValue {
                what: "region_table",
                why: format!(
                    "capacity {capacity} needs {needed} regions, got {}",
                    mapping.len()
                ),
            });
        }
        let entries = mapping
            .into_iter()
            .map(|(vm_id, physical_region_id)| RegionEntry {
                vm_id,
                physical_region_id,
                status: RegionStatus::Active,
            })
            .collect();
        Ok(RegionTable {
            region_size,
            capacity,
            entries,
        })
    }

    pub fn with_default_region_size(
        capacity: u64,
        mapping: Vec<(VmId, RegionId)>,
    ) -> Result<Self, CoreError> {
        RegionTable::new(DEFAULT_REGION_SIZE, capacity, mapping)
    }

    pub fn region_size(&self) -> u64 {
        self.region_size
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn entries(&self) -> &[RegionEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> Result<&RegionEntry, CoreError> {
        self.entries.get(index).ok_or(CoreError::InvalidEntry {
            index,
            len: self.entries.len(),
        })
    }

    pub fn entry_mut(&mut self, index: usize) -> Result<&mut RegionEntry, CoreError> {
        let len = self.entries.len();
        self.entries
            .get_mut(index)
            .ok_or(CoreError::InvalidEntry { index, len })
    }

    /// Translates a cache address into its backing region and offset.
    pub fn lookup(&self, addr: u64) -> Result<RegionLocation, CoreError> {
        if addr >= self.capacity {
            return Err(CoreError::AddressOutOfBounds {
                addr,
                capacity: self.capacity,
            });
        }
        let entry_index = (addr / self.region_size) as usize;
        let entry = &self.entries[entry_index];
        Ok(RegionLocation {
            entry_index,
            vm_id: entry.vm_id,
            physical_region_id: entry.physical_region_id,
            region_offset: addr % self.region_size,
        })
    }

    /// Splits `[addr, addr + len)` into contiguous per-region sub-extents.
    pub fn split(&self, addr: u64, len: u64) -> Result<Vec<SubExtent>, CoreError> {
        if len == 0 {
            return Err(CoreError::InvalidValue {
                what: "split",
                why: "len must be >= 1".into(),
            });
        }
        let end = addr.checked_add(len).ok_or(CoreError::AddressOutOfBounds {
            addr,
            capacity: self.capacity,
        })?;
        if end > self.capacity {
            return Err(CoreError::AddressOutOfBounds {
                addr: end - 1,
                capacity: self.capacity,
            });
        }
        let mut out = Vec::new();
        let mut cursor = addr;
        while cursor < end {
            let entry_index = (cursor / self.region_size) as usize;
            let region_offset = cursor % self.region_size;
            let room = self.region_size - region_offset;
            let sub_len = room.min(end - cursor);
            out.push(SubExtent {
                entry_index,
                region_offset,
                len: sub_len,
            });
            cursor += sub_len;
        }
        Ok(out)
    }

    /// Points one entry at a new physical region, returning it to `Active`.
    /// All other entries are untouched.
    pub fn remap(
        &mut self,
        entry_index: usize,
        new_vm_id: VmId,
        new_physical_region_id: RegionId,
    ) -> Result<(), CoreError> {
        let entry = self.entry_mut(entry_index)?;
        entry.vm_id = new_vm_id;
        entry.physical_region_id = new_physical_region_id;
        entry.status = RegionStatus::Active;
        Ok(())
    }

    /// Shrinks the table to cover `new_capacity`, dropping freed entries.
    /// Returns the removed entries (most recently mapped last).
    pub fn truncate(&mut self, new_capacity: u64) -> Result<Vec<RegionEntry>, CoreError> {
        if new_capacity > self.capacity {
            return Err(CoreError::InvalidValue {
                what: "truncate",
                why: "new capacity exceeds current capacity".into(),
            });
        }
        let keep = new_capacity.div_ceil(self.region_size) as usize;
        let removed = self.entries.split_off(keep);
        self.capacity = new_capacity;
        Ok(removed)
    }

    /// Grows the table to cover `new_capacity` using `extra` new regions.
    pub fn extend(
        &mut self,
        new_capacity: u64,
        extra: Vec<(VmId, RegionId)>,
    ) -> Result<(), CoreError> {
        if new_capacity < self.capacity {
            return Err(CoreError::InvalidValue {
                what: "extend",
                why: "new capacity below current capacity".into(),
            });
        }
        let needed = new_capacity.div_ceil(self.region_size);
        if self.entries.len() as u64 + extra.len() as u64 != needed {
            return Err(CoreError::InvalidValue {
                what: "extend",
                why: format!(
                    "need {} regions total, have {} + {} new",
                    needed,
                    self.entries.len(),
                    extra.len()
                ),
            });
        }
        self.entries
            .extend(extra.into_iter().map(|(vm_id, physical_region_id)| RegionEntry {
                vm_id,
                physical_region_id,
                status: RegionStatus::Active,
            }));
        self.capacity = new_capacity;
        Ok(())
    }

    /// Entry indices hosted by `vm`.
    pub fn entries_on_vm(&self, vm: VmId) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.vm_id == vm)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the coverage invariant: entries cover `[0, capacity)` with no
    /// gaps or overlaps.
    pub fn check_coverage(&self) -> bool {
        self.entries.len() as u64 == self.capacity.div_ceil(self.region_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn table_3gib() -> RegionTable {
        RegionTable::with_default_region_size(
            3 * GIB,
            vec![
                (VmId(1), RegionId(0)),
                (VmId(1), RegionId(1)),
                (VmId(2), RegionId(0)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn lookup_identity_and_offsets() {
        let t = table_3gib();
        let loc = t.lookup(0).unwrap();
        assert_eq!((loc.entry_index, loc.region_offset), (0, 0));

        let loc = t.lookup(GIB + 5).unwrap();
        assert_eq!((loc.entry_index, loc.region_offset), (1, 5));

        assert_eq!(
            t.lookup(3 * GIB),
            Err(CoreError::AddressOutOfBounds {
                addr: 3 * GIB,
                capacity: 3 * GIB
            })
        );
    }

    #[test]
    fn split_across_boundary() {
        let t = table_3gib();
        let parts = t.split(GIB - 4, 8).unwrap();
        assert_eq!(
            parts,
            vec![
                SubExtent {
                    entry_index: 0,
                    region_offset: GIB - 4,
                    len: 4
                },
                SubExtent {
                    entry_index: 1,
                    region_offset: 0,
                    len: 4
                },
            ]
        );
    }

    #[test]
    fn split_single_region() {
        let t = table_3gib();
        let parts = t.split(10, 6).unwrap();
        assert_eq!(
            parts,
            vec![SubExtent {
                entry_index: 0,
                region_offset: 10,
                len: 6
            }]
        );
    }

    #[test]
    fn split_full_cache() {
        let t = table_3gib();
        let parts = t.split(0, 3 * GIB).unwrap();
        assert_eq!(parts.len(), 3);
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.entry_index, i);
            assert_eq!(p.region_offset, 0);
            assert_eq!(p.len, GIB);
        }
    }

    #[test]
    fn split_rejects_overflow() {
        let t = table_3gib();
        assert!(t.split(3 * GIB - 1, 2).is_err());
        assert!(t.split(0, 0).is_err());
    }

    #[test]
    fn remap_is_local() {
        let mut t = RegionTable::new(
            1024,
            7 * 1024,
            (0..7).map(|i| (VmId(1), RegionId(i))).collect(),
        )
        .unwrap();
        let before: Vec<_> = t.entries().to_vec();
        t.remap(2, VmId(9), RegionId(40)).unwrap();
        for (i, (old, new)) in before.iter().zip(t.entries()).enumerate() {
            if i == 2 {
                assert_eq!(new.vm_id, VmId(9));
                assert_eq!(new.physical_region_id, RegionId(40));
                assert_eq!(new.status, RegionStatus::Active);
            } else {
                assert_eq!(old, new);
            }
        }
        // read-after-update sees the new VM
        let loc = t.lookup(2 * 1024 + 17).unwrap();
        assert_eq!(loc.vm_id, VmId(9));

        assert_eq!(
            t.remap(9, VmId(1), RegionId(0)),
            Err(CoreError::InvalidEntry { index: 9, len: 7 })
        );
    }

    #[test]
    fn capacity_rounds_up_but_rejects_past_requested() {
        // 1.5 regions of capacity still needs 2 regions
        let t = RegionTable::new(1024, 1536, vec![(VmId(1), RegionId(0)), (VmId(1), RegionId(1))])
            .unwrap();
        assert!(t.lookup(1535).is_ok());
        assert!(t.lookup(1536).is_err());
        assert!(t.check_coverage());
    }
}
