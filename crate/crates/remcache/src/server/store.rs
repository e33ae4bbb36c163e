//! Sparse byte storage for memory regions. Regions are nominally large
//! (1 GiB by default) but only written pages are materialized; untouched
//! ranges read as zeros, which also gives zero-initialized allocation.

use std::collections::BTreeMap;

const PAGE_SHIFT: u32 = 16;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT; // 64 KiB

/// A fixed-length byte array stored as sparse 64 KiB pages.
#[derive(Debug, Default)]
pub struct SparseBytes {
    len: u64,
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl SparseBytes {
    pub fn new(len: u64) -> Self {
        SparseBytes {
            len,
            pages: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn materialized_bytes(&self) -> u64 {
        self.pages.len() as u64 * PAGE_SIZE
    }

    /// Reads `len` bytes at `offset`; None when the range exceeds bounds.
    pub fn read(&self, offset: u64, len: u64) -> Option<Vec<u8>> {
        let end = offset.checked_add(len)?;
        if end > self.len {
            return None;
        }
        let mut out = vec![0u8; len as usize];
        self.read_into(offset, &mut out);
        Some(out)
    }

    /// Reads into a caller buffer; the range must be in bounds.
    pub fn read_into(&self, offset: u64, out: &mut [u8]) {
        debug_assert!(offset + out.len() as u64 <= self.len);
        let mut cursor = offset;
        let end = offset + out.len() as u64;
        while cursor < end {
            let page_idx = cursor >> PAGE_SHIFT;
            let in_page = cursor & (PAGE_SIZE - 1);
            let chunk = ((PAGE_SIZE - in_page).min(end - cursor)) as usize;
            let dst_start = (cursor - offset) as usize;
            if let Some(page) = self.pages.get(&page_idx) {
                out[dst_start..dst_start + chunk]
                    .copy_from_slice(&page[in_page as usize..in_page as usize + chunk]);
            } else {
                out[dst_start..dst_start + chunk].fill(0);
            }
            cursor += chunk as u64;
        }
    }

    /// Writes `data` at `offset`; false when the range exceeds bounds.
    pub fn write(&mut self, offset: u64, data: &[u8]) -> bool {
        let end = match offset.checked_add(data.len() as u64) {
            Some(e) if e <= self.len => e,
            _ => return false,
        };
        let mut cursor = offset;
        while cursor < end {
            let page_idx = cursor >> PAGE_SHIFT;
            let in_page = cursor & (PAGE_SIZE - 1);
            let chunk = ((PAGE_SIZE - in_page).min(end - cursor)) as usize;
            let src_start = (cursor - offset) as usize;
            let page = self
                .pages
                .entry(page_idx)
                .or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
            page[in_page as usize..in_page as usize + chunk]
                .copy_from_slice(&data[src_start..src_start + chunk]);
            cursor += chunk as u64;
        }
        true
    }

    /// Materialized pages as (byte_offset, page bytes).
    pub fn pages(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.pages.iter().map(|(idx, p)| (idx << PAGE_SHIFT, &p[..]))
    }

    /// FNV-1a over the logical contents. A zero byte folds as
    /// `h = (h ^ 0) * P = h * P`, so a gap of n zeros is `h * P^n`, which
    /// lets sparse and dense representations hash identically without
    /// walking unmaterialized pages.
    pub fn checksum(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        fn prime_pow(mut n: u64) -> u64 {
            let mut base = PRIME;
            let mut acc = 1u64;
            while n > 0 {
                if n & 1 == 1 {
                    acc = acc.wrapping_mul(base);
                }
                base = base.wrapping_mul(base);
                n >>= 1;
            }
            acc
        }
        let mut hash = OFFSET;
        let mut pos = 0u64;
        for (offset, page) in self.pages() {
            if pos < offset {
                hash = hash.wrapping_mul(prime_pow(offset - pos));
                pos = offset;
            }
            for &b in page {
                hash ^= b as u64;
                hash = hash.wrapping_mul(PRIME);
            }
            pos += page.len() as u64;
        }
        if pos < self.len {
            hash = hash.wrapping_mul(prime_pow(self.len - pos));
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_filled_by_default() {
        let s = SparseBytes::new(1 << 20);
        assert_eq!(s.read(12345, 10).unwrap(), vec![0u8; 10]);
        assert_eq!(s.materialized_bytes(), 0);
    }

    #[test]
    fn write_read_across_pages() {
        let mut s = SparseBytes::new(1 << 20);
        let data: Vec<u8> = (0..200_000).map(|i| (i % 251) as u8).collect();
        assert!(s.write(PAGE_SIZE - 100, &data));
        assert_eq!(s.read(PAGE_SIZE - 100, data.len() as u64).unwrap(), data);
        // bytes around the range stay zero
        assert_eq!(s.read(0, 10).unwrap(), vec![0u8; 10]);
    }

    #[test]
    fn bounds_enforced() {
        let mut s = SparseBytes::new(100);
        assert!(!s.write(99, &[1, 2]));
        assert!(s.read(99, 2).is_none());
        assert!(s.write(98, &[1, 2]));
    }

    #[test]
    fn checksum_matches_dense_equivalent() {
        let mut sparse = SparseBytes::new(3 * PAGE_SIZE);
        assert!(sparse.write(PAGE_SIZE + 17, b"hello"));
        let mut dense = vec![0u8; (3 * PAGE_SIZE) as usize];
        dense[(PAGE_SIZE + 17) as usize..(PAGE_SIZE + 22) as usize].copy_from_slice(b"hello");
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &b in &dense {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        assert_eq!(sparse.checksum(), h);
    }
}
