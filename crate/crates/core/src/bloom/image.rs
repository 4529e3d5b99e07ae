//! Binary metadata image: header, descriptor table, filter bit region.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BRLF"
//! 4       2     version (1)
//! 6       1     k
//! 7       1     reserved (0)
//! 8       8     seed1
//! 16      8     seed2
//! 24      4     entry_count
//! 28      12*n  descriptors {sid_t u32, offset_bytes u32, m_bits u32}, ascending sid_t
//! ...           bit region
//! ```
//!
//! All integers are little-endian. Filter bit `b` is bit `b % 64` of the
//! little-endian word `b / 64` of the filter's range.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{for_each_position, min_bits_for, size_filter, BloomFilter, FilterParams, MAX_K};
use crate::ir::Sid;

pub const MAGIC: [u8; 4] = *b"BRLF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;
pub const DESCRIPTOR_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub sid_t: u32,
    /// Offset into the bit region.
    pub offset_bytes: u32,
    pub m_bits: u32,
}

impl Descriptor {
    fn byte_len(&self) -> usize {
        (self.m_bits / 8) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataImage {
    pub k: u8,
    pub seed1: u64,
    pub seed2: u64,
    pub descriptors: Vec<Descriptor>,
    pub bit_region: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed metadata at byte {offset}: {kind}")]
pub struct ImageError {
    pub offset: usize,
    pub kind: ImageErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageErrorKind {
    #[error("truncated, {needed} bytes required")]
    Truncated { needed: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("hash count {0} outside 1..=8")]
    BadHashCount(u8),
    #[error("reserved byte is {0}")]
    Reserved(u8),
    #[error("target SID {0} is invalid")]
    BadSid(u32),
    #[error("descriptors not strictly ascending at SID {0}")]
    Unsorted(u32),
    #[error("filter width {0} is not a positive multiple of 64")]
    BadWidth(u32),
    #[error("filter offset {0} is not 8-byte aligned")]
    Misaligned(u32),
    #[error("filter for SID {0} overlaps another filter")]
    Overlap(u32),
}

fn fail(offset: usize, kind: ImageErrorKind) -> ImageError {
    ImageError { offset, kind }
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"))
}

/// Validated, zero-copy view over serialized metadata. This is what the
/// simulator consults at `brl`.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    bytes: &'a [u8],
    count: usize,
}

impl<'a> ImageView<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, ImageError> {
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), ImageErrorKind::Truncated { needed: HEADER_LEN }));
        }
        if bytes[0..4] != MAGIC {
            return Err(fail(0, ImageErrorKind::BadMagic));
        }
        let version = u16_at(bytes, 4);
        if version != VERSION {
            return Err(fail(4, ImageErrorKind::UnsupportedVersion(version)));
        }
        if !(1..=MAX_K).contains(&bytes[6]) {
            return Err(fail(6, ImageErrorKind::BadHashCount(bytes[6])));
        }
        if bytes[7] != 0 {
            return Err(fail(7, ImageErrorKind::Reserved(bytes[7])));
        }
        let count = u32_at(bytes, 24) as usize;
        let table_end = HEADER_LEN + count * DESCRIPTOR_LEN;
        if bytes.len() < table_end {
            return Err(fail(bytes.len(), ImageErrorKind::Truncated { needed: table_end }));
        }
        let view = ImageView { bytes, count };
        let region_len = bytes.len() - table_end;
        let mut ranges = Vec::with_capacity(count);
        let mut prev = 0u32;
        for i in 0..count {
            let at = HEADER_LEN + i * DESCRIPTOR_LEN;
            let d = view.descriptor(i);
            if Sid::new(d.sid_t).is_none() {
                return Err(fail(at, ImageErrorKind::BadSid(d.sid_t)));
            }
            if i > 0 && d.sid_t <= prev {
                return Err(fail(at, ImageErrorKind::Unsorted(d.sid_t)));
            }
            prev = d.sid_t;
            if d.m_bits == 0 || !d.m_bits.is_multiple_of(64) {
                return Err(fail(at + 8, ImageErrorKind::BadWidth(d.m_bits)));
            }
            if !d.offset_bytes.is_multiple_of(8) {
                return Err(fail(at + 4, ImageErrorKind::Misaligned(d.offset_bytes)));
            }
            let end = d.offset_bytes as usize + d.byte_len();
            if end > region_len {
                return Err(fail(bytes.len(), ImageErrorKind::Truncated { needed: table_end + end }));
            }
            ranges.push((d.offset_bytes as usize, end, d.sid_t, at));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fail(w[1].3, ImageErrorKind::Overlap(w[1].2)));
            }
        }
        Ok(view)
    }

    /// View over bytes that already passed [`ImageView::new`] and cannot
    /// have changed since.
    pub(crate) fn trusted(bytes: &'a [u8]) -> Self {
        ImageView { bytes, count: u32_at(bytes, 24) as usize }
    }

    pub fn k(&self) -> u8 {
        self.bytes[6]
    }

    pub fn seeds(&self) -> (u64, u64) {
        (u64_at(self.bytes, 8), u64_at(self.bytes, 16))
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn descriptor(&self, i: usize) -> Descriptor {
        let at = HEADER_LEN + i * DESCRIPTOR_LEN;
        Descriptor {
            sid_t: u32_at(self.bytes, at),
            offset_bytes: u32_at(self.bytes, at + 4),
            m_bits: u32_at(self.bytes, at + 8),
        }
    }

    fn region_start(&self) -> usize {
        HEADER_LEN + self.count * DESCRIPTOR_LEN
    }

    /// Binary search of the descriptor table.
    pub fn lookup(&self, sid_t: u32) -> Option<Descriptor> {
        let (mut lo, mut hi) = (0, self.count);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let d = self.descriptor(mid);
            match d.sid_t.cmp(&sid_t) {
                std::cmp::Ordering::Equal => return Some(d),
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
            }
        }
        None
    }

    /// Membership of `src` in the filter behind `d`, with the bit-read count.
    pub fn probe(&self, d: &Descriptor, src: Sid) -> (bool, u32) {
        let base = self.region_start() + d.offset_bytes as usize;
        let (s1, s2) = self.seeds();
        let mut all = true;
        let mut reads = 0;
        for_each_position(src, d.m_bits, self.k(), s1, s2, |b| {
            reads += 1;
            let word = u64_at(self.bytes, base + (b / 64) as usize * 8);
            all &= word >> (b % 64) & 1 == 1;
        });
        (all, reads)
    }
}

impl MetadataImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.k);
        out.push(0);
        out.extend_from_slice(&self.seed1.to_le_bytes());
        out.extend_from_slice(&self.seed2.to_le_bytes());
        out.extend_from_slice(&(self.descriptors.len() as u32).to_le_bytes());
        for d in &self.descriptors {
            out.extend_from_slice(&d.sid_t.to_le_bytes());
            out.extend_from_slice(&d.offset_bytes.to_le_bytes());
            out.extend_from_slice(&d.m_bits.to_le_bytes());
        }
        out.extend_from_slice(&self.bit_region);
        out
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.descriptors.len() * DESCRIPTOR_LEN + self.bit_region.len()
    }

    pub fn parse(bytes: &[u8]) -> Result<MetadataImage, ImageError> {
        let view = ImageView::new(bytes)?;
        let (seed1, seed2) = view.seeds();
        Ok(MetadataImage {
            k: view.k(),
            seed1,
            seed2,
            descriptors: (0..view.len()).map(|i| view.descriptor(i)).collect(),
            bit_region: bytes[view.region_start()..].to_vec(),
        })
    }

    /// Descriptor for `sid_t`; fails if the image itself is malformed.
    pub fn lookup_descriptor(&self, sid_t: Sid) -> Result<Option<Descriptor>, ImageError> {
        let bytes = self.to_bytes();
        let view = ImageView::new(&bytes)?;
        Ok(view.lookup(sid_t.get()))
    }

    /// Reconstructs the filter stored for `sid_t`.
    pub fn filter(&self, sid_t: Sid) -> Option<BloomFilter> {
        let d = self.descriptors.iter().find(|d| d.sid_t == sid_t.get())?;
        let params = FilterParams { m: d.m_bits, k: self.k, seed1: self.seed1, seed2: self.seed2 };
        let mut f = BloomFilter::empty(params);
        let start = d.offset_bytes as usize;
        for (i, w) in f.words.iter_mut().enumerate() {
            *w = u64_at(&self.bit_region, start + i * 8);
        }
        f.n_inserted = usize::MAX; // unknown after serialization
        Some(f)
    }
}

/// Builds the image for `targets` (SID_T to allowed source SIDs). One global
/// `k` (the largest any target would pick alone); each target then gets the
/// smallest `m` meeting `target_fp` under that `k`.
pub fn build_image(targets: &BTreeMap<Sid, BTreeSet<Sid>>, target_fp: f64, seeds: (u64, u64)) -> MetadataImage {
    let k = targets.values().map(|s| size_filter(s.len(), target_fp).k).max().unwrap_or(1);
    let mut descriptors = Vec::with_capacity(targets.len());
    let mut bit_region = Vec::new();
    for (sid_t, sources) in targets {
        let m = min_bits_for(sources.len(), k, target_fp);
        let f = BloomFilter::encode(sources, FilterParams { m, k, seed1: seeds.0, seed2: seeds.1 });
        descriptors.push(Descriptor { sid_t: sid_t.get(), offset_bytes: bit_region.len() as u32, m_bits: m });
        for w in f.words() {
            bit_region.extend_from_slice(&w.to_le_bytes());
        }
    }
    MetadataImage { k, seed1: seeds.0, seed2: seeds.1, descriptors, bit_region }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(v: u32) -> Sid {
        Sid::new(v).unwrap()
    }

    fn set(v: &[u32]) -> BTreeSet<Sid> {
        v.iter().map(|&x| sid(x)).collect()
    }

    pub(crate) fn two_target() -> MetadataImage {
        let mut t = BTreeMap::new();
        t.insert(sid(9), set(&[4]));
        t.insert(sid(5), set(&[1, 2, 3]));
        build_image(&t, 1e-3, (0x1234, 0x5678))
    }

    #[test]
    fn single_target_of_eight() {
        let mut t = BTreeMap::new();
        t.insert(sid(3), (10..18).map(sid).collect());
        let img = build_image(&t, 1e-3, (1, 2));
        assert_eq!(img.k, 8);
        assert_eq!(img.descriptors.len(), 1);
        assert_eq!(img.descriptors[0].m_bits, 128);
        let f = img.filter(sid(3)).unwrap();
        for s in 10..18 {
            assert!(f.query(sid(s)));
        }
    }

    #[test]
    fn zero_targets_is_header_only() {
        let img = build_image(&BTreeMap::new(), 1e-3, (0, 0));
        assert!(img.descriptors.is_empty());
        assert!(img.bit_region.is_empty());
        let bytes = img.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(MetadataImage::parse(&bytes).unwrap(), img);
    }

    #[test]
    fn deterministic_and_sorted() {
        let a = two_target().to_bytes();
        let b = two_target().to_bytes();
        assert_eq!(a, b);
        let img = two_target();
        assert_eq!(img.descriptors.iter().map(|d| d.sid_t).collect::<Vec<_>>(), vec![5, 9]);
        assert_eq!(MetadataImage::parse(&a).unwrap(), img);
    }

    #[test]
    fn lookup_known_and_unknown() {
        let img = two_target();
        let d = img.lookup_descriptor(sid(9)).unwrap().unwrap();
        assert_eq!(d.sid_t, 9);
        assert_eq!(d.offset_bytes, img.descriptors[0].m_bits / 8);
        assert_eq!(img.lookup_descriptor(sid(6)).unwrap(), None);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut img = two_target();
        img.descriptors[1].offset_bytes = 0;
        let e = img.lookup_descriptor(sid(5)).unwrap_err();
        assert!(matches!(e.kind, ImageErrorKind::Overlap(_)));
    }

    #[test]
    fn parse_rejects_bad_headers() {
        let good = two_target().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(MetadataImage::parse(&bad).unwrap_err().kind, ImageErrorKind::BadMagic);
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(MetadataImage::parse(&bad).unwrap_err(), fail(4, ImageErrorKind::UnsupportedVersion(2)));
        let mut bad = good.clone();
        bad[6] = 9;
        assert_eq!(MetadataImage::parse(&bad).unwrap_err().offset, 6);
        let mut bad = good.clone();
        // swap descriptor SIDs so the table is unsorted
        bad[28..32].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(MetadataImage::parse(&bad).unwrap_err().kind, ImageErrorKind::Unsorted(9)));
        assert!(matches!(MetadataImage::parse(&good[..10]).unwrap_err().kind, ImageErrorKind::Truncated { .. }));
    }

    #[test]
    fn truncated_bit_region_reports_offset() {
        let img = two_target();
        let bytes = img.to_bytes();
        let cut = &bytes[..bytes.len() - 8];
        let e = MetadataImage::parse(cut).unwrap_err();
        let table_end = HEADER_LEN + 2 * DESCRIPTOR_LEN;
        let last = img.descriptors[1];
        assert_eq!(e.offset, cut.len());
        assert_eq!(
            e.kind,
            ImageErrorKind::Truncated { needed: table_end + last.offset_bytes as usize + last.m_bits as usize / 8 }
        );
    }

    #[test]
    fn view_probe_matches_filter() {
        let img = two_target();
        let bytes = img.to_bytes();
        let view = ImageView::new(&bytes).unwrap();
        for t in [5u32, 9] {
            let d = view.lookup(t).unwrap();
            let f = img.filter(sid(t)).unwrap();
            for s in 1..500 {
                let (hit, reads) = view.probe(&d, sid(s));
                assert_eq!(hit, f.query(sid(s)));
                assert_eq!(reads, u32::from(img.k));
            }
        }
    }
}
