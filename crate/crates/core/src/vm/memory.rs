use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perm {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perm {
    pub const RX: Perm = Perm { read: true, write: false, exec: true };
    pub const R: Perm = Perm { read: true, write: false, exec: false };
    pub const RW: Perm = Perm { read: true, write: true, exec: false };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: &'static str,
    pub base: u64,
    pub bytes: Vec<u8>,
    pub perm: Perm,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemError {
    Misaligned,
    Unmapped,
    ReadOnly,
}

/// Flat byte-addressable memory made of disjoint regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<Region>,
}

impl Memory {
    pub fn new(regions: Vec<Region>) -> Self {
        Memory { regions }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    fn locate(&self, addr: u64, len: usize) -> Result<(usize, usize), MemError> {
        let end = addr.checked_add(len as u64).ok_or(MemError::Unmapped)?;
        self.regions
            .iter()
            .position(|r| addr >= r.base && end <= r.end())
            .map(|i| (i, (addr - self.regions[i].base) as usize))
            .ok_or(MemError::Unmapped)
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Result<&[u8], MemError> {
        let (i, off) = self.locate(addr, len)?;
        let r = &self.regions[i];
        if !r.perm.read {
            return Err(MemError::ReadOnly);
        }
        Ok(&r.bytes[off..off + len])
    }

    /// Aligned 8-byte load.
    pub fn load(&self, addr: u64) -> Result<u64, MemError> {
        if !addr.is_multiple_of(8) {
            return Err(MemError::Misaligned);
        }
        let b = self.read_bytes(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Aligned 8-byte store.
    pub fn store(&mut self, addr: u64, value: u64) -> Result<(), MemError> {
        if !addr.is_multiple_of(8) {
            return Err(MemError::Misaligned);
        }
        self.write_bytes(addr, &value.to_le_bytes())
    }

    /// Unaligned write; only writable regions accept it.
    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemError> {
        let (i, off) = self.locate(addr, bytes.len())?;
        let r = &mut self.regions[i];
        if !r.perm.write {
            return Err(MemError::ReadOnly);
        }
        r.bytes[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Digest over every non-writable region.
    pub fn readonly_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for r in self.regions.iter().filter(|r| !r.perm.write) {
            h.write_u64(r.base);
            h.write(&r.bytes);
        }
        h.finish()
    }
}
