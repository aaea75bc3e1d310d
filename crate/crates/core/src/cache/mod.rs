//! Hierarchical activation store: a memory tier in front of a disk tier,
//! least-recently-used demotion, and reference-counted pins that keep
//! in-flight entries resident.
//!
//! Entries are whole per-(template, step, block, variant) blobs. Memory
//! pressure demotes the least recently touched unpinned entry to disk; disk
//! pressure drops the least recently touched disk entry.

pub mod format;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latmodel::CacheVariant;

pub use format::{blob_digest, decode_entry, encode_entry};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryKey {
    pub template_id: String,
    pub step: u32,
    pub block: u32,
    pub variant: CacheVariant,
}

impl EntryKey {
    pub fn new(
        template_id: impl Into<String>,
        block: u32,
        step: u32,
        variant: CacheVariant,
    ) -> EntryKey {
        EntryKey {
            template_id: template_id.into(),
            step,
            block,
            variant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Memory,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActivationCacheEntry {
    pub key: EntryKey,
    pub size_bytes: u64,
    pub tier: Tier,
    pub pinned: u32,
    /// Logical access time; larger is more recent.
    pub last_touch: u64,
    #[serde(skip)]
    pub digest: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheBudget {
    pub memory_capacity_bytes: u64,
    pub disk_capacity_bytes: u64,
    pub memory_used: u64,
    pub disk_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits_mem: u64,
    pub hits_disk: u64,
    pub misses: u64,
    pub evictions_mem_to_disk: u64,
    pub evictions_dropped: u64,
    pub bytes_moved: u64,
}

/// Activation payload. Simulated stores keep only the declared size and
/// materialise zeros on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    size: u64,
    data: Option<Arc<[u8]>>,
}

impl Blob {
    pub fn from_vec(v: Vec<u8>) -> Blob {
        Blob {
            size: v.len() as u64,
            data: Some(v.into()),
        }
    }

    pub fn zeroed(size: u64) -> Blob {
        Blob { size, data: None }
    }

    pub fn len(&self) -> u64 {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn as_slice(&self) -> Option<&[u8]> {
        self.data.as_deref()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        match &self.data {
            Some(d) => d.to_vec(),
            None => vec![0; self.size as usize],
        }
    }

    fn digest(&self) -> [u8; 32] {
        match &self.data {
            Some(d) => blob_digest(d),
            None => [0; 32],
        }
    }
}

/// Where demoted entries live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Storage {
    /// One file per entry in this directory.
    Directory(PathBuf),
    /// Metadata only; nothing touches the filesystem.
    Simulated,
}

#[derive(Debug)]
struct Slot {
    entry: ActivationCacheEntry,
    /// Present while the entry is in the memory tier.
    payload: Option<Blob>,
}

#[derive(Debug)]
struct Inner {
    slots: BTreeMap<EntryKey, Slot>,
    mem_lru: BTreeMap<u64, EntryKey>,
    disk_lru: BTreeMap<u64, EntryKey>,
    budget: CacheBudget,
    stats: CacheStats,
    tick: u64,
}

/// Shared handle to the store; clones refer to the same cache.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    inner: Arc<Mutex<Inner>>,
    storage: Arc<Storage>,
}

/// Outcome of a [`ActivationCache::prefetch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefetchOutcome {
    /// Entries promoted from disk.
    Promoted {
        entries: usize,
        bytes: u64,
    },
    AlreadyResident,
    /// Nothing is cached for the template; callers compute from scratch.
    Miss,
}

pub struct PrefetchHandle {
    state: PrefetchState,
}

enum PrefetchState {
    Ready(Result<PrefetchOutcome>),
    Running(JoinHandle<Result<PrefetchOutcome>>),
    Taken,
}

impl PrefetchHandle {
    pub fn is_done(&self) -> bool {
        match &self.state {
            PrefetchState::Running(h) => h.is_finished(),
            _ => true,
        }
    }

    pub fn wait(mut self) -> Result<PrefetchOutcome> {
        match std::mem::replace(&mut self.state, PrefetchState::Taken) {
            PrefetchState::Ready(r) => r,
            PrefetchState::Running(h) => h
                .join()
                .map_err(|_| Error::State("prefetch thread panicked".into()))?,
            PrefetchState::Taken => Err(Error::State("prefetch result already taken".into())),
        }
    }
}

/// Keeps an entry pinned in memory until released or dropped. May be
/// released from a different thread than the one that acquired it.
#[derive(Debug)]
pub struct PinGuard {
    cache: ActivationCache,
    key: Option<EntryKey>,
}

impl PinGuard {
    pub fn key(&self) -> &EntryKey {
        self.key.as_ref().expect("guard holds a key until released")
    }

    pub fn release(mut self) {
        self.unpin();
    }

    fn unpin(&mut self) {
        if let Some(key) = self.key.take() {
            let mut inner = self.cache.lock();
            if let Some(slot) = inner.slots.get_mut(&key) {
                slot.entry.pinned = slot.entry.pinned.saturating_sub(1);
            }
        }
    }
}

impl Drop for PinGuard {
    fn drop(&mut self) {
        self.unpin();
    }
}

/// Footprint of a template's entries over a step range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Residency {
    pub memory_entries: usize,
    pub memory_bytes: u64,
    pub disk_entries: usize,
    pub disk_bytes: u64,
}

impl Residency {
    pub fn entries(&self) -> usize {
        self.memory_entries + self.disk_entries
    }
}

impl ActivationCache {
    pub fn new(
        memory_capacity_bytes: u64,
        disk_capacity_bytes: u64,
        storage: Storage,
    ) -> Result<ActivationCache> {
        if let Storage::Directory(dir) = &storage {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(ActivationCache {
            inner: Arc::new(Mutex::new(Inner {
                slots: BTreeMap::new(),
                mem_lru: BTreeMap::new(),
                disk_lru: BTreeMap::new(),
                budget: CacheBudget {
                    memory_capacity_bytes,
                    disk_capacity_bytes,
                    memory_used: 0,
                    disk_used: 0,
                },
                stats: CacheStats::default(),
                tick: 0,
            })),
            storage: Arc::new(storage),
        })
    }

    pub fn simulated(memory_capacity_bytes: u64, disk_capacity_bytes: u64) -> ActivationCache {
        ActivationCache::new(
            memory_capacity_bytes,
            disk_capacity_bytes,
            Storage::Simulated,
        )
        .expect("simulated storage has no I/O")
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn path_for(&self, key: &EntryKey) -> Option<PathBuf> {
        match &*self.storage {
            Storage::Directory(dir) => Some(dir.join(format::file_name(key))),
            Storage::Simulated => None,
        }
    }

    pub fn storage_dir(&self) -> Option<&Path> {
        match &*self.storage {
            Storage::Directory(d) => Some(d),
            Storage::Simulated => None,
        }
    }

    /// Path of the disk file backing `key`, if the store is on disk.
    pub fn entry_path(&self, key: &EntryKey) -> Option<PathBuf> {
        self.path_for(key)
    }

    pub fn budget(&self) -> CacheBudget {
        self.lock().budget
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats
    }

    pub fn entry(&self, key: &EntryKey) -> Option<ActivationCacheEntry> {
        self.lock().slots.get(key).map(|s| s.entry.clone())
    }

    pub fn len(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `blob` in memory, demoting older entries as needed.
    pub fn put(&self, key: EntryKey, blob: Blob) -> Result<ActivationCacheEntry> {
        let mut inner = self.lock();
        let size = blob.len();
        if size > inner.budget.memory_capacity_bytes {
            return Err(Error::Capacity(format!(
                "blob of {size} bytes exceeds memory capacity {}",
                inner.budget.memory_capacity_bytes
            )));
        }
        if let Some(old) = inner.slots.get(&key) {
            if old.entry.pinned > 0 {
                return Err(Error::State(format!(
                    "cannot overwrite pinned entry {key:?}"
                )));
            }
        }
        let reclaimable = inner.slots.get(&key).map_or(0, |s| {
            if s.entry.tier == Tier::Memory {
                s.entry.size_bytes
            } else {
                0
            }
        });
        self.ensure_memory(&mut inner, size, reclaimable, Some(&key))?;
        self.remove_locked(&mut inner, &key)?;
        // Room may have been reclaimed from the replaced entry.
        self.ensure_memory(&mut inner, size, 0, None)?;

        inner.tick += 1;
        let tick = inner.tick;
        let entry = ActivationCacheEntry {
            key: key.clone(),
            size_bytes: size,
            tier: Tier::Memory,
            pinned: 0,
            last_touch: tick,
            digest: blob.digest(),
        };
        inner.budget.memory_used += size;
        inner.mem_lru.insert(tick, key.clone());
        inner.slots.insert(
            key,
            Slot {
                entry: entry.clone(),
                payload: Some(blob),
            },
        );
        Ok(entry)
    }

    /// Returns the blob and a pin. Disk hits are promoted synchronously.
    pub fn get_pinned(&self, key: &EntryKey) -> Result<Option<(Blob, PinGuard)>> {
        let mut inner = self.lock();
        let Some(tier) = inner.slots.get(key).map(|s| s.entry.tier) else {
            inner.stats.misses += 1;
            return Ok(None);
        };
        match tier {
            Tier::Memory => inner.stats.hits_mem += 1,
            Tier::Disk => {
                self.promote_locked(&mut inner, key)?;
                inner.stats.hits_disk += 1;
            }
        }
        self.touch(&mut inner, key);
        let slot = inner.slots.get_mut(key).expect("present");
        slot.entry.pinned += 1;
        let blob = slot.payload.clone().expect("memory-resident");
        drop(inner);
        Ok(Some((
            blob,
            PinGuard {
                cache: self.clone(),
                key: Some(key.clone()),
            },
        )))
    }

    /// Promotes every disk entry of `template_id` with step in `steps` on a
    /// background thread.
    pub fn prefetch(&self, template_id: &str, steps: Range<u32>) -> PrefetchHandle {
        let keys = self.template_keys(template_id, steps);
        if keys.is_empty() {
            return PrefetchHandle {
                state: PrefetchState::Ready(Ok(PrefetchOutcome::Miss)),
            };
        }
        let cache = self.clone();
        let handle = std::thread::spawn(move || cache.promote_keys(&keys));
        PrefetchHandle {
            state: PrefetchState::Running(handle),
        }
    }

    /// Synchronous form of [`prefetch`](Self::prefetch).
    pub fn promote_template(
        &self,
        template_id: &str,
        steps: Range<u32>,
    ) -> Result<PrefetchOutcome> {
        let keys = self.template_keys(template_id, steps);
        if keys.is_empty() {
            return Ok(PrefetchOutcome::Miss);
        }
        self.promote_keys(&keys)
    }

    fn promote_keys(&self, keys: &[EntryKey]) -> Result<PrefetchOutcome> {
        let mut entries = 0;
        let mut bytes = 0;
        for key in keys {
            let mut inner = self.lock();
            let on_disk = inner
                .slots
                .get(key)
                .map(|s| (s.entry.tier == Tier::Disk, s.entry.size_bytes));
            if let Some((true, size)) = on_disk {
                self.promote_locked(&mut inner, key)?;
                self.touch(&mut inner, key);
                entries += 1;
                bytes += size;
            }
        }
        Ok(if entries == 0 {
            PrefetchOutcome::AlreadyResident
        } else {
            PrefetchOutcome::Promoted { entries, bytes }
        })
    }

    fn template_keys(&self, template_id: &str, steps: Range<u32>) -> Vec<EntryKey> {
        let lo = EntryKey::new(template_id, 0, steps.start, CacheVariant::Y);
        let inner = self.lock();
        inner
            .slots
            .range(lo..)
            .take_while(|(k, _)| k.template_id == template_id && k.step < steps.end)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn residency(&self, template_id: &str, steps: Range<u32>) -> Residency {
        let lo = EntryKey::new(template_id, 0, steps.start, CacheVariant::Y);
        let inner = self.lock();
        let mut r = Residency::default();
        for (_, s) in inner
            .slots
            .range(lo..)
            .take_while(|(k, _)| k.template_id == template_id && k.step < steps.end)
        {
            match s.entry.tier {
                Tier::Memory => {
                    r.memory_entries += 1;
                    r.memory_bytes += s.entry.size_bytes;
                }
                Tier::Disk => {
                    r.disk_entries += 1;
                    r.disk_bytes += s.entry.size_bytes;
                }
            }
        }
        r
    }

    /// Whether any entry of `template_id` is stored in either tier.
    pub fn has_template(&self, template_id: &str) -> bool {
        let lo = EntryKey::new(template_id, 0, 0, CacheVariant::Y);
        let inner = self.lock();
        inner
            .slots
            .range(lo..)
            .next()
            .is_some_and(|(k, _)| k.template_id == template_id)
    }

    /// `out[b]` is true when block `b` of `(template_id, step)` is in memory.
    pub fn resident_blocks(
        &self,
        template_id: &str,
        step: u32,
        variant: CacheVariant,
        n_blocks: usize,
    ) -> Vec<bool> {
        let mut out = vec![false; n_blocks];
        let lo = EntryKey::new(template_id, 0, step, variant);
        let inner = self.lock();
        for (k, s) in inner
            .slots
            .range(lo..)
            .take_while(|(k, _)| k.template_id == template_id && k.step == step)
        {
            if k.variant == variant && s.entry.tier == Tier::Memory {
                if let Some(slot) = out.get_mut(k.block as usize) {
                    *slot = true;
                }
            }
        }
        out
    }

    /// Counts a memory hit and refreshes recency for each block `b` with
    /// `used[b]` that is memory-resident. Returns the number of hits.
    pub fn record_use(
        &self,
        template_id: &str,
        step: u32,
        variant: CacheVariant,
        used: &[bool],
    ) -> usize {
        let mut inner = self.lock();
        let mut hits = 0;
        for (block, _) in used.iter().enumerate().filter(|(_, u)| **u) {
            let key = EntryKey::new(template_id, block as u32, step, variant);
            if inner
                .slots
                .get(&key)
                .is_some_and(|s| s.entry.tier == Tier::Memory)
            {
                inner.stats.hits_mem += 1;
                self.touch(&mut inner, &key);
                hits += 1;
            }
        }
        hits
    }

    /// Unpinned memory entries ordered from least to most recently touched.
    pub fn lru_order(&self) -> Vec<EntryKey> {
        let inner = self.lock();
        inner
            .mem_lru
            .values()
            .filter(|k| inner.slots[*k].entry.pinned == 0)
            .cloned()
            .collect()
    }

    fn touch(&self, inner: &mut Inner, key: &EntryKey) {
        inner.tick += 1;
        let tick = inner.tick;
        let slot = inner.slots.get_mut(key).expect("present");
        let old = std::mem::replace(&mut slot.entry.last_touch, tick);
        let tier = slot.entry.tier;
        let lru = match tier {
            Tier::Memory => &mut inner.mem_lru,
            Tier::Disk => &mut inner.disk_lru,
        };
        lru.remove(&old);
        lru.insert(tick, key.clone());
    }

    /// Makes room for `size` more bytes in memory, assuming `reclaimable`
    /// bytes will be freed by the caller. Fails without side effects when
    /// pinned entries make that impossible.
    fn ensure_memory(
        &self,
        inner: &mut Inner,
        size: u64,
        reclaimable: u64,
        skip: Option<&EntryKey>,
    ) -> Result<()> {
        let cap = inner.budget.memory_capacity_bytes;
        let used = inner.budget.memory_used - reclaimable;
        if used + size <= cap {
            return Ok(());
        }
        let need = used + size - cap;
        let evictable: u64 = inner
            .mem_lru
            .values()
            .filter(|k| Some(*k) != skip)
            .map(|k| &inner.slots[k].entry)
            .filter(|e| e.pinned == 0)
            .map(|e| e.size_bytes)
            .sum();
        if evictable < need {
            return Err(Error::Capacity(format!(
                "need {need} bytes of memory but only {evictable} are evictable"
            )));
        }
        let mut freed = 0;
        while freed < need {
            let victim = inner
                .mem_lru
                .values()
                .find(|k| Some(*k) != skip && inner.slots[*k].entry.pinned == 0)
                .cloned()
                .expect("evictable bytes were counted");
            freed += self.demote_locked(inner, &victim)?;
        }
        Ok(())
    }

    fn demote_locked(&self, inner: &mut Inner, key: &EntryKey) -> Result<u64> {
        let slot = inner.slots.get_mut(key).expect("present");
        debug_assert_eq!(slot.entry.pinned, 0);
        let blob = slot.payload.take().expect("memory-resident");
        let size = slot.entry.size_bytes;
        let touch = slot.entry.last_touch;
        if let Some(path) = self.path_for(key) {
            let bytes = encode_entry(key, &blob.to_vec())?;
            if let Err(e) = std::fs::write(&path, bytes) {
                inner.slots.get_mut(key).expect("present").payload = Some(blob);
                return Err(Error::io(path, e));
            }
        }
        slot.entry.tier = Tier::Disk;
        inner.mem_lru.remove(&touch);
        inner.disk_lru.insert(touch, key.clone());
        inner.budget.memory_used -= size;
        inner.budget.disk_used += size;
        inner.stats.evictions_mem_to_disk += 1;
        inner.stats.bytes_moved += size;
        self.enforce_disk(inner)?;
        Ok(size)
    }

    fn enforce_disk(&self, inner: &mut Inner) -> Result<()> {
        while inner.budget.disk_used > inner.budget.disk_capacity_bytes {
            let (_, victim) = inner
                .disk_lru
                .pop_first()
                .expect("disk usage implies disk entries");
            let slot = inner.slots.remove(&victim).expect("present");
            inner.budget.disk_used -= slot.entry.size_bytes;
            inner.stats.evictions_dropped += 1;
            if let Some(path) = self.path_for(&victim) {
                let _ = std::fs::remove_file(path);
            }
        }
        Ok(())
    }

    fn promote_locked(&self, inner: &mut Inner, key: &EntryKey) -> Result<()> {
        let (size, digest) = {
            let e = &inner.slots[key].entry;
            (e.size_bytes, e.digest)
        };
        let blob = match self.path_for(key) {
            Some(path) => {
                let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let (file_key, bytes) = decode_entry(&raw)?;
                if &file_key != key {
                    return Err(Error::Integrity(format!(
                        "{} holds a different key",
                        path.display()
                    )));
                }
                if blob_digest(&bytes) != digest {
                    return Err(Error::Integrity(format!(
                        "{} blob digest changed",
                        path.display()
                    )));
                }
                Blob::from_vec(bytes)
            }
            None => Blob::zeroed(size),
        };
        // Off the disk books first, so demotions that make room cannot drop it.
        let touch = inner.slots[key].entry.last_touch;
        inner.disk_lru.remove(&touch);
        inner.budget.disk_used -= size;
        if let Err(e) = self.ensure_memory(inner, size, 0, Some(key)) {
            inner.disk_lru.insert(touch, key.clone());
            inner.budget.disk_used += size;
            return Err(e);
        }
        let slot = inner.slots.get_mut(key).expect("present");
        slot.payload = Some(blob);
        slot.entry.tier = Tier::Memory;
        inner.mem_lru.insert(touch, key.clone());
        inner.budget.memory_used += size;
        inner.stats.bytes_moved += size;
        if let Some(path) = self.path_for(key) {
            let _ = std::fs::remove_file(path);
        }
        Ok(())
    }

    fn remove_locked(&self, inner: &mut Inner, key: &EntryKey) -> Result<()> {
        if let Some(slot) = inner.slots.remove(key) {
            match slot.entry.tier {
                Tier::Memory => {
                    inner.mem_lru.remove(&slot.entry.last_touch);
                    inner.budget.memory_used -= slot.entry.size_bytes;
                }
                Tier::Disk => {
                    inner.disk_lru.remove(&slot.entry.last_touch);
                    inner.budget.disk_used -= slot.entry.size_bytes;
                    if let Some(path) = self.path_for(key) {
                        let _ = std::fs::remove_file(path);
                    }
                }
            }
        }
        Ok(())
    }

    /// Entries per tier, for invariant checks.
    pub fn snapshot_entries(&self) -> HashMap<EntryKey, ActivationCacheEntry> {
        self.lock()
            .slots
            .iter()
            .map(|(k, s)| (k.clone(), s.entry.clone()))
            .collect()
    }
}
