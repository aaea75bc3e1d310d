#![allow(dead_code)]

//! Two plain lists standing in for the tiered cache: memory in recency
//! order, disk in recency order of each entry's last touch.

use maskserve_core::cache::{ActivationCache, Blob, EntryKey, Tier};
use maskserve_core::latmodel::CacheVariant;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Put(u32, u64),
    /// Read and keep the pin.
    Hold(u32),
    /// Read and release at once.
    Get(u32),
    /// Release the i-th outstanding pin, modulo their count.
    Release(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Miss,
    Err,
}

#[derive(Debug, Clone)]
struct Item {
    key: u32,
    size: u64,
    touch: u64,
    pins: u32,
}

#[derive(Debug, Clone)]
pub struct RefCache {
    mem_cap: u64,
    disk_cap: u64,
    clock: u64,
    /// Least recent first.
    mem: Vec<Item>,
    /// Ordered by `touch`, least recent first.
    disk: Vec<Item>,
    held: Vec<u32>,
}

impl RefCache {
    pub fn new(mem_cap: u64, disk_cap: u64) -> RefCache {
        RefCache {
            mem_cap,
            disk_cap,
            clock: 0,
            mem: Vec::new(),
            disk: Vec::new(),
            held: Vec::new(),
        }
    }

    fn mem_used(&self) -> u64 {
        self.mem.iter().map(|i| i.size).sum()
    }

    fn disk_used(&self) -> u64 {
        self.disk.iter().map(|i| i.size).sum()
    }

    fn demote(&mut self, pos: usize) {
        let item = self.mem.remove(pos);
        let at = self.disk.partition_point(|d| d.touch < item.touch);
        self.disk.insert(at, item);
        while self.disk_used() > self.disk_cap {
            self.disk.remove(0);
        }
    }

    /// Room for `size` more bytes, never evicting `skip` or pinned items.
    fn make_room(&mut self, size: u64, reclaim: u64, skip: Option<u32>) -> bool {
        let used = self.mem_used() - reclaim;
        if used + size <= self.mem_cap {
            return true;
        }
        let need = used + size - self.mem_cap;
        let evictable: u64 = self
            .mem
            .iter()
            .filter(|i| Some(i.key) != skip && i.pins == 0)
            .map(|i| i.size)
            .sum();
        if evictable < need {
            return false;
        }
        let mut freed = 0;
        while freed < need {
            let pos = self
                .mem
                .iter()
                .position(|i| Some(i.key) != skip && i.pins == 0)
                .expect("counted");
            freed += self.mem[pos].size;
            self.demote(pos);
        }
        true
    }

    fn put(&mut self, key: u32, size: u64) -> Outcome {
        if size > self.mem_cap {
            return Outcome::Err;
        }
        if self.mem.iter().any(|i| i.key == key && i.pins > 0) {
            return Outcome::Err;
        }
        let reclaim = self.mem.iter().find(|i| i.key == key).map_or(0, |i| i.size);
        if !self.make_room(size, reclaim, Some(key)) {
            return Outcome::Err;
        }
        self.mem.retain(|i| i.key != key);
        self.disk.retain(|i| i.key != key);
        self.clock += 1;
        self.mem.push(Item {
            key,
            size,
            touch: self.clock,
            pins: 0,
        });
        Outcome::Ok
    }

    fn read(&mut self, key: u32, hold: bool) -> Outcome {
        if let Some(pos) = self.disk.iter().position(|i| i.key == key) {
            let item = self.disk.remove(pos);
            if !self.make_room(item.size, 0, Some(key)) {
                let at = self.disk.partition_point(|d| d.touch < item.touch);
                self.disk.insert(at, item);
                return Outcome::Err;
            }
            self.mem.push(item);
        }
        let Some(pos) = self.mem.iter().position(|i| i.key == key) else {
            return Outcome::Miss;
        };
        let mut item = self.mem.remove(pos);
        self.clock += 1;
        item.touch = self.clock;
        if hold {
            item.pins += 1;
            self.held.push(key);
        }
        self.mem.push(item);
        Outcome::Ok
    }

    fn release(&mut self, i: usize) -> Outcome {
        if self.held.is_empty() {
            return Outcome::Miss;
        }
        let key = self.held.remove(i % self.held.len());
        let item = self
            .mem
            .iter_mut()
            .find(|it| it.key == key)
            .expect("pinned stays in memory");
        item.pins -= 1;
        Outcome::Ok
    }

    pub fn apply(&mut self, op: Op) -> Outcome {
        match op {
            Op::Put(k, s) => self.put(k, s),
            Op::Hold(k) => self.read(k, true),
            Op::Get(k) => self.read(k, false),
            Op::Release(i) => self.release(i),
        }
    }

    pub fn memory_keys(&self) -> Vec<u32> {
        self.mem.iter().map(|i| i.key).collect()
    }

    pub fn disk_keys(&self) -> Vec<u32> {
        self.disk.iter().map(|i| i.key).collect()
    }

    pub fn pinned_keys(&self) -> Vec<u32> {
        self.mem
            .iter()
            .filter(|i| i.pins > 0)
            .map(|i| i.key)
            .collect()
    }
}

pub fn key(i: u32) -> EntryKey {
    EntryKey::new("tmpl", i, 0, CacheVariant::Y)
}

/// The real cache driven by the same operations, holding its pins.
pub struct Driven {
    pub cache: ActivationCache,
    held: Vec<maskserve_core::cache::PinGuard>,
}

impl Driven {
    pub fn new(mem_cap: u64, disk_cap: u64) -> Driven {
        Driven {
            cache: ActivationCache::simulated(mem_cap, disk_cap),
            held: Vec::new(),
        }
    }

    pub fn apply(&mut self, op: Op) -> Outcome {
        let read =
            |r: maskserve_core::Result<Option<(Blob, maskserve_core::cache::PinGuard)>>| match r {
                Ok(Some((_, pin))) => (Outcome::Ok, Some(pin)),
                Ok(None) => (Outcome::Miss, None),
                Err(_) => (Outcome::Err, None),
            };
        match op {
            Op::Put(k, s) => match self.cache.put(key(k), Blob::zeroed(s)) {
                Ok(_) => Outcome::Ok,
                Err(_) => Outcome::Err,
            },
            Op::Hold(k) => {
                let (o, pin) = read(self.cache.get_pinned(&key(k)));
                self.held.extend(pin);
                o
            }
            Op::Get(k) => read(self.cache.get_pinned(&key(k))).0,
            Op::Release(i) => {
                if self.held.is_empty() {
                    return Outcome::Miss;
                }
                let n = self.held.len();
                self.held.remove(i % n).release();
                Outcome::Ok
            }
        }
    }

    fn keys_by_touch(&self, tier: Tier) -> Vec<u32> {
        let mut v: Vec<_> = self
            .cache
            .snapshot_entries()
            .into_values()
            .filter(|e| e.tier == tier)
            .map(|e| (e.last_touch, e.key.block))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, k)| k).collect()
    }

    pub fn memory_keys(&self) -> Vec<u32> {
        self.keys_by_touch(Tier::Memory)
    }

    pub fn disk_keys(&self) -> Vec<u32> {
        self.keys_by_touch(Tier::Disk)
    }
}

pub fn random_op<R: Rng>(rng: &mut R, keys: u32, max_size: u64) -> Op {
    match rng.random_range(0..10) {
        0..=3 => Op::Put(rng.random_range(0..keys), rng.random_range(1..=max_size)),
        4 | 5 => Op::Hold(rng.random_range(0..keys)),
        6..=8 => Op::Get(rng.random_range(0..keys)),
        _ => Op::Release(rng.random_range(0..8)),
    }
}

/// Runs `ops` on both and returns the first divergence.
pub fn check_sequence(ops: &[Op], mem_cap: u64, disk_cap: u64) -> Result<(), String> {
    let mut model = RefCache::new(mem_cap, disk_cap);
    let mut real = Driven::new(mem_cap, disk_cap);
    for (n, op) in ops.iter().enumerate() {
        let want = model.apply(*op);
        let got = real.apply(*op);
        if want != got {
            return Err(format!("op {n} {op:?}: reference {want:?}, cache {got:?}"));
        }
        if model.memory_keys() != real.memory_keys() {
            return Err(format!(
                "op {n} {op:?}: memory order {:?} vs {:?}",
                model.memory_keys(),
                real.memory_keys()
            ));
        }
        if model.disk_keys() != real.disk_keys() {
            return Err(format!(
                "op {n} {op:?}: disk order {:?} vs {:?}",
                model.disk_keys(),
                real.disk_keys()
            ));
        }
        let entries = real.cache.snapshot_entries();
        for k in model.pinned_keys() {
            match entries.get(&key(k)) {
                Some(e) if e.tier == Tier::Memory && e.pinned > 0 => {}
                other => return Err(format!("op {n}: pinned key {k} not resident: {other:?}")),
            }
        }
        let b = real.cache.budget();
        if b.memory_used > mem_cap || b.disk_used > disk_cap {
            return Err(format!("op {n}: budget exceeded {b:?}"));
        }
    }
    Ok(())
}
