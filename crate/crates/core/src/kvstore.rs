//! Paged dual-cache KV storage.
//!
//! Each (layer, kv-head) owns a [`HeadCache`]: a fixed-capacity local ring
//! buffer holding the most recent `window` tokens and an append-only global
//! region holding older tokens whose gate cleared the threshold. Both regions
//! live in pages of a shared [`KvPool`] and are addressed through the head's
//! [`PageTable`].
//!
//! Tokens reach the global region only through lazy promotion: when a ring
//! slot is about to be overwritten, its occupant is copied to global iff its
//! stored gate is `>= tau`, otherwise it is dropped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::KvSlice;
use crate::error::{Error, Result};
use crate::gating::Threshold;
use crate::numerics::Matrix;

/// `(position, gate)`
pub type Entry = (usize, f64);

pub const DEFAULT_PAGE_SIZE: usize = 16;

pub type PageId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Local,
    Global,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Local => "local",
            Region::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageOwner {
    pub layer: usize,
    pub head: usize,
    pub region: Region,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub resident_entries: usize,
    pub admitted_fraction: f64,
    pub pages_allocated: usize,
}

/// Physical page arena shared by every head.
#[derive(Debug, Clone)]
pub struct KvPool {
    page_size: usize,
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    gates: Vec<f64>,
    positions: Vec<usize>,
    owners: Vec<Option<PageOwner>>,
    free_list: Vec<PageId>,
    resident: usize,
    global_entries: usize,
    tokens_seen: usize,
}

impl KvPool {
    pub fn new(capacity: usize, page_size: usize, head_dim: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(Error::InvalidArgument("page size must be positive".into()));
        }
        let slots = capacity * page_size;
        Ok(Self {
            page_size,
            head_dim,
            keys: vec![0.0; slots * head_dim],
            values: vec![0.0; slots * head_dim],
            gates: vec![0.0; slots],
            positions: vec![0; slots],
            owners: vec![None; capacity],
            // popped from the back, so page 0 is handed out first
            free_list: (0..capacity).rev().collect(),
            resident: 0,
            global_entries: 0,
            tokens_seen: 0,
        })
    }

    /// Pages needed when every token of a `max_tokens` sequence is admitted.
    pub fn worst_case_pages(
        heads: usize,
        window: usize,
        max_tokens: usize,
        page_size: usize,
    ) -> usize {
        heads * (window.div_ceil(page_size) + max_tokens.div_ceil(page_size))
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn capacity(&self) -> usize {
        self.owners.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free_list.len()
    }

    pub fn pages_allocated(&self) -> usize {
        self.capacity() - self.free_list.len()
    }

    pub fn owner(&self, page: PageId) -> Option<PageOwner> {
        self.owners[page]
    }

    pub fn is_free(&self, page: PageId) -> bool {
        self.owners[page].is_none()
    }

    /// Counters maintained by cache operations.
    pub fn stats(&self) -> CacheStats {
        CacheStats {
            resident_entries: self.resident,
            admitted_fraction: ratio(self.global_entries, self.tokens_seen),
            pages_allocated: self.pages_allocated(),
        }
    }

    /// Take a free page and append it to `table` as the next logical page of `owner.region`.
    pub fn alloc_page(&mut self, table: &mut PageTable, owner: PageOwner) -> Result<PageId> {
        let page = self.free_list.pop().ok_or(Error::OutOfPages {
            stats: self.stats(),
        })?;
        self.owners[page] = Some(owner);
        table.pages_mut(owner.region).push(page);
        Ok(page)
    }

    fn free_page(&mut self, page: PageId) {
        debug_assert!(self.owners[page].is_some(), "double free of page {page}");
        self.owners[page] = None;
        self.free_list.push(page);
    }

    #[inline]
    fn slot(&self, page: PageId, offset: usize) -> usize {
        page * self.page_size + offset
    }

    fn write_slot(&mut self, page: PageId, offset: usize, entry: SlotRef<'_>) {
        let s = self.slot(page, offset);
        let d = self.head_dim;
        self.keys[s * d..(s + 1) * d].copy_from_slice(entry.k);
        self.values[s * d..(s + 1) * d].copy_from_slice(entry.v);
        self.gates[s] = entry.gate;
        self.positions[s] = entry.position;
    }

    fn copy_slot(&mut self, from: (PageId, usize), to: (PageId, usize)) {
        let a = self.slot(from.0, from.1);
        let b = self.slot(to.0, to.1);
        let d = self.head_dim;
        self.keys.copy_within(a * d..(a + 1) * d, b * d);
        self.values.copy_within(a * d..(a + 1) * d, b * d);
        self.gates[b] = self.gates[a];
        self.positions[b] = self.positions[a];
    }

    pub fn key(&self, page: PageId, offset: usize) -> &[f64] {
        let s = self.slot(page, offset);
        &self.keys[s * self.head_dim..(s + 1) * self.head_dim]
    }

    pub fn value(&self, page: PageId, offset: usize) -> &[f64] {
        let s = self.slot(page, offset);
        &self.values[s * self.head_dim..(s + 1) * self.head_dim]
    }

    pub fn gate(&self, page: PageId, offset: usize) -> f64 {
        self.gates[self.slot(page, offset)]
    }

    pub fn position(&self, page: PageId, offset: usize) -> usize {
        self.positions[self.slot(page, offset)]
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

struct SlotRef<'a> {
    k: &'a [f64],
    v: &'a [f64],
    gate: f64,
    position: usize,
}

/// Logical-to-physical page maps for one head.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageTable {
    pub local: Vec<PageId>,
    pub global: Vec<PageId>,
}

impl PageTable {
    pub fn pages(&self, region: Region) -> &[PageId] {
        match region {
            Region::Local => &self.local,
            Region::Global => &self.global,
        }
    }

    fn pages_mut(&mut self, region: Region) -> &mut Vec<PageId> {
        match region {
            Region::Local => &mut self.local,
            Region::Global => &mut self.global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromotionEvent {
    /// Ring buffer was not yet full.
    None,
    /// Oldest local token copied to the global region.
    Promoted { position: usize },
    /// Oldest local token discarded.
    Dropped { position: usize },
}

/// Dual logical cache of one (layer, kv-head).
#[derive(Debug, Clone)]
pub struct HeadCache {
    layer: usize,
    head: usize,
    window: usize,
    local_len: usize,
    local_ptr: usize,
    global_len: usize,
    tokens_seen: usize,
    table: PageTable,
}

impl HeadCache {
    pub fn new(layer: usize, head: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        Ok(Self {
            layer,
            head,
            window,
            local_len: 0,
            local_ptr: 0,
            global_len: 0,
            tokens_seen: 0,
            table: PageTable::default(),
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn local_len(&self) -> usize {
        self.local_len
    }

    pub fn local_ptr(&self) -> usize {
        self.local_ptr
    }

    pub fn global_len(&self) -> usize {
        self.global_len
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn resident(&self) -> usize {
        self.local_len + self.global_len
    }

    pub fn page_table(&self) -> &PageTable {
        &self.table
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_seen == 0
    }

    fn owner(&self, region: Region) -> PageOwner {
        PageOwner {
            layer: self.layer,
            head: self.head,
            region,
        }
    }

    fn local_addr(&self, slot: usize, ps: usize) -> (PageId, usize) {
        (self.table.local[slot / ps], slot % ps)
    }

    fn global_addr(&self, idx: usize, ps: usize) -> (PageId, usize) {
        (self.table.global[idx / ps], idx % ps)
    }

    fn ensure_local_page(&mut self, pool: &mut KvPool, slot: usize) -> Result<()> {
        if slot / pool.page_size() >= self.table.local.len() {
            let owner = self.owner(Region::Local);
            pool.alloc_page(&mut self.table, owner)?;
        }
        Ok(())
    }

    /// Next free global slot, allocating a page when the last one is full.
    fn next_global_slot(&mut self, pool: &mut KvPool) -> Result<(PageId, usize)> {
        let ps = pool.page_size();
        if self.global_len.is_multiple_of(ps) {
            let owner = self.owner(Region::Global);
            pool.alloc_page(&mut self.table, owner)?;
        }
        Ok(self.global_addr(self.global_len, ps))
    }

    fn check_dims(&self, pool: &KvPool, k: &[f64], v: &[f64]) -> Result<()> {
        if k.len() != pool.head_dim() || v.len() != pool.head_dim() {
            return Err(Error::Shape(format!(
                "kv lengths {}/{} for pool head_dim {}",
                k.len(),
                v.len(),
                pool.head_dim()
            )));
        }
        Ok(())
    }

    /// Write the newest token into the ring, lazily promoting or dropping the slot's previous occupant.
    pub fn local_write(
        &mut self,
        pool: &mut KvPool,
        k: &[f64],
        v: &[f64],
        gate: f64,
        position: usize,
        threshold: Threshold,
    ) -> Result<PromotionEvent> {
        self.check_dims(pool, k, v)?;
        let ps = pool.page_size();
        let entry = SlotRef {
            k,
            v,
            gate,
            position,
        };
        if self.local_len < self.window {
            let slot = self.local_len;
            self.ensure_local_page(pool, slot)?;
            let (page, off) = self.local_addr(slot, ps);
            pool.write_slot(page, off, entry);
            self.local_len += 1;
            self.local_ptr = self.local_len % self.window;
            self.tokens_seen += 1;
            pool.resident += 1;
            pool.tokens_seen += 1;
            return Ok(PromotionEvent::None);
        }

        // inspection
        let victim = self.local_addr(self.local_ptr, ps);
        let victim_gate = pool.gate(victim.0, victim.1);
        let victim_pos = pool.position(victim.0, victim.1);
        let event = if threshold.admits(victim_gate) {
            // promotion
            let dst = self.next_global_slot(pool)?;
            pool.copy_slot(victim, dst);
            self.global_len += 1;
            pool.resident += 1;
            pool.global_entries += 1;
            PromotionEvent::Promoted {
                position: victim_pos,
            }
        } else {
            PromotionEvent::Dropped {
                position: victim_pos,
            }
        };
        // replacement
        pool.write_slot(victim.0, victim.1, entry);
        self.local_ptr = (self.local_ptr + 1) % self.window;
        self.tokens_seen += 1;
        pool.tokens_seen += 1;
        Ok(event)
    }

    /// Populate an empty cache from a prefilled prompt.
    ///
    /// Tokens before the final window go to global iff admitted; the final
    /// window goes to local with gates retained for later promotion.
    pub fn prefill_populate(
        &mut self,
        pool: &mut KvPool,
        keys: &Matrix,
        values: &Matrix,
        gates: &[f64],
        threshold: Threshold,
    ) -> Result<CacheStats> {
        if !self.is_empty() {
            return Err(Error::CacheNotEmpty);
        }
        let t = keys.rows();
        if values.rows() != t || gates.len() != t {
            return Err(Error::Shape(format!(
                "{t} keys, {} values, {} gates",
                values.rows(),
                gates.len()
            )));
        }
        let ps = pool.page_size();
        let split = t.saturating_sub(self.window);
        for j in 0..split {
            if !threshold.admits(gates[j]) {
                continue;
            }
            self.check_dims(pool, keys.row(j), values.row(j))?;
            let (page, off) = self.next_global_slot(pool)?;
            pool.write_slot(
                page,
                off,
                SlotRef {
                    k: keys.row(j),
                    v: values.row(j),
                    gate: gates[j],
                    position: j,
                },
            );
            self.global_len += 1;
            pool.resident += 1;
            pool.global_entries += 1;
        }
        for (slot, j) in (split..t).enumerate() {
            self.check_dims(pool, keys.row(j), values.row(j))?;
            self.ensure_local_page(pool, slot)?;
            let (page, off) = self.local_addr(slot, ps);
            pool.write_slot(
                page,
                off,
                SlotRef {
                    k: keys.row(j),
                    v: values.row(j),
                    gate: gates[j],
                    position: j,
                },
            );
            self.local_len += 1;
            pool.resident += 1;
        }
        self.local_ptr = self.local_len % self.window;
        self.tokens_seen = t;
        pool.tokens_seen += t;
        Ok(CacheStats {
            resident_entries: self.resident(),
            admitted_fraction: ratio(self.global_len, t),
            pages_allocated: self.table.local.len() + self.table.global.len(),
        })
    }

    /// Local ring slots in ascending position order.
    fn local_order(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.local_len < self.window {
            0
        } else {
            self.local_ptr
        };
        (0..self.local_len).map(move |i| (start + i) % self.window)
    }

    /// Materialise `(global, local)` in position order.
    pub fn gather(&self, pool: &KvPool) -> (KvSlice, KvSlice) {
        let ps = pool.page_size();
        let mut global = KvSlice::default();
        for idx in 0..self.global_len {
            let (p, o) = self.global_addr(idx, ps);
            global.push(
                pool.key(p, o).to_vec(),
                pool.value(p, o).to_vec(),
                pool.position(p, o),
            );
        }
        let mut local = KvSlice::default();
        for slot in self.local_order() {
            let (p, o) = self.local_addr(slot, ps);
            local.push(
                pool.key(p, o).to_vec(),
                pool.value(p, o).to_vec(),
                pool.position(p, o),
            );
        }
        (global, local)
    }

    /// `(position, gate)` of every resident entry, per region, in position order.
    pub fn entries(&self, pool: &KvPool) -> (Vec<Entry>, Vec<Entry>) {
        let ps = pool.page_size();
        let global = (0..self.global_len)
            .map(|idx| {
                let (p, o) = self.global_addr(idx, ps);
                (pool.position(p, o), pool.gate(p, o))
            })
            .collect();
        let local = self
            .local_order()
            .map(|slot| {
                let (p, o) = self.local_addr(slot, ps);
                (pool.position(p, o), pool.gate(p, o))
            })
            .collect();
        (global, local)
    }

    /// Global page `idx` as `(page id, number of occupied slots)`.
    pub fn global_page(&self, idx: usize, page_size: usize) -> (PageId, usize) {
        let used = (self.global_len - idx * page_size).min(page_size);
        (self.table.global[idx], used)
    }

    pub fn global_pages(&self) -> usize {
        self.table.global.len()
    }

    /// Return every page to the pool and reset.
    pub fn release(&mut self, pool: &mut KvPool) {
        for &p in self.table.local.iter().chain(&self.table.global) {
            pool.free_page(p);
        }
        pool.resident -= self.resident();
        pool.global_entries -= self.global_len;
        pool.tokens_seen -= self.tokens_seen;
        self.table = PageTable::default();
        self.local_len = 0;
        self.local_ptr = 0;
        self.global_len = 0;
        self.tokens_seen = 0;
    }
}

pub fn gather_head_kv(cache: &HeadCache, pool: &KvPool) -> (KvSlice, KvSlice) {
    cache.gather(pool)
}

pub fn cache_stats(caches: &[HeadCache], pool: &KvPool) -> CacheStats {
    let resident = caches.iter().map(HeadCache::resident).sum();
    let global: usize = caches.iter().map(HeadCache::global_len).sum();
    let seen: usize = caches.iter().map(HeadCache::tokens_seen).sum();
    CacheStats {
        resident_entries: resident,
        admitted_fraction: ratio(global, seen),
        pages_allocated: pool.pages_allocated(),
    }
}

/// One line per resident token: `layer head region position gate`.
pub fn snapshot(caches: &[HeadCache], pool: &KvPool) -> String {
    let mut out = String::new();
    for c in caches {
        let (global, local) = c.entries(pool);
        for (region, entries) in [(Region::Global, global), (Region::Local, local)] {
            for (pos, gate) in entries {
                let _ = writeln!(
                    out,
                    "{} {} {} {} {:.17e}",
                    c.layer,
                    c.head,
                    region.as_str(),
                    pos,
                    gate
                );
            }
        }
    }
    out
}

/// Cross-check page tables against pool ownership.
///
/// Every referenced page must be owned by exactly the referencing
/// (layer, head, region), no page may be referenced twice, and every
/// allocated page must be referenced.
pub fn audit_pages(caches: &[HeadCache], pool: &KvPool) -> std::result::Result<(), String> {
    let mut seen = vec![false; pool.capacity()];
    for c in caches {
        for region in [Region::Local, Region::Global] {
            for &p in c.table.pages(region) {
                if seen[p] {
                    return Err(format!("page {p} referenced twice"));
                }
                seen[p] = true;
                let want = c.owner(region);
                if pool.owner(p) != Some(want) {
                    return Err(format!(
                        "page {p} owned by {:?}, referenced by {want:?}",
                        pool.owner(p)
                    ));
                }
            }
        }
        let ps = pool.page_size();
        if c.table.global.len() != c.global_len.div_ceil(ps) {
            return Err(format!(
                "head ({}, {}) holds {} global pages for {} entries",
                c.layer,
                c.head,
                c.table.global.len(),
                c.global_len
            ));
        }
        if c.table.local.len() != c.local_len.div_ceil(ps) {
            return Err(format!(
                "head ({}, {}) holds {} local pages for {} entries",
                c.layer,
                c.head,
                c.table.local.len(),
                c.local_len
            ));
        }
    }
    for (p, &s) in seen.iter().enumerate() {
        if !s && !pool.is_free(p) {
            return Err(format!("page {p} allocated but unreferenced"));
        }
        if s == pool.free_list.contains(&p) {
            return Err(format!("page {p} free-list state inconsistent"));
        }
    }
    Ok(())
}
