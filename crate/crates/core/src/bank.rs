//! Fixed-capacity store of per-tracklet feature histories.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};

/// One stored observation of a tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry<T> {
    pub frame: i64,
    pub feature: Vec<T>,
    pub position: [f64; 3],
}

/// The most recent entries of a slot, oldest first, with their frame gaps
/// `current_frame − frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct BankWindow<T> {
    pub features: Vec<Vec<T>>,
    pub positions: Vec<[f64; 3]>,
    pub gaps: Vec<i64>,
}

impl<T> BankWindow<T> {
    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// `capacity` slots, each a ring of at most `depth` entries with strictly
/// increasing frames. Freed slots are reused lowest index first.
#[derive(Debug, Clone)]
pub struct FeatureBank<T> {
    depth: usize,
    channels: usize,
    slots: Vec<Option<VecDeque<BankEntry<T>>>>,
    free: BTreeSet<usize>,
}

impl<T: Clone> FeatureBank<T> {
    pub fn new(capacity: usize, depth: usize, channels: usize) -> Result<Self> {
        if capacity == 0 || depth == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "feature bank needs positive capacity, depth and channels, got {capacity}, {depth}, {channels}"
            )));
        }
        Ok(Self {
            depth,
            channels,
            slots: vec![None; capacity],
            free: (0..capacity).collect(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn occupied_count(&self) -> usize {
        self.capacity() - self.free.len()
    }

    pub fn is_occupied(&self, slot: usize) -> bool {
        matches!(self.slots.get(slot), Some(Some(_)))
    }

    /// Claims the lowest free slot and returns it empty.
    pub fn allocate(&mut self) -> Result<usize> {
        let slot = self.free.pop_first().ok_or(Error::Capacity {
            capacity: self.capacity(),
        })?;
        self.slots[slot] = Some(VecDeque::with_capacity(self.depth));
        Ok(slot)
    }

    pub fn release(&mut self, slot: usize) -> Result<()> {
        self.history(slot)?;
        self.slots[slot] = None;
        self.free.insert(slot);
        Ok(())
    }

    /// Appends an entry, evicting the oldest one when the slot is full.
    pub fn push(
        &mut self,
        slot: usize,
        frame: i64,
        feature: Vec<T>,
        position: [f64; 3],
    ) -> Result<()> {
        if feature.len() != self.channels {
            return Err(Error::shape(
                "bank_push",
                &[self.channels],
                &[feature.len()],
            ));
        }
        let depth = self.depth;
        let ring = self.history_mut(slot)?;
        if let Some(last) = ring.back() {
            if frame <= last.frame {
                return Err(Error::Ordering(format!(
                    "slot {slot}: frame {frame} does not follow stored frame {}",
                    last.frame
                )));
            }
        }
        if ring.len() == depth {
            ring.pop_front();
        }
        ring.push_back(BankEntry {
            frame,
            feature,
            position,
        });
        Ok(())
    }

    /// Stored entries of an occupied slot, oldest first.
    pub fn history(&self, slot: usize) -> Result<&VecDeque<BankEntry<T>>> {
        match self.slots.get(slot) {
            Some(Some(ring)) => Ok(ring),
            _ => Err(Error::Lookup(format!("slot {slot} is not occupied"))),
        }
    }

    fn history_mut(&mut self, slot: usize) -> Result<&mut VecDeque<BankEntry<T>>> {
        match self.slots.get_mut(slot) {
            Some(Some(ring)) => Ok(ring),
            _ => Err(Error::Lookup(format!("slot {slot} is not occupied"))),
        }
    }

    pub fn latest(&self, slot: usize) -> Result<&BankEntry<T>> {
        self.history(slot)?
            .back()
            .ok_or_else(|| Error::Lookup(format!("slot {slot} has no entries")))
    }

    /// The last `min(len, depth)` entries of `slot` as seen from `current_frame`.
    pub fn window(&self, slot: usize, current_frame: i64, len: usize) -> Result<BankWindow<T>> {
        let ring = self.history(slot)?;
        let last = self.latest(slot)?;
        if current_frame < last.frame {
            return Err(Error::Ordering(format!(
                "slot {slot}: current frame {current_frame} precedes stored frame {}",
                last.frame
            )));
        }
        let take = len.min(ring.len());
        let skip = ring.len() - take;
        let mut w = BankWindow {
            features: Vec::with_capacity(take),
            positions: Vec::with_capacity(take),
            gaps: Vec::with_capacity(take),
        };
        for e in ring.iter().skip(skip) {
            w.features.push(e.feature.clone());
            w.positions.push(e.position);
            w.gaps.push(current_frame - e.frame);
        }
        Ok(w)
    }

    /// Checks the bookkeeping between slots and the free list.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, s) in self.slots.iter().enumerate() {
            match s {
                Some(ring) => {
                    if self.free.contains(&i) {
                        return Err(Error::Contract(format!(
                            "slot {i} is both occupied and free"
                        )));
                    }
                    if ring.len() > self.depth {
                        return Err(Error::Contract(format!("slot {i} exceeds depth")));
                    }
                    if ring
                        .iter()
                        .zip(ring.iter().skip(1))
                        .any(|(a, b)| a.frame >= b.frame)
                    {
                        return Err(Error::Contract(format!(
                            "slot {i} frames are not increasing"
                        )));
                    }
                }
                None if !self.free.contains(&i) => {
                    return Err(Error::Contract(format!(
                        "slot {i} is neither occupied nor free"
                    )));
                }
                None => {}
            }
        }
        Ok(())
    }
}
