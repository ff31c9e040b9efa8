//! Class-balanced replay memory with a sample and bit budget.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encode::ceil_log2;
use crate::error::{cfg_err, Result};
use crate::train::{Item, Payload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Stores input images as quantization levels.
    Native,
    /// Stores feature-extractor outputs.
    Latent,
}

/// Bits to store one label among `total_classes`.
pub fn label_bits(total_classes: usize) -> usize {
    ceil_log2(total_classes)
}

/// Storage cost of a payload in bits.
pub fn payload_bits(p: &Payload) -> u64 {
    match p {
        Payload::Image(img) => (img.height * img.width * 24) as u64,
        Payload::Quantized(q) => q.storage_bits() as u64,
        Payload::Latent(z) => z.len() as u64,
    }
}

/// Samples that fit in `m_b` bits when each costs `payload + label_bits`.
pub fn capacity_from_bits(m_b: u64, payload: u64, label_bits: usize) -> Result<usize> {
    let per = payload + label_bits as u64;
    if per == 0 || m_b < per {
        return cfg_err(format!("{m_b} bits cannot hold one sample of {per} bits"));
    }
    Ok((m_b / per) as usize)
}

/// Native payload of an `h`×`w` image at `bits_per_pixel`.
pub fn native_payload(h: usize, w: usize, bits_per_pixel: usize) -> u64 {
    (h * w * bits_per_pixel) as u64
}

/// Splits `capacity` over classes as evenly as possible. A class never gets
/// more than its pool; what it cannot take is shared among the others.
/// Remainder slots go to classes drawn by `rng`.
pub fn balanced_quotas(pools: &[usize], capacity: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut quota = vec![0; pools.len()];
    if pools.iter().sum::<usize>() <= capacity {
        return pools.to_vec();
    }
    let mut active: Vec<usize> = (0..pools.len()).collect();
    let mut remaining = capacity;
    loop {
        let share = remaining / active.len();
        let (small, big): (Vec<usize>, Vec<usize>) = active.iter().partition(|c| pools[**c] <= share);
        if small.is_empty() {
            break;
        }
        for c in small {
            quota[c] = pools[c];
            remaining -= pools[c];
        }
        active = big;
    }
    let base = remaining / active.len();
    let extra = remaining % active.len();
    for &c in &active {
        quota[c] = base;
    }
    for k in index::sample(rng, active.len(), extra) {
        quota[active[k]] += 1;
    }
    quota
}

/// Outcome of one update.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    /// Seen classes left with no slot because the capacity is below the
    /// class count.
    pub zero_quota_classes: usize,
    pub evicted: usize,
    pub inserted: usize,
}

/// Balanced replay memory. Entries are grouped by class in the order the
/// classes were first seen.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub mode: ReplayMode,
    /// Maximum sample count.
    pub capacity: usize,
    /// Bit budget the capacity was derived from, if any.
    pub budget_bits: Option<u64>,
    pub label_bits: usize,
    /// Accounted payload size of every entry; `None` uses each payload's
    /// own size.
    pub entry_payload_bits: Option<u64>,
    pub entries: Vec<Item>,
    classes: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(mode: ReplayMode, capacity: usize, label_bits: usize) -> Self {
        ReplayBuffer {
            mode,
            capacity,
            budget_bits: None,
            label_bits,
            entry_payload_bits: None,
            entries: Vec::new(),
            classes: Vec::new(),
        }
    }

    /// Capacity derived from a bit budget for a fixed payload size.
    pub fn with_budget(mode: ReplayMode, m_b: u64, payload: u64, label_bits: usize) -> Result<Self> {
        let mut b = Self::new(mode, capacity_from_bits(m_b, payload, label_bits)?, label_bits);
        b.budget_bits = Some(m_b);
        b.entry_payload_bits = Some(payload);
        Ok(b)
    }

    /// Restores a buffer from saved parts.
    pub fn from_parts(
        mode: ReplayMode,
        capacity: usize,
        budget_bits: Option<u64>,
        label_bits: usize,
        entry_payload_bits: Option<u64>,
        classes: Vec<usize>,
        entries: Vec<Item>,
    ) -> Self {
        ReplayBuffer {
            mode,
            capacity,
            budget_bits,
            label_bits,
            entry_payload_bits,
            entries,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Classes seen by the buffer, in arrival order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.label == class).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| self.count_of(*c)).collect()
    }

    pub fn used_bits(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| self.entry_payload_bits.unwrap_or_else(|| payload_bits(&e.payload)) + self.label_bits as u64)
            .sum()
    }

    /// Rebalances over every class seen so far plus those in `new`: over-quota
    /// classes lose uniformly drawn entries, new classes contribute uniformly
    /// drawn samples.
    pub fn update(&mut self, new: Vec<Item>, rng: &mut impl Rng) -> UpdateStats {
        let mut incoming: Vec<(usize, Vec<Item>)> = Vec::new();
        for it in new {
            match incoming.iter_mut().find(|(c, _)| *c == it.label) {
                Some((_, v)) => v.push(it),
                None => incoming.push((it.label, vec![it])),
            }
        }
        for (c, _) in &incoming {
            if !self.classes.contains(c) {
                self.classes.push(*c);
            }
        }
        let mut pools: Vec<Vec<Item>> = self.classes.iter().map(|_| Vec::new()).collect();
        let mut stored = vec![0usize; self.classes.len()];
        for e in std::mem::take(&mut self.entries) {
            let k = self.classes.iter().position(|c| *c == e.label).expect("known class");
            stored[k] += 1;
            pools[k].push(e);
        }
        for (c, items) in incoming {
            let k = self.classes.iter().position(|x| *x == c).expect("registered above");
            pools[k].extend(items);
        }
        let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
        let quota = balanced_quotas(&sizes, self.capacity, rng);
        let mut stats = UpdateStats {
            zero_quota_classes: quota.iter().filter(|q| **q == 0).count(),
            ..UpdateStats::default()
        };
        for (k, mut pool) in pools.into_iter().enumerate() {
            let q = quota[k];
            let (old, fresh) = pool.split_at_mut(stored[k]);
            let keep_old = q.min(old.len());
            old.shuffle(rng);
            fresh.shuffle(rng);
            stats.evicted += old.len() - keep_old;
            stats.inserted += q - keep_old;
            let take_fresh = q - keep_old;
            let kept: Vec<Item> = old[..keep_old].iter().chain(&fresh[..take_fresh]).cloned().collect();
            self.entries.extend(kept);
            pool.clear();
        }
        stats
    }
}
