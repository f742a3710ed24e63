//! Per-layer key/value store for stepwise generation.
//!
//! Cache slot `0` holds the start token and slot `1 + r` holds rank `r`.
//! A step feeds the previous step's freshly sampled tokens as GT rows
//! followed by the current step's mask rows. Before that the cursor is
//! rewound to the previous step's first mask slot, so the GT rows overwrite
//! the stale mask entries and the cache never grows past `1 + T`.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::model::{
    attend, embed_inputs, ensure_finite, finish_block, output_head, project, MaskMode, Matrix,
    ModelConfig, ModelParameters, Real, SlotInput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheRole {
    Start,
    Gt(usize),
    Mt(usize),
}

impl CacheRole {
    pub fn position(self) -> usize {
        match self {
            CacheRole::Start => 0,
            CacheRole::Gt(r) | CacheRole::Mt(r) => r + 1,
        }
    }

    fn rank(self) -> Option<usize> {
        match self {
            CacheRole::Start => None,
            CacheRole::Gt(r) | CacheRole::Mt(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheSlot {
    pub role: CacheRole,
    pub position: usize,
}

/// One row of a fed block: what to embed and which role it plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FedSlot {
    pub role: CacheRole,
    pub input: SlotInput,
}

impl FedSlot {
    pub fn start(class_id: usize) -> Self {
        Self {
            role: CacheRole::Start,
            input: SlotInput::Class(class_id),
        }
    }

    pub fn gt(rank: usize, token: u32) -> Self {
        Self {
            role: CacheRole::Gt(rank),
            input: SlotInput::Token(token),
        }
    }

    pub fn mt(rank: usize) -> Self {
        Self {
            role: CacheRole::Mt(rank),
            input: SlotInput::Mask,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KvCache<F> {
    tokens: usize,
    keys: Vec<Matrix<F>>,
    values: Vec<Matrix<F>>,
    slots: Vec<CacheSlot>,
    peak: usize,
}

impl<F: Real> KvCache<F> {
    /// Empty cache sized for `tokens` ranks plus the start slot.
    pub fn new(config: &ModelConfig, tokens: usize) -> Self {
        let capacity = tokens + 1;
        Self {
            tokens,
            keys: vec![Matrix::zeros(capacity, config.model_dim); config.num_layers],
            values: vec![Matrix::zeros(capacity, config.model_dim); config.num_layers],
            slots: Vec::with_capacity(capacity),
            peak: 0,
        }
    }

    pub fn reset(&mut self) {
        self.slots.clear();
        self.peak = 0;
    }

    pub fn capacity(&self) -> usize {
        self.tokens + 1
    }

    /// Effective length (the write cursor).
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Largest length reached since creation or the last reset.
    pub fn peak_len(&self) -> usize {
        self.peak
    }

    pub fn slots(&self) -> &[CacheSlot] {
        &self.slots
    }

    /// Moves the cursor back; later appends overwrite from `slot` onward.
    pub fn rewind_to(&mut self, slot: usize) -> Result<()> {
        if slot > self.slots.len() {
            return invalid(format!(
                "cannot rewind to slot {slot}: cache holds {}",
                self.slots.len()
            ));
        }
        self.slots.truncate(slot);
        Ok(())
    }

    fn validate_block(&self, block: &[FedSlot]) -> Result<()> {
        if block.is_empty() {
            return invalid("fed block is empty");
        }
        if self.slots.len() + block.len() > self.capacity() {
            return invalid(format!(
                "feeding {} rows would exceed cache capacity {}",
                block.len(),
                self.capacity()
            ));
        }
        let mut seen = vec![false; self.tokens];
        for slot in &self.slots {
            if let Some(r) = slot.role.rank() {
                seen[r] = true;
            }
        }
        // order: optional Start (only into an empty cache), GT rows, MT rows
        let mut phase = 0u8;
        for (i, fed) in block.iter().enumerate() {
            let p = match fed.role {
                CacheRole::Start => {
                    if i != 0 || !self.slots.is_empty() {
                        return invalid("start token must be the first row of an empty cache");
                    }
                    0
                }
                CacheRole::Gt(_) => {
                    if self.slots.is_empty() {
                        return invalid("GT rows need a cached start token");
                    }
                    1
                }
                CacheRole::Mt(_) => 2,
            };
            if p < phase || (p == 1 && phase == 0 && i > 0) {
                return invalid(format!("role order violation at fed row {i}"));
            }
            phase = p;
            if self.slots.is_empty() && i == 0 && fed.role != CacheRole::Start {
                return invalid("an empty cache must be fed the start token first");
            }
            if let Some(r) = fed.role.rank() {
                if r >= self.tokens {
                    return invalid(format!("rank {r} out of range 0..{}", self.tokens));
                }
                if seen[r] {
                    return invalid(format!("rank {r} already occupies a cache slot"));
                }
                seen[r] = true;
            }
            let ok_input = matches!(
                (fed.role, fed.input),
                (CacheRole::Start, SlotInput::Class(_))
                    | (CacheRole::Gt(_), SlotInput::Token(_))
                    | (CacheRole::Mt(_), SlotInput::Mask)
            );
            if !ok_input {
                return invalid(format!("fed row {i} input does not match its role"));
            }
        }
        Ok(())
    }

    /// Runs the fed block against the cache, appends its KV rows at the
    /// cursor and returns one logit row per fed row.
    ///
    /// Visibility: the start row sees only itself; GT rows see the start,
    /// every cached GT row and the fed GT rows; MT rows additionally see the
    /// fed MT rows. Cached MT rows are never visible.
    pub fn step_forward(
        &mut self,
        params: &ModelParameters<F>,
        block: &[FedSlot],
        class_id: usize,
        mode: MaskMode,
    ) -> Result<Matrix<F>> {
        self.validate_block(block)?;
        let cfg = &params.config;
        if self.keys.len() != cfg.num_layers || self.keys[0].cols != cfg.model_dim {
            return invalid("cache shape does not match model config");
        }
        let inputs: Vec<SlotInput> = block.iter().map(|f| f.input).collect();
        let mut x = embed_inputs(params, &inputs, class_id, mode)?;
        let positions: Vec<usize> = block.iter().map(|f| f.role.position()).collect();

        let base = self.slots.len();
        for fed in block {
            self.slots.push(CacheSlot {
                role: fed.role,
                position: fed.role.position(),
            });
        }
        let end = self.slots.len();
        let slots = &self.slots;
        let visible = |i: usize, j: usize| -> bool {
            if j >= end {
                return false;
            }
            let fed_key = j >= base;
            match (block[i].role, slots[j].role) {
                (_, CacheRole::Start) => true,
                (CacheRole::Start, _) => false,
                (_, CacheRole::Gt(_)) => true,
                (CacheRole::Mt(_), CacheRole::Mt(_)) => fed_key,
                (CacheRole::Gt(_), CacheRole::Mt(_)) => false,
            }
        };

        let hd = cfg.head_dim();
        for (li, layer) in params.layers.iter().enumerate() {
            let proj = project(layer, &x, &positions, hd, cfg.rope_base);
            for r in 0..block.len() {
                self.keys[li]
                    .row_mut(base + r)
                    .copy_from_slice(proj.k.row(r));
                self.values[li]
                    .row_mut(base + r)
                    .copy_from_slice(proj.v.row(r));
            }
            let (concat, _) = attend(
                &proj.q,
                &self.keys[li],
                &self.values[li],
                cfg.num_heads,
                visible,
            )?;
            let fin = finish_block(layer, &x, &concat);
            ensure_finite(&fin.x_out, &format!("layer {li} output"))?;
            x = fin.x_out;
        }
        let (_, _, logits) = output_head(params, &x);
        ensure_finite(&logits, "logits")?;
        self.peak = self.peak.max(end);
        debug_assert!(self.check_invariants().is_ok());
        Ok(logits)
    }

    /// Slot 0 is the start token, each rank holds at most one slot, every
    /// slot's position equals its rank + 1, and the length stays ≤ 1 + T.
    pub fn check_invariants(&self) -> Result<()> {
        if self.slots.len() > self.capacity() || self.peak > self.capacity() {
            return invalid("cache exceeded 1 + T slots");
        }
        if let Some(first) = self.slots.first() {
            if first.role != CacheRole::Start {
                return invalid("slot 0 is not the start token");
            }
        }
        let mut seen = vec![false; self.tokens];
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.position != slot.role.position() {
                return invalid(format!("slot {i} position drifted"));
            }
            match slot.role {
                CacheRole::Start if i != 0 => return invalid("start token away from slot 0"),
                CacheRole::Start => {}
                CacheRole::Gt(r) | CacheRole::Mt(r) => {
                    if std::mem::replace(&mut seen[r], true) {
                        return invalid(format!("rank {r} cached twice"));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV of `slot,role,rank,position`.
    pub fn write_slots_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_slots_csv(&self.slots, out)
    }
}

/// CSV of `slot,role,rank,position` for a slot listing.
pub fn write_slots_csv<W: Write>(slots: &[CacheSlot], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "role", "rank", "position"])?;
    for (i, slot) in slots.iter().enumerate() {
        let (role, rank) = match slot.role {
            CacheRole::Start => ("start", String::new()),
            CacheRole::Gt(r) => ("gt", r.to_string()),
            CacheRole::Mt(r) => ("mt", r.to_string()),
        };
        w.write_record([
            i.to_string(),
            role.to_string(),
            rank,
            slot.position.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cache_init<F: Real>(config: &ModelConfig, tokens: usize) -> KvCache<F> {
    KvCache::new(config, tokens)
}
