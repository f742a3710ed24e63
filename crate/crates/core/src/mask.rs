//! Training-sequence layout `[sos, gt..., sos, mt...]`, its step-aware
//! attention mask, and the shared position ids.

use std::fmt;
use std::io::Write;

use crate::schedule::StepSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotRole {
    StartA,
    Gt(usize),
    StartB,
    Mt(usize),
}

impl SlotRole {
    pub fn rank(self) -> Option<usize> {
        match self {
            SlotRole::Gt(r) | SlotRole::Mt(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for SlotRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotRole::StartA => write!(f, "start_a"),
            SlotRole::Gt(r) => write!(f, "gt{r}"),
            SlotRole::StartB => write!(f, "start_b"),
            SlotRole::Mt(r) => write!(f, "mt{r}"),
        }
    }
}

/// Slot roles for a `2T + 2` training sequence and the step of every rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<SlotRole>,
    rank_steps: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(schedule: &StepSchedule) -> Self {
        let t = schedule.total();
        let mut roles = Vec::with_capacity(2 * t + 2);
        roles.push(SlotRole::StartA);
        roles.extend((0..t).map(SlotRole::Gt));
        roles.push(SlotRole::StartB);
        roles.extend((0..t).map(SlotRole::Mt));
        Self {
            roles,
            rank_steps: schedule.steps_by_rank(),
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Number of tokens `T`.
    pub fn tokens(&self) -> usize {
        self.rank_steps.len()
    }

    pub fn roles(&self) -> &[SlotRole] {
        &self.roles
    }

    pub fn rank_steps(&self) -> &[usize] {
        &self.rank_steps
    }

    /// Step of a GT/MT slot, `None` for the start tokens.
    pub fn step_of_slot(&self, slot: usize) -> Option<usize> {
        self.roles[slot].rank().map(|r| self.rank_steps[r])
    }

    pub fn gt_slot(&self, rank: usize) -> usize {
        1 + rank
    }

    pub fn mt_slot(&self, rank: usize) -> usize {
        self.tokens() + 2 + rank
    }

    pub fn start_b_slot(&self) -> usize {
        self.tokens() + 1
    }
}

/// Dense `(2T+2)²` visibility matrix; `allowed(q, k)` means query `q` may
/// attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EarAttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl EarAttentionMask {
    pub fn new(layout: &SequenceLayout) -> Self {
        let size = layout.len();
        let steps = &layout.rank_steps;
        let mut allowed = vec![false; size * size];
        for (q, &qr) in layout.roles.iter().enumerate() {
            for (k, &kr) in layout.roles.iter().enumerate() {
                allowed[q * size + k] = match (qr, kr) {
                    (SlotRole::StartA, SlotRole::StartA) => true,
                    (SlotRole::Gt(_), SlotRole::StartA) => true,
                    (SlotRole::Gt(i), SlotRole::Gt(j)) => steps[j] <= steps[i],
                    (SlotRole::StartB, SlotRole::StartA | SlotRole::StartB) => true,
                    (SlotRole::Mt(_), SlotRole::StartA) => true,
                    (SlotRole::Mt(i), SlotRole::Gt(j)) => steps[j] < steps[i],
                    (SlotRole::Mt(i), SlotRole::Mt(j)) => steps[j] == steps[i],
                    _ => false,
                };
            }
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    /// Every slot whose information can reach `slot` through any number of
    /// stacked attention layers (transitive closure of the visibility
    /// relation, including `slot` itself).
    pub fn reachable_from(&self, slot: usize) -> Vec<bool> {
        let mut seen = vec![false; self.size];
        let mut stack = vec![slot];
        seen[slot] = true;
        while let Some(q) = stack.pop() {
            for (k, &ok) in self.row(q).iter().enumerate() {
                if ok && !seen[k] {
                    seen[k] = true;
                    stack.push(k);
                }
            }
        }
        seen
    }

    /// Plain-text PGM (P2, maxval 1), query rows top to bottom.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.size, self.size)?;
        writeln!(out, "1")?;
        for q in 0..self.size {
            let row: Vec<&str> = self
                .row(q)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Position id per slot: both start tokens take 0, GT(i) and MT(i) take `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIds(pub Vec<usize>);

impl PositionIds {
    pub fn new(layout: &SequenceLayout) -> Self {
        Self(
            layout
                .roles
                .iter()
                .map(|role| role.rank().map_or(0, |r| r + 1))
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Layout, mask and positions built once per schedule and shared by every
/// training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePlan {
    pub schedule: StepSchedule,
    pub layout: SequenceLayout,
    pub mask: EarAttentionMask,
    pub positions: PositionIds,
}

impl SequencePlan {
    pub fn new(schedule: &StepSchedule) -> Self {
        let layout = SequenceLayout::new(schedule);
        let mask = EarAttentionMask::new(&layout);
        let positions = PositionIds::new(&layout);
        Self {
            schedule: schedule.clone(),
            layout,
            mask,
            positions,
        }
    }
}

pub fn build_layout(schedule: &StepSchedule) -> SequenceLayout {
    SequenceLayout::new(schedule)
}

pub fn build_training_mask(layout: &SequenceLayout) -> EarAttentionMask {
    EarAttentionMask::new(layout)
}

pub fn build_position_ids(layout: &SequenceLayout) -> PositionIds {
    PositionIds::new(layout)
}

/// CSV of `slot,role,rank,step,position`.
pub fn write_roles_csv<W: Write>(layout: &SequenceLayout, out: W) -> csv::Result<()> {
    let positions = PositionIds::new(layout);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "role", "rank", "step", "position"])?;
    for (slot, role) in layout.roles.iter().enumerate() {
        let rank = role.rank().map(|r| r.to_string()).unwrap_or_default();
        let step = layout
            .step_of_slot(slot)
            .map(|s| s.to_string())
            .unwrap_or_default();
        w.write_record([
            slot.to_string(),
            role.to_string(),
            rank,
            step,
            positions.0[slot].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn visible(mask: &EarAttentionMask, layout: &SequenceLayout, slot: usize) -> Vec<String> {
        (0..mask.size())
            .filter(|&k| mask.allowed(slot, k))
            .map(|k| layout.roles()[k].to_string())
            .collect()
    }

    #[test]
    fn layout_t4() {
        let s = StepSchedule::from_lengths(vec![1, 3], 4).unwrap();
        let layout = SequenceLayout::new(&s);
        let names: Vec<String> = layout.roles().iter().map(|r| r.to_string()).collect();
        assert_eq!(
            names,
            ["start_a", "gt0", "gt1", "gt2", "gt3", "start_b", "mt0", "mt1", "mt2", "mt3"]
        );
        assert_eq!(layout.rank_steps(), &[1, 2, 2, 2]);
        assert_eq!(layout.step_of_slot(layout.mt_slot(2)), Some(2));
        assert_eq!(layout.step_of_slot(0), None);
    }

    #[test]
    fn layout_sizes() {
        let one = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Ones, 1).unwrap());
        assert_eq!(
            one.roles(),
            &[
                SlotRole::StartA,
                SlotRole::Gt(0),
                SlotRole::StartB,
                SlotRole::Mt(0)
            ]
        );
        let half = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Half, 256).unwrap());
        assert_eq!(half.len(), 514);
    }

    #[test]
    fn mask_t4() {
        let s = StepSchedule::from_lengths(vec![1, 3], 4).unwrap();
        let layout = SequenceLayout::new(&s);
        let mask = EarAttentionMask::new(&layout);
        assert_eq!(visible(&mask, &layout, 0), ["start_a"]);
        assert_eq!(visible(&mask, &layout, 1), ["start_a", "gt0"]);
        for slot in 2..=4 {
            assert_eq!(
                visible(&mask, &layout, slot),
                ["start_a", "gt0", "gt1", "gt2", "gt3"]
            );
        }
        assert_eq!(visible(&mask, &layout, 5), ["start_a", "start_b"]);
        assert_eq!(visible(&mask, &layout, 6), ["start_a", "mt0"]);
        for slot in 7..=9 {
            assert_eq!(
                visible(&mask, &layout, slot),
                ["start_a", "gt0", "mt1", "mt2", "mt3"]
            );
        }
    }

    #[test]
    fn mask_t1() {
        let layout = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Ones, 1).unwrap());
        let mask = EarAttentionMask::new(&layout);
        assert_eq!(visible(&mask, &layout, 3), ["start_a", "mt0"]);
    }

    #[test]
    fn mt_slots_hidden_from_non_mt() {
        let layout = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Half, 64).unwrap());
        let mask = EarAttentionMask::new(&layout);
        for q in 0..mask.size() {
            if matches!(layout.roles()[q], SlotRole::Mt(_)) {
                assert!(!mask.allowed(q, layout.start_b_slot()));
                continue;
            }
            for r in 0..layout.tokens() {
                assert!(!mask.allowed(q, layout.mt_slot(r)));
            }
        }
    }

    #[test]
    fn gt_rows_monotone_in_step() {
        let layout = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Odd, 64).unwrap());
        let mask = EarAttentionMask::new(&layout);
        let t = layout.tokens();
        let gt_set = |i: usize| -> Vec<bool> {
            (0..t)
                .map(|j| mask.allowed(layout.gt_slot(i), layout.gt_slot(j)))
                .collect()
        };
        for i in 0..t {
            for j in 0..t {
                if layout.rank_steps()[i] <= layout.rank_steps()[j] {
                    let (a, b) = (gt_set(i), gt_set(j));
                    assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
                }
            }
        }
    }

    #[test]
    fn positions() {
        let s = StepSchedule::from_lengths(vec![1, 3], 4).unwrap();
        let p = PositionIds::new(&SequenceLayout::new(&s));
        assert_eq!(p.as_slice(), &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let p1 = PositionIds::new(&SequenceLayout::new(
            &StepSchedule::new(&ScheduleKind::Ones, 1).unwrap(),
        ));
        assert_eq!(p1.as_slice(), &[0, 1, 0, 1]);
    }

    #[test]
    fn pgm_dump() {
        let layout = SequenceLayout::new(&StepSchedule::new(&ScheduleKind::Ones, 1).unwrap());
        let mask = EarAttentionMask::new(&layout);
        let mut buf = Vec::new();
        mask.write_pgm(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "P2\n4 4\n1\n1 0 0 0\n1 1 0 0\n1 0 1 0\n1 0 0 1\n"
        );
        let mut csv = Vec::new();
        write_roles_csv(&layout, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("slot,role,rank,step,position\n0,start_a,,,0\n1,gt0,0,1,1\n"));
    }
}
