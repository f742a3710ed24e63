//! Length-adaptive decoding schedules: how many tokens each step emits.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, EarError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `l_k = 2k - 1`; requires a perfect-square token count.
    Odd,
    /// `l_k = (k + 1) / 2`, with the final step taking the exact remainder.
    Half,
    /// Steps of `c` tokens with a final remainder step.
    Uniform(usize),
    /// One token per step (plain next-token decoding).
    Ones,
    Custom(Vec<usize>),
}

impl FromStr for ScheduleKind {
    type Err = EarError;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let kind = match (head, arg) {
            ("odd", None) => ScheduleKind::Odd,
            ("half", None) => ScheduleKind::Half,
            ("ones", None) => ScheduleKind::Ones,
            ("uniform", Some(c)) => {
                ScheduleKind::Uniform(c.parse().map_err(|_| {
                    EarError::InvalidArgument(format!("bad uniform step size {c:?}"))
                })?)
            }
            ("custom", Some(list)) => ScheduleKind::Custom(
                list.split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| EarError::InvalidArgument(format!("bad custom list {list:?}")))?,
            ),
            _ => return invalid(format!("unknown schedule kind {s:?}")),
        };
        Ok(kind)
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Odd => write!(f, "odd"),
            ScheduleKind::Half => write!(f, "half"),
            ScheduleKind::Uniform(c) => write!(f, "uniform:{c}"),
            ScheduleKind::Ones => write!(f, "ones"),
            ScheduleKind::Custom(list) => {
                let parts: Vec<String> = list.iter().map(|v| v.to_string()).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

/// Per-step token counts with cumulative offsets.
///
/// Steps are numbered from 1, matching the usual `l_1 .. l_K` notation;
/// `lengths()[k - 1]` is the size of step `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    total: usize,
    lengths: Vec<usize>,
    offsets: Vec<usize>,
}

impl StepSchedule {
    pub fn new(kind: &ScheduleKind, total: usize) -> Result<Self> {
        if total == 0 {
            return invalid("token count must be at least 1");
        }
        let lengths = match kind {
            ScheduleKind::Odd => {
                let k = isqrt(total);
                if k * k != total {
                    return invalid(format!("odd schedule needs a perfect square, got {total}"));
                }
                (1..=k).map(|k| 2 * k - 1).collect()
            }
            ScheduleKind::Half => {
                let mut lengths = Vec::new();
                let mut remaining = total;
                for k in 1usize.. {
                    let next = k.div_ceil(2);
                    if remaining <= next {
                        lengths.push(remaining);
                        break;
                    }
                    lengths.push(next);
                    remaining -= next;
                }
                lengths
            }
            ScheduleKind::Uniform(c) => {
                if *c == 0 {
                    return invalid("uniform step size must be at least 1");
                }
                let mut lengths = vec![*c; total / c];
                if !total.is_multiple_of(*c) {
                    lengths.push(total % c);
                }
                lengths
            }
            ScheduleKind::Ones => vec![1; total],
            ScheduleKind::Custom(list) => list.clone(),
        };
        Self::from_lengths(lengths, total)
    }

    pub fn from_lengths(lengths: Vec<usize>, total: usize) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return invalid("every step must emit at least one token");
        }
        let sum: usize = lengths.iter().sum();
        if sum != total {
            return invalid(format!("step lengths sum to {sum}, expected {total}"));
        }
        let offsets = lengths
            .iter()
            .scan(0, |acc, &l| {
                let start = *acc;
                *acc += l;
                Some(start)
            })
            .collect();
        Ok(Self {
            total,
            lengths,
            offsets,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_steps(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Rank range emitted by step `step` (1-based).
    pub fn step_range(&self, step: usize) -> std::ops::Range<usize> {
        let start = self.offsets[step - 1];
        start..start + self.lengths[step - 1]
    }

    /// 1-based step that emits `rank`.
    pub fn step_of_rank(&self, rank: usize) -> Result<usize> {
        if rank >= self.total {
            return invalid(format!("rank {rank} out of range 0..{}", self.total));
        }
        // offsets is strictly increasing and offsets[0] == 0
        Ok(self.offsets.partition_point(|&o| o <= rank))
    }

    /// Per-rank step numbers.
    pub fn steps_by_rank(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(k, &l)| std::iter::repeat_n(k + 1, l))
            .collect()
    }

    /// True when `rank` starts a step or equals the total.
    pub fn is_boundary(&self, rank: usize) -> bool {
        rank == self.total || self.offsets.binary_search(&rank).is_ok()
    }

    /// Step boundaries closest to `rank` from below and above.
    pub fn nearest_boundaries(&self, rank: usize) -> (usize, usize) {
        let below = self
            .offsets
            .iter()
            .copied()
            .rfind(|&o| o <= rank)
            .unwrap_or(0);
        let above = self
            .offsets
            .iter()
            .copied()
            .find(|&o| o >= rank)
            .unwrap_or(self.total);
        (below, above)
    }

    /// Splits the step straddling `rank` so that `rank` becomes a boundary.
    pub fn with_boundary(&self, rank: usize) -> Result<Self> {
        if rank > self.total {
            return invalid(format!("boundary {rank} exceeds {} tokens", self.total));
        }
        if self.is_boundary(rank) {
            return Ok(self.clone());
        }
        let step = self.step_of_rank(rank)?;
        let head = rank - self.offsets[step - 1];
        let mut lengths = self.lengths.clone();
        lengths[step - 1] = head;
        lengths.insert(step, self.lengths[step - 1] - head);
        Self::from_lengths(lengths, self.total)
    }
}

pub fn make_schedule(kind: &ScheduleKind, total: usize) -> Result<StepSchedule> {
    StepSchedule::new(kind, total)
}

pub fn step_of_rank(schedule: &StepSchedule, rank: usize) -> Result<usize> {
    schedule.step_of_rank(rank)
}

fn isqrt(v: usize) -> usize {
    let mut r = (v as f64).sqrt() as usize;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn odd_256() {
        let s = StepSchedule::new(&ScheduleKind::Odd, 256).unwrap();
        assert_eq!(s.num_steps(), 16);
        assert_eq!(s.lengths(), (1..=16).map(|k| 2 * k - 1).collect::<Vec<_>>());
        assert_eq!(s.step_of_rank(0).unwrap(), 1);
        assert_eq!(s.step_of_rank(224).unwrap(), 15);
        assert_eq!(s.step_of_rank(225).unwrap(), 16);
        assert_eq!(s.step_of_rank(255).unwrap(), 16);
        assert!(s.step_of_rank(256).is_err());
    }

    #[test]
    fn half_256() {
        let s = StepSchedule::new(&ScheduleKind::Half, 256).unwrap();
        let mut want: Vec<usize> = (1..=15).flat_map(|v| [v, v]).collect();
        want.push(16);
        assert_eq!(s.lengths(), want.as_slice());
        assert_eq!(s.num_steps(), 31);
        assert_eq!(s.step_of_rank(239).unwrap(), 30);
        assert_eq!(s.step_of_rank(240).unwrap(), 31);
    }

    #[test]
    fn small_kinds() {
        assert_eq!(
            StepSchedule::new(&ScheduleKind::Ones, 4).unwrap().lengths(),
            &[1, 1, 1, 1]
        );
        assert_eq!(
            StepSchedule::new(&ScheduleKind::Uniform(3), 7)
                .unwrap()
                .lengths(),
            &[3, 3, 1]
        );
        assert_eq!(
            StepSchedule::new(&ScheduleKind::Uniform(3), 6)
                .unwrap()
                .lengths(),
            &[3, 3]
        );
        assert_eq!(
            StepSchedule::new(&ScheduleKind::Half, 1).unwrap().lengths(),
            &[1]
        );
        assert_eq!(
            StepSchedule::new(&ScheduleKind::Half, 3).unwrap().lengths(),
            &[1, 1, 1]
        );
    }

    #[test]
    fn invalid_inputs() {
        assert!(StepSchedule::new(&ScheduleKind::Odd, 255).is_err());
        assert!(StepSchedule::new(&ScheduleKind::Ones, 0).is_err());
        assert!(StepSchedule::new(&ScheduleKind::Uniform(0), 5).is_err());
        assert!(StepSchedule::new(&ScheduleKind::Custom(vec![1, 2]), 4).is_err());
        assert!(StepSchedule::new(&ScheduleKind::Custom(vec![1, 0, 3]), 4).is_err());
    }

    #[test]
    fn parse_kinds() {
        for text in ["odd", "half", "ones", "uniform:4", "custom:1,3,5"] {
            let kind: ScheduleKind = text.parse().unwrap();
            assert_eq!(kind.to_string(), text);
        }
        assert!("uniform".parse::<ScheduleKind>().is_err());
        assert!("spiral".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn boundary_split() {
        let s = StepSchedule::new(&ScheduleKind::Odd, 256).unwrap();
        // odd offsets are perfect squares, so a 12x12 center prefix aligns
        assert!(s.is_boundary(144));
        assert!(!s.is_boundary(150));
        assert_eq!(s.nearest_boundaries(150), (144, 169));
        let split = s.with_boundary(150).unwrap();
        assert!(split.is_boundary(150));
        assert_eq!(split.num_steps(), 17);
        assert_eq!(split.lengths()[12], 6);
        assert_eq!(split.lengths()[13], 19);
        assert!(s.is_boundary(64));
        assert!(s.is_boundary(256));
    }

    proptest! {
        #[test]
        fn lengths_sum_to_total(t in 1usize..=1024, c in 1usize..40) {
            let mut kinds = vec![ScheduleKind::Half, ScheduleKind::Ones, ScheduleKind::Uniform(c)];
            let root = isqrt(t);
            if root * root == t {
                kinds.push(ScheduleKind::Odd);
            }
            for kind in kinds {
                let s = StepSchedule::new(&kind, t).unwrap();
                prop_assert_eq!(s.lengths().iter().sum::<usize>(), t);
                prop_assert!(s.lengths().iter().all(|&l| l >= 1));
                let steps = s.steps_by_rank();
                for (rank, &step) in steps.iter().enumerate() {
                    prop_assert_eq!(s.step_of_rank(rank).unwrap(), step);
                    prop_assert!(s.step_range(step).contains(&rank));
                }
            }
        }
    }
}
