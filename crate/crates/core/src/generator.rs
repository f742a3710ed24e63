//! Stepwise next-any-tokens sampling with the KV cache, prefix-conditioned
//! extension, and the `EARTOK v1` token-grid file format.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, EarError, Result};
use crate::kv_cache::{CacheSlot, FedSlot, KvCache};
use crate::model::{argmax, MaskMode, Matrix, ModelParameters, Real};
use crate::schedule::StepSchedule;
use crate::spiral::{Grid, SpiralMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    Greedy,
    Stochastic,
}

impl FromStr for SamplingMode {
    type Err = EarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SamplingMode::Greedy),
            "stochastic" => Ok(SamplingMode::Stochastic),
            _ => invalid(format!("unknown sampling mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; `0` disables the filter.
    pub top_k: usize,
    pub seed: u64,
    pub mode: SamplingMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            mode: SamplingMode::Greedy,
        }
    }

    pub fn stochastic(temperature: f64, top_k: usize, seed: u64) -> Self {
        Self {
            temperature,
            top_k,
            seed,
            mode: SamplingMode::Stochastic,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.top_k > vocab {
            return invalid(format!(
                "top_k {} exceeds vocabulary size {vocab}",
                self.top_k
            ));
        }
        Ok(())
    }
}

/// Picks one token from a logit row. Greedy takes the argmax (lowest index
/// on ties); stochastic samples `softmax(logits / T)` over the top-k set.
pub fn sample_row<F: Real>(
    logits: &[F],
    sampling: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    if logits.is_empty() {
        return invalid("empty logit row");
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(EarError::Numeric("non-finite logits".into()));
    }
    sampling.validate(logits.len())?;
    if sampling.mode == SamplingMode::Greedy {
        return Ok(argmax(logits) as u32);
    }
    let values: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if sampling.top_k > 0 && sampling.top_k < values.len() {
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.truncate(sampling.top_k);
    }
    let max = idx
        .iter()
        .map(|&i| values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((values[i] - max) / sampling.temperature).exp())
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| EarError::Numeric(e.to_string()))?;
    Ok(idx[dist.sample(rng)] as u32)
}

/// An `n × n` grid of token ids with an optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub n: usize,
    pub tokens: Grid,
    pub class_id: Option<usize>,
}

impl TokenGrid {
    pub fn new(tokens: Grid, class_id: Option<usize>) -> Result<Self> {
        let n = tokens.len();
        if n == 0 || tokens.iter().any(|r| r.len() != n) {
            return invalid("token grid must be square and non-empty");
        }
        Ok(Self {
            n,
            tokens,
            class_id,
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().flatten().find(|&&t| t as usize >= vocab) {
            Some(t) => invalid(format!("token id {t} out of range 0..{vocab}")),
            None => Ok(()),
        }
    }

    /// `EARTOK v1` text: a header line then `n` rows of space-separated ids.
    pub fn to_eartok(&self) -> String {
        let mut out = String::new();
        let class = self.class_id.map_or("-".to_string(), |c| c.to_string());
        writeln!(out, "EARTOK v1 n={} class={class}", self.n).unwrap();
        for row in &self.tokens {
            let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    /// Strict parser: accepts exactly the text [`Self::to_eartok`] emits.
    pub fn from_eartok(text: &str) -> Result<Self> {
        let bad = |msg: String| EarError::Format(msg);
        let Some(body) = text.strip_suffix('\n') else {
            return Err(bad("EARTOK file must end with a newline".into()));
        };
        let mut lines = body.split('\n');
        let header = lines.next().unwrap_or_default();
        let rest = header
            .strip_prefix("EARTOK v1 n=")
            .ok_or_else(|| bad(format!("bad EARTOK header {header:?}")))?;
        let (n_text, class_text) = rest
            .split_once(" class=")
            .ok_or_else(|| bad(format!("bad EARTOK header {header:?}")))?;
        let n = canonical_uint(n_text).ok_or_else(|| bad(format!("bad grid size {n_text:?}")))?;
        let class_id = match class_text {
            "-" => None,
            c => Some(canonical_uint(c).ok_or_else(|| bad(format!("bad class {c:?}")))?),
        };
        let mut tokens = Vec::with_capacity(n);
        for line in lines {
            let row: Vec<u32> = line
                .split(' ')
                .map(|t| {
                    canonical_uint(t)
                        .and_then(|v| u32::try_from(v).ok())
                        .ok_or_else(|| bad(format!("bad token {t:?}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != n {
                return Err(bad(format!("row has {} tokens, expected {n}", row.len())));
            }
            tokens.push(row);
        }
        if tokens.len() != n {
            return Err(bad(format!("found {} rows, expected {n}", tokens.len())));
        }
        TokenGrid::new(tokens, class_id).map_err(|e| bad(e.to_string()))
    }
}

fn canonical_uint(s: &str) -> Option<usize> {
    let ok =
        !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if ok {
        s.parse().ok()
    } else {
        None
    }
}

/// Everything produced by one stepwise generation run.
#[derive(Debug, Clone)]
pub struct GenerationTrace<F> {
    /// Rank-ordered tokens.
    pub tokens: Vec<u32>,
    /// MT logits by rank (`T × V`), before any logit hook.
    pub mt_logits: Matrix<F>,
    /// Cache length after each step, step 0 being the lone start token.
    pub cache_lengths: Vec<usize>,
    pub peak_cache_len: usize,
    /// Cache layout after the last step.
    pub final_slots: Vec<CacheSlot>,
}

type LogitHook<'a, F> = Box<dyn Fn(&mut [F]) + Send + Sync + 'a>;

/// Drives the cached step loop for one parameter set.
pub struct Generator<'a, F: Real> {
    params: &'a ModelParameters<F>,
    mask_mode: MaskMode,
    logit_hook: Option<LogitHook<'a, F>>,
}

impl<'a, F: Real> Generator<'a, F> {
    pub fn new(params: &'a ModelParameters<F>) -> Self {
        Self {
            params,
            mask_mode: MaskMode::Unified,
            logit_hook: None,
        }
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    /// Transform applied to every MT logit row before sampling (e.g. a
    /// guidance rule). Not applied to force-fed prefix steps.
    pub fn with_logit_hook(mut self, hook: impl Fn(&mut [F]) + Send + Sync + 'a) -> Self {
        self.logit_hook = Some(Box::new(hook));
        self
    }

    /// Runs all steps of `schedule`. Ranks below `prefix.len()` take the
    /// prefix tokens instead of sampled ones; the prefix must end on a step
    /// boundary.
    pub fn run(
        &self,
        class_id: usize,
        schedule: &StepSchedule,
        sampling: &SamplingConfig,
        prefix: &[u32],
    ) -> Result<GenerationTrace<F>> {
        let cfg = &self.params.config;
        if class_id >= cfg.num_classes {
            return invalid(format!(
                "class id {class_id} out of range 0..{}",
                cfg.num_classes
            ));
        }
        sampling.validate(cfg.vocab_size)?;
        let t = schedule.total();
        if prefix.len() > t {
            return invalid(format!("prefix of {} tokens exceeds {t}", prefix.len()));
        }
        if !schedule.is_boundary(prefix.len()) {
            let (lo, hi) = schedule.nearest_boundaries(prefix.len());
            return invalid(format!(
                "prefix length {} is not on a step boundary; nearest boundaries are {lo} and {hi}",
                prefix.len()
            ));
        }
        if let Some(&tok) = prefix.iter().find(|&&v| v as usize >= cfg.vocab_size) {
            return invalid(format!(
                "prefix token {tok} out of range 0..{}",
                cfg.vocab_size
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut cache = KvCache::<F>::new(cfg, t);
        let mut tokens: Vec<u32> = Vec::with_capacity(t);
        let mut mt_logits = Matrix::zeros(t, cfg.vocab_size);
        let mut cache_lengths = Vec::with_capacity(schedule.num_steps() + 1);

        cache.step_forward(
            self.params,
            &[FedSlot::start(class_id)],
            class_id,
            self.mask_mode,
        )?;
        cache_lengths.push(cache.len());

        for step in 1..=schedule.num_steps() {
            let range = schedule.step_range(step);
            let mut block = Vec::new();
            if step > 1 {
                let prev = schedule.step_range(step - 1);
                cache.rewind_to(1 + prev.start)?;
                block.extend(prev.map(|r| FedSlot::gt(r, tokens[r])));
            }
            let gt_rows = block.len();
            block.extend(range.clone().map(FedSlot::mt));
            let logits = cache.step_forward(self.params, &block, class_id, self.mask_mode)?;
            cache_lengths.push(cache.len());

            for (i, rank) in range.clone().enumerate() {
                let row = logits.row(gt_rows + i);
                mt_logits.row_mut(rank).copy_from_slice(row);
                if rank < prefix.len() {
                    tokens.push(prefix[rank]);
                    continue;
                }
                let tok = match &self.logit_hook {
                    Some(hook) => {
                        let mut row = row.to_vec();
                        hook(&mut row);
                        sample_row(&row, sampling, &mut rng)?
                    }
                    None => sample_row(row, sampling, &mut rng)?,
                };
                tokens.push(tok);
            }
        }
        cache.check_invariants()?;
        Ok(GenerationTrace {
            tokens,
            mt_logits,
            cache_lengths,
            peak_cache_len: cache.peak_len(),
            final_slots: cache.slots().to_vec(),
        })
    }

    pub fn generate(
        &self,
        class_id: usize,
        schedule: &StepSchedule,
        sampling: &SamplingConfig,
        map: &SpiralMap,
    ) -> Result<TokenGrid> {
        self.extend_from_prefix(class_id, &[], schedule, sampling, map)
    }

    /// Force-feeds `prefix` (rank order) and samples the remaining steps.
    pub fn extend_from_prefix(
        &self,
        class_id: usize,
        prefix: &[u32],
        schedule: &StepSchedule,
        sampling: &SamplingConfig,
        map: &SpiralMap,
    ) -> Result<TokenGrid> {
        if schedule.total() != map.len() {
            return invalid(format!(
                "schedule covers {} tokens but the grid has {}",
                schedule.total(),
                map.len()
            ));
        }
        let trace = self.run(class_id, schedule, sampling, prefix)?;
        TokenGrid::new(map.unflatten(&trace.tokens)?, Some(class_id))
    }

    /// Keeps the centered `m × m` block of `source` and regenerates the rest
    /// under `target_class`. The schedule is split at `m²` when that is not
    /// already a step boundary.
    pub fn cross_class_extend(
        &self,
        source: &TokenGrid,
        m: usize,
        target_class: usize,
        schedule: &StepSchedule,
        sampling: &SamplingConfig,
    ) -> Result<TokenGrid> {
        let map = SpiralMap::new(source.n)?;
        let block = map.center_block(m)?;
        if !block.is_prefix {
            return invalid(format!(
                "centered {m}x{m} block is not a spiral prefix of the {0}x{0} grid",
                source.n
            ));
        }
        let seq = map.flatten(&source.tokens)?;
        let p = m * m;
        let schedule = schedule.with_boundary(p)?;
        self.extend_from_prefix(target_class, &seq[..p], &schedule, sampling, &map)
    }
}

pub fn generate<F: Real>(
    params: &ModelParameters<F>,
    class_id: usize,
    schedule: &StepSchedule,
    sampling: &SamplingConfig,
    map: &SpiralMap,
) -> Result<TokenGrid> {
    Generator::new(params).generate(class_id, schedule, sampling, map)
}

pub fn extend_from_prefix<F: Real>(
    params: &ModelParameters<F>,
    class_id: usize,
    prefix: &[u32],
    schedule: &StepSchedule,
    sampling: &SamplingConfig,
    map: &SpiralMap,
) -> Result<TokenGrid> {
    Generator::new(params).extend_from_prefix(class_id, prefix, schedule, sampling, map)
}

pub fn cross_class_extend<F: Real>(
    params: &ModelParameters<F>,
    source: &TokenGrid,
    m: usize,
    target_class: usize,
    schedule: &StepSchedule,
    sampling: &SamplingConfig,
) -> Result<TokenGrid> {
    Generator::new(params).cross_class_extend(source, m, target_class, schedule, sampling)
}
