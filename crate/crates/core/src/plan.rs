//! Factorization planning: which dimensions leave the flow at each scale.
//!
//! The ranking planner reads cumulative per-dimension log-det maps off a
//! pretrained no-factorization model at every scale boundary, ranks each
//! 2×2 spatial block of each channel, keeps the top half and factors the
//! bottom half (or the reverse), then recurses on the kept dimensions.
//! Baselines: the static channel split and a seeded random half-partition.
//! Plans are immutable once derived and serialize to a versioned text file.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::flow::{
    scale_boundaries, squeeze_perm, unsqueeze_perm, FactorLayer, FlowModel, Layout, LogDetMap,
};
use crate::tensor::Tensor;

pub const FFPLAN_HEADER: &str = "FFPLAN v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Lcma,
    StaticRealnvp,
    Random,
    ReverseLcma,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Lcma, Strategy::StaticRealnvp, Strategy::Random, Strategy::ReverseLcma];

    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::Lcma => "lcma",
            Strategy::StaticRealnvp => "static-realnvp",
            Strategy::Random => "random",
            Strategy::ReverseLcma => "reverse-lcma",
        }
    }

    /// True for the strategies that need a pretrained model's log-det maps.
    pub fn needs_pretrained(&self) -> bool {
        matches!(self, Strategy::Lcma | Strategy::ReverseLcma)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "lcma" => Ok(Strategy::Lcma),
            "static-realnvp" | "static" => Ok(Strategy::StaticRealnvp),
            "random" => Ok(Strategy::Random),
            "reverse-lcma" | "reverse" => Ok(Strategy::ReverseLcma),
            other => Err(Error::Plan(format!("unknown strategy '{other}'"))),
        }
    }
}

/// One scale's split. `layout` is the squeezed layout the indices refer to;
/// list position defines the dimension's coordinate after the split (keep
/// ranks become the channels of the next scale's input).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleEntry {
    pub layout: Layout,
    pub keep: Vec<usize>,
    pub factor: Vec<usize>,
}

/// Immutable factorization plan: strategy, derivation seed, and one entry
/// per scale, each splitting the previous scale's kept dimensions in half.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizationPlan {
    pub strategy: Strategy,
    pub seed: u64,
    pub input: Layout,
    pub scales: Vec<ScaleEntry>,
}

impl FactorizationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Plan("plan has no scales".into()));
        }
        let mut cur = self.input;
        for (k, entry) in self.scales.iter().enumerate() {
            let sq = cur
                .squeezed()
                .map_err(|_| Error::Plan(format!("scale {}: input {cur} not squeezable", k + 1)))?;
            if entry.layout != sq {
                return Err(Error::Plan(format!(
                    "scale {}: layout {} does not chain from {cur}",
                    k + 1,
                    entry.layout
                )));
            }
            FactorLayer::new(entry.keep.clone(), entry.factor.clone())
                .map_err(|e| Error::Plan(format!("scale {}: {e}", k + 1)))?;
            if entry.keep.len() * 2 != sq.dims() {
                return Err(Error::Plan(format!(
                    "scale {}: split of {} dims does not match layout {}",
                    k + 1,
                    entry.keep.len() * 2,
                    entry.layout
                )));
            }
            cur = sq.halved()?;
        }
        Ok(())
    }

    pub fn to_factor_layers(&self) -> Result<Vec<FactorLayer>> {
        self.validate()?;
        self.scales
            .iter()
            .map(|e| FactorLayer::new(e.keep.clone(), e.factor.clone()))
            .collect()
    }

    // ── FFPLAN text format ──────────────────────────────────────────

    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{FFPLAN_HEADER}")?;
        writeln!(w, "strategy={}", self.strategy)?;
        writeln!(w, "seed={}", self.seed)?;
        for (k, e) in self.scales.iter().enumerate() {
            writeln!(
                w,
                "scale={} layout={} keep={} factor={}",
                k + 1,
                e.layout,
                join(&e.keep),
                join(&e.factor)
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: &mut R, path: &str) -> Result<FactorizationPlan> {
        let corrupt = |detail: String| Error::format(path, detail);
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let mut it = lines.iter();
        if it.next().map(String::as_str) != Some(FFPLAN_HEADER) {
            return Err(corrupt(format!("missing '{FFPLAN_HEADER}' header")));
        }
        let strategy: Strategy = it
            .next()
            .and_then(|l| l.strip_prefix("strategy="))
            .ok_or_else(|| corrupt("missing strategy= line".into()))?
            .parse()?;
        let seed: u64 = it
            .next()
            .and_then(|l| l.strip_prefix("seed="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing or invalid seed= line".into()))?;
        let mut scales = Vec::new();
        for (i, line) in it.enumerate() {
            let mut fields = line.split_whitespace();
            let scale_no: usize = fields
                .next()
                .and_then(|f| f.strip_prefix("scale="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt(format!("bad scale line: {line}")))?;
            if scale_no != i + 1 {
                return Err(corrupt(format!("scale lines out of order at scale={scale_no}")));
            }
            let layout = fields
                .next()
                .and_then(|f| f.strip_prefix("layout="))
                .and_then(parse_layout)
                .ok_or_else(|| corrupt(format!("bad layout field: {line}")))?;
            let keep = fields
                .next()
                .and_then(|f| f.strip_prefix("keep="))
                .and_then(parse_csv)
                .ok_or_else(|| corrupt(format!("bad keep field: {line}")))?;
            let factor = fields
                .next()
                .and_then(|f| f.strip_prefix("factor="))
                .and_then(parse_csv)
                .ok_or_else(|| corrupt(format!("bad factor field: {line}")))?;
            if fields.next().is_some() {
                return Err(corrupt(format!("trailing fields: {line}")));
            }
            scales.push(ScaleEntry { layout, keep, factor });
        }
        let first = scales.first().ok_or_else(|| corrupt("plan has no scale lines".into()))?;
        if first.layout.c % 4 != 0 {
            return Err(corrupt(format!("first scale layout {} is not a squeezed layout", first.layout)));
        }
        let input = Layout::new(first.layout.s * 2, first.layout.c / 4);
        let plan = FactorizationPlan { strategy, seed, input, scales };
        plan.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufWriter::new(f);
        self.write_text(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FactorizationPlan> {
        let display = path.as_ref().display().to_string();
        let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufReader::new(f);
        FactorizationPlan::read_text(&mut f, &display)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_layout(s: &str) -> Option<Layout> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 || parts[0] != parts[1] {
        return None;
    }
    Some(Layout::new(parts[0].parse().ok()?, parts[2].parse().ok()?))
}

fn parse_csv(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|v| v.parse().ok()).collect()
}

/// Ranks every 2×2 spatial block of every channel of a log-det map viewed at
/// `layout` (s×s×c, s even): the 2 largest entries go to keep, the 2
/// smallest to factor; ties are broken by sub-pixel raster order (earlier
/// position wins the higher rank). Returned indices live in the squeezed
/// s/2×s/2×4c layout; list position `((i·s/2)+j)·2c + r·c + k` holds the
/// rank-`r` dimension of channel `k` at position (i, j).
pub fn rank_blocks(map: &LogDetMap) -> Result<(Vec<usize>, Vec<usize>)> {
    rank_blocks_values(&map.live, map.layout, false)
}

/// [`rank_blocks`] with the comparison inverted: smallest entries are kept.
pub fn rank_blocks_reversed(map: &LogDetMap) -> Result<(Vec<usize>, Vec<usize>)> {
    rank_blocks_values(&map.live, map.layout, true)
}

fn rank_blocks_values(values: &[f64], layout: Layout, reverse: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if values.len() != layout.dims() {
        return Err(Error::Plan(format!(
            "map has {} entries for layout {layout}",
            values.len()
        )));
    }
    let sq = layout.squeezed().map_err(|_| {
        Error::Plan(format!("rank_blocks needs an even spatial extent, got {layout}"))
    })?;
    let half = Layout::new(sq.s, sq.c / 2);
    let mut keep = vec![0usize; half.dims()];
    let mut factor = vec![0usize; half.dims()];
    for i in 0..sq.s {
        for j in 0..sq.s {
            for k in 0..layout.c {
                // the 4 sub-pixel candidates of this block and channel, in
                // raster order; stable sort keeps that order on ties
                let mut cand: Vec<(f64, usize)> = (0..4)
                    .map(|p| (values[layout.flat(2 * i + p / 2, 2 * j + p % 2, k)], p))
                    .collect();
                if reverse {
                    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
                } else {
                    cand.sort_by(|a, b| b.0.total_cmp(&a.0));
                }
                for r in 0..2 {
                    keep[half.flat(i, j, r * layout.c + k)] = sq.flat(i, j, cand[r].1 * layout.c + k);
                    factor[half.flat(i, j, r * layout.c + k)] =
                        sq.flat(i, j, cand[r + 2].1 * layout.c + k);
                }
            }
        }
    }
    Ok((keep, factor))
}

/// Derives the ranking plan from a pretrained no-factorization model: ranks
/// the boundary log-det map at the first scale, restricts the map to the
/// kept dimensions, and recurses at each subsequent boundary.
pub fn derive_plan_lcma(pretrained: &FlowModel, reference: &Tensor) -> Result<FactorizationPlan> {
    derive_ranked(pretrained, reference, false)
}

/// Same recursion with the ranking inverted (worst-case baseline: early
/// gaussianization of the high log-det dimensions).
pub fn derive_plan_reverse_lcma(
    pretrained: &FlowModel,
    reference: &Tensor,
) -> Result<FactorizationPlan> {
    derive_ranked(pretrained, reference, true)
}

fn derive_ranked(model: &FlowModel, reference: &Tensor, reverse: bool) -> Result<FactorizationPlan> {
    let boundaries = scale_boundaries(model)?;
    let d = model.input_layout.dims();
    if reference.rank() != 2 || reference.shape()[1] != d {
        return Err(Error::Plan(format!(
            "reference batch must be [n, {d}], got {:?}",
            reference.shape()
        )));
    }
    let (_, snaps) = model.forward_traced(reference)?;

    let mut entries = Vec::with_capacity(boundaries.len());
    // `planned_in` is the plan-side scale-input layout; `sel[v]` maps the
    // plan-side squeezed coordinate v to the pretrained model's coordinate
    // at the same boundary, so boundary maps can be restricted to kept dims.
    let mut planned_in = model.input_layout;
    let mut sel: Vec<usize> = (0..planned_in.squeezed()?.dims()).collect();
    for (k, &b) in boundaries.iter().enumerate() {
        let snap = &snaps[b];
        let planned_sq = planned_in.squeezed()?;
        debug_assert_eq!(sel.len(), planned_sq.dims());
        let m_sq: Vec<f64> = sel.iter().map(|&u| snap.live[u]).collect();
        // view the restricted map one unsqueeze back, where the 2×2 blocks live
        let tau = squeeze_perm(&planned_in)?;
        let mut m_in = vec![0.0; planned_in.dims()];
        for (v, &src) in tau.iter().enumerate() {
            m_in[src] = m_sq[v];
        }
        let (keep, factor) = rank_blocks_values(&m_in, planned_in, reverse)?;
        if k + 1 < boundaries.len() {
            let next_in = planned_sq.halved()?;
            let tau_next = squeeze_perm(&next_in)?;
            let pre_unsq = unsqueeze_perm(&snap.layout)?;
            sel = tau_next.iter().map(|&t| pre_unsq[sel[keep[t]]]).collect();
            planned_in = next_in;
        }
        entries.push(ScaleEntry { layout: planned_sq, keep, factor });
    }
    let plan = FactorizationPlan {
        strategy: if reverse { Strategy::ReverseLcma } else { Strategy::Lcma },
        seed: 0,
        input: model.input_layout,
        scales: entries,
    };
    plan.validate()?;
    Ok(plan)
}

/// Channel split after each squeeze: keep the first 2c channels, factor the
/// rest, at every spatial position.
pub fn derive_plan_static(input: Layout, scales: usize) -> Result<FactorizationPlan> {
    let mut entries = Vec::with_capacity(scales);
    let mut cur = input;
    for _ in 0..scales {
        let sq = cur.squeezed().map_err(|_| {
            Error::Plan(format!("input {input} cannot support {scales} scales"))
        })?;
        let half = sq.halved()?;
        let mut keep = Vec::with_capacity(half.dims());
        let mut factor = Vec::with_capacity(half.dims());
        for i in 0..sq.s {
            for j in 0..sq.s {
                for r in 0..half.c {
                    keep.push(sq.flat(i, j, r));
                    factor.push(sq.flat(i, j, half.c + r));
                }
            }
        }
        entries.push(ScaleEntry { layout: sq, keep, factor });
        cur = half;
    }
    let plan =
        FactorizationPlan { strategy: Strategy::StaticRealnvp, seed: 0, input, scales: entries };
    plan.validate()?;
    Ok(plan)
}

/// Seeded uniform half-partition per scale, with no regard to spatiality or
/// log-det scores.
pub fn derive_plan_random(input: Layout, scales: usize, seed: u64) -> Result<FactorizationPlan> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(scales);
    let mut cur = input;
    for _ in 0..scales {
        let sq = cur.squeezed().map_err(|_| {
            Error::Plan(format!("input {input} cannot support {scales} scales"))
        })?;
        let mut idx: Vec<usize> = (0..sq.dims()).collect();
        idx.shuffle(&mut rng);
        let factor = idx.split_off(sq.dims() / 2);
        entries.push(ScaleEntry { layout: sq, keep: idx, factor });
        cur = sq.halved()?;
    }
    let plan = FactorizationPlan { strategy: Strategy::Random, seed, input, scales: entries };
    plan.validate()?;
    Ok(plan)
}

/// Strategy dispatcher. `pretrained` (model, reference batch) is required
/// for the ranking strategies and ignored by the baselines; `seed` is
/// recorded in the plan and drives the random strategy.
pub fn derive_plan(
    strategy: Strategy,
    input: Layout,
    scales: usize,
    seed: u64,
    pretrained: Option<(&FlowModel, &Tensor)>,
) -> Result<FactorizationPlan> {
    let mut plan = match strategy {
        Strategy::Lcma | Strategy::ReverseLcma => {
            let (model, reference) = pretrained.ok_or_else(|| {
                Error::Plan(format!("strategy {strategy} requires a pretrained model"))
            })?;
            if model.input_layout != input {
                return Err(Error::Plan(format!(
                    "pretrained model layout {} does not match requested {input}",
                    model.input_layout
                )));
            }
            let n_squeezes =
                model.layers.iter().filter(|l| matches!(l, crate::flow::Layer::Squeeze)).count();
            if n_squeezes != scales {
                return Err(Error::Plan(format!(
                    "pretrained model has {n_squeezes} scales, requested {scales}"
                )));
            }
            if strategy == Strategy::Lcma {
                derive_plan_lcma(model, reference)?
            } else {
                derive_plan_reverse_lcma(model, reference)?
            }
        }
        Strategy::StaticRealnvp => derive_plan_static(input, scales)?,
        Strategy::Random => derive_plan_random(input, scales, seed)?,
    };
    plan.seed = seed;
    Ok(plan)
}
