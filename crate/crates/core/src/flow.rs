//! Invertible flow layers and their composition.
//!
//! A [`FlowModel`] is an ordered list of affine coupling, squeeze and factor
//! layers over a channel-last spatial layout. Forward evaluation produces the
//! factored latent parts, the exact per-example log-determinant, and a
//! [`LogDetMap`]: per-dimension log-det contributions averaged over the batch,
//! which permute with the variables under squeezing and freeze when factored
//! out. Data tensors are `[batch, dims]` with dims flattened row-major as
//! `((i*s)+j)*c + k`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{BoundParams, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic bytes of the model container format.
pub const FFM1_MAGIC: &[u8; 4] = b"FFM1";

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Square spatial grid with channels, flattened channel-last row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub s: usize,
    pub c: usize,
}

impl Layout {
    pub fn new(s: usize, c: usize) -> Self {
        Layout { s, c }
    }

    pub fn dims(&self) -> usize {
        self.s * self.s * self.c
    }

    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.s) + j) * self.c + k
    }

    /// Layout after one squeeze: s/2 × s/2 × 4c.
    pub fn squeezed(&self) -> Result<Layout> {
        if self.s < 2 || self.s % 2 != 0 {
            return Err(Error::Layout(format!("cannot squeeze odd spatial extent {}", self.s)));
        }
        Ok(Layout { s: self.s / 2, c: 4 * self.c })
    }

    /// Layout after factoring out half the (even) channels.
    pub fn halved(&self) -> Result<Layout> {
        if self.c % 2 != 0 {
            return Err(Error::Layout(format!("cannot halve odd channel count {}", self.c)));
        }
        Ok(Layout { s: self.s, c: self.c / 2 })
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.s, self.s, self.c)
    }
}

/// Gather permutation realizing the squeeze: entry `t` is the source flat
/// index (in `l`) of target flat index `t` in `l.squeezed()`. Each 2×2 block
/// of each channel maps to 4 consecutive channel groups in sub-pixel order
/// top-left, top-right, bottom-left, bottom-right.
pub fn squeeze_perm(l: &Layout) -> Result<Vec<usize>> {
    let out = l.squeezed()?;
    let mut perm = vec![0usize; out.dims()];
    for i_out in 0..out.s {
        for j_out in 0..out.s {
            for ch_out in 0..out.c {
                let p = ch_out / l.c; // sub-pixel 0..4
                let k = ch_out % l.c;
                let i = 2 * i_out + p / 2;
                let j = 2 * j_out + p % 2;
                perm[out.flat(i_out, j_out, ch_out)] = l.flat(i, j, k);
            }
        }
    }
    Ok(perm)
}

/// Inverse of [`squeeze_perm`]: entry `w` is the squeezed-layout flat index
/// holding pre-squeeze flat index `w`.
pub fn unsqueeze_perm(l: &Layout) -> Result<Vec<usize>> {
    let fwd = squeeze_perm(l)?;
    let mut inv = vec![0usize; fwd.len()];
    for (v, &w) in fwd.iter().enumerate() {
        inv[w] = v;
    }
    Ok(inv)
}

/// Checkerboard mask over `l`: 1 (passive) where `(i+j) % 2 == parity`.
pub fn checkerboard_mask(l: &Layout, parity: usize) -> Result<Tensor> {
    if l.s < 2 {
        return Err(Error::Layout("checkerboard mask needs spatial extent >= 2".into()));
    }
    let mut m = vec![0.0; l.dims()];
    for i in 0..l.s {
        for j in 0..l.s {
            if (i + j) % 2 == parity % 2 {
                for k in 0..l.c {
                    m[l.flat(i, j, k)] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![l.dims()], m)
}

/// Channel-half mask over `l`: the low half-channels are passive when
/// `low_passive`, otherwise the high half.
pub fn channel_mask(l: &Layout, low_passive: bool) -> Result<Tensor> {
    if l.c < 2 || l.c % 2 != 0 {
        return Err(Error::Layout(format!("channel mask needs even channel count, got {}", l.c)));
    }
    let mut m = vec![0.0; l.dims()];
    for i in 0..l.s {
        for j in 0..l.s {
            for k in 0..l.c {
                let low = k < l.c / 2;
                if low == low_passive {
                    m[l.flat(i, j, k)] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![l.dims()], m)
}

type ParamFetch<'a> = dyn FnMut(&mut Graph, ParamId) -> NodeId + 'a;

/// Dense 2-hidden-layer tanh network; the output layer is zero-initialized
/// so freshly built couplings are identity maps.
#[derive(Debug, Clone)]
pub struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Mlp {
        Mlp {
            w1: store.register(format!("{prefix}.w1"), xavier(rng, d_in, hidden), true),
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]), false),
            w2: store.register(format!("{prefix}.w2"), xavier(rng, hidden, hidden), true),
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[1, hidden]), false),
            w3: store.register(format!("{prefix}.w3"), Tensor::zeros(&[hidden, d_out]), true),
            b3: store.register(format!("{prefix}.b3"), Tensor::zeros(&[1, d_out]), false),
        }
    }

    fn from_tensors(store: &mut ParamStore, prefix: &str, t: Vec<Tensor>) -> Result<Mlp> {
        let [w1, b1, w2, b2, w3, b3]: [Tensor; 6] =
            t.try_into().map_err(|_| Error::Layout("mlp needs 6 tensors".into()))?;
        let valid = w1.rank() == 2
            && b1.shape() == [1, w1.shape()[1]]
            && w2.shape() == [w1.shape()[1], w1.shape()[1]]
            && b2.shape() == b1.shape()
            && w3.shape()[0] == w1.shape()[1]
            && b3.shape() == [1, w3.shape()[1]];
        if !valid {
            return Err(Error::Layout(format!("inconsistent mlp shapes for {prefix}")));
        }
        Ok(Mlp {
            w1: store.register(format!("{prefix}.w1"), w1, true),
            b1: store.register(format!("{prefix}.b1"), b1, false),
            w2: store.register(format!("{prefix}.w2"), w2, true),
            b2: store.register(format!("{prefix}.b2"), b2, false),
            w3: store.register(format!("{prefix}.w3"), w3, true),
            b3: store.register(format!("{prefix}.b3"), b3, false),
        })
    }

    fn param_ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// `x`: [B, d_in]; `ones`: [B, 1] used to replicate bias rows.
    fn forward(&self, g: &mut Graph, x: NodeId, ones: NodeId, fetch: &mut ParamFetch) -> Result<NodeId> {
        let mut h = x;
        for (wi, bi, act) in
            [(self.w1, self.b1, true), (self.w2, self.b2, true), (self.w3, self.b3, false)]
        {
            let w = fetch(g, wi);
            let b = fetch(g, bi);
            let prod = g.matmul(h, w)?;
            let bias = g.matmul(ones, b)?;
            h = g.add(prod, bias)?;
            if act {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Affine coupling: passive dims (mask 1) pass through and condition the
/// scale/shift networks; transformed dims (mask 0) map to `x·exp(s) + t`
/// with `s` clamped into [−c, c] via `c·tanh(s/c)`.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Tensor,
    passive: Vec<usize>,
    transformed: Vec<usize>,
    /// Recombination: layout dim `d` comes from `[passive..., transformed...][perm[d]]`.
    perm: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    pub clamp: f64,
}

fn mask_partition(mask: &Tensor) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if mask.rank() != 1 {
        return Err(Error::Layout(format!("mask must be rank 1, got {:?}", mask.shape())));
    }
    let mut passive = Vec::new();
    let mut transformed = Vec::new();
    for (d, &v) in mask.data().iter().enumerate() {
        match v {
            v if v == 1.0 => passive.push(d),
            v if v == 0.0 => transformed.push(d),
            _ => return Err(Error::Layout(format!("mask entry {v} is not 0 or 1"))),
        }
    }
    if passive.is_empty() || transformed.is_empty() {
        return Err(Error::Layout("mask must contain both 0 and 1 entries".into()));
    }
    let mut perm = vec![0usize; mask.numel()];
    for (pos, &d) in passive.iter().enumerate() {
        perm[d] = pos;
    }
    for (pos, &d) in transformed.iter().enumerate() {
        perm[d] = passive.len() + pos;
    }
    Ok((passive, transformed, perm))
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        mask: Tensor,
        hidden: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<CouplingLayer> {
        if !(clamp > 0.0) {
            return Err(Error::Layout(format!("scale clamp must be positive, got {clamp}")));
        }
        let (passive, transformed, perm) = mask_partition(&mask)?;
        let scale_net =
            Mlp::new(store, &format!("{prefix}.scale"), passive.len(), hidden, transformed.len(), rng);
        let shift_net =
            Mlp::new(store, &format!("{prefix}.shift"), passive.len(), hidden, transformed.len(), rng);
        Ok(CouplingLayer { mask, passive, transformed, perm, scale_net, shift_net, clamp })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn dims(&self) -> usize {
        self.mask.numel()
    }

    /// Graph-mode forward. Returns `(y, per_dim_logdet)`, both `[B, D]`;
    /// per-dim entries are the clamped `s` on transformed dims, 0 on passive.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ones: NodeId,
        fetch: &mut ParamFetch,
    ) -> Result<(NodeId, NodeId)> {
        let batch = g.value(x).shape()[0];
        let xp = g.gather(x, 1, &self.passive)?;
        let xt = g.gather(x, 1, &self.transformed)?;
        let s = self.clamped_scale(g, xp, ones, fetch)?;
        let t = self.shift_net.forward(g, xp, ones, fetch)?;
        let es = g.exp(s)?;
        let scaled = g.mul(xt, es)?;
        let yt = g.add(scaled, t)?;
        let cat = g.concat(1, &[xp, yt])?;
        let y = g.gather(cat, 1, &self.perm)?;
        let zeros = g.input(Tensor::zeros(&[batch, self.passive.len()]));
        let pd_cat = g.concat(1, &[zeros, s])?;
        let per_dim = g.gather(pd_cat, 1, &self.perm)?;
        Ok((y, per_dim))
    }

    fn clamped_scale(
        &self,
        g: &mut Graph,
        xp: NodeId,
        ones: NodeId,
        fetch: &mut ParamFetch,
    ) -> Result<NodeId> {
        let raw = self.scale_net.forward(g, xp, ones, fetch)?;
        let squashed = g.div_scalar(raw, self.clamp)?;
        let squashed = g.tanh(squashed)?;
        g.mul_scalar(squashed, self.clamp)
    }

    /// Plain forward over `[B, D]` values (same path as graph mode, on a
    /// private tape).
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let ones = g.input(Tensor::ones(&[x.shape()[0], 1]));
        let mut fetch = |g: &mut Graph, pid: ParamId| g.input(store.value(pid).clone());
        let (y, pd) = self.forward_graph(&mut g, xn, ones, &mut fetch)?;
        Ok((g.value(y).clone(), g.value(pd).clone()))
    }

    /// Exact inverse: passive dims copied, transformed dims `(y − t)·exp(−s)`.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        if y.rank() != 2 || y.shape()[1] != self.dims() {
            return Err(Error::shape(
                "coupling_inverse",
                format!("expected [batch, {}], got {:?}", self.dims(), y.shape()),
            ));
        }
        let yp = y.gather(1, &self.passive)?;
        let yt = y.gather(1, &self.transformed)?;
        let (s, t) = {
            let mut g = Graph::new();
            let xn = g.input(yp.clone());
            let ones = g.input(Tensor::ones(&[yp.shape()[0], 1]));
            let mut fetch = |g: &mut Graph, pid: ParamId| g.input(store.value(pid).clone());
            let s = self.clamped_scale(&mut g, xn, ones, &mut fetch)?;
            let t = self.shift_net.forward(&mut g, xn, ones, &mut fetch)?;
            (g.value(s).clone(), g.value(t).clone())
        };
        let xt = yt.sub(&t)?.mul(&s.neg()?.exp()?)?;
        Tensor::concat(1, &[&yp, &xt])?.gather(1, &self.perm)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.scale_net.param_ids().to_vec();
        ids.extend(self.shift_net.param_ids());
        ids
    }
}

/// Early-gaussianization split: `factor` dims leave the flow as a latent
/// part, `keep` dims continue. Both lists are ordered; list position defines
/// the dimension's coordinate in the part / in the continuing layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorLayer {
    pub keep: Vec<usize>,
    pub factor: Vec<usize>,
}

impl FactorLayer {
    pub fn new(keep: Vec<usize>, factor: Vec<usize>) -> Result<FactorLayer> {
        let fl = FactorLayer { keep, factor };
        fl.validate(fl.keep.len() + fl.factor.len())?;
        Ok(fl)
    }

    /// keep and factor must partition `0..dims` into equal halves.
    pub fn validate(&self, dims: usize) -> Result<()> {
        if self.keep.len() != self.factor.len() || self.keep.len() + self.factor.len() != dims {
            return Err(Error::Layout(format!(
                "factor layer must split {dims} dims in half, got {} keep / {} factor",
                self.keep.len(),
                self.factor.len()
            )));
        }
        let mut seen = vec![false; dims];
        for &d in self.keep.iter().chain(&self.factor) {
            if d >= dims || seen[d] {
                return Err(Error::Layout(format!("factor layer indices must cover 0..{dims} exactly once")));
            }
            seen[d] = true;
        }
        Ok(())
    }

    /// Permutation merging `[keep_vals..., factor_vals...]` back to source
    /// order: entry `d` is the concat position holding source dim `d`.
    fn merge_perm(&self) -> Vec<usize> {
        let dims = self.keep.len() + self.factor.len();
        let mut perm = vec![0usize; dims];
        for (t, &d) in self.keep.iter().enumerate() {
            perm[d] = t;
        }
        for (t, &d) in self.factor.iter().enumerate() {
            perm[d] = self.keep.len() + t;
        }
        perm
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Coupling(CouplingLayer),
    Squeeze,
    Factor(FactorLayer),
}

/// Per-dimension log-det contributions averaged over a reference batch.
/// `live` is aligned with the current variable layout; `frozen` holds, per
/// factor layer, the factored dims' values at factoring time (aligned with
/// that layer's factor list).
#[derive(Debug, Clone)]
pub struct LogDetMap {
    pub layout: Layout,
    pub live: Vec<f64>,
    pub frozen: Vec<Vec<f64>>,
}

impl LogDetMap {
    /// Sum of every entry, live and frozen; equals the batch-mean total
    /// log-det of the forward pass that produced the map.
    pub fn total(&self) -> f64 {
        self.live.iter().sum::<f64>() + self.frozen.iter().flatten().sum::<f64>()
    }
}

/// Live log-det map after one layer, in that point's layout.
#[derive(Debug, Clone)]
pub struct MapSnapshot {
    pub layout: Layout,
    pub live: Vec<f64>,
}

/// Graph-mode forward pass outputs.
pub struct GraphForward {
    /// Latent parts in emission order; the final live variables are last.
    pub z_parts: Vec<NodeId>,
    /// Per-example total log-det, shape `[B]`.
    pub log_det: NodeId,
    /// Per coupling layer (in layer order), its `[B, D_live]` per-dim log-det.
    pub coupling_per_dim: Vec<NodeId>,
}

/// Plain forward pass outputs.
pub struct FlowForward {
    pub z_parts: Vec<Tensor>,
    /// Per-example total log-det, shape `[B]`.
    pub log_det: Tensor,
    /// Per-dim contributions averaged over this batch.
    pub map: LogDetMap,
}

/// Composed normalizing flow with a standard-normal prior over all latent
/// parts.
pub struct FlowModel {
    pub input_layout: Layout,
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

impl FlowModel {
    /// Input-layout flats of each layer; the entry past the end is the final
    /// live layout. Errors if the chain is inconsistent.
    pub fn layer_layouts(&self) -> Result<Vec<Layout>> {
        let mut layouts = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_layout;
        for layer in &self.layers {
            layouts.push(cur);
            cur = match layer {
                Layer::Coupling(cl) => {
                    if cl.dims() != cur.dims() {
                        return Err(Error::Layout(format!(
                            "coupling over {} dims placed at layout {cur} ({} dims)",
                            cl.dims(),
                            cur.dims()
                        )));
                    }
                    cur
                }
                Layer::Squeeze => cur.squeezed()?,
                Layer::Factor(fl) => {
                    fl.validate(cur.dims())?;
                    cur.halved()?
                }
            };
        }
        layouts.push(cur);
        Ok(layouts)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_layouts().map(|_| ())
    }

    /// Dimensions of each latent part: one per factor layer plus the final
    /// live block. Sums to `input_layout.dims()`.
    pub fn part_dims(&self) -> Result<Vec<usize>> {
        let layouts = self.layer_layouts()?;
        let mut parts: Vec<usize> = self
            .layers
            .iter()
            .zip(&layouts)
            .filter_map(|(layer, l)| match layer {
                Layer::Factor(_) => Some(l.dims() / 2),
                _ => None,
            })
            .collect();
        parts.push(layouts.last().expect("layouts never empty").dims());
        Ok(parts)
    }

    /// Builds the forward computation on `g`. `x` must be `[B, D]` in the
    /// input layout.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId, bound: &BoundParams) -> Result<GraphForward> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_layout.dims() {
            return Err(Error::shape(
                "flow_forward",
                format!("expected [batch, {}], got {:?}", self.input_layout.dims(), shape),
            ));
        }
        let batch = shape[0];
        let layouts = self.layer_layouts()?;
        let ones = g.input(Tensor::ones(&[batch, 1]));
        let mut fetch = |_: &mut Graph, pid: ParamId| bound.node(pid);
        let mut cur = x;
        let mut z_parts = Vec::new();
        let mut coupling_per_dim = Vec::new();
        let mut log_det: Option<NodeId> = None;
        for (layer, layout) in self.layers.iter().zip(&layouts) {
            match layer {
                Layer::Coupling(cl) => {
                    let (y, per_dim) = cl.forward_graph(g, cur, ones, &mut fetch)?;
                    let term = g.reduce_sum(per_dim, &[1])?;
                    log_det = Some(match log_det {
                        None => term,
                        Some(acc) => g.add(acc, term)?,
                    });
                    coupling_per_dim.push(per_dim);
                    cur = y;
                }
                Layer::Squeeze => {
                    let perm = squeeze_perm(layout)?;
                    cur = g.gather(cur, 1, &perm)?;
                }
                Layer::Factor(fl) => {
                    z_parts.push(g.gather(cur, 1, &fl.factor)?);
                    cur = g.gather(cur, 1, &fl.keep)?;
                }
            }
        }
        z_parts.push(cur);
        let log_det = match log_det {
            Some(n) => n,
            None => g.input(Tensor::zeros(&[batch])),
        };
        Ok(GraphForward { z_parts, log_det, coupling_per_dim })
    }

    /// Plain forward over `[B, D]` values.
    pub fn forward(&self, x: &Tensor) -> Result<FlowForward> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Plain forward that also returns the live log-det map after every
    /// layer (used by the factorization planner).
    pub fn forward_traced(&self, x: &Tensor) -> Result<(FlowForward, Vec<MapSnapshot>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xn = g.input(x.clone());
        let gf = self.forward_graph(&mut g, xn, &bound)?;

        let batch = x.shape()[0] as f64;
        let layouts = self.layer_layouts()?;
        let mut live = vec![0.0; self.input_layout.dims()];
        let mut frozen = Vec::new();
        let mut snapshots = Vec::with_capacity(self.layers.len());
        let mut ci = 0;
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Coupling(_) => {
                    let pd = g.value(gf.coupling_per_dim[ci]);
                    ci += 1;
                    let cols = pd.shape()[1];
                    for (flat, &v) in pd.data().iter().enumerate() {
                        live[flat % cols] += v / batch;
                    }
                }
                Layer::Squeeze => {
                    let perm = squeeze_perm(&layouts[idx])?;
                    live = perm.iter().map(|&src| live[src]).collect();
                }
                Layer::Factor(fl) => {
                    frozen.push(fl.factor.iter().map(|&d| live[d]).collect());
                    live = fl.keep.iter().map(|&d| live[d]).collect();
                }
            }
            snapshots.push(MapSnapshot { layout: layouts[idx + 1], live: live.clone() });
        }
        let map = LogDetMap { layout: *layouts.last().expect("non-empty"), live, frozen };
        let z_parts = gf.z_parts.iter().map(|&n| g.value(n).clone()).collect();
        let log_det = g.value(gf.log_det).clone();
        Ok((FlowForward { z_parts, log_det, map }, snapshots))
    }

    /// Exact inverse of [`FlowModel::forward`]: reassembles `x` from latent
    /// parts given in emission order.
    pub fn inverse(&self, z_parts: &[Tensor]) -> Result<Tensor> {
        let part_dims = self.part_dims()?;
        if z_parts.len() != part_dims.len() {
            return Err(Error::shape(
                "flow_inverse",
                format!("expected {} latent parts, got {}", part_dims.len(), z_parts.len()),
            ));
        }
        let batch = z_parts[0].shape().first().copied().unwrap_or(0);
        for (p, (z, &d)) in z_parts.iter().zip(&part_dims).enumerate() {
            if z.rank() != 2 || z.shape()[0] != batch || z.shape()[1] != d {
                return Err(Error::shape(
                    "flow_inverse",
                    format!("part {p} must be [{batch}, {d}], got {:?}", z.shape()),
                ));
            }
        }
        let layouts = self.layer_layouts()?;
        let mut next_part = z_parts.len() - 1;
        let mut cur = z_parts[next_part].clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Coupling(cl) => cur = cl.inverse(&self.params, &cur)?,
                Layer::Squeeze => {
                    let inv = unsqueeze_perm(&layouts[idx])?;
                    cur = cur.gather(1, &inv)?;
                }
                Layer::Factor(fl) => {
                    next_part -= 1;
                    let cat = Tensor::concat(1, &[&cur, &z_parts[next_part]])?;
                    cur = cat.gather(1, &fl.merge_perm())?;
                }
            }
        }
        Ok(cur)
    }

    /// Exact log-likelihood in nats per example (`[B]`): standard-normal
    /// log-density of the concatenated latents plus the total log-det.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x)?;
        let mut ll = fwd.log_det;
        for z in &fwd.z_parts {
            let d = z.shape()[1] as f64;
            let sq = z.mul(z)?.reduce_sum(&[1])?;
            let prior = sq.mul_scalar(-0.5)?.add_scalar(-0.5 * d * LN_2PI)?;
            ll = ll.add(&prior)?;
        }
        Ok(ll)
    }

    /// Per-layer parameter ids in layer order (serialization order).
    fn layer_param_ids(&self) -> Vec<Vec<ParamId>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Coupling(cl) => cl.param_ids(),
                _ => Vec::new(),
            })
            .collect()
    }

    // ── FFM1 container ──────────────────────────────────────────────

    pub fn write_ffm1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FFM1_MAGIC)?;
        w.write_all(&(self.input_layout.s as u32).to_le_bytes())?;
        w.write_all(&(self.input_layout.c as u32).to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        let ids = self.layer_param_ids();
        for (layer, pids) in self.layers.iter().zip(&ids) {
            match layer {
                Layer::Coupling(cl) => {
                    w.write_all(&[0u8])?;
                    w.write_all(&cl.clamp.to_le_bytes())?;
                    cl.mask.write_fft1(w)?;
                    for &pid in pids {
                        self.params.value(pid).write_fft1(w)?;
                    }
                }
                Layer::Squeeze => w.write_all(&[1u8])?,
                Layer::Factor(fl) => {
                    w.write_all(&[2u8])?;
                    w.write_all(&(fl.keep.len() as u32).to_le_bytes())?;
                    for &d in fl.keep.iter().chain(&fl.factor) {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_ffm1<R: Read>(r: &mut R, path: &str) -> Result<FlowModel> {
        let corrupt = |detail: &str| Error::format(path, detail);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != FFM1_MAGIC {
            return Err(corrupt("bad magic, expected FFM1"));
        }
        let s = read_u32(r).map_err(|_| corrupt("truncated layout"))? as usize;
        let c = read_u32(r).map_err(|_| corrupt("truncated layout"))? as usize;
        let n_layers = read_u32(r).map_err(|_| corrupt("truncated layer count"))? as usize;
        if s == 0 || c == 0 || n_layers > 10_000 {
            return Err(corrupt("implausible header"));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(n_layers);
        for idx in 0..n_layers {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|_| corrupt("truncated layer tag"))?;
            match tag[0] {
                0 => {
                    let mut clamp_buf = [0u8; 8];
                    r.read_exact(&mut clamp_buf).map_err(|_| corrupt("truncated clamp"))?;
                    let clamp = f64::from_le_bytes(clamp_buf);
                    if !(clamp > 0.0) || !clamp.is_finite() {
                        return Err(corrupt("invalid scale clamp"));
                    }
                    let mask = Tensor::read_fft1(r, path)?;
                    let (passive, transformed, perm) =
                        mask_partition(&mask).map_err(|e| corrupt(&format!("layer {idx}: {e}")))?;
                    let mut tensors = Vec::with_capacity(12);
                    for _ in 0..12 {
                        let t = Tensor::read_fft1(r, path)?;
                        if !t.is_all_finite() {
                            return Err(corrupt("non-finite parameter tensor"));
                        }
                        tensors.push(t);
                    }
                    let shift_tensors = tensors.split_off(6);
                    let scale_net =
                        Mlp::from_tensors(&mut params, &format!("l{idx}.scale"), tensors)
                            .map_err(|e| corrupt(&e.to_string()))?;
                    let shift_net =
                        Mlp::from_tensors(&mut params, &format!("l{idx}.shift"), shift_tensors)
                            .map_err(|e| corrupt(&e.to_string()))?;
                    layers.push(Layer::Coupling(CouplingLayer {
                        mask,
                        passive,
                        transformed,
                        perm,
                        scale_net,
                        shift_net,
                        clamp,
                    }));
                }
                1 => layers.push(Layer::Squeeze),
                2 => {
                    let n = read_u32(r).map_err(|_| corrupt("truncated factor count"))? as usize;
                    if n == 0 || n > 1 << 24 {
                        return Err(corrupt("implausible factor count"));
                    }
                    let mut read_list = |len: usize| -> Result<Vec<usize>> {
                        let mut out = Vec::with_capacity(len);
                        for _ in 0..len {
                            let mut b = [0u8; 8];
                            r.read_exact(&mut b).map_err(|_| corrupt("truncated factor indices"))?;
                            out.push(u64::from_le_bytes(b) as usize);
                        }
                        Ok(out)
                    };
                    let keep = read_list(n)?;
                    let factor = read_list(n)?;
                    layers.push(Layer::Factor(FactorLayer { keep, factor }));
                }
                t => return Err(corrupt(&format!("unknown layer tag {t}"))),
            }
        }
        let model = FlowModel { input_layout: Layout::new(s, c), layers, params };
        model.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufWriter::new(f);
        self.write_ffm1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FlowModel> {
        let display = path.as_ref().display().to_string();
        let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufReader::new(f);
        let m = FlowModel::read_ffm1(&mut f, &display)?;
        let mut probe = [0u8; 1];
        if f.read(&mut probe)? != 0 {
            return Err(Error::format(display, "trailing bytes after model"));
        }
        Ok(m)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Architecture hyperparameters shared by every coupling layer.
#[derive(Debug, Clone, Copy)]
pub struct ArchConfig {
    /// Couplings in the checkerboard block and again in the channel block of
    /// each scale; the final block gets one more.
    pub couplings_per_scale: usize,
    pub hidden: usize,
    pub scale_clamp: f64,
}

/// Builds the multi-scale model: per scale, `couplings_per_scale`
/// checkerboard couplings, a squeeze, `couplings_per_scale` channel
/// couplings, then (when `factors` is given) a factor layer; after the last
/// scale, a final block of `couplings_per_scale + 1` couplings. Without
/// `factors` the same backbone is built with no factor layers (the
/// pretraining architecture).
pub fn build_model<R: Rng + ?Sized>(
    input: Layout,
    scales: usize,
    factors: Option<&[FactorLayer]>,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<FlowModel> {
    if scales == 0 {
        return Err(Error::Layout("need at least one scale".into()));
    }
    if arch.couplings_per_scale == 0 || arch.hidden == 0 {
        return Err(Error::Layout("couplings-per-scale and hidden width must be positive".into()));
    }
    if let Some(fs) = factors {
        if fs.len() != scales {
            return Err(Error::Layout(format!(
                "plan has {} scales, model wants {scales}",
                fs.len()
            )));
        }
    }
    let mut params = ParamStore::new();
    let mut layers: Vec<Layer> = Vec::new();
    let mut layout = input;
    let add_coupling = |layers: &mut Vec<Layer>,
                            params: &mut ParamStore,
                            layout: Layout,
                            name: String,
                            i: usize,
                            prefer_checkerboard: bool,
                            rng: &mut R|
     -> Result<()> {
        // checkerboard needs s >= 2; 1×1 grids fall back to channel masks
        let mask = if prefer_checkerboard && layout.s >= 2 {
            checkerboard_mask(&layout, i % 2)?
        } else {
            channel_mask(&layout, i % 2 == 0)?
        };
        let cl = CouplingLayer::new(params, &name, mask, arch.hidden, arch.scale_clamp, rng)?;
        layers.push(Layer::Coupling(cl));
        Ok(())
    };
    for k in 0..scales {
        for i in 0..arch.couplings_per_scale {
            add_coupling(&mut layers, &mut params, layout, format!("s{k}.cb{i}"), i, true, rng)?;
        }
        layers.push(Layer::Squeeze);
        layout = layout.squeezed().map_err(|_| {
            Error::Layout(format!("input {input} cannot support {scales} scales"))
        })?;
        for i in 0..arch.couplings_per_scale {
            add_coupling(&mut layers, &mut params, layout, format!("s{k}.ch{i}"), i, false, rng)?;
        }
        if let Some(fs) = factors {
            let fl = &fs[k];
            fl.validate(layout.dims())?;
            layers.push(Layer::Factor(fl.clone()));
            layout = layout.halved()?;
        }
    }
    for i in 0..=arch.couplings_per_scale {
        add_coupling(&mut layers, &mut params, layout, format!("fin.cp{i}"), i, true, rng)?;
    }
    let model = FlowModel { input_layout: input, layers, params };
    model.validate()?;
    Ok(model)
}

/// Layer indices of the scale boundaries of a pretraining (factor-free)
/// model built by [`build_model`]: for each scale, the last channel coupling
/// before the next scale begins. Recovered from layer counts alone —
/// with `n` couplings per block, the model has `scales·(2n+1) + n + 1`
/// layers and boundary `k` sits at layer `(k+1)·(2n+1) − 1`.
pub fn scale_boundaries(model: &FlowModel) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::Plan(detail);
    if model.layers.iter().any(|l| matches!(l, Layer::Factor(_))) {
        return Err(bad("model already factors dimensions out; need a pretraining model".into()));
    }
    let scales = model.layers.iter().filter(|l| matches!(l, Layer::Squeeze)).count();
    if scales == 0 {
        return Err(bad("model has no squeeze layers".into()));
    }
    let len = model.layers.len();
    let body = len
        .checked_sub(scales + 1)
        .ok_or_else(|| bad(format!("{len} layers cannot hold {scales} scales")))?;
    let group = 2 * scales + 1;
    if body == 0 || body % group != 0 {
        return Err(bad(format!("{len} layers do not form {scales} uniform scales")));
    }
    let n = body / group;
    let per_scale = 2 * n + 1;
    let mut boundaries = Vec::with_capacity(scales);
    for k in 0..scales {
        if !matches!(model.layers[k * per_scale + n], Layer::Squeeze) {
            return Err(bad(format!("layer {} is not the scale-{k} squeeze", k * per_scale + n)));
        }
        let b = (k + 1) * per_scale - 1;
        if !matches!(model.layers[b], Layer::Coupling(_)) {
            return Err(bad(format!("layer {b} is not the scale-{k} boundary coupling")));
        }
        boundaries.push(b);
    }
    Ok(boundaries)
}
