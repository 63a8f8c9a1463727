use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{linear, multi_head_attention, normal, xavier_uniform, AttentionRecord};
use super::{ModelConfig, ModelError, CHANNELS};
use crate::numerics::{
    BatchNormMode, BatchStats, Bound, Conv3dSpec, Graph, PadMode, ParamGroup, ParamId, ParamKind, ParamStore, Real, Tensor, Var,
};

/// `[B, 3, T, H, W]` pixels to `[B * T * N, 3 * P * P]` patch rows ordered by
/// (clip, frame, patch row-major); each row is (channel, y, x) major.
pub fn patchify<F: Real>(cfg: &ModelConfig, pixels: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
    let s = pixels.shape();
    let expected = [CHANNELS, cfg.frames, cfg.height, cfg.width];
    if s.len() != 5 || s[1..] != expected {
        return Err(ModelError::ShapeMismatch(format!("expected [B, {:?}], got {s:?}", expected)));
    }
    let (bsz, tn, h, w, p, gs) = (s[0], cfg.frames, cfg.height, cfg.width, cfg.patch, cfg.grid());
    let src = pixels.data();
    let plen = cfg.patch_len();
    let mut out = Vec::with_capacity(bsz * tn * gs * gs * plen);
    for b in 0..bsz {
        for t in 0..tn {
            for pr in 0..gs {
                for pc in 0..gs {
                    for c in 0..CHANNELS {
                        for y in pr * p..(pr + 1) * p {
                            let base = (((b * CHANNELS + c) * tn + t) * h + y) * w;
                            out.extend_from_slice(&src[base + pc * p..base + (pc + 1) * p]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![bsz * tn * gs * gs, plen], out)?)
}

/// Row indices of the flattened `(T+1) x (N+1)` token grid of a batch.
#[derive(Debug, Clone)]
pub struct GridLayout {
    pub batch: usize,
    pub frames: usize,
    pub patches: usize,
    /// Temporal attention groups: per clip, per patch column, rows 0..=T.
    pub tsa: Arc<[usize]>,
    /// Spatial attention groups: per clip, per frame row, columns 0..=N.
    pub ssa: Arc<[usize]>,
    /// All rows except the per-clip placeholder.
    pub tokens: Arc<[usize]>,
    pub patch_rows: Arc<[usize]>,
    pub spatial_rows: Arc<[usize]>,
    pub temporal_rows: Arc<[usize]>,
    pub placeholder_rows: Arc<[usize]>,
}

impl GridLayout {
    pub fn new(batch: usize, frames: usize, patches: usize) -> Self {
        let (tn, n) = (frames, patches);
        let r = |b: usize, t: usize, p: usize| (b * (tn + 1) + t) * (n + 1) + p;
        let mut tsa = Vec::new();
        let mut ssa = Vec::new();
        let mut tokens = Vec::new();
        let mut patch_rows = Vec::new();
        let mut spatial_rows = Vec::new();
        let mut temporal_rows = Vec::new();
        let mut placeholder_rows = Vec::new();
        for b in 0..batch {
            for p in 1..=n {
                tsa.extend((0..=tn).map(|t| r(b, t, p)));
            }
            for t in 1..=tn {
                ssa.extend((0..=n).map(|p| r(b, t, p)));
            }
            for t in 0..=tn {
                for p in 0..=n {
                    if t + p > 0 {
                        tokens.push(r(b, t, p));
                    }
                }
            }
            for t in 1..=tn {
                patch_rows.extend((1..=n).map(|p| r(b, t, p)));
                spatial_rows.push(r(b, t, 0));
            }
            temporal_rows.extend((1..=n).map(|p| r(b, 0, p)));
            placeholder_rows.push(r(b, 0, 0));
        }
        Self {
            batch,
            frames,
            patches,
            tsa: tsa.into(),
            ssa: ssa.into(),
            tokens: tokens.into(),
            patch_rows: patch_rows.into(),
            spatial_rows: spatial_rows.into(),
            temporal_rows: temporal_rows.into(),
            placeholder_rows: placeholder_rows.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * (self.frames + 1) * (self.patches + 1)
    }

    pub fn row(&self, b: usize, t: usize, p: usize) -> usize {
        (b * (self.frames + 1) + t) * (self.patches + 1) + p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch-norm batch statistics; reported in the trace.
    Train,
    /// Batch-norm running statistics from the store.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub tsa_norm: (ParamId, ParamId),
    pub tsa_qkv: (ParamId, ParamId),
    pub tsa_proj: (ParamId, ParamId),
    pub ssa_norm: (ParamId, ParamId),
    pub ssa_qkv: (ParamId, ParamId),
    pub ssa_proj: (ParamId, ParamId),
    pub mlp_norm: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct BatchNormIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: (ParamId, ParamId),
    pos_patch: ParamId,
    pos_spatial: ParamId,
    pos_temporal: ParamId,
    tok_spatial: ParamId,
    tok_temporal: ParamId,
    tok_placeholder: ParamId,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
    h_conv1: ParamId,
    h_bn1: BatchNormIds,
    h_conv2: ParamId,
    h_bn2: BatchNormIds,
    g_fc1: (ParamId, ParamId),
    g_fc2: (ParamId, ParamId),
    f_fc1: (ParamId, ParamId),
    f_fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// `(running_mean, running_var, observed)` per batch norm, train mode only.
    pub bn_stats: Vec<(ParamId, ParamId, BatchStats<F>)>,
    /// Temporal then spatial attention per block.
    pub attention: Vec<(AttentionRecord, AttentionRecord)>,
    pub batch: usize,
}

impl<F> ForwardTrace<F> {
    /// Score entries built by `block` per clip.
    pub fn attention_entries(&self, block: usize) -> usize {
        let (tsa, ssa) = &self.attention[block];
        (tsa.entries() + ssa.entries()) / self.batch.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `[B, T, sqrt N, sqrt N]`
    pub d_tilde: Var,
    /// `[B, T]`
    pub p_logits: Var,
    /// `[B]`
    pub y_logit: Var,
    /// Final-block token grid `[B (T+1) (N+1), D]`.
    pub grid: Var,
    pub trace: ForwardTrace<F>,
}

/// Head outputs for one clip as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<F> {
    pub d_tilde: Tensor<F>,
    pub p_logits: Tensor<F>,
    pub y_logit: F,
}

/// Network structure and parameter handles; the values live in a
/// [`ParamStore`] so the same model runs in `f32` and `f64`.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    ids: Ids,
    forward_passes: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg, ids: self.ids.clone(), forward_passes: AtomicUsize::new(self.forward_count()) }
    }
}

struct Registrar<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
    group: ParamGroup,
}

impl Registrar<'_> {
    fn add(&mut self, name: &str, value: Tensor<f64>) -> Result<ParamId, ModelError> {
        Ok(self.store.register(name, value, self.group, ParamKind::Trainable)?)
    }

    fn buffer(&mut self, name: &str, value: Tensor<f64>) -> Result<ParamId, ModelError> {
        Ok(self.store.register(name, value, self.group, ParamKind::Buffer)?)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId), ModelError> {
        let w = xavier_uniform(&mut self.rng, &[din, dout], din, dout);
        Ok((self.add(&format!("{name}.weight"), w)?, self.add(&format!("{name}.bias"), Tensor::zeros(&[dout]))?))
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId), ModelError> {
        Ok((self.add(&format!("{name}.gamma"), Tensor::full(&[d], 1.0))?, self.add(&format!("{name}.beta"), Tensor::zeros(&[d]))?))
    }

    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, ModelError> {
        let v = normal(&mut self.rng, shape, 0.02);
        self.add(name, v)
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNormIds, ModelError> {
        let (gamma, beta) = self.norm(name, c)?;
        Ok(BatchNormIds {
            gamma,
            beta,
            running_mean: self.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: self.buffer(&format!("{name}.running_var"), Tensor::full(&[c], 1.0))?,
        })
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize) -> Result<ParamId, ModelError> {
        let w = xavier_uniform(&mut self.rng, &[cout, cin, 3, 1, 1], cin * 3, cout * 3);
        self.add(name, w)
    }
}

fn lookup(store_names: &impl Fn(&str) -> Option<ParamId>, name: &str) -> Result<ParamId, ModelError> {
    store_names(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

impl Model {
    /// Registers freshly initialized parameters in `f64`; cast the store
    /// for `f32` training.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f64>), ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (t, n, d) = (cfg.frames, cfg.num_patches(), cfg.dim);
        let mut r = Registrar { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), group: ParamGroup::Backbone };
        let embed = r.linear("embed", cfg.patch_len(), d)?;
        let pos_patch = r.normal("pos.patch", &[t * n, d])?;
        let pos_spatial = r.normal("pos.spatial", &[t, d])?;
        let pos_temporal = r.normal("pos.temporal", &[n, d])?;
        let tok_spatial = r.normal("token.spatial", &[d])?;
        let tok_temporal = r.normal("token.temporal", &[d])?;
        let tok_placeholder = r.normal("token.placeholder", &[d])?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("blocks.{l}");
            blocks.push(BlockIds {
                tsa_norm: r.norm(&format!("{p}.tsa.norm"), d)?,
                tsa_qkv: r.linear(&format!("{p}.tsa.qkv"), d, 3 * d)?,
                tsa_proj: r.linear(&format!("{p}.tsa.proj"), d, d)?,
                ssa_norm: r.norm(&format!("{p}.ssa.norm"), d)?,
                ssa_qkv: r.linear(&format!("{p}.ssa.qkv"), d, 3 * d)?,
                ssa_proj: r.linear(&format!("{p}.ssa.proj"), d, d)?,
                mlp_norm: r.norm(&format!("{p}.mlp.norm"), d)?,
                fc1: r.linear(&format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio)?,
                fc2: r.linear(&format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d)?,
            });
        }
        let norm = r.norm("norm", d)?;
        r.group = ParamGroup::Head;
        let mid = cfg.head_mid_channels();
        let hid = cfg.head_hidden();
        let h_conv1 = r.conv("head_h.conv1.weight", mid, d)?;
        let h_bn1 = r.batch_norm("head_h.bn1", mid)?;
        let h_conv2 = r.conv("head_h.conv2.weight", 1, mid)?;
        let h_bn2 = r.batch_norm("head_h.bn2", 1)?;
        let g_fc1 = r.linear("head_g.fc1", d, hid)?;
        let g_fc2 = r.linear("head_g.fc2", hid, 1)?;
        let f_fc1 = r.linear("head_f.fc1", d, hid)?;
        let f_fc2 = r.linear("head_f.fc2", hid, 1)?;
        let ids = Ids {
            embed,
            pos_patch,
            pos_spatial,
            pos_temporal,
            tok_spatial,
            tok_temporal,
            tok_placeholder,
            blocks,
            norm,
            h_conv1,
            h_bn1,
            h_conv2,
            h_bn2,
            g_fc1,
            g_fc2,
            f_fc1,
            f_fc2,
        };
        Ok((Self { cfg, ids, forward_passes: AtomicUsize::new(0) }, store))
    }

    /// Rebinds a model to an existing store (e.g. a loaded checkpoint),
    /// checking that every expected tensor is present with the right shape.
    pub fn from_store<F: Real>(cfg: ModelConfig, store: &ParamStore<F>) -> Result<Self, ModelError> {
        let (reference, ref_store) = Self::init(cfg, 0)?;
        if ref_store.len() != store.len() {
            return Err(ModelError::ShapeMismatch(format!("store has {} tensors, model expects {}", store.len(), ref_store.len())));
        }
        for e in ref_store.entries() {
            let id = lookup(&|n| store.id(n), &e.name)?;
            let got = store.entry(id);
            if got.value.shape() != e.value.shape() || got.kind != e.kind || got.group != e.group {
                return Err(ModelError::ShapeMismatch(format!("{}: expected {:?}, found {:?}", e.name, e.value.shape(), got.value.shape())));
            }
            if id != ref_store.id(&e.name).expect("own name") {
                return Err(ModelError::ShapeMismatch(format!("{} is stored out of order", e.name)));
            }
        }
        Ok(Self { cfg, ids: reference.ids, forward_passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forward passes run so far, counting every call to [`Model::forward`].
    pub fn forward_count(&self) -> usize {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub fn reset_forward_count(&self) {
        self.forward_passes.store(0, Ordering::SeqCst);
    }

    pub fn blocks(&self) -> &[BlockIds] {
        &self.ids.blocks
    }

    pub fn placeholder_id(&self) -> ParamId {
        self.ids.tok_placeholder
    }

    /// Initial token grid `[B (T+1) (N+1), D]` for pixels `[B, 3, T, H, W]`.
    pub fn embed<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, pixels: &Tensor<F>) -> Result<(Var, GridLayout), ModelError> {
        let cfg = &self.cfg;
        let rows = patchify(cfg, pixels)?;
        let bsz = pixels.shape()[0];
        let (t, n) = (cfg.frames, cfg.num_patches());
        let layout = GridLayout::new(bsz, t, n);
        let v = |id: ParamId| bound.var(id);
        let x = g.constant(rows);
        let z = linear(g, x, v(self.ids.embed.0), v(self.ids.embed.1))?;
        let z = g.add_tiled(z, v(self.ids.pos_patch))?;
        let zs = g.add_tiled(v(self.ids.pos_spatial), v(self.ids.tok_spatial))?;
        let zt = g.add_tiled(v(self.ids.pos_temporal), v(self.ids.tok_temporal))?;
        let tile = |count: usize, len: usize| -> Arc<[usize]> { (0..count * len).map(|i| i % len).collect::<Vec<_>>().into() };
        let zs = g.gather_rows(zs, &tile(bsz, t))?;
        let zt = g.gather_rows(zt, &tile(bsz, n))?;
        let ph = g.reshape(v(self.ids.tok_placeholder), &[1, cfg.dim])?;
        let ph = g.gather_rows(ph, &tile(bsz, 1))?;
        let total = layout.rows();
        let parts = [
            g.scatter_rows(z, &layout.patch_rows, total)?,
            g.scatter_rows(zs, &layout.spatial_rows, total)?,
            g.scatter_rows(zt, &layout.temporal_rows, total)?,
            g.scatter_rows(ph, &layout.placeholder_rows, total)?,
        ];
        let mut grid = parts[0];
        for &p in &parts[1..] {
            grid = g.add(grid, p)?;
        }
        Ok((grid, layout))
    }

    fn attention_sublayer<F: Real>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        grid: Var,
        rows: &Arc<[usize]>,
        groups: usize,
        len: usize,
        ids: [(ParamId, ParamId); 3],
    ) -> Result<(Var, AttentionRecord), ModelError> {
        let v = |id: ParamId| bound.var(id);
        let total = g.shape(grid)[0];
        let x = g.gather_rows(grid, rows)?;
        let x = g.layer_norm(x, v(ids[0].0), v(ids[0].1))?;
        let (out, rec) = multi_head_attention(g, x, groups, len, self.cfg.heads, v(ids[1].0), v(ids[1].1), v(ids[2].0), v(ids[2].1))?;
        let back = g.scatter_rows(out, rows, total)?;
        Ok((g.add(grid, back)?, rec))
    }

    /// Temporal attention: each patch column with its temporal token.
    pub fn temporal_attention<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, block: usize, grid: Var, layout: &GridLayout) -> Result<(Var, AttentionRecord), ModelError> {
        let b = &self.ids.blocks[block];
        self.attention_sublayer(g, bound, grid, &layout.tsa, layout.batch * layout.patches, layout.frames + 1, [b.tsa_norm, b.tsa_qkv, b.tsa_proj])
    }

    /// Spatial attention: each frame row with its spatial token.
    pub fn spatial_attention<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, block: usize, grid: Var, layout: &GridLayout) -> Result<(Var, AttentionRecord), ModelError> {
        let b = &self.ids.blocks[block];
        self.attention_sublayer(g, bound, grid, &layout.ssa, layout.batch * layout.frames, layout.patches + 1, [b.ssa_norm, b.ssa_qkv, b.ssa_proj])
    }

    /// Shared MLP on every token except the placeholder.
    pub fn mlp<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, block: usize, grid: Var, layout: &GridLayout) -> Result<Var, ModelError> {
        let b = &self.ids.blocks[block];
        let v = |id: ParamId| bound.var(id);
        let total = g.shape(grid)[0];
        let x = g.gather_rows(grid, &layout.tokens)?;
        let x = g.layer_norm(x, v(b.mlp_norm.0), v(b.mlp_norm.1))?;
        let x = linear(g, x, v(b.fc1.0), v(b.fc1.1))?;
        let x = g.gelu(x)?;
        let x = linear(g, x, v(b.fc2.0), v(b.fc2.1))?;
        let back = g.scatter_rows(x, &layout.tokens, total)?;
        Ok(g.add(grid, back)?)
    }

    /// One pre-norm block: temporal attention, spatial attention, MLP.
    pub fn encoder_block<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, block: usize, grid: Var, layout: &GridLayout) -> Result<(Var, (AttentionRecord, AttentionRecord)), ModelError> {
        let (grid, tsa) = self.temporal_attention(g, bound, block, grid, layout)?;
        let (grid, ssa) = self.spatial_attention(g, bound, block, grid, layout)?;
        let grid = self.mlp(g, bound, block, grid, layout)?;
        Ok((grid, (tsa, ssa)))
    }

    fn conv_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        bound: &Bound,
        x: Var,
        conv: ParamId,
        bn: &BatchNormIds,
        mode: ForwardMode,
        stats: &mut Vec<(ParamId, ParamId, BatchStats<F>)>,
    ) -> Result<Var, ModelError> {
        let spec = Conv3dSpec { padding: [1, 0, 0], mode: PadMode::Replicate };
        let y = g.conv3d(x, bound.var(conv), spec)?;
        let bn_mode = match mode {
            ForwardMode::Train => BatchNormMode::Train,
            ForwardMode::Eval => BatchNormMode::Eval {
                mean: store.value(bn.running_mean).data().to_vec(),
                var: store.value(bn.running_var).data().to_vec(),
            },
        };
        let (y, st) = g.batch_norm_3d(y, bound.var(bn.gamma), bound.var(bn.beta), &bn_mode)?;
        if let Some(st) = st {
            stats.push((bn.running_mean, bn.running_var, st));
        }
        Ok(g.gelu(y)?)
    }

    /// Temporal head on patch tokens `[B T N, D]`, returning `[B, T, g, g]`.
    pub fn temporal_head<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        bound: &Bound,
        z: Var,
        batch: usize,
        mode: ForwardMode,
        stats: &mut Vec<(ParamId, ParamId, BatchStats<F>)>,
    ) -> Result<Var, ModelError> {
        let (t, gs, d) = (self.cfg.frames, self.cfg.grid(), self.cfg.dim);
        let x = g.reshape(z, &[batch, t, gs * gs, d])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        let x = g.reshape(x, &[batch, d, t, gs, gs])?;
        let x = self.conv_block(g, store, bound, x, self.ids.h_conv1, &self.ids.h_bn1, mode, stats)?;
        let x = self.conv_block(g, store, bound, x, self.ids.h_conv2, &self.ids.h_bn2, mode, stats)?;
        Ok(g.reshape(x, &[batch, t, gs, gs])?)
    }

    /// Soft-label head on spatial tokens `[B T, D]`, returning `[B, T]` logits.
    pub fn spatial_head<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, zs: Var, batch: usize) -> Result<Var, ModelError> {
        let v = |id: ParamId| bound.var(id);
        let x = linear(g, zs, v(self.ids.g_fc1.0), v(self.ids.g_fc1.1))?;
        let x = g.gelu(x)?;
        let x = linear(g, x, v(self.ids.g_fc2.0), v(self.ids.g_fc2.1))?;
        Ok(g.reshape(x, &[batch, self.cfg.frames])?)
    }

    /// Classifier on temporal tokens `[B N, D]`: mean over the tokens of each
    /// clip, then an MLP to one logit per clip.
    pub fn classifier<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, zt: Var, batch: usize) -> Result<Var, ModelError> {
        let v = |id: ParamId| bound.var(id);
        let n = g.shape(zt)[0] / batch.max(1);
        let x = g.reshape(zt, &[batch, n, self.cfg.dim])?;
        let x = g.mean_axis(x, 1)?;
        let x = linear(g, x, v(self.ids.f_fc1.0), v(self.ids.f_fc1.1))?;
        let x = g.gelu(x)?;
        let x = linear(g, x, v(self.ids.f_fc2.0), v(self.ids.f_fc2.1))?;
        Ok(g.reshape(x, &[batch])?)
    }

    /// Full network on `[B, 3, T, H, W]` pixels.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        bound: &Bound,
        pixels: &Tensor<F>,
        mode: ForwardMode,
    ) -> Result<ForwardOutput<F>, ModelError> {
        self.forward_passes.fetch_add(1, Ordering::SeqCst);
        let (mut grid, layout) = self.embed(g, bound, pixels)?;
        let mut attention = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            let (next, rec) = self.encoder_block(g, bound, l, grid, &layout)?;
            grid = next;
            attention.push(rec);
        }
        let batch = layout.batch;
        let norm = |g: &mut Graph<F>, rows: &Arc<[usize]>| -> Result<Var, ModelError> {
            let x = g.gather_rows(grid, rows)?;
            Ok(g.layer_norm(x, bound.var(self.ids.norm.0), bound.var(self.ids.norm.1))?)
        };
        let z = norm(g, &layout.patch_rows)?;
        let zs = norm(g, &layout.spatial_rows)?;
        let zt = norm(g, &layout.temporal_rows)?;
        let mut bn_stats = Vec::new();
        let d_tilde = self.temporal_head(g, store, bound, z, batch, mode, &mut bn_stats)?;
        let p_logits = self.spatial_head(g, bound, zs, batch)?;
        let y_logit = self.classifier(g, bound, zt, batch)?;
        Ok(ForwardOutput { d_tilde, p_logits, y_logit, grid, trace: ForwardTrace { bn_stats, attention, batch } })
    }

    /// Evaluation-mode outputs for each clip of `[B, 3, T, H, W]` pixels.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, pixels: &Tensor<F>) -> Result<Vec<HeadOutputs<F>>, ModelError> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let out = self.forward(&mut g, store, &bound, pixels, ForwardMode::Eval)?;
        let batch = pixels.shape()[0];
        let (t, gs) = (self.cfg.frames, self.cfg.grid());
        let dt = g.value(out.d_tilde).data();
        let pl = g.value(out.p_logits).data();
        let yl = g.value(out.y_logit).data();
        Ok((0..batch)
            .map(|b| HeadOutputs {
                d_tilde: Tensor::new(vec![t, gs, gs], dt[b * t * gs * gs..(b + 1) * t * gs * gs].to_vec()).expect("head shape"),
                p_logits: Tensor::new(vec![t], pl[b * t..(b + 1) * t].to_vec()).expect("head shape"),
                y_logit: yl[b],
            })
            .collect())
    }

    /// Folds observed batch statistics into the running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats<F: Real>(store: &mut ParamStore<F>, stats: &[(ParamId, ParamId, BatchStats<F>)], momentum: F) {
        for (mean_id, var_id, st) in stats {
            for (id, observed) in [(*mean_id, &st.mean), (*var_id, &st.var)] {
                let buf = store.value_mut(id);
                for (r, &o) in buf.data_mut().iter_mut().zip(observed.iter()) {
                    *r = momentum * *r + (F::one() - momentum) * o;
                }
            }
        }
    }
}
