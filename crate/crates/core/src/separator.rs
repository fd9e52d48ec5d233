//! Weight-shared audio-visual separator: chunking, per-branch
//! intra-chunk / cross-modal / inter-chunk modelling and overlap-add.

use rand::Rng;

use crate::autodiff::{SparseMap, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Ctx, Linear, TransformerStack};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::visual::align_to_chunks;

/// Padding and grid of a chunked `[D, L]` map (hop `C/2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub chunk: usize,
    pub chunks: usize,
    pub pad_front: usize,
    pub pad_back: usize,
    pub original_len: usize,
}

impl ChunkLayout {
    /// Inputs no longer than one chunk become a single tail-padded chunk;
    /// longer inputs get `C/2` of front padding and the smallest tail
    /// padding that completes the grid.
    pub fn new(len: usize, chunk: usize) -> Result<Self> {
        if chunk < 2 || chunk % 2 != 0 {
            return Err(Error::Config(format!("chunk length must be even and >= 2, got {chunk}")));
        }
        if len == 0 {
            return Err(Error::EmptyInput("chunk"));
        }
        let hop = chunk / 2;
        if len <= chunk {
            return Ok(Self { chunk, chunks: 1, pad_front: 0, pad_back: chunk - len, original_len: len });
        }
        let pad_front = hop;
        let rem = (pad_front + len - chunk) % hop;
        let pad_back = if rem == 0 { 0 } else { hop - rem };
        let chunks = (pad_front + len + pad_back - chunk) / hop + 1;
        Ok(Self { chunk, chunks, pad_front, pad_back, original_len: len })
    }

    pub fn hop(&self) -> usize {
        self.chunk / 2
    }

    pub fn padded_len(&self) -> usize {
        self.pad_front + self.original_len + self.pad_back
    }

    pub fn validate(&self) -> Result<()> {
        let consistent = self.chunk >= 2
            && self.chunk % 2 == 0
            && self.chunks >= 1
            && (self.chunks - 1) * self.hop() + self.chunk == self.padded_len();
        if consistent {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("{self:?}")))
        }
    }

    /// Index into the unpadded input for padded position `p`, if any.
    fn source(&self, p: usize) -> Option<usize> {
        (p >= self.pad_front && p < self.pad_front + self.original_len).then(|| p - self.pad_front)
    }

    /// How many windows cover each unpadded position.
    pub fn coverage(&self) -> Vec<usize> {
        let mut count = vec![0; self.original_len];
        for i in 0..self.chunks {
            for c in 0..self.chunk {
                if let Some(l) = self.source(i * self.hop() + c) {
                    count[l] += 1;
                }
            }
        }
        count
    }
}

/// Chunked map `[D, C, I]` with its layout.
#[derive(Debug, Clone, Copy)]
pub struct ChunkedFeature<'t, T: Scalar> {
    pub chunks: Var<'t, T>,
    pub layout: ChunkLayout,
}

/// Zero-pad and stack overlapping windows of `h[D, L]` into `[D, C, I]`.
pub fn chunk<'t, T: Scalar>(h: Var<'t, T>, chunk_len: usize) -> Result<ChunkedFeature<'t, T>> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(Error::shape("chunk", format!("expected [D, L], got {s:?}")));
    }
    let (d, l) = (s[0], s[1]);
    let layout = ChunkLayout::new(l, chunk_len)?;
    let (c, n, hop) = (layout.chunk, layout.chunks, layout.hop());
    let mut index = Vec::with_capacity(d * c * n);
    for di in 0..d {
        for ci in 0..c {
            for i in 0..n {
                index.push(match layout.source(i * hop + ci) {
                    Some(src) => di * l + src,
                    None => crate::autodiff::ZERO_SLOT,
                });
            }
        }
    }
    Ok(ChunkedFeature { chunks: h.gather(index, &[d, c, n])?, layout })
}

/// Sum overlapping windows, normalise by coverage and strip the padding.
pub fn overlap_add<'t, T: Scalar>(chunked: ChunkedFeature<'t, T>) -> Result<Var<'t, T>> {
    let layout = chunked.layout;
    layout.validate()?;
    let s = chunked.chunks.shape();
    if s.len() != 3 || s[1] != layout.chunk || s[2] != layout.chunks {
        return Err(Error::Corrupt(format!("tensor {s:?} does not match {layout:?}")));
    }
    let (d, c, n, hop, l) = (s[0], layout.chunk, layout.chunks, layout.hop(), layout.original_len);
    let coverage = layout.coverage();
    let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); d * l];
    for di in 0..d {
        for ci in 0..c {
            for i in 0..n {
                if let Some(pos) = layout.source(i * hop + ci) {
                    let w = T::one() / T::from_usize_lossy(coverage[pos]);
                    rows[di * l + pos].push(((di * c + ci) * n + i, w));
                }
            }
        }
    }
    chunked.chunks.sparse_map(SparseMap::from_rows(&[d, l], d * c * n, rows))
}

/// Visual-query cross attention: each visual frame attends over the `C`
/// audio positions of its chunk; the attended vector is added to every
/// position of that chunk.
#[derive(Debug, Clone)]
pub struct CrossModalFusion {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl CrossModalFusion {
    /// `h_v[I, D]`, `h_a[I, C, D]` (time-major) to `[I, C, D]`.
    pub fn forward_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, hv: Var<'t, T>, ha: Var<'t, T>) -> Result<Var<'t, T>> {
        let (vs, as_) = (hv.shape(), ha.shape());
        let (i, c, d) = match as_[..] {
            [i, c, d] if d == self.dim => (i, c, d),
            _ => return Err(Error::shape("cross_modal_fuse", format!("audio {as_:?}"))),
        };
        if vs.len() != 2 || vs[1] != d {
            return Err(Error::shape("cross_modal_fuse", format!("visual {vs:?}")));
        }
        if vs[0] != i {
            return Err(Error::Alignment { expected: i, got: vs[0] });
        }
        let q = self.query.forward(cx, hv)?.reshape(&[i, 1, d])?;
        let k = self.key.forward(cx, ha)?;
        let v = self.value.forward(cx, ha)?;
        let scale = T::one() / T::from_usize_lossy(d).sqrt();
        let attended = q.attention(k, v, scale)?;
        let index: Vec<usize> = (0..i * c * d).map(|idx| (idx / (c * d)) * d + idx % d).collect();
        ha.add(attended.gather(index, &[i, c, d])?)
    }

    /// Attention weights `[I, 1, C]` for inspection.
    pub fn weights<T: Scalar>(&self, store: &ParamStore<T>, hv: &Tensor<T>, ha: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = crate::autodiff::Tape::new();
        let cx = Ctx::new(&tape, store);
        let (i, d) = (hv.dim(0), hv.dim(1));
        let q = self.query.forward(&cx, tape.constant(hv.clone()))?.reshape(&[i, 1, d])?.value();
        let k = self.key.forward(&cx, tape.constant(ha.clone()))?.value();
        crate::autodiff::attention_weights(&q, &k, T::one() / T::from_usize_lossy(d).sqrt())
    }
}

/// One intra -> cross-modal -> inter sweep.
#[derive(Debug, Clone)]
pub struct SeparationStage {
    pub intra: TransformerStack,
    pub cross: CrossModalFusion,
    pub inter: TransformerStack,
}

#[derive(Debug, Clone)]
pub struct Separator {
    pub stages: Vec<SeparationStage>,
    pub mask_head: Linear,
    pub chunk: usize,
    pub dim: usize,
}

impl Separator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let sc = &cfg.separator;
        let (d, eps) = (cfg.dim, cfg.layer_norm_eps);
        let stages = (0..sc.repeats)
            .map(|r| {
                let p = format!("{path}.stage{r}");
                Ok(SeparationStage {
                    intra: TransformerStack::new(store, &format!("{p}.intra"), sc.n_intra, d, sc.heads, sc.ffn_mult, eps, rng)?,
                    cross: CrossModalFusion {
                        query: Linear::new(store, &format!("{p}.cross.q"), d, d, true, rng),
                        key: Linear::new(store, &format!("{p}.cross.k"), d, d, true, rng),
                        value: Linear::new(store, &format!("{p}.cross.v"), d, d, true, rng),
                        dim: d,
                    },
                    inter: TransformerStack::new(store, &format!("{p}.inter"), sc.n_inter, d, sc.heads, sc.ffn_mult, eps, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages, mask_head: Linear::new(store, &format!("{path}.mask"), d, d, true, rng), chunk: sc.chunk, dim: d })
    }

    /// Attention within each chunk (over `C`) of `h[D, C, I]`.
    pub fn intra_transformer<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, stage: usize, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = h.permute(&[2, 1, 0])?; // [I, C, D]
        self.stages[stage].intra.forward(cx, x)?.permute(&[2, 1, 0])
    }

    /// `h_v[D, I]`, `h_a[D, C, I] -> [D, C, I]`.
    pub fn cross_modal_fuse<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, stage: usize, hv: Var<'t, T>, ha: Var<'t, T>) -> Result<Var<'t, T>> {
        let ha_tm = ha.permute(&[2, 1, 0])?;
        let hv_tm = hv.t()?;
        self.stages[stage].cross.forward_tm(cx, hv_tm, ha_tm)?.permute(&[2, 1, 0])
    }

    /// Attention across chunks (over `I`) at each within-chunk position.
    pub fn inter_transformer<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, stage: usize, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = h.permute(&[1, 2, 0])?; // [C, I, D]
        self.stages[stage].inter.forward(cx, x)?.permute(&[2, 0, 1])
    }

    /// Non-negative chunk masks from the final features `[D, C, I]`.
    pub fn mask<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = h.permute(&[1, 2, 0])?; // [C, I, D]
        self.mask_head.forward(cx, x)?.relu()?.permute(&[2, 0, 1])
    }

    /// One branch on chunked audio `[D, C, I]` and aligned visual `[D, I]`.
    pub fn separation_module<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, chunks: Var<'t, T>, hv: Var<'t, T>) -> Result<Var<'t, T>> {
        // work time-major inside the sweep to avoid repeated permutes
        let mut x = chunks.permute(&[2, 1, 0])?; // [I, C, D]
        let hv_tm = hv.t()?; // [I, D]
        let (i, c, d) = (x.shape()[0], x.shape()[1], self.dim);
        for stage in &self.stages {
            x = stage.intra.forward(cx, x)?;
            x = stage.cross.forward_tm(cx, hv_tm, x)?;
            let y = stage.inter.forward(cx, x.permute(&[1, 0, 2])?)?; // [C, I, D]
            x = y.permute(&[1, 0, 2])?;
        }
        let m = self.mask_head.forward(cx, x)?.relu()?; // [I, C, D]
        debug_assert_eq!(m.shape(), vec![i, c, d]);
        m.permute(&[2, 1, 0])
    }

    /// Chunk once, run the shared module per visual cue, overlap-add each mask.
    pub fn separate_all<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>, visuals: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if visuals.is_empty() {
            return Err(Error::NoBranches);
        }
        let chunked = chunk(h, self.chunk)?;
        visuals
            .iter()
            .map(|&v| {
                let hv = align_to_chunks(v, chunked.layout.chunks)?;
                let m = self.separation_module(cx, chunked.chunks, hv)?;
                overlap_add(ChunkedFeature { chunks: m, layout: chunked.layout })
            })
            .collect()
    }
}
