//! The toy diffusion transformer: pre-norm blocks with shared Q/K/V/O
//! projections across all segments, timestep conditioning added to image
//! tokens only (condition tokens are step-invariant by construction, which
//! is what makes their K/V exactly cacheable).

use serde::{Deserialize, Serialize};

use crate::attn::sparse::PartialAttention;
use crate::attn::{packed_to_heads, AttentionBackend};
use crate::cache::ConditionCache;
use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSpec, Grid, ModalityLayout, SegmentId};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{dot, matmul, Scalar, Tensor};
use crate::toy::data::{SyntheticSample, SUBJECT_SIDE, VOCAB_SIZE};

/// Fourier time-feature width (sin/cos pairs).
pub const TIME_FREQS: usize = 4;
pub const TIME_FEATURES: usize = 2 * TIME_FREQS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub grid: Grid,
    pub channels: usize,
    pub text_len: usize,
    pub use_spatial: bool,
    pub use_subject: bool,
    pub mlp_mult: usize,
    /// Keyword-mask threshold used when denoising recomputes masks.
    pub epsilon: f64,
}

impl ToyModelConfig {
    /// Embedding width (= heads * head_dim).
    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn image_len(&self) -> usize {
        self.grid.len()
    }

    pub fn subject_len(&self) -> usize {
        SUBJECT_SIDE * SUBJECT_SIDE
    }

    pub fn layout(&self) -> Result<ModalityLayout> {
        ModalityLayout::with_congruent_spatial(
            self.text_len,
            self.grid,
            usize::from(self.use_spatial),
            if self.use_subject {
                vec![self.subject_len()]
            } else {
                Vec::new()
            },
            vec![1], // the dataset's fixed keyword slot
        )
    }

    /// Small spatial-task default used across tests and the CLI.
    pub fn small() -> Self {
        ToyModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            grid: Grid::new(8, 8),
            channels: 2,
            text_len: 4,
            use_spatial: true,
            use_subject: false,
            mlp_mult: 2,
            epsilon: 0.2,
        }
    }

    /// Variant with a subject condition (keyword gating active).
    pub fn small_with_subject() -> Self {
        ToyModelConfig {
            use_subject: true,
            ..Self::small()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub norm1: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub norm2: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ToyParams<T> {
    /// Frozen random vocabulary embeddings (not trained).
    pub text_embed: Tensor<T>,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub spatial_w: Tensor<T>,
    pub spatial_b: Tensor<T>,
    pub subject_w: Tensor<T>,
    pub subject_b: Tensor<T>,
    pub time_w1: Tensor<T>,
    pub time_b1: Tensor<T>,
    pub time_w2: Tensor<T>,
    pub time_b2: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub out_norm: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ToyParams<T> {
    /// Visit trainable parameters in a fixed order (text embeddings are
    /// frozen and excluded).
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("patch_w", &self.patch_w);
        f("patch_b", &self.patch_b);
        f("spatial_w", &self.spatial_w);
        f("spatial_b", &self.spatial_b);
        f("subject_w", &self.subject_w);
        f("subject_b", &self.subject_b);
        f("time_w1", &self.time_w1);
        f("time_b1", &self.time_b1);
        f("time_w2", &self.time_w2);
        f("time_b2", &self.time_b2);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.norm1"), &l.norm1);
            f(&format!("layer{i}.wq"), &l.wq);
            f(&format!("layer{i}.wk"), &l.wk);
            f(&format!("layer{i}.wv"), &l.wv);
            f(&format!("layer{i}.wo"), &l.wo);
            f(&format!("layer{i}.norm2"), &l.norm2);
            f(&format!("layer{i}.mlp_w1"), &l.mlp_w1);
            f(&format!("layer{i}.mlp_b1"), &l.mlp_b1);
            f(&format!("layer{i}.mlp_w2"), &l.mlp_w2);
            f(&format!("layer{i}.mlp_b2"), &l.mlp_b2);
        }
        f("out_norm", &self.out_norm);
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    pub fn trainable(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t.clone()));
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    /// Overwrite trainable parameters from the same fixed order.
    pub fn set_trainable(&mut self, values: &[Tensor<T>]) {
        let mut idx = 0;
        let mut put = |t: &mut Tensor<T>| {
            *t = values[idx].clone();
            idx += 1;
        };
        put(&mut self.patch_w);
        put(&mut self.patch_b);
        put(&mut self.spatial_w);
        put(&mut self.spatial_b);
        put(&mut self.subject_w);
        put(&mut self.subject_b);
        put(&mut self.time_w1);
        put(&mut self.time_b1);
        put(&mut self.time_w2);
        put(&mut self.time_b2);
        for l in self.layers.iter_mut() {
            put(&mut l.norm1);
            put(&mut l.wq);
            put(&mut l.wk);
            put(&mut l.wv);
            put(&mut l.wo);
            put(&mut l.norm2);
            put(&mut l.mlp_w1);
            put(&mut l.mlp_b1);
            put(&mut l.mlp_w2);
            put(&mut l.mlp_b2);
        }
        put(&mut self.out_norm);
        put(&mut self.head_w);
        put(&mut self.head_b);
        assert_eq!(idx, values.len(), "trainable count mismatch");
    }
}

/// Renormalized attention capture request for analysis.
#[derive(Debug, Clone, Copy)]
pub struct CaptureRequest {
    pub layer: usize,
    pub q_seg: SegmentId,
    pub k_seg: SegmentId,
}

/// Outputs of a plain (tape-free) forward pass.
#[derive(Debug)]
pub struct PlainForwardOutput<T> {
    /// Predicted velocity on the image grid: N x channels.
    pub velocity: Tensor<T>,
    /// Layer-0 per-head image queries (for keyword-mask computation).
    pub probe_qx: Vec<Tensor<T>>,
    /// Layer-0 per-head text keys.
    pub probe_kt: Vec<Tensor<T>>,
    /// Head-averaged renormalized block attention, if requested.
    pub captured: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ToyDit<T> {
    pub cfg: ToyModelConfig,
    pub params: ToyParams<T>,
}

fn linear_init<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    normal_tensor::<T>(rng, &[fan_in, fan_out]).scale(T::from_f64(1.0 / (fan_in as f64).sqrt()))
}

impl<T: Scalar> ToyDit<T> {
    pub fn init(cfg: ToyModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim();
        let ch = cfg.channels;
        let hidden = cfg.mlp_mult * d;
        let layer = |rng: &mut Rng| LayerParams {
            norm1: Tensor::full(&[1, d], T::one()),
            wq: linear_init(rng, d, d),
            wk: linear_init(rng, d, d),
            wv: linear_init(rng, d, d),
            wo: linear_init(rng, d, d),
            norm2: Tensor::full(&[1, d], T::one()),
            mlp_w1: linear_init(rng, d, hidden),
            mlp_b1: Tensor::zeros(&[1, hidden]),
            mlp_w2: linear_init(rng, hidden, d),
            mlp_b2: Tensor::zeros(&[1, d]),
        };
        let params = ToyParams {
            text_embed: normal_tensor(rng, &[VOCAB_SIZE, d]),
            patch_w: linear_init(rng, ch, d),
            patch_b: Tensor::zeros(&[1, d]),
            spatial_w: linear_init(rng, 1, d),
            spatial_b: Tensor::zeros(&[1, d]),
            subject_w: linear_init(rng, ch, d),
            subject_b: Tensor::zeros(&[1, d]),
            time_w1: linear_init(rng, TIME_FEATURES, d),
            time_b1: Tensor::zeros(&[1, d]),
            time_w2: linear_init(rng, d, d),
            time_b2: Tensor::zeros(&[1, d]),
            layers: (0..cfg.layers).map(|_| layer(rng)).collect(),
            out_norm: Tensor::full(&[1, d], T::one()),
            head_w: linear_init(rng, d, ch),
            head_b: Tensor::zeros(&[1, ch]),
        };
        ToyDit { cfg, params }
    }

    pub fn cast<U: Scalar>(&self) -> ToyDit<U> {
        let p = &self.params;
        ToyDit {
            cfg: self.cfg,
            params: ToyParams {
                text_embed: p.text_embed.cast(),
                patch_w: p.patch_w.cast(),
                patch_b: p.patch_b.cast(),
                spatial_w: p.spatial_w.cast(),
                spatial_b: p.spatial_b.cast(),
                subject_w: p.subject_w.cast(),
                subject_b: p.subject_b.cast(),
                time_w1: p.time_w1.cast(),
                time_b1: p.time_b1.cast(),
                time_w2: p.time_w2.cast(),
                time_b2: p.time_b2.cast(),
                layers: p
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        norm1: l.norm1.cast(),
                        wq: l.wq.cast(),
                        wk: l.wk.cast(),
                        wv: l.wv.cast(),
                        wo: l.wo.cast(),
                        norm2: l.norm2.cast(),
                        mlp_w1: l.mlp_w1.cast(),
                        mlp_b1: l.mlp_b1.cast(),
                        mlp_w2: l.mlp_w2.cast(),
                        mlp_b2: l.mlp_b2.cast(),
                    })
                    .collect(),
                out_norm: p.out_norm.cast(),
                head_w: p.head_w.cast(),
                head_b: p.head_b.cast(),
            },
        }
    }

    pub fn layout(&self) -> Result<ModalityLayout> {
        self.cfg.layout()
    }

    pub fn time_features(t: f64) -> Tensor<T> {
        let mut data = Vec::with_capacity(TIME_FEATURES);
        for i in 0..TIME_FREQS {
            let w = 2.0 * std::f64::consts::PI * (1 << i) as f64 * t;
            data.push(T::from_f64(w.sin()));
            data.push(T::from_f64(w.cos()));
        }
        Tensor::new(vec![1, TIME_FEATURES], data).expect("fixed shape")
    }

    fn time_embedding(&self, t: f64) -> Tensor<T> {
        let p = &self.params;
        let h = add_row_bias_plain(&matmul(&Self::time_features(t), &p.time_w1).unwrap(), &p.time_b1);
        let h = silu_plain(&h);
        add_row_bias_plain(&matmul(&h, &p.time_w2).unwrap(), &p.time_b2)
    }

    pub fn embed_text(&self, text: &[usize]) -> Tensor<T> {
        let d = self.cfg.dim();
        let mut out = Tensor::zeros(&[text.len(), d]);
        for (r, &w) in text.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.params.text_embed.row(w));
        }
        out
    }

    pub fn embed_image(&self, x_img: &Tensor<T>, t: f64) -> Tensor<T> {
        let p = &self.params;
        let tokens = add_row_bias_plain(&matmul(x_img, &p.patch_w).unwrap(), &p.patch_b);
        let t_emb = self.time_embedding(t);
        let mut out = tokens;
        for i in 0..out.rows() {
            for (a, &b) in out.row_mut(i).iter_mut().zip(t_emb.row(0)) {
                *a = *a + b;
            }
        }
        out
    }

    pub fn embed_spatial(&self, spatial: &Tensor<T>) -> Tensor<T> {
        add_row_bias_plain(
            &matmul(spatial, &self.params.spatial_w).unwrap(),
            &self.params.spatial_b,
        )
    }

    pub fn embed_subject(&self, subject: &Tensor<T>) -> Tensor<T> {
        add_row_bias_plain(
            &matmul(subject, &self.params.subject_w).unwrap(),
            &self.params.subject_b,
        )
    }

    /// Embedding rows for one condition segment, by condition index
    /// (spatial conditions first, then subjects).
    pub fn embed_condition(&self, sample: &SyntheticSample<T>, cond_index: usize) -> Tensor<T> {
        let c = usize::from(self.cfg.use_spatial);
        if cond_index < c {
            self.embed_spatial(&sample.spatial)
        } else {
            self.embed_subject(&sample.subject)
        }
    }

    pub fn num_conditions(&self) -> usize {
        usize::from(self.cfg.use_spatial) + usize::from(self.cfg.use_subject)
    }

    fn embed_full(&self, sample: &SyntheticSample<T>, x_img: &Tensor<T>, t: f64) -> Tensor<T> {
        let d = self.cfg.dim();
        let layout = self.layout().expect("validated config");
        let mut x = Tensor::zeros(&[layout.total_len(), d]);
        copy_rows(&mut x, 0, &self.embed_text(&sample.text));
        copy_rows(&mut x, layout.segment_start(SegmentId::Image), &self.embed_image(x_img, t));
        for ci in 0..self.num_conditions() {
            let seg = self.condition_segment(ci);
            copy_rows(&mut x, layout.segment_start(seg), &self.embed_condition(sample, ci));
        }
        x
    }

    pub fn condition_segment(&self, cond_index: usize) -> SegmentId {
        let c = usize::from(self.cfg.use_spatial);
        if cond_index < c {
            SegmentId::Spatial(cond_index)
        } else {
            SegmentId::Subject(cond_index - c)
        }
    }

    /// One transformer sub-block pair (attention + MLP) on plain tensors,
    /// with the attention output provided by the caller.
    fn mlp_block(&self, layer: usize, x: &Tensor<T>) -> Tensor<T> {
        let lp = &self.params.layers[layer];
        let xn = rms_norm_plain(x, &lp.norm2);
        let h = silu_plain(&add_row_bias_plain(&matmul(&xn, &lp.mlp_w1).unwrap(), &lp.mlp_b1));
        let out = add_row_bias_plain(&matmul(&h, &lp.mlp_w2).unwrap(), &lp.mlp_b2);
        x.add(&out).expect("residual shapes agree")
    }

    /// Full-sequence forward (conditions recomputed every call).
    pub fn forward_plain(
        &self,
        sample: &SyntheticSample<T>,
        x_img: &Tensor<T>,
        t: f64,
        spec: &AttentionMaskSpec,
        backend: AttentionBackend,
        capture: Option<&CaptureRequest>,
        mut meter: Option<&mut CostMeter>,
    ) -> Result<PlainForwardOutput<T>> {
        let layout = self.layout()?;
        let heads = self.cfg.heads;
        let mut x = self.embed_full(sample, x_img, t);
        let mut probe_qx = Vec::new();
        let mut probe_kt = Vec::new();
        let mut captured = None;

        for layer in 0..self.cfg.layers {
            let lp = &self.params.layers[layer];
            let xn = rms_norm_plain(&x, &lp.norm1);
            let q = matmul(&xn, &lp.wq)?;
            let k = matmul(&xn, &lp.wk)?;
            let v = matmul(&xn, &lp.wv)?;
            let inputs = packed_to_heads(&q, &k, &v, heads)?;
            if layer == 0 {
                let xr = layout.segment_range(SegmentId::Image);
                let tr = layout.segment_range(SegmentId::Text);
                for h in 0..heads {
                    probe_qx.push(slice_rows_plain(inputs.q(h), xr.clone()));
                    probe_kt.push(slice_rows_plain(inputs.k(h), tr.clone()));
                }
            }
            if let Some(req) = capture {
                if req.layer == layer {
                    captured = Some(capture_block_attention(&inputs, spec, req)?);
                }
            }
            let attn = match backend {
                AttentionBackend::DenseOracle => {
                    crate::attn::dense::masked_attention_oracle(&inputs, spec)?
                }
                AttentionBackend::SparseMerged => {
                    crate::attn::sparse::pka_attention(&inputs, spec, meter.as_deref_mut())?
                }
            };
            x = x.add(&matmul(&attn, &lp.wo)?)?;
            x = self.mlp_block(layer, &x);
        }

        let xr = layout.segment_range(SegmentId::Image);
        let img = slice_rows_plain(&x, xr);
        let y = rms_norm_plain(&img, &self.params.out_norm);
        let velocity = add_row_bias_plain(&matmul(&y, &self.params.head_w)?, &self.params.head_b);
        Ok(PlainForwardOutput {
            velocity,
            probe_qx,
            probe_kt,
            captured,
        })
    }

    /// Text+image forward with the condition branch served from the cache.
    /// Streaming (sparse) attention arithmetic, identical to the full run.
    pub fn forward_cached(
        &self,
        sample: &SyntheticSample<T>,
        x_img: &Tensor<T>,
        t: f64,
        spec: &AttentionMaskSpec,
        cache: &ConditionCache<T>,
        mut meter: Option<&mut CostMeter>,
    ) -> Result<PlainForwardOutput<T>> {
        let layout = self.layout()?;
        let heads = self.cfg.heads;
        let m = layout.text_len();
        let n = layout.image_len();
        let d = self.cfg.dim();

        let mut x = Tensor::zeros(&[m + n, d]);
        copy_rows(&mut x, 0, &self.embed_text(&sample.text));
        copy_rows(&mut x, m, &self.embed_image(x_img, t));
        let mut probe_qx = Vec::new();
        let mut probe_kt = Vec::new();

        for layer in 0..self.cfg.layers {
            let lp = &self.params.layers[layer];
            let xn = rms_norm_plain(&x, &lp.norm1);
            let q = matmul(&xn, &lp.wq)?;
            let k = matmul(&xn, &lp.wk)?;
            let v = matmul(&xn, &lp.wv)?;
            if layer == 0 {
                let inputs = packed_to_heads(&q, &k, &v, heads)?;
                for h in 0..heads {
                    probe_qx.push(slice_rows_plain(inputs.q(h), m..m + n));
                    probe_kt.push(slice_rows_plain(inputs.k(h), 0..m));
                }
            }
            let attn = self.cached_attention(spec, &q, &k, &v, cache, layer, meter.as_deref_mut())?;
            x = x.add(&matmul(&attn, &lp.wo)?)?;
            x = self.mlp_block(layer, &x);
        }

        let img = slice_rows_plain(&x, m..m + n);
        let y = rms_norm_plain(&img, &self.params.out_norm);
        let velocity = add_row_bias_plain(&matmul(&y, &self.params.head_w)?, &self.params.head_b);
        Ok(PlainForwardOutput {
            velocity,
            probe_qx,
            probe_kt,
            captured: None,
        })
    }

    /// Streaming attention for text/image queries with condition keys
    /// looked up from the cache. Arithmetic (block order, key order,
    /// running-softmax updates) matches the full sparse engine bit for bit.
    fn cached_attention(
        &self,
        spec: &AttentionMaskSpec,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        cache: &ConditionCache<T>,
        layer: usize,
        mut meter: Option<&mut CostMeter>,
    ) -> Result<Tensor<T>> {
        let layout = spec.layout();
        let m = layout.text_len();
        let n = layout.image_len();
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let local = packed_to_heads(q, k, v, heads)?;
        let blocks = spec.blocks();
        let mut out = Tensor::zeros(&[m + n, heads * d]);

        for head in 0..heads {
            for seg in [SegmentId::Text, SegmentId::Image] {
                let q_range = layout.segment_range(seg);
                let rows = q_range.len();
                let mut acc = PartialAttention::empty(rows, d);
                if let Some(mt) = meter.as_deref_mut() {
                    mt.alloc_scores(2 * rows as u64);
                }
                for block in blocks.iter().filter(|b| b.q_seg == seg) {
                    let mut pairs = 0u64;
                    for (r, qi) in q_range.clone().enumerate() {
                        let qrow = local.q(head).row(qi);
                        let mut res: Result<()> = Ok(());
                        spec.for_each_key(block, r, |kj| {
                            if res.is_err() {
                                return;
                            }
                            let kv = if kj < m + n {
                                (local.k(head).row(kj), local.v(head).row(kj))
                            } else {
                                let (seg_k, off) = layout.segment_of(kj);
                                let ci = self.condition_index(seg_k);
                                match cache.lookup(layer, ci) {
                                    Ok(entry) => {
                                        (entry.k_head(head, d, off), entry.v_head(head, d, off))
                                    }
                                    Err(e) => {
                                        res = Err(e);
                                        return;
                                    }
                                }
                            };
                            acc.push_key(r, dot(qrow, kv.0) * scale, kv.1);
                            pairs += 1;
                        });
                        res?;
                    }
                    if let Some(mt) = meter.as_deref_mut() {
                        mt.add_pairs(pairs, d);
                    }
                }
                let merged = acc.finalize()?;
                for (r, qi) in q_range.clone().enumerate() {
                    out.row_mut(qi)[head * d..(head + 1) * d].copy_from_slice(merged.row(r));
                }
                if let Some(mt) = meter.as_deref_mut() {
                    mt.free_scores(2 * rows as u64);
                }
            }
        }
        Ok(out)
    }

    fn condition_index(&self, seg: SegmentId) -> usize {
        let c = usize::from(self.cfg.use_spatial);
        match seg {
            SegmentId::Spatial(j) => j,
            SegmentId::Subject(j) => c + j,
            _ => unreachable!("not a condition segment"),
        }
    }
}

/// Restricted-softmax block attention for analysis: per query row of
/// `req.q_seg`, softmax over the keys of `req.k_seg` only (the conditional
/// distribution given attention lands in that block), averaged over heads.
fn capture_block_attention<T: Scalar>(
    inputs: &crate::attn::AttentionInputs<T>,
    spec: &AttentionMaskSpec,
    req: &CaptureRequest,
) -> Result<Tensor<T>> {
    let layout = spec.layout();
    let q_range = layout.segment_range(req.q_seg);
    let k_range = layout.segment_range(req.k_seg);
    let heads = inputs.num_heads();
    let scale = inputs.scale();
    let mut avg = Tensor::<T>::zeros(&[q_range.len(), k_range.len()]);
    for h in 0..heads {
        for (r, qi) in q_range.clone().enumerate() {
            let qrow = inputs.q(h).row(qi);
            let mut logits: Vec<T> = Vec::with_capacity(k_range.len());
            for kj in k_range.clone() {
                if !spec.permits(qi, kj) {
                    return Err(Error::InvalidParameter(format!(
                        "capture block ({:?} -> {:?}) is not fully permitted at query {qi}",
                        req.q_seg, req.k_seg
                    )));
                }
                logits.push(dot(qrow, inputs.k(h).row(kj)) * scale);
            }
            crate::tensor::softmax_in_place(&mut logits);
            for (c, &p) in logits.iter().enumerate() {
                let cur = avg.at(r, c);
                avg.set(r, c, cur + p);
            }
        }
    }
    Ok(avg.scale(T::from_f64(1.0 / heads as f64)))
}

// --- plain tensor helpers shared by model and cache ---

pub(crate) fn copy_rows<T: Scalar>(dst: &mut Tensor<T>, at: usize, src: &Tensor<T>) {
    for i in 0..src.rows() {
        dst.row_mut(at + i).copy_from_slice(src.row(i));
    }
}

pub(crate) fn slice_rows_plain<T: Scalar>(
    t: &Tensor<T>,
    range: std::ops::Range<usize>,
) -> Tensor<T> {
    let d = t.cols();
    let mut out = Tensor::zeros(&[range.len(), d]);
    for (r, i) in range.enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}

pub(crate) fn add_row_bias_plain<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (a, &b) in out.row_mut(i).iter_mut().zip(bias.row(0)) {
            *a = *a + b;
        }
    }
    out
}

pub(crate) fn silu_plain<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}

pub(crate) fn rms_norm_plain<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let ms: T = x.row(i).iter().map(|&v| v * v).sum::<T>() / T::from_f64(n as f64)
            + T::from_f64(1e-6);
        let inv = T::one() / ms.sqrt();
        for (o, &g) in out.row_mut(i).iter_mut().zip(gain.row(0)) {
            *o = *o * inv * g;
        }
    }
    out
}
