use rand::Rng;

use super::lora::{find, LoraAdapter, ProjKind};
use super::tensor::{gemm, Matrix};
use super::{AlignConfig, AlignError};

const RMS_EPS: f64 = 1e-5;

/// One pre-norm transformer block: causal self-attention then a SiLU MLP,
/// each behind an RMSNorm and a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Block {
    fn proj(&self, kind: ProjKind) -> &Matrix {
        match kind {
            ProjKind::Query => &self.wq,
            ProjKind::Key => &self.wk,
            ProjKind::Value => &self.wv,
            ProjKind::Output => &self.wo,
        }
    }

    fn proj_mut(&mut self, kind: ProjKind) -> &mut Matrix {
        match kind {
            ProjKind::Query => &mut self.wq,
            ProjKind::Key => &mut self.wk,
            ProjKind::Value => &mut self.wv,
            ProjKind::Output => &mut self.wo,
        }
    }
}

/// Small decoder-only language model. Linear weights are stored
/// `out × in`; gains and biases are `1 × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: Matrix,
    pub head: Matrix,
    pub heads: usize,
}

impl TinyLm {
    pub fn new(cfg: &AlignConfig, rng: &mut impl Rng) -> Self {
        let t = cfg.lm_dim;
        let f = 4 * t;
        let lin = 1.0 / (t as f64).sqrt();
        let out = lin / (2.0 * cfg.lm_layers as f64).sqrt();
        let blocks = (0..cfg.lm_layers)
            .map(|_| Block {
                ln1: ones(t),
                wq: Matrix::normal(t, t, lin, rng),
                wk: Matrix::normal(t, t, lin, rng),
                wv: Matrix::normal(t, t, lin, rng),
                wo: Matrix::normal(t, t, out, rng),
                ln2: ones(t),
                w1: Matrix::normal(f, t, lin, rng),
                b1: Matrix::zeros(1, f),
                w2: Matrix::normal(t, f, out / 2.0, rng),
                b2: Matrix::zeros(1, t),
            })
            .collect();
        Self {
            tok_emb: Matrix::normal(cfg.vocab_size, t, 1.0, rng),
            pos_emb: Matrix::normal(cfg.max_seq, t, 0.1, rng),
            blocks,
            ln_f: ones(t),
            head: Matrix::normal(cfg.vocab_size, t, lin, rng),
            heads: cfg.lm_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_tensors_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.tok_emb.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn max_seq(&self) -> usize {
        self.pos_emb.rows()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), &self.tok_emb),
            ("lm.pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("lm.blocks.{l}");
            out.extend([
                (format!("{p}.ln1"), &b.ln1),
                (format!("{p}.wq"), &b.wq),
                (format!("{p}.wk"), &b.wk),
                (format!("{p}.wv"), &b.wv),
                (format!("{p}.wo"), &b.wo),
                (format!("{p}.ln2"), &b.ln2),
                (format!("{p}.w1"), &b.w1),
                (format!("{p}.b1"), &b.b1),
                (format!("{p}.w2"), &b.w2),
                (format!("{p}.b2"), &b.b2),
            ]);
        }
        out.push(("lm.ln_f".to_string(), &self.ln_f));
        out.push(("lm.head".to_string(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), &mut self.tok_emb),
            ("lm.pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("lm.blocks.{l}");
            out.extend([
                (format!("{p}.ln1"), &mut b.ln1),
                (format!("{p}.wq"), &mut b.wq),
                (format!("{p}.wk"), &mut b.wk),
                (format!("{p}.wv"), &mut b.wv),
                (format!("{p}.wo"), &mut b.wo),
                (format!("{p}.ln2"), &mut b.ln2),
                (format!("{p}.w1"), &mut b.w1),
                (format!("{p}.b1"), &mut b.b1),
                (format!("{p}.w2"), &mut b.w2),
                (format!("{p}.b2"), &mut b.b2),
            ]);
        }
        out.push(("lm.ln_f".to_string(), &mut self.ln_f));
        out.push(("lm.head".to_string(), &mut self.head));
        out
    }

    /// Runs the decoder over `[prefix; embed(text_ids)]`, keeping every
    /// intermediate needed by [`TinyLm::backward`].
    pub fn forward(
        &self,
        prefix: &Matrix,
        text_ids: &[u32],
        adapters: &[LoraAdapter],
    ) -> Result<LmCache, AlignError> {
        self.forward_batch(&[(prefix, text_ids)], adapters)
    }

    /// Runs several independent sequences stacked into one matrix; attention
    /// never crosses sequence boundaries.
    pub fn forward_batch(
        &self,
        seqs: &[(&Matrix, &[u32])],
        adapters: &[LoraAdapter],
    ) -> Result<LmCache, AlignError> {
        let (x, spans) = self.embed_batch(seqs)?;
        let ids = seqs.iter().map(|(_, ids)| ids.to_vec()).collect();
        Ok(self.forward_from(x, 0, spans, ids, adapters))
    }

    /// Stacked input rows (prefix or token embedding plus position) and the
    /// span of each sequence.
    pub(crate) fn embed_batch(
        &self,
        seqs: &[(&Matrix, &[u32])],
    ) -> Result<(Matrix, Vec<Span>), AlignError> {
        let t = self.dim();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut total = 0;
        for (prefix, text_ids) in seqs {
            let k = prefix.rows();
            let n = k + text_ids.len();
            if k > 0 && prefix.cols() != t {
                return Err(AlignError::ShapeMismatch(format!(
                    "prefix width {} but model width {t}",
                    prefix.cols()
                )));
            }
            if n == 0 {
                return Err(AlignError::EmptySequence);
            }
            if n > self.max_seq() {
                return Err(AlignError::SequenceTooLong {
                    len: n,
                    max: self.max_seq(),
                });
            }
            if let Some(&bad) = text_ids
                .iter()
                .find(|&&id| id as usize >= self.vocab_size())
            {
                return Err(AlignError::ShapeMismatch(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab_size()
                )));
            }
            spans.push(Span {
                start: total,
                prefix_rows: k,
                len: n,
            });
            total += n;
        }
        if spans.is_empty() {
            return Err(AlignError::EmptySequence);
        }
        let mut x = Matrix::zeros(total, t);
        for (sp, (prefix, text_ids)) in spans.iter().zip(seqs) {
            for i in 0..sp.len {
                let src = if i < sp.prefix_rows {
                    prefix.row(i)
                } else {
                    self.tok_emb.row(text_ids[i - sp.prefix_rows] as usize)
                };
                let dst = x.row_mut(sp.start + i);
                for ((o, s), p) in dst.iter_mut().zip(src).zip(self.pos_emb.row(i)) {
                    *o = s + p;
                }
            }
        }
        Ok((x, spans))
    }

    /// Runs blocks `first..` on `x`, the residual stream entering block
    /// `first`. Only those blocks are cached, so a partial cache supports
    /// logits but not [`TinyLm::backward`].
    pub(crate) fn forward_from(
        &self,
        mut x: Matrix,
        first: usize,
        spans: Vec<Span>,
        ids: Vec<Vec<u32>>,
        adapters: &[LoraAdapter],
    ) -> LmCache {
        let mut layers = Vec::with_capacity(self.blocks.len() - first);
        for (l, block) in self.blocks.iter().enumerate().skip(first) {
            let (next, cache) = self.block_forward(l, block, x, &spans, adapters);
            layers.push(cache);
            x = next;
        }
        let (xf, xhat_f, r_f) = rms_norm(&x, &self.ln_f);
        LmCache {
            spans,
            ids,
            layers,
            xhat_f,
            r_f,
            xf,
        }
    }

    /// The residual stream entering each block.
    pub(crate) fn block_inputs(
        &self,
        mut x: Matrix,
        spans: &[Span],
        adapters: &[LoraAdapter],
    ) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            out.push(x.clone());
            x = self.block_forward(l, block, x, spans, adapters).0;
        }
        out
    }

    fn block_forward(
        &self,
        layer: usize,
        b: &Block,
        x: Matrix,
        spans: &[Span],
        adapters: &[LoraAdapter],
    ) -> (Matrix, LayerCache) {
        let n = x.rows();
        let t = self.dim();
        let dh = t / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (xn1, xhat1, r1) = rms_norm(&x, &b.ln1);
        let (q, uq) = linear(&xn1, b, layer, ProjKind::Query, adapters);
        let (k, uk) = linear(&xn1, b, layer, ProjKind::Key, adapters);
        let (v, uv) = linear(&xn1, b, layer, ProjKind::Value, adapters);
        let mut attn = Matrix::zeros(n, t);
        let mut probs = Vec::with_capacity(self.heads * spans.len());
        for sp in spans {
            let (r0, r1) = (sp.start, sp.start + sp.len);
            for h in 0..self.heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = q.block(r0, r1, c0, c1);
                let kh = k.block(r0, r1, c0, c1);
                let vh = v.block(r0, r1, c0, c1);
                let mut s = qh.matmul_t(&kh);
                for i in 0..sp.len {
                    let row = s.row_mut(i);
                    for (j, e) in row.iter_mut().enumerate() {
                        *e = if j <= i { *e * inv } else { f64::NEG_INFINITY };
                    }
                    softmax_in_place(row);
                }
                attn.add_block(r0, c0, &s.matmul(&vh));
                probs.push(s);
            }
        }
        let (o, uo) = linear(&attn, b, layer, ProjKind::Output, adapters);
        let mut x_mid = x;
        x_mid.add_assign(&o);
        let (xn2, xhat2, r2) = rms_norm(&x_mid, &b.ln2);
        let mut h1 = xn2.matmul_t(&b.w1);
        add_row_bias(&mut h1, &b.b1);
        let mut act = h1.clone();
        act.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        let mut out = act.matmul_t(&b.w2);
        add_row_bias(&mut out, &b.b2);
        out.add_assign(&x_mid);
        let cache = LayerCache {
            xn1,
            xhat1,
            r1,
            q,
            k,
            v,
            lora_u: [uq, uk, uv, uo],
            probs,
            attn,
            xn2,
            xhat2,
            r2,
            h1,
            act,
        };
        (out, cache)
    }

    /// Logits for the listed sequence rows, one output row per entry.
    pub fn logits_rows(&self, cache: &LmCache, rows: &[usize]) -> Matrix {
        let t = self.dim();
        let mut xs = Matrix::zeros(rows.len(), t);
        for (i, &r) in rows.iter().enumerate() {
            xs.row_mut(i).copy_from_slice(cache.xf.row(r));
        }
        xs.matmul_t(&self.head)
    }

    /// Logits for every row of the sequence.
    pub fn logits(&self, cache: &LmCache) -> Matrix {
        cache.xf.matmul_t(&self.head)
    }

    /// Backpropagates `d_logits` (gradients for the logits of the stacked
    /// rows `rows`). Base-LM gradients are produced only when `want_lm`,
    /// adapter gradients only when `want_lora`; prefix gradients are always
    /// returned, one matrix per sequence.
    pub fn backward(
        &self,
        cache: &LmCache,
        rows: &[usize],
        d_logits: &Matrix,
        adapters: &[LoraAdapter],
        want_lm: bool,
        want_lora: bool,
    ) -> LmGrads {
        assert_eq!(
            cache.layers.len(),
            self.blocks.len(),
            "backward needs a cache from a full forward pass"
        );
        let t = self.dim();
        let n = cache.xf.rows();
        let mut g_lm = want_lm.then(|| self.zeros_like());
        let mut g_lora: Option<Vec<LoraAdapter>> =
            want_lora.then(|| adapters.iter().map(LoraAdapter::zeros_like).collect());

        let d_rows = d_logits.matmul(&self.head);
        let mut dxf = Matrix::zeros(n, t);
        for (i, &r) in rows.iter().enumerate() {
            for (d, s) in dxf.row_mut(r).iter_mut().zip(d_rows.row(i)) {
                *d += s;
            }
        }
        if let Some(g) = g_lm.as_mut() {
            let mut xs = Matrix::zeros(rows.len(), t);
            for (i, &r) in rows.iter().enumerate() {
                xs.row_mut(i).copy_from_slice(cache.xf.row(r));
            }
            gemm(1.0, d_logits, true, &xs, false, 1.0, &mut g.head);
        }
        let mut dx = rms_norm_back(
            &dxf,
            &cache.xhat_f,
            &cache.r_f,
            &self.ln_f,
            g_lm.as_mut().map(|g| &mut g.ln_f),
        );
        for l in (0..self.blocks.len()).rev() {
            dx = self.block_backward(
                l,
                &cache.layers[l],
                dx,
                &cache.spans,
                adapters,
                g_lm.as_mut(),
                g_lora.as_mut(),
            );
        }
        let prefixes = cache
            .spans
            .iter()
            .map(|sp| dx.slice_rows(sp.start, sp.start + sp.prefix_rows))
            .collect();
        if let Some(g) = g_lm.as_mut() {
            for (sp, ids) in cache.spans.iter().zip(&cache.ids) {
                for i in 0..sp.len {
                    let src = dx.row(sp.start + i);
                    for (d, s) in g.pos_emb.row_mut(i).iter_mut().zip(src) {
                        *d += s;
                    }
                    if i >= sp.prefix_rows {
                        let id = ids[i - sp.prefix_rows] as usize;
                        for (d, s) in g.tok_emb.row_mut(id).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        LmGrads {
            lm: g_lm,
            lora: g_lora,
            prefixes,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        layer: usize,
        c: &LayerCache,
        dx_out: Matrix,
        spans: &[Span],
        adapters: &[LoraAdapter],
        mut g_lm: Option<&mut TinyLm>,
        mut g_lora: Option<&mut Vec<LoraAdapter>>,
    ) -> Matrix {
        let b = &self.blocks[layer];
        let n = dx_out.rows();
        let t = self.dim();
        let dh = t / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();

        let d_act = dx_out.matmul(&b.w2);
        let mut d_h1 = d_act;
        for (d, &h) in d_h1.data_mut().iter_mut().zip(c.h1.data()) {
            *d *= silu_grad(h);
        }
        let d_xn2 = d_h1.matmul(&b.w1);
        if let Some(g) = g_lm.as_deref_mut() {
            let gb = &mut g.blocks[layer];
            gemm(1.0, &dx_out, true, &c.act, false, 1.0, &mut gb.w2);
            add_col_sums(&mut gb.b2, &dx_out);
            gemm(1.0, &d_h1, true, &c.xn2, false, 1.0, &mut gb.w1);
            add_col_sums(&mut gb.b1, &d_h1);
        }
        let mut dx_mid = rms_norm_back(
            &d_xn2,
            &c.xhat2,
            &c.r2,
            &b.ln2,
            g_lm.as_deref_mut().map(|g| &mut g.blocks[layer].ln2),
        );
        dx_mid.add_assign(&dx_out);

        let d_attn = linear_back(
            &c.attn,
            &dx_mid,
            b,
            layer,
            ProjKind::Output,
            adapters,
            &c.lora_u[3],
            g_lm.as_deref_mut(),
            g_lora.as_deref_mut(),
        );
        let mut dq = Matrix::zeros(n, t);
        let mut dk = Matrix::zeros(n, t);
        let mut dv = Matrix::zeros(n, t);
        for (si, sp) in spans.iter().enumerate() {
            let (r0, r1) = (sp.start, sp.start + sp.len);
            for h in 0..self.heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let p = &c.probs[si * self.heads + h];
                let qh = c.q.block(r0, r1, c0, c1);
                let kh = c.k.block(r0, r1, c0, c1);
                let vh = c.v.block(r0, r1, c0, c1);
                let d_oh = d_attn.block(r0, r1, c0, c1);
                let dp = d_oh.matmul_t(&vh);
                dv.add_block(r0, c0, &p.t_matmul(&d_oh));
                let mut ds = Matrix::zeros(sp.len, sp.len);
                for i in 0..sp.len {
                    let pr = p.row(i);
                    let dpr = dp.row(i);
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (j, d) in ds.row_mut(i).iter_mut().enumerate() {
                        *d = pr[j] * (dpr[j] - dot) * inv;
                    }
                }
                dq.add_block(r0, c0, &ds.matmul(&kh));
                dk.add_block(r0, c0, &ds.t_matmul(&qh));
            }
        }
        let mut d_xn1 = linear_back(
            &c.xn1,
            &dq,
            b,
            layer,
            ProjKind::Query,
            adapters,
            &c.lora_u[0],
            g_lm.as_deref_mut(),
            g_lora.as_deref_mut(),
        );
        d_xn1.add_assign(&linear_back(
            &c.xn1,
            &dk,
            b,
            layer,
            ProjKind::Key,
            adapters,
            &c.lora_u[1],
            g_lm.as_deref_mut(),
            g_lora.as_deref_mut(),
        ));
        d_xn1.add_assign(&linear_back(
            &c.xn1,
            &dv,
            b,
            layer,
            ProjKind::Value,
            adapters,
            &c.lora_u[2],
            g_lm.as_deref_mut(),
            g_lora,
        ));
        let mut dx_in = rms_norm_back(
            &d_xn1,
            &c.xhat1,
            &c.r1,
            &b.ln1,
            g_lm.map(|g| &mut g.blocks[layer].ln1),
        );
        dx_in.add_assign(&dx_mid);
        dx_in
    }
}

/// Intermediates of one block's forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    xn1: Matrix,
    xhat1: Matrix,
    r1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `x · Aᵀ` for adapters on q, k, v, o (in that order).
    lora_u: [Option<(usize, Matrix)>; 4],
    probs: Vec<Matrix>,
    attn: Matrix,
    xn2: Matrix,
    xhat2: Matrix,
    r2: Vec<f64>,
    h1: Matrix,
    act: Matrix,
}

/// Location of one sequence inside the stacked rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub prefix_rows: usize,
    pub len: usize,
}

/// Forward-pass state for a stack of sequences.
#[derive(Debug, Clone)]
pub struct LmCache {
    pub spans: Vec<Span>,
    ids: Vec<Vec<u32>>,
    layers: Vec<LayerCache>,
    xhat_f: Matrix,
    r_f: Vec<f64>,
    xf: Matrix,
}

impl LmCache {
    pub fn len(&self) -> usize {
        self.xf.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xf.rows() == 0
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct LmGrads {
    pub lm: Option<TinyLm>,
    pub lora: Option<Vec<LoraAdapter>>,
    /// Gradient with respect to each sequence's prefix rows.
    pub prefixes: Vec<Matrix>,
}

fn ones(n: usize) -> Matrix {
    Matrix::from_vec(1, n, vec![1.0; n])
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn add_col_sums(dst: &mut Matrix, src: &Matrix) {
    for r in 0..src.rows() {
        for (d, s) in dst.data_mut().iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn linear(
    x: &Matrix,
    b: &Block,
    layer: usize,
    kind: ProjKind,
    adapters: &[LoraAdapter],
) -> (Matrix, Option<(usize, Matrix)>) {
    let mut y = x.matmul_t(b.proj(kind));
    let u = find(adapters, layer, kind).map(|idx| {
        let ad = &adapters[idx];
        let u = x.matmul_t(&ad.a);
        gemm(ad.scale(), &u, false, &ad.b, true, 1.0, &mut y);
        (idx, u)
    });
    (y, u)
}

#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &Matrix,
    dy: &Matrix,
    b: &Block,
    layer: usize,
    kind: ProjKind,
    adapters: &[LoraAdapter],
    u: &Option<(usize, Matrix)>,
    g_lm: Option<&mut TinyLm>,
    g_lora: Option<&mut Vec<LoraAdapter>>,
) -> Matrix {
    let mut dx = dy.matmul(b.proj(kind));
    if let Some(g) = g_lm {
        gemm(1.0, dy, true, x, false, 1.0, g.blocks[layer].proj_mut(kind));
    }
    if let Some((idx, u)) = u {
        let ad = &adapters[*idx];
        let s = ad.scale();
        let mut du = dy.matmul(&ad.b);
        du.scale(s);
        gemm(1.0, &du, false, &ad.a, false, 1.0, &mut dx);
        if let Some(gl) = g_lora {
            let ga = &mut gl[*idx];
            gemm(s, dy, true, u, false, 1.0, &mut ga.b);
            gemm(1.0, &du, true, x, false, 1.0, &mut ga.a);
        }
    }
    dx
}

fn rms_norm(x: &Matrix, g: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (n, t) = x.shape();
    let mut y = Matrix::zeros(n, t);
    let mut xhat = Matrix::zeros(n, t);
    let mut rs = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / t as f64;
        let r = (ms + RMS_EPS).sqrt();
        rs.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = v / r;
            xhat.set(i, j, h);
            y.set(i, j, h * g.data()[j]);
        }
    }
    (y, xhat, rs)
}

fn rms_norm_back(
    dy: &Matrix,
    xhat: &Matrix,
    r: &[f64],
    g: &Matrix,
    dg: Option<&mut Matrix>,
) -> Matrix {
    let (n, t) = dy.shape();
    if let Some(dg) = dg {
        for i in 0..n {
            for ((d, a), h) in dg.data_mut().iter_mut().zip(dy.row(i)).zip(xhat.row(i)) {
                *d += a * h;
            }
        }
    }
    let mut dx = Matrix::zeros(n, t);
    for (i, &ri) in r.iter().enumerate().take(n) {
        let dyr = dy.row(i);
        let hr = xhat.row(i);
        let mean: f64 = (0..t).map(|j| dyr[j] * g.data()[j] * hr[j]).sum::<f64>() / t as f64;
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = (dyr[j] * g.data()[j] - hr[j] * mean) / ri;
        }
    }
    dx
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Pre-softmax scores for every row of `[prefix; embed(text_ids)]`.
pub fn forward_lm(
    prefix: &Matrix,
    text_ids: &[u32],
    model: &TinyLm,
    adapters: &[LoraAdapter],
) -> Result<Matrix, AlignError> {
    let cache = model.forward(prefix, text_ids, adapters)?;
    Ok(model.logits(&cache))
}

/// `(row, target)` pairs: text token `j` is predicted from sequence row
/// `k + j - 1`.
pub(crate) fn masked_targets(
    prefix_rows: usize,
    text_ids: &[u32],
    answer_mask: &[bool],
) -> Result<Vec<(usize, u32)>, AlignError> {
    if text_ids.len() != answer_mask.len() {
        return Err(AlignError::ShapeMismatch(format!(
            "{} text ids but {} mask entries",
            text_ids.len(),
            answer_mask.len()
        )));
    }
    let mut out = Vec::new();
    for (j, (&id, &m)) in text_ids.iter().zip(answer_mask).enumerate() {
        if !m {
            continue;
        }
        if prefix_rows + j == 0 {
            return Err(AlignError::ShapeMismatch(
                "first position has no predecessor to predict it".into(),
            ));
        }
        out.push((prefix_rows + j - 1, id));
    }
    if out.is_empty() {
        return Err(AlignError::EmptyMask);
    }
    Ok(out)
}

/// Mean cross-entropy over `targets` given one logits row per target, with
/// the gradient of that mean with respect to the logits rows.
pub(crate) fn cross_entropy(logits: &Matrix, targets: &[u32]) -> (f64, Matrix) {
    let w = vec![1.0 / targets.len() as f64; targets.len()];
    weighted_cross_entropy(logits, targets, &w)
}

/// `Σ wᵢ · CEᵢ` and its gradient with respect to the logits rows.
pub(crate) fn weighted_cross_entropy(
    logits: &Matrix,
    targets: &[u32],
    weights: &[f64],
) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let inv = weights[i];
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += inv * (lse - row[t as usize]);
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv;
        }
        grad.row_mut(i)[t as usize] -= inv;
    }
    (total, grad)
}

/// Mean next-token cross-entropy over answer positions. `logits` has one row
/// per sequence position (`k` prefix rows then the text).
pub fn loss(logits: &Matrix, text_ids: &[u32], answer_mask: &[bool]) -> Result<f64, AlignError> {
    loss_and_grad(logits, text_ids, answer_mask).map(|(l, _)| l)
}

/// [`loss`] together with its gradient with respect to every logits row.
pub fn loss_and_grad(
    logits: &Matrix,
    text_ids: &[u32],
    answer_mask: &[bool],
) -> Result<(f64, Matrix), AlignError> {
    let k = logits
        .rows()
        .checked_sub(text_ids.len())
        .ok_or_else(|| AlignError::ShapeMismatch("fewer logits rows than text ids".into()))?;
    let targets = masked_targets(k, text_ids, answer_mask)?;
    let mut rows = Matrix::zeros(targets.len(), logits.cols());
    for (i, &(r, _)) in targets.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(logits.row(r));
    }
    let ids: Vec<u32> = targets.iter().map(|&(_, t)| t).collect();
    let (l, g_rows) = cross_entropy(&rows, &ids);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &(r, _)) in targets.iter().enumerate() {
        grad.row_mut(r).copy_from_slice(g_rows.row(i));
    }
    Ok((l, grad))
}
