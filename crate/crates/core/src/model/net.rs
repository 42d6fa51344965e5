//! Packed forward and backward passes.
//!
//! A batch is stored as one matrix with a row per token position across all
//! sequences; `segments` records where each sequence starts and ends. Dense
//! layers act on the whole matrix, attention only within a segment.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::{BehaviorModel, Example, Layer, LossBreakdown, ModelConfig, Params, LAYER_NORM_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let h = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / h;
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / h;
    let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
    xhat *= &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    c: &LnCache,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &c.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let mean_d = dxhat.sum_axis(Axis(1)) / h;
    let mean_dx = (&dxhat * &c.xhat).sum_axis(Axis(1)) / h;
    let mut dx = dxhat - &mean_d.insert_axis(Axis(1)) - &(&c.xhat * &mean_dx.insert_axis(Axis(1)));
    dx *= &c.inv_std.view().insert_axis(Axis(1));
    dx
}

fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_C * (a + GELU_A * a * a * a)).tanh())
}

fn gelu_grad(a: f64) -> f64 {
    let t = (GELU_C * (a + GELU_A * a * a * a)).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * a * a)
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per (segment, head), segment-major.
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    a1: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct Trunk {
    segments: Vec<(usize, usize)>,
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final-normalized encoder output, one row per position.
    pub(crate) zf: Array2<f64>,
}

pub(crate) fn trunk(p: &Params, cfg: &ModelConfig, seqs: &[&[usize]]) -> Trunk {
    let mut segments = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    for s in seqs {
        segments.push((tokens.len(), tokens.len() + s.len()));
        tokens.extend_from_slice(s);
    }
    let n = tokens.len();
    let h = cfg.hidden_dim;
    let mut x = Array2::zeros((n, h));
    for &(a, b) in &segments {
        for (t, r) in (a..b).enumerate() {
            let mut row = x.row_mut(r);
            row += &p.token.row(tokens[r]);
            row += &p.position.row(t);
        }
    }
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (next, cache) = layer_forward(l, cfg, &segments, x);
        x = next;
        layers.push(cache);
    }
    let (zf, lnf) = layer_norm(&x, &p.lnf_gamma, &p.lnf_beta);
    Trunk {
        segments,
        tokens,
        layers,
        lnf,
        zf,
    }
}

fn layer_forward(
    l: &Layer,
    cfg: &ModelConfig,
    segments: &[(usize, usize)],
    x: Array2<f64>,
) -> (Array2<f64>, LayerCache) {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let (h1, ln1) = layer_norm(&x, &l.ln1_gamma, &l.ln1_beta);
    let q = h1.dot(&l.wq);
    let k = h1.dot(&l.wk);
    let v = h1.dot(&l.wv);
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut att = Vec::with_capacity(segments.len() * cfg.num_heads);
    for &(a, b) in segments {
        for head in 0..cfg.num_heads {
            let cols = head * hd..(head + 1) * hd;
            let qh = q.slice(s![a..b, cols.clone()]);
            let kh = k.slice(s![a..b, cols.clone()]);
            let vh = v.slice(s![a..b, cols.clone()]);
            let mut sc = qh.dot(&kh.t()) * scale;
            for i in 0..(b - a) {
                for j in (i + 1)..(b - a) {
                    sc[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows(&mut sc);
            ctx.slice_mut(s![a..b, cols]).assign(&sc.dot(&vh));
            att.push(sc);
        }
    }
    let mid = x + ctx.dot(&l.wo);
    let (h2, ln2) = layer_norm(&mid, &l.ln2_gamma, &l.ln2_beta);
    let a1 = h2.dot(&l.w1) + &l.b1;
    let g = a1.mapv(gelu);
    let out = &mid + &(g.dot(&l.w2) + &l.b2);
    (
        out,
        LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            att,
            ctx,
            ln2,
            h2,
            a1,
            g,
        },
    )
}

fn layer_backward(
    l: &Layer,
    dl: &mut Layer,
    cfg: &ModelConfig,
    segments: &[(usize, usize)],
    c: &LayerCache,
    dout: Array2<f64>,
) -> Array2<f64> {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    dl.w2 += &c.g.t().dot(&dout);
    dl.b2 += &dout.sum_axis(Axis(0));
    let mut da1 = dout.dot(&l.w2.t());
    Zip::from(&mut da1)
        .and(&c.a1)
        .for_each(|d, &a| *d *= gelu_grad(a));
    dl.w1 += &c.h2.t().dot(&da1);
    dl.b1 += &da1.sum_axis(Axis(0));
    let dh2 = da1.dot(&l.w1.t());
    let dmid = dout
        + layer_norm_backward(
            &dh2,
            &l.ln2_gamma,
            &c.ln2,
            &mut dl.ln2_gamma,
            &mut dl.ln2_beta,
        );

    dl.wo += &c.ctx.t().dot(&dmid);
    let dctx = dmid.dot(&l.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    let mut idx = 0;
    for &(a, b) in segments {
        for head in 0..cfg.num_heads {
            let cols = head * hd..(head + 1) * hd;
            let p = &c.att[idx];
            idx += 1;
            let dctx_h = dctx.slice(s![a..b, cols.clone()]);
            let qh = c.q.slice(s![a..b, cols.clone()]);
            let kh = c.k.slice(s![a..b, cols.clone()]);
            let vh = c.v.slice(s![a..b, cols.clone()]);
            let dp = dctx_h.dot(&vh.t());
            dv.slice_mut(s![a..b, cols.clone()])
                .assign(&p.t().dot(&dctx_h));
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = p * &(dp - &row_dot.insert_axis(Axis(1))) * scale;
            dq.slice_mut(s![a..b, cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![a..b, cols]).assign(&ds.t().dot(&qh));
        }
    }
    dl.wq += &c.h1.t().dot(&dq);
    dl.wk += &c.h1.t().dot(&dk);
    dl.wv += &c.h1.t().dot(&dv);
    let dh1 = dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t());
    dmid + layer_norm_backward(
        &dh1,
        &l.ln1_gamma,
        &c.ln1,
        &mut dl.ln1_gamma,
        &mut dl.ln1_beta,
    )
}

/// Vocabulary logits with the projected causal embedding of each segment added.
pub(crate) fn head(p: &Params, t: &Trunk, c: &[Array1<f64>]) -> Array2<f64> {
    let z = with_causal(p, t, c);
    z.dot(&p.out_weight) + &p.out_bias
}

fn with_causal(p: &Params, t: &Trunk, c: &[Array1<f64>]) -> Array2<f64> {
    let mut z = t.zf.clone();
    for (&(a, b), ci) in t.segments.iter().zip(c) {
        let shift = ci.dot(&p.causal_proj);
        z.slice_mut(s![a..b, ..])
            .outer_iter_mut()
            .for_each(|mut r| r += &shift);
    }
    z
}

/// Accumulates decoder gradients; returns d(zf) and d(causal embedding) per segment.
fn head_backward(
    p: &Params,
    g: &mut Params,
    t: &Trunk,
    c: &[Array1<f64>],
    dlogits: &Array2<f64>,
) -> (Array2<f64>, Vec<Array1<f64>>) {
    let z = with_causal(p, t, c);
    g.out_weight += &z.t().dot(dlogits);
    g.out_bias += &dlogits.sum_axis(Axis(0));
    let dz = dlogits.dot(&p.out_weight.t());
    let mut dc = Vec::with_capacity(c.len());
    for (&(a, b), ci) in t.segments.iter().zip(c) {
        let col = dz.slice(s![a..b, ..]).sum_axis(Axis(0));
        g.causal_proj += &outer(ci.view(), col.view());
        dc.push(p.causal_proj.dot(&col));
    }
    (dz, dc)
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

fn trunk_backward(p: &Params, g: &mut Params, cfg: &ModelConfig, t: &Trunk, dzf: &Array2<f64>) {
    let mut dx = layer_norm_backward(dzf, &p.lnf_gamma, &t.lnf, &mut g.lnf_gamma, &mut g.lnf_beta);
    for (li, cache) in t.layers.iter().enumerate().rev() {
        dx = layer_backward(
            &p.layers[li],
            &mut g.layers[li],
            cfg,
            &t.segments,
            cache,
            dx,
        );
    }
    for &(a, b) in &t.segments {
        for (pos, r) in (a..b).enumerate() {
            let mut tok = g.token.row_mut(t.tokens[r]);
            tok += &dx.row(r);
            let mut pe = g.position.row_mut(pos);
            pe += &dx.row(r);
        }
    }
}

fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.mapv(|v| v - lse)
}

/// Loss and (optionally) gradients. `perturbed` holds one alternative state per
/// example; the causal term is the mean symmetric KL per position between the
/// two next-token distributions.
pub(crate) fn objective(
    m: &BehaviorModel,
    batch: &[Example],
    perturbed: Option<&[Vec<usize>]>,
    lambda: f64,
    grad: bool,
) -> (LossBreakdown, Option<Params>) {
    let p = &m.params;
    let cfg = &m.config;
    let n: usize = batch.iter().map(|e| e.target.len()).sum();
    if n == 0 {
        return (
            LossBreakdown {
                total: 0.0,
                seq: 0.0,
                causal: 0.0,
                lambda,
            },
            grad.then(|| p.zeros_like()),
        );
    }
    let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input.as_slice()).collect();
    let t = trunk(p, cfg, &inputs);
    let c: Vec<Array1<f64>> = batch.iter().map(|e| m.embed_state(&e.state)).collect();
    let logits = head(p, &t, &c);
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.target.iter().copied())
        .collect();
    let inv_n = 1.0 / n as f64;

    let logp: Vec<Array1<f64>> = logits.outer_iter().map(log_softmax_row).collect();
    let seq = logp
        .iter()
        .zip(&targets)
        .map(|(lp, &y)| -lp[y])
        .sum::<f64>()
        * inv_n;
    let mut dl1 = Array2::zeros(logits.raw_dim());
    if grad {
        for (r, (lp, &y)) in logp.iter().zip(&targets).enumerate() {
            let mut row = dl1.row_mut(r);
            row.assign(&lp.mapv(f64::exp));
            row[y] -= 1.0;
            row *= inv_n;
        }
    }

    let mut causal = 0.0;
    let mut second: Option<(Vec<Array1<f64>>, Array2<f64>)> = None;
    if let Some(states) = perturbed {
        let c2: Vec<Array1<f64>> = states.iter().map(|s| m.embed_state(s)).collect();
        let logits2 = head(p, &t, &c2);
        let mut dl2 = Array2::zeros(logits2.raw_dim());
        let w = lambda * inv_n;
        for (r, lp) in logp.iter().enumerate() {
            let lq = log_softmax_row(logits2.row(r));
            let pr = lp.mapv(f64::exp);
            let qr = lq.mapv(f64::exp);
            let d = lp - &lq;
            let kl_pq = (&pr * &d).sum();
            let kl_qp = -(&qr * &d).sum();
            causal += kl_pq + kl_qp;
            if grad && lambda > 0.0 {
                let g1 = &pr * &(&d - kl_pq) + &pr - &qr;
                let g2 = &qr * &(-&d - kl_qp) + &qr - &pr;
                dl1.row_mut(r).scaled_add(w, &g1);
                dl2.row_mut(r).assign(&(g2 * w));
            }
        }
        causal = (causal * inv_n).max(0.0);
        if grad && lambda > 0.0 {
            second = Some((c2, dl2));
        }
    }
    let loss = LossBreakdown {
        total: seq + lambda * causal,
        seq,
        causal,
        lambda,
    };
    if !grad {
        return (loss, None);
    }

    let mut g = p.zeros_like();
    let (mut dzf, dc1) = head_backward(p, &mut g, &t, &c, &dl1);
    let mut dcs = vec![(
        dc1,
        batch.iter().map(|e| e.state.as_slice()).collect::<Vec<_>>(),
    )];
    if let (Some((c2, dl2)), Some(states)) = (second, perturbed) {
        let (dzf2, dc2) = head_backward(p, &mut g, &t, &c2, &dl2);
        dzf += &dzf2;
        dcs.push((dc2, states.iter().map(Vec::as_slice).collect()));
    }
    if cfg.causal_conditioning {
        for (dc, states) in dcs {
            for (d, state) in dc.iter().zip(states) {
                for (table, &level) in g.causal.iter_mut().zip(state) {
                    let mut row = table.row_mut(level);
                    row += d;
                }
            }
        }
    }
    trunk_backward(p, &mut g, cfg, &t, &dzf);
    (loss, Some(g))
}

/// Logits at the last position of every segment.
pub(crate) fn last_logits(p: &Params, t: &Trunk, c: &[Array1<f64>]) -> Array2<f64> {
    let h = t.zf.ncols();
    let mut z = Array2::zeros((t.segments.len(), h));
    for (i, (&(_, b), ci)) in t.segments.iter().zip(c).enumerate() {
        let mut row = z.row_mut(i);
        row.assign(&t.zf.row(b - 1));
        row += &ci.dot(&p.causal_proj);
    }
    z.dot(&p.out_weight) + &p.out_bias
}
