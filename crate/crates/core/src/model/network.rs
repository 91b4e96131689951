//! Forward and reverse-mode passes of the hierarchical graph transformer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::params::{LayerNorm, Linear, ModelParams};
use super::sequence::TokenInput;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// First-row attention and value norms restricted to the sampled fine tokens,
/// indexed `[layer][head][fine token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub attention: Vec<Vec<Vec<f64>>>,
    pub value_norms: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn fine_count(&self) -> usize {
        self.attention
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }
}

/// Per-fine-token significance `mean_{layer,head}(attention · ‖V‖)`, normalized
/// to unit sum. An all-zero signal falls back to uniform scores.
pub fn significance(record: &AttentionRecord) -> Vec<f64> {
    let n = record.fine_count();
    let mut s = vec![0.0; n];
    let mut count = 0usize;
    for (layer_a, layer_v) in record.attention.iter().zip(&record.value_norms) {
        for (a, v) in layer_a.iter().zip(layer_v) {
            for i in 0..n {
                s[i] += a[i] * v[i];
            }
            count += 1;
        }
    }
    if count > 0 {
        s.iter_mut().for_each(|x| *x /= count as f64);
    }
    let total: f64 = s.iter().sum();
    if n > 0 && !(total > 0.0) {
        log::warn!("significance scores are all zero; using uniform scores");
        return vec![1.0 / n as f64; n];
    }
    s.iter().map(|x| x / total).collect()
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let out = &xhat * &ln.gamma + &ln.beta;
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let g = dy * &ln.gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let gr = g.row(r);
        let xr = cache.xhat.row(r);
        let mean_g = gr.sum() / d;
        let mean_gx = gr.dot(&xr) / d;
        let is = cache.inv_std[r];
        dx.row_mut(r)
            .iter_mut()
            .zip(gr.iter().zip(xr.iter()))
            .for_each(|(o, (&gv, &xv))| *o = is * (gv - mean_g - xv * mean_gx));
    }
    dx
}

fn affine(x: &ArrayView2<f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.weight) + &lin.bias
}

/// Accumulates weight/bias gradients and returns `dy · Wᵀ`.
fn affine_backward(x: &ArrayView2<f64>, dy: &Array2<f64>, lin: &Linear, grad: &mut Linear) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Inverted-dropout scale mask, or `None` in evaluation mode.
fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: Option<&mut R>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

struct LayerCache {
    norm1: NormCache,
    z1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention per head, before dropout.
    attn: Vec<Array2<f64>>,
    attn_mask: Vec<Option<Array2<f64>>>,
    concat: Array2<f64>,
    norm2: NormCache,
    z2: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Activations retained for the reverse pass.
pub struct ForwardPass {
    phi: Array2<f64>,
    layers: Vec<LayerCache>,
    head_norm: NormCache,
    head_in: Array2<f64>,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    pub record: AttentionRecord,
}

impl ForwardPass {
    /// Post-softmax attention of one head, before dropout.
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].attn[head]
    }

    /// Cross-entropy of the stored prediction against `target`.
    pub fn loss(&self, target: usize) -> f64 {
        -self.probs[target].max(f64::MIN_POSITIVE).ln()
    }
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

impl ModelParams {
    fn check_input(&self, input: &TokenInput) -> Result<()> {
        let cfg = &self.config;
        let m = input.len();
        if input.proximity.values.nrows() != m || input.proximity.values.ncols() != cfg.proximity_order {
            return Err(Error::Dimension(format!(
                "proximity encoding {:?} for {m} tokens of order {}",
                input.proximity.values.shape(),
                cfg.proximity_order
            )));
        }
        if input.features.len() != m || input.valid.len() != m || input.global_slot.len() != m {
            return Err(Error::Dimension("token input fields disagree in length".into()));
        }
        if !input.valid.first().copied().unwrap_or(false) {
            return Err(Error::InvalidInput("token 0 must be a valid center token".into()));
        }
        for (t, f) in input.features.iter().enumerate() {
            if let Some(row) = f {
                if row.cols.last().is_some_and(|&c| c >= cfg.input_dim) {
                    return Err(Error::Dimension(format!(
                        "token {t} has a feature index beyond input dimension {}",
                        cfg.input_dim
                    )));
                }
            }
        }
        if input
            .global_slot
            .iter()
            .chain(&input.proximity.learned)
            .flatten()
            .any(|&g| g >= cfg.global_tokens)
        {
            return Err(Error::Dimension("global slot out of range".into()));
        }
        Ok(())
    }

    fn embed(&self, input: &TokenInput) -> Array2<f64> {
        let d = self.config.hidden;
        let mut h = Array2::zeros((input.len(), d));
        for (t, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &self.kind_embedding.row(input.kinds[t] as usize);
            if let Some(f) = &input.features[t] {
                row += &self.input.bias;
                for (&c, &v) in f.cols.iter().zip(f.vals) {
                    row.scaled_add(v, &self.input.weight.row(c));
                }
            }
            if let Some(g) = input.global_slot[t] {
                row += &self.global_features.row(g);
            }
        }
        h
    }

    /// Runs the network on one sequence. Passing an RNG enables dropout.
    pub fn forward<R: Rng + ?Sized>(&self, input: &TokenInput, mut rng: Option<&mut R>) -> Result<ForwardPass> {
        self.check_input(input)?;
        let cfg = &self.config;
        let m = input.len();
        let heads = cfg.heads;
        let dk = cfg.hidden / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut phi = input.proximity.values.clone();
        for (t, slot) in input.proximity.learned.iter().enumerate() {
            if let Some(g) = slot {
                phi.row_mut(t).assign(&self.global_proximity.row(*g));
            }
        }

        let fine = input.fine_positions.clone();
        let mut record = AttentionRecord {
            attention: Vec::with_capacity(cfg.layers),
            value_norms: Vec::with_capacity(cfg.layers),
        };
        let mut h = self.embed(input);
        let mut caches = Vec::with_capacity(cfg.layers);
        for layer in &self.layers {
            let (z1, norm1) = layer_norm(&h, &layer.attn_norm);
            let q = affine(&z1.view(), &layer.query);
            let k = affine(&z1.view(), &layer.key);
            let v = affine(&z1.view(), &layer.value);
            let bias = affine(&phi.view(), &layer.proximity);
            let mut concat = Array2::zeros((m, cfg.hidden));
            let mut attn = Vec::with_capacity(heads);
            let mut attn_mask = Vec::with_capacity(heads);
            let mut layer_attn = Vec::with_capacity(heads);
            let mut layer_vnorm = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = s![.., hd * dk..(hd + 1) * dk];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut a = qh.dot(&kh.t()) * scale;
                for i in 0..m {
                    let mut row = a.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        if input.valid[j] {
                            row[j] += bias[[j, hd]];
                            max = max.max(row[j]);
                        }
                    }
                    let mut total = 0.0;
                    for j in 0..m {
                        if input.valid[j] {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / total);
                }
                layer_attn.push(fine.clone().map(|i| a[[0, i]]).collect());
                layer_vnorm.push(fine.clone().map(|i| vh.row(i).dot(&vh.row(i)).sqrt()).collect());
                let mask = dropout_mask((m, m), cfg.dropout, rng.as_deref_mut());
                let out = match &mask {
                    Some(mk) => (&a * mk).dot(&vh),
                    None => a.dot(&vh),
                };
                concat.slice_mut(cols).assign(&out);
                attn.push(a);
                attn_mask.push(mask);
            }
            record.attention.push(layer_attn);
            record.value_norms.push(layer_vnorm);

            let hidden = &h + &affine(&concat.view(), &layer.output);
            let (z2, norm2) = layer_norm(&hidden, &layer.ffn_norm);
            let ffn_pre = affine(&z2.view(), &layer.ffn_in);
            let mut ffn_act = ffn_pre.mapv(gelu);
            let ffn_mask = dropout_mask(ffn_act.dim(), cfg.dropout, rng.as_deref_mut());
            if let Some(mk) = &ffn_mask {
                ffn_act *= mk;
            }
            let next = &hidden + &affine(&ffn_act.view(), &layer.ffn_out);
            h = next;
            caches.push(LayerCache {
                norm1,
                z1,
                q,
                k,
                v,
                attn,
                attn_mask,
                concat,
                norm2,
                z2,
                ffn_pre,
                ffn_act,
                ffn_mask,
            });
        }

        let center = h.slice(s![0..1, ..]).to_owned();
        let (head_in, head_norm) = layer_norm(&center, &self.head_norm);
        let head_pre = affine(&head_in.view(), &self.head_hidden);
        let head_act = head_pre.mapv(|x| x.max(0.0));
        let logits = affine(&head_act.view(), &self.head_out).row(0).to_owned();
        let probs = softmax(&logits);
        Ok(ForwardPass {
            phi,
            layers: caches,
            head_norm,
            head_in,
            head_pre,
            head_act,
            logits,
            probs,
            record,
        })
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, input: &TokenInput) -> Result<Array1<f64>> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(input, None)?.probs)
    }

    /// Adds `scale · ∂loss/∂θ` of the cross-entropy loss for `target` into `grad`
    /// and returns the loss.
    pub fn backward(
        &self,
        input: &TokenInput,
        pass: &ForwardPass,
        target: usize,
        scale: f64,
        grad: &mut ModelParams,
    ) -> Result<f64> {
        let cfg = &self.config;
        if target >= cfg.classes {
            return Err(Error::InvalidInput(format!("target {target} >= {} classes", cfg.classes)));
        }
        let m = input.len();
        let heads = cfg.heads;
        let dk = cfg.hidden / heads;
        let att_scale = 1.0 / (dk as f64).sqrt();

        let mut dlogits = pass.probs.clone();
        dlogits[target] -= 1.0;
        dlogits *= scale;
        let dlogits = dlogits.insert_axis(Axis(0));
        let dact = affine_backward(&pass.head_act.view(), &dlogits, &self.head_out, &mut grad.head_out);
        let dpre = &dact * &pass.head_pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let dnorm = affine_backward(&pass.head_in.view(), &dpre, &self.head_hidden, &mut grad.head_hidden);
        let dcenter = layer_norm_backward(&dnorm, &pass.head_norm, &self.head_norm, &mut grad.head_norm);

        let mut dh = Array2::zeros((m, cfg.hidden));
        dh.row_mut(0).assign(&dcenter.row(0));
        let mut dphi = Array2::<f64>::zeros(pass.phi.raw_dim());

        for ((layer, cache), lgrad) in self
            .layers
            .iter()
            .zip(&pass.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            // feed-forward block
            let mut dhidden = dh.clone();
            let mut dact = affine_backward(&cache.ffn_act.view(), &dh, &layer.ffn_out, &mut lgrad.ffn_out);
            if let Some(mk) = &cache.ffn_mask {
                dact *= mk;
            }
            dact.zip_mut_with(&cache.ffn_pre, |g, &x| *g *= gelu_grad(x));
            let dz2 = affine_backward(&cache.z2.view(), &dact, &layer.ffn_in, &mut lgrad.ffn_in);
            dhidden += &layer_norm_backward(&dz2, &cache.norm2, &layer.ffn_norm, &mut lgrad.ffn_norm);

            // attention block
            let mut dinput = dhidden.clone();
            let dconcat = affine_backward(&cache.concat.view(), &dhidden, &layer.output, &mut lgrad.output);
            let mut dq = Array2::zeros((m, cfg.hidden));
            let mut dk_all = Array2::zeros((m, cfg.hidden));
            let mut dv = Array2::zeros((m, cfg.hidden));
            let mut dbias = Array2::zeros((m, heads));
            for hd in 0..heads {
                let cols = s![.., hd * dk..(hd + 1) * dk];
                let dout = dconcat.slice(cols);
                let a = &cache.attn[hd];
                let a_used = match &cache.attn_mask[hd] {
                    Some(mk) => a * mk,
                    None => a.clone(),
                };
                dv.slice_mut(cols).assign(&a_used.t().dot(&dout));
                let mut da = dout.dot(&cache.v.slice(cols).t());
                if let Some(mk) = &cache.attn_mask[hd] {
                    da *= mk;
                }
                // softmax backward, row-wise
                let mut dsc = Array2::zeros((m, m));
                for i in 0..m {
                    let ar = a.row(i);
                    let dr = da.row(i);
                    let dot = ar.dot(&dr);
                    dsc.row_mut(i)
                        .iter_mut()
                        .zip(ar.iter().zip(dr.iter()))
                        .for_each(|(o, (&av, &dv))| *o = av * (dv - dot));
                }
                let col_sums = dsc.sum_axis(Axis(0));
                dbias.column_mut(hd).assign(&col_sums);
                dq.slice_mut(cols)
                    .assign(&(dsc.dot(&cache.k.slice(cols)) * att_scale));
                dk_all
                    .slice_mut(cols)
                    .assign(&(dsc.t().dot(&cache.q.slice(cols)) * att_scale));
            }
            dphi += &affine_backward(&pass.phi.view(), &dbias, &layer.proximity, &mut lgrad.proximity);
            let z1 = cache.z1.view();
            let mut dz1 = affine_backward(&z1, &dq, &layer.query, &mut lgrad.query);
            dz1 += &affine_backward(&z1, &dk_all, &layer.key, &mut lgrad.key);
            dz1 += &affine_backward(&z1, &dv, &layer.value, &mut lgrad.value);
            dinput += &layer_norm_backward(&dz1, &cache.norm1, &layer.attn_norm, &mut lgrad.attn_norm);
            dh = dinput;
        }

        for (t, slot) in input.proximity.learned.iter().enumerate() {
            if let Some(g) = slot {
                let mut row = grad.global_proximity.row_mut(*g);
                row += &dphi.row(t);
            }
        }
        for t in 0..m {
            let dt: ArrayView1<f64> = dh.row(t);
            let mut kind_row = grad.kind_embedding.row_mut(input.kinds[t] as usize);
            kind_row += &dt;
            if let Some(f) = &input.features[t] {
                grad.input.bias += &dt;
                for (&c, &v) in f.cols.iter().zip(f.vals) {
                    grad.input.weight.row_mut(c).scaled_add(v, &dt);
                }
            }
            if let Some(g) = input.global_slot[t] {
                let mut row = grad.global_features.row_mut(g);
                row += &dt;
            }
        }
        Ok(pass.loss(target) * scale)
    }
}
