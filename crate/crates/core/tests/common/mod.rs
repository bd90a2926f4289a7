//! Checks shared by the integration tests and the acceptance runner.
//! Each returns a one-line summary on success and a description of the
//! first failure otherwise.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsr_core::checkpoint::Checkpoint;
use qsr_core::decoder::{background_loss, foreground_loss, Decoder, DecoderConfig, MaskLogits};
use qsr_core::encoder::FeatureMap;
use qsr_core::evaluation::{fb_iou, fpr, miou, ConfusionCounts};
use qsr_core::model::FssModel;
use qsr_core::prototypes::{global_average_pool, masked_average_pool};
use qsr_core::qsr::{
    background_scores, cross_correlation, init_class_weights, known_class_loss, known_class_loss_grad,
    latent_class_loss, latent_class_loss_grad, reconstruct_background, ClassWeights,
};
use qsr_core::training::{head_backward, head_forward, total_loss, BackgroundInput, Objective, TrainConfig};

pub type Check = Result<String, String>;

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs oracle {b}"))
    }
}

fn close_all<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>, tol: f64, what: &str) -> Result<(), String> {
    let a: Vec<f64> = a.into_iter().copied().collect();
    let b: Vec<f64> = b.into_iter().copied().collect();
    if a.len() != b.len() {
        return Err(format!("{what}: length {} vs oracle {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        close(*x, *y, tol, &format!("{what}[{i}]"))?;
    }
    Ok(())
}

pub fn random_features(rng: &mut impl Rng, d: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap { data: Array3::from_shape_fn((d, h, w), |_| rng.random_range(-2.0..2.0)), spatial_scale: 1 }
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut impl Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale))
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64, nonempty: bool) -> Array2<u8> {
    let mut m = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)));
    if nonempty && m.iter().all(|&v| v == 0) {
        m[[rng.random_range(0..h), rng.random_range(0..w)]] = 1;
    }
    m
}

// Independent loop oracles.

fn oracle_map(f: &Array3<f64>, mask: &Array2<u8>) -> Vec<f64> {
    let (d, h, w) = f.dim();
    let mut out = vec![0.0; d];
    let mut n = 0.0;
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 1 {
                n += 1.0;
                for c in 0..d {
                    out[c] += f[[c, i, j]];
                }
            }
        }
    }
    out.iter().map(|v| v / n).collect()
}

fn oracle_gap(f: &Array3<f64>) -> Vec<f64> {
    let (d, h, w) = f.dim();
    (0..d)
        .map(|c| {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += f[[c, i, j]];
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

fn oracle_gram(w: &Array2<f64>) -> Vec<f64> {
    let (r, d) = w.dim();
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..d {
                s += w[[i, k]] * w[[j, k]];
            }
            out.push(s);
        }
    }
    out
}

fn oracle_latent(w: &Array2<f64>) -> f64 {
    let r = w.nrows();
    let g = oracle_gram(w);
    let mut s = 0.0;
    for i in 0..r {
        for j in 0..r {
            let t = if i == j { 1.0 } else { 0.0 };
            s += (t - g[i * r + j]).powi(2);
        }
    }
    s
}

fn oracle_scores(w: &Array2<f64>, p: &Array1<f64>, c_f: usize) -> Vec<f64> {
    let (r, d) = w.dim();
    (0..r)
        .map(|i| {
            if i == c_f {
                0.0
            } else {
                let mut s = 0.0;
                for k in 0..d {
                    s += w[[i, k]] * p[k];
                }
                s
            }
        })
        .collect()
}

fn oracle_reconstruct(w: &Array2<f64>, s: &[f64]) -> Vec<f64> {
    let (r, d) = w.dim();
    let mut out = vec![0.0; d];
    for i in 0..r {
        for k in 0..d {
            out[k] += s[i] * w[[i, k]];
        }
    }
    out
}

fn oracle_pixel_ce(z: &Array3<f64>, target: &Array2<u8>) -> f64 {
    let (_, h, w) = z.dim();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (z[[0, i, j]], z[[1, i, j]]);
            let norm = (a.exp() + b.exp()).ln();
            let zt = if target[[i, j]] == 1 { b } else { a };
            s += norm - zt;
        }
    }
    s / (h * w) as f64
}

fn oracle_known(w_k: &Array2<f64>, p: &Array1<f64>, c: usize) -> f64 {
    let (r, d) = w_k.dim();
    let logits: Vec<f64> = (0..r).map(|i| (0..d).map(|k| w_k[[i, k]] * p[k]).sum()).collect();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[c].exp() / z).ln()
}

struct OracleCounts {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

fn oracle_counts(pred: &Array2<u8>, truth: &Array2<u8>) -> OracleCounts {
    let mut c = OracleCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (p, t) in pred.iter().zip(truth.iter()) {
        match (*p, *t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    c
}

/// Library routines against the loop oracles on `instances` random cases.
pub fn oracle_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-6;
    let mut max_err = 0.0f64;
    let mut track = |a: f64, b: f64| max_err = max_err.max((a - b).abs());
    for case in 0..instances {
        let ctx = |e: String| format!("instance {case}: {e}");
        let d = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let f = random_features(&mut rng, d, h, w);
        let mask = random_mask(&mut rng, h, w, 0.4, true);

        let map = masked_average_pool(&f, mask.view()).map_err(|e| ctx(e.to_string()))?;
        let om = oracle_map(&f.data, &mask);
        close_all(map.vector.iter(), om.iter(), tol, "masked_average_pool").map_err(ctx)?;
        map.vector.iter().zip(&om).for_each(|(a, b)| track(*a, *b));

        let gap = global_average_pool(&f).map_err(|e| ctx(e.to_string()))?;
        close_all(gap.vector.iter(), oracle_gap(&f.data).iter(), tol, "global_average_pool").map_err(ctx)?;

        let n_known = rng.random_range(1..=5);
        let n_latent = rng.random_range(0..=4);
        let wc = random_matrix(&mut rng, n_known + n_latent, d, 1.0);
        let gram = cross_correlation(wc.view());
        close_all(gram.iter(), oracle_gram(&wc).iter(), tol, "cross_correlation").map_err(ctx)?;
        let ll = latent_class_loss(gram.view()).map_err(|e| ctx(e.to_string()))?;
        close(ll, oracle_latent(&wc), tol, "latent_class_loss").map_err(ctx)?;
        track(ll, oracle_latent(&wc));

        let c_f = rng.random_range(0..n_known);
        let p_q = random_vector(&mut rng, d, 1.0);
        let s_b = background_scores(p_q.view(), c_f, wc.view(), n_known).map_err(|e| ctx(e.to_string()))?;
        let os = oracle_scores(&wc, &p_q, c_f);
        close_all(s_b.scores.iter(), os.iter(), tol, "background_scores").map_err(ctx)?;
        let p_b = reconstruct_background(&s_b, wc.view()).map_err(|e| ctx(e.to_string()))?;
        let ob = oracle_reconstruct(&wc, &os);
        close_all(p_b.vector.iter(), ob.iter(), tol, "reconstruct_background").map_err(ctx)?;
        p_b.vector.iter().zip(&ob).for_each(|(a, b)| track(*a, *b));

        let w_k = wc.slice(ndarray::s![..n_known, ..]).to_owned();
        let lk = known_class_loss(p_q.view(), c_f, w_k.view()).map_err(|e| ctx(e.to_string()))?;
        close(lk, oracle_known(&w_k, &p_q, c_f), tol, "known_class_loss").map_err(ctx)?;

        let z = MaskLogits { logits: Array3::from_shape_fn((2, h, w), |_| rng.random_range(-4.0..4.0)) };
        let qmask = random_mask(&mut rng, h, w, 0.5, false);
        let lf = foreground_loss(&z, qmask.view()).map_err(|e| ctx(e.to_string()))?;
        close(lf, oracle_pixel_ce(&z.logits, &qmask), tol, "foreground_loss").map_err(ctx)?;
        let inv = qmask.mapv(|v| 1 - v);
        let lb = background_loss(&z, qmask.view()).map_err(|e| ctx(e.to_string()))?;
        close(lb, oracle_pixel_ce(&z.logits, &inv), tol, "background_loss").map_err(ctx)?;
        track(lf, oracle_pixel_ce(&z.logits, &qmask));

        // Metrics over a few episodes of two classes.
        let mut per_class: BTreeMap<u32, ConfusionCounts> = BTreeMap::new();
        let mut oracle_by_class: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
        let (mut ptp, mut pfp, mut pfn, mut ptn) = (0u64, 0u64, 0u64, 0u64);
        for e in 0..rng.random_range(1..=4) {
            let class = (e % 2) as u32;
            let pred = random_mask(&mut rng, h, w, 0.5, false);
            let truth = random_mask(&mut rng, h, w, 0.5, true);
            let cc = ConfusionCounts::from_masks(pred.view(), truth.view()).map_err(|e| ctx(e.to_string()))?;
            let oc = oracle_counts(&pred, &truth);
            if (cc.tp, cc.fp, cc.fn_, cc.tn) != (oc.tp, oc.fp, oc.fn_, oc.tn) {
                return Err(ctx("confusion counts differ from oracle".into()));
            }
            *per_class.entry(class).or_default() += cc;
            let entry = oracle_by_class.entry(class).or_default();
            entry.0 += oc.tp;
            entry.1 += oc.fp;
            entry.2 += oc.fn_;
            ptp += oc.tp;
            pfp += oc.fp;
            pfn += oc.fn_;
            ptn += oc.tn;
        }
        let ious: Vec<f64> = oracle_by_class
            .values()
            .filter(|(tp, fp, fn_)| tp + fp + fn_ > 0)
            .map(|&(tp, fp, fn_)| tp as f64 / (tp + fp + fn_) as f64)
            .collect();
        if !ious.is_empty() {
            let m = miou(&per_class).map_err(|e| ctx(e.to_string()))?;
            close(m.value, ious.iter().sum::<f64>() / ious.len() as f64, tol, "miou").map_err(ctx)?;
        }
        let pooled: ConfusionCounts = per_class.values().copied().sum();
        let fg = ptp as f64 / (ptp + pfp + pfn) as f64;
        let bg_den = ptn + pfp + pfn;
        if bg_den > 0 {
            let bg = ptn as f64 / bg_den as f64;
            let fb = fb_iou(&pooled).map_err(|e| ctx(e.to_string()))?;
            close(fb, (fg + bg) / 2.0, tol, "fb_iou").map_err(ctx)?;
        }
        match fpr(&pooled) {
            Some(v) => close(v, pfp as f64 / (pfp + ptn) as f64, tol, "fpr").map_err(ctx)?,
            None if pfp + ptn == 0 => {}
            None => return Err(ctx("fpr undefined but background pixels exist".into())),
        }
    }
    Ok(format!("{instances} instances, max abs err {max_err:.2e}"))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &mut [f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

struct HeadProblem {
    decoder: Decoder<f64>,
    weights: ClassWeights<f64>,
    p_f: Array1<f64>,
    p_q: Array1<f64>,
    f_q: FeatureMap<f64>,
    c_f: usize,
    mask: Array2<u8>,
}

impl HeadProblem {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nk, nl, d, grid, image) = (4, 4, 8, (4, 4), (8, 8));
        let cfg = DecoderConfig { d, hidden: 6, cosine_channel: true, prior_channel: false, grid, image };
        let decoder = Decoder::new(cfg, seed).expect("decoder");
        let weights = init_class_weights(nk, nl, d, seed ^ 1).expect("weights");
        let mut mask = random_mask(&mut rng, image.0, image.1, 0.4, true);
        mask[[0, 0]] = 0;
        Self {
            decoder,
            weights,
            p_f: random_vector(&mut rng, d, 1.0),
            p_q: random_vector(&mut rng, d, 1.0),
            f_q: random_features(&mut rng, d, grid.0, grid.1),
            c_f: rng.random_range(0..nk),
            mask,
        }
    }

    fn objective(alpha: f64, beta: f64) -> Objective {
        Objective { alpha, beta, ..Objective::baseline() }
    }

    fn loss(&self, obj: &Objective, wc: &Array2<f64>, p_f: &Array1<f64>, p_q: &Array1<f64>, f_q: &Array3<f64>, pick: fn(&qsr_core::training::LossParts<f64>, &Objective) -> f64) -> f64 {
        let mut weights = self.weights.clone();
        weights.weights.value = wc.clone().into_dyn();
        let fq = FeatureMap { data: f_q.clone(), spatial_scale: 1 };
        let bg = if obj.alpha > 0.0 { BackgroundInput::Reconstruct(p_q.clone()) } else { BackgroundInput::Skip };
        let (parts, _) = head_forward(&self.decoder, &weights, obj, p_f.view(), &bg, &fq, self.c_f, self.mask.view()).expect("forward");
        pick(&parts, obj)
    }

    /// Analytic gradients (W_c, P_f, P_q, F_q) of the objective's total.
    fn analytic(&self, obj: &Objective) -> [Vec<f64>; 4] {
        let bg = if obj.alpha > 0.0 { BackgroundInput::Reconstruct(self.p_q.clone()) } else { BackgroundInput::Skip };
        let (_, cache) = head_forward(&self.decoder, &self.weights, obj, self.p_f.view(), &bg, &self.f_q, self.c_f, self.mask.view()).expect("forward");
        let mut dec = self.decoder.clone();
        let g = head_backward(&mut dec, &cache, 1.0).expect("backward");
        let wc = g.d_wc.map_or_else(|| vec![0.0; self.weights.all().len()], |m| m.iter().copied().collect());
        let pq = g.d_pq.map_or_else(|| vec![0.0; self.p_q.len()], |v| v.to_vec());
        [wc, g.d_pf.to_vec(), pq, g.d_fq.iter().copied().collect()]
    }

    fn numeric(&self, obj: &Objective, pick: fn(&qsr_core::training::LossParts<f64>, &Objective) -> f64) -> [Vec<f64>; 4] {
        let h = 1e-4;
        let wc0 = self.weights.all().to_owned();
        let shape_wc = wc0.dim();
        let shape_fq = self.f_q.data.dim();
        let mut x = wc0.iter().copied().collect::<Vec<_>>();
        let g_wc = central_diff(&mut x, h, &mut |v| {
            let wc = Array2::from_shape_vec(shape_wc, v.to_vec()).unwrap();
            self.loss(obj, &wc, &self.p_f, &self.p_q, &self.f_q.data, pick)
        });
        let mut x = self.p_f.to_vec();
        let g_pf = central_diff(&mut x, h, &mut |v| self.loss(obj, &wc0, &Array1::from(v.to_vec()), &self.p_q, &self.f_q.data, pick));
        let mut x = self.p_q.to_vec();
        let g_pq = central_diff(&mut x, h, &mut |v| self.loss(obj, &wc0, &self.p_f, &Array1::from(v.to_vec()), &self.f_q.data, pick));
        let mut x = self.f_q.data.iter().copied().collect::<Vec<_>>();
        let g_fq = central_diff(&mut x, h, &mut |v| {
            let fq = Array3::from_shape_vec(shape_fq, v.to_vec()).unwrap();
            self.loss(obj, &wc0, &self.p_f, &self.p_q, &fq, pick)
        });
        [g_wc, g_pf, g_pq, g_fq]
    }
}

/// Analytic gradients against central differences for each loss term and
/// for the composed objective.
pub fn gradient_suite(instances: u64) -> Check {
    const NAMES: [&str; 4] = ["W_c", "P_f", "P_q", "F_q"];
    let tol = 1e-4;
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // Known-class loss.
        let w_k = random_matrix(&mut rng, 4, 8, 1.0);
        let p = random_vector(&mut rng, 8, 1.0);
        let c = rng.random_range(0..4);
        let (_, dp, dw) = known_class_loss_grad(p.view(), c, w_k.view()).map_err(|e| e.to_string())?;
        let mut x = p.to_vec();
        let num_p = central_diff(&mut x, 1e-4, &mut |v| known_class_loss(ArrayView1::from(v), c, w_k.view()).unwrap());
        let mut x = w_k.iter().copied().collect::<Vec<_>>();
        let num_w = central_diff(&mut x, 1e-4, &mut |v| {
            known_class_loss(p.view(), c, ArrayView2::from_shape((4, 8), v).unwrap()).unwrap()
        });
        for (name, a, n) in [("L_known/P_f", dp.to_vec(), num_p), ("L_known/W_k", dw.iter().copied().collect(), num_w)] {
            let e = rel_err(&a, &n);
            worst = worst.max(e);
            if e >= tol {
                return Err(format!("seed {seed}: {name} relative error {e:.2e}"));
            }
        }
        // Latent-class loss.
        let wc = random_matrix(&mut rng, 8, 8, 0.5);
        let (_, dl) = latent_class_loss_grad(wc.view());
        let mut x = wc.iter().copied().collect::<Vec<_>>();
        let num = central_diff(&mut x, 1e-4, &mut |v| {
            latent_class_loss(cross_correlation(ArrayView2::from_shape((8, 8), v).unwrap()).view()).unwrap()
        });
        let e = rel_err(&dl.iter().copied().collect::<Vec<_>>(), &num);
        worst = worst.max(e);
        if e >= tol {
            return Err(format!("seed {seed}: L_latent/W_c relative error {e:.2e}"));
        }

        // Head terms: base_f alone, base_b alone (difference of two
        // objectives), and the composed total.
        let prob = HeadProblem::new(seed);
        let only_f = HeadProblem::objective(0.0, 0.0);
        let with_b = HeadProblem::objective(1.0, 0.0);
        let full = HeadProblem::objective(1.0, 0.5);
        type TermCheck<'a> = (&'a str, [Vec<f64>; 4], [Vec<f64>; 4]);
        let checks: [TermCheck<'_>; 3] = [
            ("L_f", prob.analytic(&only_f), prob.numeric(&only_f, |p, _| p.base_f)),
            (
                "L_b",
                {
                    let a = prob.analytic(&with_b);
                    let b = prob.analytic(&only_f);
                    std::array::from_fn(|i| a[i].iter().zip(&b[i]).map(|(x, y)| x - y).collect())
                },
                prob.numeric(&with_b, |p, _| p.base_b),
            ),
            ("L_total", prob.analytic(&full), prob.numeric(&full, |p, o| total_loss(p, o.alpha, o.beta).unwrap())),
        ];
        for (term, a, n) in &checks {
            for k in 0..4 {
                let e = rel_err(&a[k], &n[k]);
                worst = worst.max(e);
                if e >= tol {
                    return Err(format!("seed {seed}: {term}/{} relative error {e:.2e}", NAMES[k]));
                }
            }
        }
    }
    Ok(format!("{instances} instances, worst relative error {worst:.2e}"))
}

/// Plain gradient descent on the latent loss of a 30×256 matrix.
pub fn latent_descent() -> Check {
    let mut w = init_class_weights::<f64>(15, 15, 256, 5).map_err(|e| e.to_string())?.all().to_owned();
    let lr = 0.05;
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    for step in 0..5000 {
        let (l, g) = latent_class_loss_grad(w.view());
        loss = l;
        steps = step;
        if l < 1e-3 {
            break;
        }
        w.scaled_add(-lr, &g);
    }
    if loss >= 1e-3 {
        return Err(format!("loss {loss:.3e} after 5000 steps"));
    }
    let gram = cross_correlation(w.view());
    let dev = gram
        .indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    if dev > 1e-2 {
        return Err(format!("Gram deviates from identity by {dev:.3e}"));
    }
    Ok(format!("loss {loss:.2e} after {steps} steps, max |G - I| {dev:.2e}"))
}

/// Rows of a random matrix orthonormalized by Gram-Schmidt (`r <= d`).
pub fn orthonormal_rows(rng: &mut impl Rng, r: usize, d: usize) -> Array2<f64> {
    loop {
        let mut m = random_matrix(rng, r, d, 1.0);
        let mut ok = true;
        for i in 0..r {
            for j in 0..i {
                let dot = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-dot, &rj);
            }
            let n = m.row(i).dot(&m.row(i)).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            m.row_mut(i).mapv_inplace(|v| v / n);
        }
        if ok {
            return m;
        }
    }
}

fn residual_outside_span(w: &Array2<f64>, v: &Array1<f64>) -> f64 {
    // Project onto an orthonormal basis of the row space.
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in w.rows() {
        let mut r = row.to_owned();
        for b in &basis {
            let dot = r.dot(b);
            r.scaled_add(-dot, b);
        }
        let n = r.dot(&r).sqrt();
        if n > 1e-9 {
            basis.push(r / n);
        }
    }
    let mut resid = v.clone();
    for b in &basis {
        let dot = resid.dot(b);
        resid.scaled_add(-dot, b);
    }
    resid.dot(&resid).sqrt()
}

/// Property checks on the background reconstruction pipeline.
pub fn invariant_suite(cases: u32) -> Check {
    let mut runner = TestRunner::new(PtConfig { cases, failure_persistence: None, ..PtConfig::default() });
    let sizes = (1usize..=5, 0usize..=5, 2usize..=10, any::<u64>());

    runner
        .run(&sizes, |(nk, nl, d, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_matrix(&mut rng, nk + nl, d, 2.0);
            let p = random_vector(&mut rng, d, 3.0);
            for c in 0..nk {
                let s = background_scores(p.view(), c, w.view(), nk).unwrap();
                prop_assert_eq!(s.scores[c], 0.0);
            }
            Ok(())
        })
        .map_err(|e| format!("foreground score not zero: {e}"))?;

    runner
        .run(&(2usize..=8, any::<u64>()), |(r, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = r + rng.random_range(0..4);
            let w = orthonormal_rows(&mut rng, r, d);
            let nk = rng.random_range(1..=r);
            let c_f = rng.random_range(0..nk);
            for j in (0..r).filter(|&j| j != c_f) {
                let p_q = w.row(j).to_owned();
                let s = background_scores(p_q.view(), c_f, w.view(), nk).unwrap();
                let p_b = reconstruct_background(&s, w.view()).unwrap();
                for k in 0..d {
                    prop_assert!((p_b.vector[k] - w[[j, k]]).abs() < 1e-9);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("orthonormal round trip: {e}"))?;

    runner
        .run(&(sizes, -3.0f64..3.0, -3.0f64..3.0), |((nk, nl, d, seed), a, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_matrix(&mut rng, nk + nl, d, 2.0);
            let p = random_vector(&mut rng, d, 3.0);
            let q = random_vector(&mut rng, d, 3.0);
            let c_f = rng.random_range(0..nk);
            let pb = |v: &Array1<f64>| {
                reconstruct_background(&background_scores(v.view(), c_f, w.view(), nk).unwrap(), w.view()).unwrap().vector
            };
            let lhs = pb(&(&p * a + &q * b));
            let rhs = pb(&p) * a + pb(&q) * b;
            for k in 0..d {
                prop_assert!((lhs[k] - rhs[k]).abs() < 1e-9 * (1.0 + rhs[k].abs()));
            }
            prop_assert!(residual_outside_span(&w, &lhs) < 1e-9 * (1.0 + lhs.dot(&lhs).sqrt()));
            Ok(())
        })
        .map_err(|e| format!("linearity or span: {e}"))?;
    Ok(format!("{cases} cases per property"))
}

/// Training/inference parameter counts for the 15 + 15 class, d = 256 case.
pub fn parameter_accounting() -> Check {
    let mut counts = Vec::new();
    let mut deltas = Vec::new();
    let variants = [(1.0, 0.5, 15usize), (0.0, 0.0, 15), (1.0, 0.5, 0), (2.0, 1.0, 30)];
    for (alpha, beta, n_latent) in variants {
        let cfg = TrainConfig { alpha, beta, n_latent, d: 256, ..TrainConfig::default() };
        let model = FssModel::<f32>::new(cfg.model_config((64, 64)), 3).map_err(|e| e.to_string())?;
        let ids: Vec<u32> = (0..15).collect();
        let weights = init_class_weights::<f32>(15, n_latent, 256, 4).map_err(|e| e.to_string())?;
        let train = Checkpoint::from_model(&model, Some((&weights, &ids)));
        let inference = train.to_inference();
        counts.push(inference.param_count());
        deltas.push((n_latent, train.param_count() - inference.param_count()));
    }
    let delta = deltas[0].1;
    if delta != 7680 {
        return Err(format!("training-only delta {delta}, expected 7680"));
    }
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(format!("inference counts differ across alpha/beta/N_l: {counts:?}"));
    }
    Ok(format!("delta {delta}, inference params {} for all variants", counts[0]))
}
