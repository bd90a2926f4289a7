//! Query-side background reconstruction.
//!
//! A class weight matrix `W_c = [W_k; W_l]` holds one row per known
//! (labelled) class followed by one row per latent (unlabelled) class. The
//! query prototype is scored against every row, the current foreground
//! class's score is zeroed, and the scores are projected back through the
//! rows to form a background prototype. Two losses shape `W_c`: a
//! cross-entropy that makes known rows classify the support prototype, and
//! a redundancy-reduction loss that pushes the Gram matrix `W_c W_cᵀ`
//! towards the identity.
//!
//! Everything here is training-only; inference never reads `W_c`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::nn::{join, Param, Parameterized};
use crate::prototypes::{Prototype, PrototypeKind};
use crate::scalar::Scalar;

/// Known + latent class weights stored as one `(N_k + N_l) × d` matrix.
#[derive(Clone, Debug)]
pub struct ClassWeights<T> {
    pub weights: Param<T>,
    pub n_known: usize,
    pub n_latent: usize,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn dim(&self) -> usize {
        self.weights.value.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.n_known + self.n_latent
    }

    /// The full `W_c` view.
    pub fn all(&self) -> ArrayView2<'_, T> {
        self.weights.matrix()
    }

    pub fn known(&self) -> ArrayView2<'_, T> {
        self.weights.matrix().slice_move(s![..self.n_known, ..])
    }

    pub fn latent(&self) -> ArrayView2<'_, T> {
        self.weights.matrix().slice_move(s![self.n_known.., ..])
    }

    pub fn grad_mut(&mut self) -> ndarray::ArrayViewMut2<'_, T> {
        self.weights.grad.view_mut().into_dimensionality().expect("2-D gradient")
    }
}

impl<T: Scalar> Parameterized<T> for ClassWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "class_weights"), &self.weights);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "class_weights"), &mut self.weights);
    }
}

/// Entries i.i.d. uniform on `(-sqrt(1/d), sqrt(1/d))`.
pub fn init_class_weights<T: Scalar>(n_known: usize, n_latent: usize, d: usize, rng_seed: u64) -> Result<ClassWeights<T>> {
    if n_known == 0 || d == 0 {
        return Err(invalid(format!("class weights need N_k >= 1 and d >= 1 (got N_k={n_known}, d={d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let bound = (1.0 / d as f64).sqrt();
    Ok(ClassWeights { weights: Param::uniform(&[n_known + n_latent, d], bound, &mut rng), n_known, n_latent })
}

/// Per-class scores with the foreground entry forced to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundScore<T> {
    pub scores: Array1<T>,
    pub foreground_index: usize,
}

fn log_softmax<T: Scalar>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    logits.mapv(|v| v - lse)
}

fn check_class(index: usize, n_known: usize) -> Result<()> {
    if index >= n_known {
        return Err(invalid(format!("foreground class index {index} outside [0, {n_known})")));
    }
    Ok(())
}

/// Cross-entropy of `softmax(W_k · p_f)` against known-class index `c_f`.
pub fn known_class_loss<T: Scalar>(p_f: ArrayView1<'_, T>, c_f: usize, w_k: ArrayView2<'_, T>) -> Result<T> {
    Ok(known_class_loss_grad(p_f, c_f, w_k)?.0)
}

/// Loss plus gradients with respect to `p_f` and `W_k`.
pub fn known_class_loss_grad<T: Scalar>(
    p_f: ArrayView1<'_, T>,
    c_f: usize,
    w_k: ArrayView2<'_, T>,
) -> Result<(T, Array1<T>, Array2<T>)> {
    check_class(c_f, w_k.nrows())?;
    if w_k.ncols() != p_f.len() {
        return Err(invalid(format!("prototype dim {} vs weight dim {}", p_f.len(), w_k.ncols())));
    }
    let logits = w_k.dot(&p_f);
    let logp = log_softmax(logits.view());
    let loss = -logp[c_f];
    let mut dlogits = logp.mapv(T::exp);
    dlogits[c_f] -= T::one();
    let dp = w_k.t().dot(&dlogits);
    let dw = outer(dlogits.view(), p_f);
    Ok((loss, dp, dw))
}

fn outer<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    col.dot(&row)
}

/// Gram matrix `W_c · W_cᵀ`.
pub fn cross_correlation<T: Scalar>(w_c: ArrayView2<'_, T>) -> Array2<T> {
    w_c.dot(&w_c.t())
}

/// `Σ_i (1 - W_ii)² + Σ_i Σ_{j≠i} W_ij²`.
pub fn latent_class_loss<T: Scalar>(gram: ArrayView2<'_, T>) -> Result<T> {
    let (r, c) = gram.dim();
    if r != c {
        return Err(invalid(format!("cross-correlation must be square, got {r}x{c}")));
    }
    Ok(gram
        .indexed_iter()
        .map(|((i, j), &v)| {
            let target = if i == j { T::one() } else { T::zero() };
            (target - v) * (target - v)
        })
        .sum())
}

/// Latent loss on `W_c` directly, with `∂L/∂W_c = 4 (G - I) W_c`.
pub fn latent_class_loss_grad<T: Scalar>(w_c: ArrayView2<'_, T>) -> (T, Array2<T>) {
    let mut resid = cross_correlation(w_c);
    for i in 0..resid.nrows() {
        resid[[i, i]] -= T::one();
    }
    let loss = resid.iter().map(|&v| v * v).sum();
    let grad = resid.dot(&w_c) * T::lit(4.0);
    (loss, grad)
}

/// Raw dot products `W_c · p_q` with entry `c_f` zeroed; latent entries
/// are never masked.
pub fn background_scores<T: Scalar>(p_q: ArrayView1<'_, T>, c_f: usize, w_c: ArrayView2<'_, T>, n_known: usize) -> Result<BackgroundScore<T>> {
    check_class(c_f, n_known)?;
    if n_known > w_c.nrows() {
        return Err(invalid("more known classes than weight rows"));
    }
    if w_c.ncols() != p_q.len() {
        return Err(invalid(format!("query prototype dim {} vs weight dim {}", p_q.len(), w_c.ncols())));
    }
    let mut scores = w_c.dot(&p_q);
    scores[c_f] = T::zero();
    Ok(BackgroundScore { scores, foreground_index: c_f })
}

/// `P_b = Σ_i W_c(i,:) · S_b(i) = W_cᵀ S_b`.
pub fn reconstruct_background<T: Scalar>(s_b: &BackgroundScore<T>, w_c: ArrayView2<'_, T>) -> Result<Prototype<T>> {
    if s_b.scores.len() != w_c.nrows() {
        return Err(invalid(format!("{} scores for {} class rows", s_b.scores.len(), w_c.nrows())));
    }
    Ok(Prototype::new(w_c.t().dot(&s_b.scores), PrototypeKind::Background))
}

/// Scores plus background prototype from a query prototype.
pub fn qsr_background<T: Scalar>(p_q: ArrayView1<'_, T>, c_f: usize, weights: &ClassWeights<T>) -> Result<(BackgroundScore<T>, Prototype<T>)> {
    let s_b = background_scores(p_q, c_f, weights.all(), weights.n_known)?;
    let p_b = reconstruct_background(&s_b, weights.all())?;
    Ok((s_b, p_b))
}

/// Back-propagates `∂L/∂P_b` through reconstruction and scoring.
/// Returns `(∂L/∂W_c, ∂L/∂p_q)`.
pub fn qsr_background_backward<T: Scalar>(
    d_pb: ArrayView1<'_, T>,
    s_b: &BackgroundScore<T>,
    p_q: ArrayView1<'_, T>,
    w_c: ArrayView2<'_, T>,
) -> (Array2<T>, Array1<T>) {
    let mut dw = outer(s_b.scores.view(), d_pb);
    let mut ds = w_c.dot(&d_pb);
    ds[s_b.foreground_index] = T::zero();
    dw += &outer(ds.view(), p_q);
    let dq = w_c.t().dot(&ds);
    (dw, dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_shape_and_bounds() {
        let w = init_class_weights::<f64>(15, 15, 256, 4).unwrap();
        assert_eq!(w.all().dim(), (30, 256));
        assert_eq!(w.param_count(), 7680);
        assert!(w.all().iter().all(|v| v.abs() < 1.0 / 16.0));
        let again = init_class_weights::<f64>(15, 15, 256, 4).unwrap();
        assert_eq!(w.all(), again.all());
        assert!(init_class_weights::<f64>(0, 3, 4, 1).is_err());
        assert!(init_class_weights::<f64>(3, 3, 0, 1).is_err());
    }

    #[test]
    fn known_loss_edge_cases() {
        let w_k = Array2::<f64>::eye(4);
        let p = array![20.0, 0.0, 0.0, 0.0];
        assert!(known_class_loss(p.view(), 0, w_k.view()).unwrap() < 1e-8);
        let zero = Array1::<f64>::zeros(4);
        let l = known_class_loss(zero.view(), 2, w_k.view()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(known_class_loss(zero.view(), 4, w_k.view()).is_err());
    }

    #[test]
    fn cross_correlation_examples() {
        let w = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(cross_correlation(w.view()), array![[1.0, 1.0], [1.0, 1.0]]);
        let eye = Array2::<f64>::eye(3);
        assert_eq!(cross_correlation(eye.view()), eye);
        assert_eq!(cross_correlation(Array2::<f64>::zeros((2, 3)).view()), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn latent_loss_examples() {
        assert_eq!(latent_class_loss(Array2::<f64>::eye(5).view()).unwrap(), 0.0);
        assert_eq!(latent_class_loss(array![[1.0, 1.0], [1.0, 1.0]].view()).unwrap(), 2.0);
        assert_eq!(latent_class_loss(Array2::<f64>::zeros((6, 6)).view()).unwrap(), 6.0);
        assert!(latent_class_loss(Array2::<f64>::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn scores_zero_foreground_and_one_hot_row() {
        let w = Array2::<f64>::eye(4);
        let p = w.row(2).to_owned();
        let s = background_scores(p.view(), 0, w.view(), 2).unwrap();
        assert_eq!(s.scores, array![0.0, 0.0, 1.0, 0.0]);
        let s = background_scores(w.row(0), 0, w.view(), 2).unwrap();
        assert_eq!(s.scores[0], 0.0);
        assert!(background_scores(p.view(), 2, w.view(), 2).is_err());
    }

    #[test]
    fn reconstruction_basis_and_zero() {
        let w = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let one_hot = BackgroundScore { scores: array![0.0, 1.0], foreground_index: 0 };
        assert_eq!(reconstruct_background(&one_hot, w.view()).unwrap().vector, array![4.0, 5.0, 6.0]);
        let zero = BackgroundScore { scores: array![0.0, 0.0], foreground_index: 0 };
        assert!(reconstruct_background(&zero, w.view()).unwrap().vector.iter().all(|&v| v == 0.0));
        let bad = BackgroundScore { scores: array![0.0], foreground_index: 0 };
        assert!(reconstruct_background(&bad, w.view()).is_err());
    }
}
