use super::tensor::Tensor;

/// Relative change in the singular-value estimate at which power iteration stops.
pub const POWER_ITERATION_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 100_000;
/// Scaling slack so that the projected norm lands at or just below the cap.
const CAP_SLACK: f64 = 1e-9;

/// Largest singular value of `w` by power iteration on `wᵀw`.
pub fn spectral_norm(w: &Tensor) -> f64 {
    let (r, c) = w.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    // Deterministic start, not orthogonal to any fixed direction in practice.
    let mut v: Vec<f64> = (0..c).map(|j| 1.0 + 0.37 * ((j + 1) as f64).sin()).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..MAX_ITERS {
        let u = mat_vec(w, &v);
        let next_sigma = norm(&u);
        if next_sigma == 0.0 {
            return 0.0;
        }
        let mut next_v = mat_t_vec(w, &u);
        normalize(&mut next_v);
        let converged = (next_sigma - sigma).abs() <= POWER_ITERATION_TOL * next_sigma;
        sigma = next_sigma;
        v = next_v;
        if converged {
            break;
        }
    }
    sigma
}

/// Rescales `w` so its spectral norm does not exceed `cap`; identity when it already does not.
pub fn project_spectral(w: &Tensor, cap: f64) -> Tensor {
    let sigma = spectral_norm(w);
    if sigma <= cap {
        w.clone()
    } else {
        w.scale(cap / sigma * (1.0 - CAP_SLACK))
    }
}

fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, ui) in u.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(w.row_slice(i)) {
            *o += a * ui;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
