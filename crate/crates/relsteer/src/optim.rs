//! AdamW with decoupled weight decay, a reduce-on-plateau learning-rate
//! schedule, and a finite-difference gradient verification oracle.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::tape::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Relative improvement on the plateau metric below which an epoch
/// counts as non-improving (guards against float jitter).
pub const PLATEAU_REL_THRESHOLD: f64 = 1e-4;

/// Optimizer and scheduler state for one parameter set.
pub struct OptimState<T> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    pub step: u64,
    pub lr: f64,
    best_metric: f64,
    bad_epochs: u32,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &[&ArrayD<T>], lr: f64) -> Result<Self, CoreError> {
        if lr <= 0.0 {
            return Err(CoreError::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(OptimState {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
            lr,
            best_metric: f64::INFINITY,
            bad_epochs: 0,
        })
    }
}

/// One AdamW update: bias-corrected moments plus decoupled weight decay.
pub fn adamw_step<T: Real>(
    params: &mut [&mut ArrayD<T>],
    grads: &[ArrayD<T>],
    state: &mut OptimState<T>,
    lr: f64,
    wd: f64,
) -> Result<(), CoreError> {
    assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "gradient {} contains NaN/Inf at optimizer step {}",
                i,
                state.step + 1
            )));
        }
        assert_eq!(
            g.shape(),
            params[i].shape(),
            "gradient {i} shape mismatch"
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
    let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
    let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);
    let wd_t = T::from_f64(wd);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let old = *p;
                *p = old - lr_t * (mhat / (vhat.sqrt() + eps)) - lr_t * wd_t * old;
            });
    }
    Ok(())
}

/// Reduce-on-plateau: after `patience` consecutive non-improving epochs
/// the learning rate is multiplied by `factor`; improvement resets the
/// counter. Returns the (possibly updated) learning rate.
pub fn reduce_on_plateau<T: Real>(
    state: &mut OptimState<T>,
    metric: f64,
    factor: f64,
    patience: u32,
) -> f64 {
    assert!(factor > 0.0 && factor < 1.0, "factor must be in (0,1)");
    let improved = !state.best_metric.is_finite()
        || metric < state.best_metric - PLATEAU_REL_THRESHOLD * state.best_metric.abs();
    if improved {
        state.best_metric = metric;
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if state.bad_epochs >= patience {
            state.lr *= factor;
            state.bad_epochs = 0;
        }
    }
    state.lr
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares analytic gradients against central finite differences
/// `(f(p+εe) − f(p−εe)) / 2ε` on up to `max_coords` sampled coordinates.
///
/// `f` must be deterministic: it is evaluated twice at the base point
/// and any disagreement invalidates the oracle.
pub fn finite_diff_check(
    f: &dyn Fn(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, CoreError> {
    assert_eq!(params.len(), analytic.len());
    let base = f(params);
    if f(params) != base {
        return Err(CoreError::Contract(
            "finite_diff_check: objective is not deterministic",
        ));
    }

    // Enumerate all coordinates, subsample if there are too many.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            coords.push((pi, ci));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut max_err = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    for (pi, ci) in coords {
        let orig = work[pi].as_slice_mut().unwrap()[ci];
        work[pi].as_slice_mut().unwrap()[ci] = orig + eps;
        let fp = f(&work);
        work[pi].as_slice_mut().unwrap()[ci] = orig - eps;
        let fm = f(&work);
        work[pi].as_slice_mut().unwrap()[ci] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let an = analytic[pi].as_slice().unwrap()[ci];
        max_err = max_err.max(rel_err(fd, an));
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    #[test]
    fn zero_grad_no_decay_leaves_params_unchanged() {
        let mut p = scalar(1.25);
        let mut state = OptimState::new(&[&p], 0.1).unwrap();
        let g = scalar(0.0);
        adamw_step(&mut [&mut p], &[g], &mut state, 0.1, 0.0).unwrap();
        assert_eq!(p[[0]], 1.25);
    }

    #[test]
    fn lr_zero_is_bit_identical() {
        let mut p = scalar(0.7531);
        let before = p[[0]].to_bits();
        let mut state = OptimState::new(&[&p], 1.0).unwrap();
        for _ in 0..7 {
            adamw_step(&mut [&mut p], &[scalar(0.3)], &mut state, 0.0, 0.05).unwrap();
        }
        assert_eq!(p[[0]].to_bits(), before);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = scalar(0.0);
        let mut state = OptimState::new(&[&p], 0.01).unwrap();
        for _ in 0..50 {
            adamw_step(&mut [&mut p], &[scalar(2.0)], &mut state, 0.01, 0.0).unwrap();
        }
        assert!(p[[0]] < 0.0);

        let mut q = scalar(0.0);
        let mut state = OptimState::new(&[&q], 0.01).unwrap();
        for _ in 0..50 {
            adamw_step(&mut [&mut q], &[scalar(-2.0)], &mut state, 0.01, 0.0).unwrap();
        }
        assert!(q[[0]] > 0.0);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        // Decoupled AdamW, one step on scalar p=1 with g=1, lr=0.1,
        // wd=0.05, betas (0.9, 0.999), eps 1e-8 — computed from the
        // published formulas with plain scalar arithmetic.
        let (p0, g, lr, wd) = (1.0f64, 1.0f64, 0.1f64, 0.05f64);
        let m = (1.0 - ADAM_BETA1) * g;
        let v = (1.0 - ADAM_BETA2) * g * g;
        let mhat = m / (1.0 - ADAM_BETA1);
        let vhat = v / (1.0 - ADAM_BETA2);
        let expect = p0 - lr * (mhat / (vhat.sqrt() + ADAM_EPS)) - lr * wd * p0;

        let mut p = scalar(p0);
        let mut state = OptimState::new(&[&p], lr).unwrap();
        adamw_step(&mut [&mut p], &[scalar(g)], &mut state, lr, wd).unwrap();
        assert!((p[[0]] - expect).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut state = OptimState::new(&[&p], 0.1).unwrap();
        let err = adamw_step(&mut [&mut p], &[scalar(f64::NAN)], &mut state, 0.1, 0.0);
        assert!(matches!(err, Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn plateau_improving_metric_keeps_lr() {
        let p = scalar(0.0);
        let mut state = OptimState::<f64>::new(&[&p], 1.0).unwrap();
        for e in 0..20 {
            reduce_on_plateau(&mut state, 10.0 - e as f64, 0.5, 5);
        }
        assert_eq!(state.lr, 1.0);
    }

    #[test]
    fn plateau_five_flat_epochs_halves_once() {
        let p = scalar(0.0);
        let mut state = OptimState::<f64>::new(&[&p], 1.0).unwrap();
        reduce_on_plateau(&mut state, 1.0, 0.5, 5); // initial improvement
        for _ in 0..5 {
            reduce_on_plateau(&mut state, 1.0, 0.5, 5);
        }
        assert_eq!(state.lr, 0.5);
    }

    #[test]
    fn plateau_twelve_flat_epochs_halves_exactly_twice() {
        let p = scalar(0.0);
        let mut state = OptimState::<f64>::new(&[&p], 1.0).unwrap();
        reduce_on_plateau(&mut state, 1.0, 0.5, 5);
        for _ in 0..12 {
            reduce_on_plateau(&mut state, 1.0, 0.5, 5);
        }
        assert_eq!(state.lr, 0.25);
    }

    #[test]
    fn fd_check_quadratic_is_tight() {
        let f = |p: &[ArrayD<f64>]| p[0].iter().map(|x| x * x).sum::<f64>();
        let params = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap()];
        let analytic = vec![params[0].mapv(|x| 2.0 * x)];
        let err = finite_diff_check(&f, &params, &analytic, 1e-3, 100, 0).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn fd_check_linear_is_exact_up_to_rounding() {
        let f = |p: &[ArrayD<f64>]| p[0].iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum();
        let params = vec![ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        let analytic =
            vec![ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        let err = finite_diff_check(&f, &params, &analytic, 1e-3, 100, 0).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn fd_check_rejects_nondeterministic_objective() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let f = move |_: &[ArrayD<f64>]| {
            counter.set(counter.get() + 1.0);
            counter.get()
        };
        let params = vec![scalar(1.0)];
        let analytic = vec![scalar(0.0)];
        let err = finite_diff_check(&f, &params, &analytic, 1e-3, 10, 0);
        assert!(err.is_err());
    }
}
